use std::path::PathBuf;

use bridgetune::cli::{self, Checkpoint};
use bridgetune::data::{self, BridgeStyle};
use bridgetune::finetune::{self, AdapterRegistry};
use bridgetune::networks::ModelBundle;
use bridgetune::scheduler::{self, SamplerConfig, SamplerKind};
use bridgetune::tensor::{RngStream, Tensor};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: bridgetune::Error) -> PyErr {
    match e {
        bridgetune::Error::Io(e) => PyIOError::new_err(e.to_string()),
        bridgetune::Error::UnknownAdapter { .. } | bridgetune::Error::UnknownParameter(_) => PyKeyError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Beta schedule with its cumulative alpha products.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PyNoiseSchedule {
    inner: scheduler::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (train_timesteps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(train_timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = scheduler::NoiseSchedule::linear(train_timesteps, beta_start, beta_end).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_betas(betas: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: scheduler::NoiseSchedule::from_betas(betas).map_err(err)? })
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn latent_scale(&self) -> f64 {
        self.inner.latent_scale()
    }

    /// Noises one row of `x0` per timestep. Rows are flat lists of equal length.
    fn add_noise(&self, x0: Vec<Vec<f64>>, eps: Vec<Vec<f64>>, t: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let rows = |v: Vec<Vec<f64>>| -> PyResult<Tensor<f64>> {
            let width = v.first().map_or(0, Vec::len);
            if v.iter().any(|r| r.len() != width) {
                return Err(PyValueError::new_err("rows must have equal length"));
            }
            Tensor::new(vec![v.len(), width], v.concat()).map_err(err)
        };
        let out = self.inner.add_noise(&rows(x0)?, &rows(eps)?, &t).map_err(err)?;
        let width = out.shape()[1];
        Ok(out.data().chunks(width).map(<[f64]>::to_vec).collect())
    }
}

/// Pretrained model: VAE, text encoder and denoiser plus vocabulary.
#[pyclass(name = "Bundle")]
struct PyBundle {
    inner: ModelBundle,
    registry: AdapterRegistry,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: cli::load_bundle(&path).map_err(err)?, registry: AdapterRegistry::default() })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cli::save_bundle(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config.resolution
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.values().map(Tensor::numel).sum()
    }

    fn tokenize(&self, prompt: &str) -> PyResult<Vec<u32>> {
        self.inner.tokenize(prompt).map_err(err)
    }

    /// Installs a textual-inversion checkpoint into the vocabulary.
    fn apply_ti(&mut self, path: PathBuf) -> PyResult<String> {
        let art = cli::ti_from_checkpoint(&Checkpoint::load(&path).map_err(err)?).map_err(err)?;
        finetune::apply_ti(&mut self.inner, &art).map_err(err)?;
        Ok(art.placeholder)
    }

    /// Registers a LoRA checkpoint so prompts can trigger it by name.
    fn add_lora(&mut self, path: PathBuf) -> PyResult<String> {
        let art = cli::lora_from_checkpoint(&Checkpoint::load(&path).map_err(err)?).map_err(err)?;
        let name = art.name.clone();
        self.registry.add_lora(art);
        Ok(name)
    }

    fn add_hypernet(&mut self, path: PathBuf) -> PyResult<String> {
        let art = cli::hypernet_from_checkpoint(&Checkpoint::load(&path).map_err(err)?).map_err(err)?;
        let name = art.name.clone();
        self.registry.add_hypernet(art);
        Ok(name)
    }

    /// Text-to-image. Returns one PNG byte string per image.
    #[pyo3(signature = (prompt, count = 1, seed = 0, steps = None, guidance = None, ancestral = false))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        prompt: &str,
        count: usize,
        seed: u64,
        steps: Option<usize>,
        guidance: Option<f64>,
        ancestral: bool,
    ) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let d = SamplerConfig::default();
        let sampler = SamplerConfig {
            kind: if ancestral { SamplerKind::Ancestral } else { SamplerKind::DeterministicSkip },
            steps: steps.unwrap_or(d.steps),
            guidance: guidance.unwrap_or(d.guidance),
        };
        let schedule = scheduler::NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(err)?;
        let images = finetune::generate(&self.inner, &schedule, prompt, &self.registry, &sampler, count, &RngStream::new(seed, 8))
            .map_err(err)?;
        images
            .iter()
            .map(|img| Ok(PyBytes::new(py, &img.to_png_bytes().map_err(err)?)))
            .collect()
    }
}

/// Splits a prompt into clean text and `(kind, name, weight)` directives.
#[pyfunction]
fn parse_prompt(prompt: &str) -> PyResult<(String, Vec<(String, String, f64)>)> {
    let (text, ds) = cli::parse_prompt(prompt).map_err(err)?;
    Ok((text, ds.into_iter().map(|d| (d.kind.to_string(), d.name, d.weight)).collect()))
}

#[pyfunction]
fn normalize_caption(text: &str) -> Vec<String> {
    data::normalize_caption(text)
}

/// `(stem, tags)` for every image-caption pair in a directory.
#[pyfunction]
#[pyo3(signature = (path, resolution = 32))]
fn load_corpus(path: PathBuf, resolution: usize) -> PyResult<Vec<(String, Vec<String>)>> {
    let c = data::load_corpus(&path, resolution).map_err(err)?;
    Ok(c.pairs.into_iter().map(|p| (p.source, p.caption)).collect())
}

/// Writes a synthetic corpus of `count` images cycling over `styles`.
#[pyfunction]
#[pyo3(signature = (path, count, styles = vec!["arch".to_string(), "truss".to_string(), "suspension".to_string()], resolution = 32, seed = 0))]
fn synth_corpus(path: PathBuf, count: usize, styles: Vec<String>, resolution: usize, seed: u64) -> PyResult<usize> {
    let styles: Vec<BridgeStyle> = styles.iter().map(|s| s.parse()).collect::<bridgetune::Result<_>>().map_err(err)?;
    let c = data::synth_mixed(count, &styles, resolution, &RngStream::new(seed, 1)).map_err(err)?;
    c.save(&path).map_err(err)?;
    Ok(c.len())
}

/// Header of a checkpoint container as a JSON string.
#[pyfunction]
fn inspect(path: PathBuf) -> PyResult<String> {
    let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let header = cli::read_header(&bytes).map_err(err)?;
    serde_json::to_string(&header).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("bridgetune".to_string()).chain(args).collect();
    py.detach(|| cli::main_with_args(argv))
}

#[pymodule]
fn pybridgetune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(parse_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_caption, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("LATENT_SCALE", scheduler::LATENT_SCALE)?;
    Ok(())
}
