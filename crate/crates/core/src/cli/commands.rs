use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::{
    bundle_checkpoint, export_loss_csv, hypernet_checkpoint, hypernet_from_checkpoint, load_bundle, lora_checkpoint,
    lora_from_checkpoint, read_header, save_bundle, ti_checkpoint, ti_from_checkpoint, write_atomic, Checkpoint,
    RunConfig,
};
use crate::data::{load_corpus, synth_mixed, BridgeStyle, Corpus, PromptTemplate, Vocab, RESERVED_WORDS};
use crate::error::{Error, Result};
use crate::finetune::{
    apply_ti, db_generate_class_images, db_train, generate, hn_build, hn_train, lora_attach, lora_train,
    merge_lora_into, pretrain, pretrain_vae, ti_extend_vocab, ti_train, AdapterRegistry, DreamboothRun,
};
use crate::networks::ModelBundle;
use crate::tensor::RngStream;

#[derive(Debug, Parser)]
#[command(name = "bridgetune", version, about = "Latent diffusion pretraining and personalization at desk scale")]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic captioned bridge corpus.
    GenDataset {
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated styles, cycled over the images.
        #[arg(long, value_delimiter = ',')]
        styles: Option<Vec<BridgeStyle>>,
    },
    /// Build the vocabulary and a fresh model, then train its VAE.
    PretrainVae {
        #[arg(long)]
        data: PathBuf,
        /// Further corpora whose captions join the vocabulary.
        #[arg(long)]
        vocab_data: Vec<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the denoiser of a bundle whose VAE is trained.
    Pretrain {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Personalize a pretrained bundle on a small corpus.
    Finetune {
        #[command(subcommand)]
        method: FinetuneMethod,
    },
    /// Text-to-image with optional adapters.
    Sample {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Textual inversion artifacts to install.
        #[arg(long)]
        ti: Vec<PathBuf>,
        /// LoRA artifacts prompts may trigger.
        #[arg(long)]
        lora: Vec<PathBuf>,
        /// Hypernetwork artifacts prompts may trigger.
        #[arg(long)]
        hypernet: Vec<PathBuf>,
        #[arg(long)]
        sampler_steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Fold a LoRA artifact into the bundle's projection weights.
    MergeLora {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        lora: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
    },
    /// Print a checkpoint container's header.
    Inspect { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum FinetuneMethod {
    Ti(FinetuneArgs),
    Dreambooth(FinetuneArgs),
    Hypernet(FinetuneArgs),
    Lora(FinetuneArgs),
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn override_train(flags: &TrainFlags, steps: &mut usize, lr: &mut f64, batch: &mut usize) {
    if let Some(s) = flags.steps {
        *steps = s;
    }
    if let Some(l) = flags.lr {
        *lr = l;
    }
    if let Some(b) = flags.batch_size {
        *batch = b;
    }
}

/// Config file, then flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    match &cli.command {
        Command::GenDataset { count, styles } => {
            if let Some(c) = count {
                cfg.dataset.count = *c;
            }
            if let Some(s) = styles {
                cfg.dataset.styles = s.clone();
            }
        }
        Command::PretrainVae { train, .. } => {
            let v = &mut cfg.vae;
            override_train(train, &mut v.steps, &mut v.lr, &mut v.batch_size);
        }
        Command::Pretrain { train, .. } => {
            let p = &mut cfg.pretrain;
            override_train(train, &mut p.steps, &mut p.lr, &mut p.batch_size);
        }
        Command::Finetune { method } => match method {
            FinetuneMethod::Ti(a) => {
                let s = &mut cfg.ti;
                override_train(&a.train, &mut s.steps, &mut s.lr, &mut s.batch_size);
            }
            FinetuneMethod::Dreambooth(a) => {
                let s = &mut cfg.dreambooth;
                override_train(&a.train, &mut s.steps, &mut s.lr, &mut s.batch_size);
            }
            FinetuneMethod::Hypernet(a) => {
                let s = &mut cfg.hypernet;
                override_train(&a.train, &mut s.steps, &mut s.lr, &mut s.batch_size);
            }
            FinetuneMethod::Lora(a) => {
                let s = &mut cfg.lora;
                override_train(&a.train, &mut s.steps, &mut s.lr, &mut s.batch_size);
            }
        },
        Command::Sample {
            sampler_steps, guidance, ..
        } => {
            if let Some(s) = sampler_steps {
                cfg.sampler.steps = *s;
            }
            if let Some(g) = guidance {
                cfg.sampler.guidance = *g;
            }
        }
        Command::MergeLora { .. } | Command::Inspect { .. } => {}
    }
    Ok(cfg)
}

/// Stream ids per command, so commands never share randomness.
fn stream_of(cmd: &Command) -> u64 {
    match cmd {
        Command::GenDataset { .. } => 1,
        Command::PretrainVae { .. } => 2,
        Command::Pretrain { .. } => 3,
        Command::Finetune { method } => match method {
            FinetuneMethod::Ti(_) => 4,
            FinetuneMethod::Dreambooth(_) => 5,
            FinetuneMethod::Hypernet(_) => 6,
            FinetuneMethod::Lora(_) => 7,
        },
        Command::Sample { .. } => 8,
        Command::MergeLora { .. } | Command::Inspect { .. } => 0,
    }
}

fn write_manifest(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "config": serde_json::to_value(cfg)?,
        "outputs": extra,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&cfg.run_dir.join("run.json"), text.as_bytes())
}

fn save_images(dir: &Path, images: &[crate::data::Image]) -> Result<Vec<String>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let name = format!("sample_{i:04}.png");
            write_atomic(&dir.join(&name), &img.to_png_bytes()?)?;
            Ok(name)
        })
        .collect()
}

fn load_data(dir: &Path, bundle: &ModelBundle) -> Result<Corpus> {
    load_corpus(dir, bundle.config.resolution)
}

/// Executes one parsed command. Outputs land under the resolved run directory.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let rng = RngStream::new(cfg.seed, stream_of(&cli.command));
    let dir = cfg.run_dir.clone();
    let schedule = cfg.schedule.build()?;
    match &cli.command {
        Command::Inspect { path } => {
            let header = read_header(&std::fs::read(path)?)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
        }
        Command::GenDataset { .. } => {
            let corpus = synth_mixed(cfg.dataset.count, &cfg.dataset.styles, cfg.model.resolution, &rng)?;
            corpus.save(&dir.join("dataset"))?;
            write_manifest(&cfg, "gen-dataset", json!({ "dataset": "dataset", "pairs": corpus.len() }))?;
        }
        Command::PretrainVae { data, vocab_data, .. } => {
            let corpus = load_corpus(data, cfg.model.resolution)?;
            let mut captions: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.caption.clone()).collect();
            for extra in vocab_data {
                captions.extend(load_corpus(extra, cfg.model.resolution)?.pairs.into_iter().map(|p| p.caption));
            }
            let vocab = Vocab::build(captions.iter().map(Vec::as_slice), RESERVED_WORDS, 256)?;
            let mut bundle = ModelBundle::new(cfg.model.clone(), vocab, &rng.split(0))?;
            let losses = pretrain_vae(&mut bundle, &corpus, &cfg.vae.train(), cfg.vae.kl_weight, &rng.split(1))?;
            save_bundle(&bundle, &dir.join("bundle.ckpt"))?;
            export_loss_csv(&dir.join("loss.csv"), &losses)?;
            write_manifest(&cfg, "pretrain-vae", json!({ "bundle": "bundle.ckpt", "loss": "loss.csv" }))?;
        }
        Command::Pretrain { bundle, data, .. } => {
            let mut bundle = load_bundle(bundle)?;
            let corpus = load_data(data, &bundle)?;
            let losses = pretrain(
                &mut bundle,
                &schedule,
                &corpus,
                &cfg.pretrain.train(),
                cfg.pretrain.uncond_prob,
                &rng,
            )?;
            save_bundle(&bundle, &dir.join("bundle.ckpt"))?;
            export_loss_csv(&dir.join("loss.csv"), &losses)?;
            write_manifest(&cfg, "pretrain", json!({ "bundle": "bundle.ckpt", "loss": "loss.csv" }))?;
        }
        Command::Finetune { method } => finetune(method, &cfg, &schedule, &rng)?,
        Command::Sample {
            bundle,
            prompt,
            count,
            ti,
            lora,
            hypernet,
            ..
        } => {
            let mut bundle = load_bundle(bundle)?;
            for p in ti {
                apply_ti(&mut bundle, &ti_from_checkpoint(&Checkpoint::load(p)?)?)?;
            }
            let mut registry = AdapterRegistry::default();
            for p in lora {
                registry.add_lora(lora_from_checkpoint(&Checkpoint::load(p)?)?);
            }
            for p in hypernet {
                registry.add_hypernet(hypernet_from_checkpoint(&Checkpoint::load(p)?)?);
            }
            let images = generate(&bundle, &schedule, prompt, &registry, &cfg.sampler.build(), *count, &rng)?;
            let names = save_images(&dir, &images)?;
            write_manifest(&cfg, "sample", json!({ "prompt": prompt, "images": names }))?;
        }
        Command::MergeLora { bundle, lora, weight } => {
            let bundle = load_bundle(bundle)?;
            let art = lora_from_checkpoint(&Checkpoint::load(lora)?)?;
            let merged = merge_lora_into(&bundle, &art, *weight)?;
            save_bundle(&merged, &dir.join("bundle.ckpt"))?;
            write_manifest(&cfg, "merge-lora", json!({ "bundle": "bundle.ckpt", "lora": art.name, "weight": weight }))?;
        }
    }
    Ok(())
}

fn finetune(method: &FinetuneMethod, cfg: &RunConfig, schedule: &crate::scheduler::NoiseSchedule, rng: &RngStream) -> Result<()> {
    let dir = &cfg.run_dir;
    let (a, name) = match method {
        FinetuneMethod::Ti(a) => (a, "finetune ti"),
        FinetuneMethod::Dreambooth(a) => (a, "finetune dreambooth"),
        FinetuneMethod::Hypernet(a) => (a, "finetune hypernet"),
        FinetuneMethod::Lora(a) => (a, "finetune lora"),
    };
    let mut bundle = load_bundle(&a.bundle)?;
    let corpus = load_data(&a.data, &bundle)?;
    let (artifact, losses) = match method {
        FinetuneMethod::Ti(_) => {
            let s = &cfg.ti;
            ti_extend_vocab(&mut bundle, &s.placeholder, &s.init_word)?;
            let (art, losses) = ti_train(&mut bundle, schedule, &corpus, &s.placeholder, &s.template, &s.train(), rng, |_, _| {})?;
            ti_checkpoint(&art).save(&dir.join("ti.ckpt"))?;
            ("ti.ckpt", losses)
        }
        FinetuneMethod::Dreambooth(_) => {
            let s = &cfg.dreambooth;
            let run = DreamboothRun {
                instance_token: s.instance_token.clone(),
                class_token: s.class_token.clone(),
                class_images: Corpus::default(),
                prior_weight: s.prior_weight,
                train_text: s.train_text,
            };
            let class_images = db_generate_class_images(
                &bundle,
                schedule,
                &run.class_prompt(),
                s.class_per_instance * corpus.len(),
                &cfg.sampler.build(),
                &rng.split(0),
                Some(&dir.join("class_images")),
            )?;
            let run = DreamboothRun { class_images, ..run };
            let losses = db_train(&mut bundle, schedule, &corpus, &run, &s.train(), &rng.split(1), |_, _| {})?;
            bundle_checkpoint(&bundle)?.save(&dir.join("bundle.ckpt"))?;
            ("bundle.ckpt", losses)
        }
        FinetuneMethod::Hypernet(_) => {
            let s = &cfg.hypernet;
            let art = hn_build(&bundle, &s.name, &s.multipliers, s.activation, s.init, &rng.split(0))?;
            let template = PromptTemplate::new(&s.template)?;
            let (art, losses) = hn_train(&bundle, schedule, &corpus, art, &template, &s.train(), &rng.split(1), |_, _| {})?;
            hypernet_checkpoint(&art).save(&dir.join("hypernet.ckpt"))?;
            ("hypernet.ckpt", losses)
        }
        FinetuneMethod::Lora(_) => {
            let s = &cfg.lora;
            let art = lora_attach(&bundle, &s.name, s.rank, s.alpha, s.a_std, &rng.split(0))?;
            let template = PromptTemplate::new(&s.template)?;
            let (art, losses) = lora_train(&bundle, schedule, &corpus, art, &template, &s.train(), &rng.split(1), |_, _| {})?;
            lora_checkpoint(&art).save(&dir.join("lora.ckpt"))?;
            ("lora.ckpt", losses)
        }
    };
    export_loss_csv(&dir.join("loss.csv"), &losses)?;
    write_manifest(cfg, name, json!({ "artifact": artifact, "loss": "loss.csv", "steps": losses.len() }))
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 for usage and configuration errors, 1 otherwise.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}
