//! Image-text pair corpora: on-disk loading in the `<stem>.png` + `<stem>.txt`
//! layout, tokenization, prompt templates and the synthetic bridge renderer.

mod synth;
mod template;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

pub use synth::{synth_bridges, synth_mixed, BridgeStyle, SCENE_TAGS};
pub use template::PromptTemplate;
pub use vocab::{normalize_prompt, Vocab, RESERVED_WORDS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(Error::invalid(format!(
                "image of side {size} needs {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Self {
            size,
            data: vec![value; size * size * 3],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, size: usize) -> Self {
        if size == self.size {
            return self.clone();
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            let sy = y * self.size / size;
            for x in 0..size {
                let sx = x * self.size / size;
                let o = (sy * self.size + sx) * 3;
                data.extend_from_slice(&self.data[o..o + 3]);
            }
        }
        Self { size, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size, 3], self.data.clone()).expect("consistent")
    }

    /// Splits a `[B, H, W, 3]` tensor into images, clamping to `[0, 1]`.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != s[2] || s[3] != 3 {
            return Err(Error::shape("Image::from_batch", s, &[0, 0, 0, 3]));
        }
        let per = s[1] * s[2] * 3;
        Ok(t.data()
            .chunks(per)
            .map(|c| Image {
                size: s[1],
                data: c.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let png_err = |e: png::DecodingError| Error::Dataset {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = fs::File::open(path)?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        if w != h {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                message: format!("image is {w}x{h}, expected square"),
            });
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    message: "unexpanded palette image".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let row = &buf[y * info.line_size..y * info.line_size + w * channels];
            for px in row.chunks(channels) {
                let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
                data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
            }
        }
        Image::new(w, data)
    }

    /// The image as it reads back after a PNG round trip.
    pub fn quantized(&self) -> Self {
        Self {
            size: self.size,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
            writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Caption text to an ordered tag list: split on commas, trimmed, lowercased.
pub fn normalize_caption(text: &str) -> Vec<String> {
    text.split(',')
        .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub image: Image,
    pub caption: Vec<String>,
    pub source: String,
}

impl ImageTextPair {
    /// Tags joined the way they are fed to the tokenizer.
    pub fn caption_text(&self) -> String {
        self.caption.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub pairs: Vec<ImageTextPair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.pairs.first().map(|p| p.image.size())
    }

    /// `[n, H, W, 3]` batch of the selected images.
    pub fn image_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                let t = self.pairs[i].image.to_tensor();
                let s = t.shape().to_vec();
                t.reshape(&[1, s[0], s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        Tensor::stack_rows(&parts)
    }

    /// Per-pixel mean image.
    pub fn centroid(&self) -> Result<Image> {
        let first = self.pairs.first().ok_or_else(|| Error::invalid("centroid of an empty corpus"))?;
        let mut acc = vec![0.0f64; first.image.data().len()];
        for p in &self.pairs {
            for (a, &v) in acc.iter_mut().zip(p.image.data()) {
                *a += v as f64;
            }
        }
        let n = self.pairs.len() as f64;
        Image::new(first.image.size(), acc.into_iter().map(|a| (a / n) as f32).collect())
    }

    /// Writes `<stem>.png` + `<stem>.txt` for every pair.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for p in &self.pairs {
            crate::cli::write_atomic(&dir.join(format!("{}.png", p.source)), &p.image.to_png_bytes()?)?;
            crate::cli::write_atomic(
                &dir.join(format!("{}.txt", p.source)),
                format!("{}\n", p.caption_text()).as_bytes(),
            )?;
        }
        Ok(())
    }
}

/// Loads every `<stem>.png` with its same-stem caption file, ordered by stem.
/// Fails without returning a partial corpus.
pub fn load_corpus(dir: &Path, resolution: usize) -> Result<Corpus> {
    let dataset_err = |path: PathBuf, message: String| Error::Dataset { path, message };
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                images.insert(stem.to_string(), path.clone());
            }
        }
    }
    if images.is_empty() {
        return Err(dataset_err(dir.to_path_buf(), "no PNG images found".into()));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (stem, path) in images {
        let txt = path.with_extension("txt");
        if !txt.is_file() {
            return Err(dataset_err(txt, format!("image `{stem}` has no caption file")));
        }
        let caption = normalize_caption(&fs::read_to_string(&txt)?);
        if caption.is_empty() {
            return Err(dataset_err(txt, format!("caption for `{stem}` is empty")));
        }
        let image = Image::load_png(&path)?.resized(resolution);
        pairs.push(ImageTextPair {
            image,
            caption,
            source: stem,
        });
    }
    Ok(Corpus { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_normalization_is_idempotent() {
        let raw = " Bridge,  Outdoors ,no   humans,, SKY ";
        let once = normalize_caption(raw);
        assert_eq!(once, vec!["bridge", "outdoors", "no humans", "sky"]);
        assert_eq!(normalize_caption(&once.join(", ")), once);
    }

    #[test]
    fn nearest_resize_picks_source_pixels() {
        let mut img = Image::filled(4, 0.0);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i / 3) as f32 / 16.0;
        }
        let small = img.resized(2);
        assert_eq!(small.size(), 2);
        assert_eq!(small.data()[0], 0.0);
        assert_eq!(small.data()[3], 2.0 / 16.0);
        assert_eq!(small.data()[6], 8.0 / 16.0);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let mut img = Image::filled(3, 0.5);
        img.data_mut()[0] = 1.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        fs::write(&path, img.to_png_bytes().unwrap()).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.size(), 3);
        assert_eq!(back.data()[0], 1.0);
        assert!((back.data()[1] - 0.5).abs() < 1.0 / 255.0);
    }
}
