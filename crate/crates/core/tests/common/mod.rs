#![allow(dead_code)]

pub mod gradcheck;

use bridgetune::data::{synth_bridges, BridgeStyle, Corpus, Vocab, RESERVED_WORDS};
use bridgetune::networks::{ModelBundle, ModelConfig};
use bridgetune::scheduler::{timestep_embeddings, NoiseSchedule};
use bridgetune::tensor::{RngStream, Tensor};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        vae_channels: [8, 8, 8],
        d_txt: 16,
        text_layers: 1,
        d_model: 16,
        groups: 4,
        time_dim: 16,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus(n: usize, style: BridgeStyle, seed: u64) -> Corpus {
    synth_bridges(n, style, 16, &RngStream::new(seed, 1)).unwrap()
}

/// A small untrained bundle marked as pretrained, so trainers accept it.
pub fn tiny_bundle() -> ModelBundle {
    let c = tiny_corpus(4, BridgeStyle::Arch, 0);
    let caps: Vec<Vec<String>> = c.pairs.iter().map(|p| p.caption.clone()).collect();
    let vocab = Vocab::build(caps.iter().map(Vec::as_slice), RESERVED_WORDS, 256).unwrap();
    let mut b = ModelBundle::new(tiny_config(), vocab, &RngStream::new(0, 0)).unwrap();
    b.vae_steps = 1;
    b.denoiser_steps = 1;
    b
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

/// Random latents, timestep features and a context for one forward pass.
pub fn probe(b: &ModelBundle, batch: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = RngStream::new(seed, 3);
    let mut shape = vec![batch];
    shape.extend_from_slice(&b.config.latent_shape());
    let latents = r.normal_tensor(&shape, 1.0);
    let t: Vec<usize> = (0..batch).map(|_| r.below(1000)).collect();
    let temb = timestep_embeddings(&t, b.config.time_dim).unwrap();
    let ids: Vec<Vec<u32>> = (0..batch).map(|_| b.tokenize("a photo of a bridge").unwrap()).collect();
    let ctx = b.encode_text(&ids).unwrap();
    (latents, temb, ctx)
}
