use super::attention::{key_mask, self_attention};
use super::{push_linear, push_norm, Binder, Init, Manifest, ModelConfig, ParamStore};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Var;

pub(crate) fn manifest(cfg: &ModelConfig, vocab_len: usize) -> Manifest {
    let d = cfg.d_txt;
    let proj_std = (1.0 / d as f64).sqrt();
    let mut m = Manifest::new();
    m.push(("text.tok_emb".into(), vec![vocab_len, d], Init::Normal(1.0)));
    m.push(("text.pos_emb".into(), vec![cfg.max_tokens, d], Init::Normal(0.5)));
    for i in 0..cfg.text_layers {
        let p = format!("text.block{i}");
        push_norm(&mut m, &format!("{p}.ln1"), d);
        for w in ["wq", "wk", "wv", "wo"] {
            m.push((format!("{p}.attn.{w}"), vec![d, d], Init::Normal(proj_std)));
        }
        m.push((format!("{p}.attn.bo"), vec![d], Init::Zeros));
        push_norm(&mut m, &format!("{p}.ln2"), d);
        push_linear(&mut m, &format!("{p}.mlp.fc1"), d, 2 * d);
        push_linear(&mut m, &format!("{p}.mlp.fc2"), 2 * d, d);
    }
    push_norm(&mut m, "text.ln_final", d);
    m
}

/// Token ids `[B][L_max]` to context `[B, L_max, d_txt]`.
pub(crate) fn encode(b: &Binder, p: &ParamStore, cfg: &ModelConfig, ids: &[Vec<u32>]) -> Result<Var> {
    let g = b.graph();
    let len = cfg.max_tokens;
    if ids.is_empty() {
        return Err(Error::invalid("encode_text needs at least one sequence"));
    }
    if let Some(bad) = ids.iter().find(|s| s.len() != len) {
        return Err(Error::shape("encode_text", &[bad.len()], &[len]));
    }
    let batch = ids.len();
    let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
    let table = b.get(p, "text.tok_emb")?;
    let tok = g.embedding(table, &flat, &[batch, len])?;
    let pos = b.get(p, "text.pos_emb")?;
    let mut x = g.add(tok, pos)?;
    let ends: Vec<usize> = ids.iter().map(|s| Vocab::eos_position(s)).collect();
    let mask = g.constant(&key_mask(&ends, cfg.text_heads, len));
    for i in 0..cfg.text_layers {
        let pre = format!("text.block{i}");
        let h = b.layer_norm(p, &format!("{pre}.ln1"), x)?;
        let h = self_attention(b, p, &format!("{pre}.attn"), cfg.text_heads, h, mask)?;
        x = g.add(x, h)?;
        let h = b.layer_norm(p, &format!("{pre}.ln2"), x)?;
        let h = g.silu(b.linear(p, &format!("{pre}.mlp.fc1"), h)?)?;
        let h = b.linear(p, &format!("{pre}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    b.layer_norm(p, "text.ln_final", x)
}
