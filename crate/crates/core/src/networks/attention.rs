use super::{Binder, Hooks, ParamStore, Projection};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Addressable cross-attention block of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSite {
    pub id: String,
    pub d_model: usize,
    pub d_txt: usize,
    pub heads: usize,
}

/// `[B, N, heads*dh]` to `[B*heads, N, dh]`.
fn split_heads(b: &Binder, x: Var, heads: usize) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(x);
    let (n, len, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let x = g.reshape(x, &[n, len, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n * heads, len, dh])
}

fn merge_heads(b: &Binder, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(x);
    let (len, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, len, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, len, heads * dh])
}

/// Multi-head `softmax(q k^T / sqrt(dh) + mask) v` on `[B, N, d]` inputs.
/// `mask`, when given, is additive with shape `[B*heads, 1, L]`.
pub(crate) fn attend(b: &Binder, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let g = b.graph();
    let batch = g.shape(q)[0];
    let d = g.shape(q)[2];
    if d % heads != 0 {
        return Err(Error::shape("attention", &g.shape(q), &[heads]));
    }
    let (qh, kh, vh) = (split_heads(b, q, heads)?, split_heads(b, k, heads)?, split_heads(b, v, heads)?);
    let scores = g.scale(g.matmul_nt(qh, kh)?, 1.0 / ((d / heads) as f64).sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, vh)?;
    merge_heads(b, out, batch, heads)
}

/// `x W^T` for a projection stored `[d_out, d_in]`, plus any hook deltas.
fn project(b: &Binder, p: &ParamStore, prefix: &str, site: &str, proj: Projection, x: Var, hooks: &Hooks) -> Result<Var> {
    let g = b.graph();
    let w = b.get(p, &format!("{prefix}.w{}", proj.as_str()))?;
    let mut y = g.matmul_nt(x, w)?;
    for h in hooks {
        if let Some(d) = h.projection_delta(b, site, proj, x)? {
            y = g.add(y, d)?;
        }
    }
    Ok(y)
}

/// Cross-attention of `x: [B, N, d_model]` over `ctx: [B, L, d_txt]` at `site`.
pub(crate) fn cross_attention(
    b: &Binder,
    p: &ParamStore,
    site: &str,
    heads: usize,
    x: Var,
    ctx: Var,
    hooks: &Hooks,
) -> Result<Var> {
    let g = b.graph();
    let (xs, cs) = (g.shape(x), g.shape(ctx));
    if xs.len() != 3 || cs.len() != 3 || xs[0] != cs[0] {
        return Err(Error::shape("cross_attention", &xs, &cs));
    }
    let prefix = super::ModelBundle::site_prefix(site);
    let (mut ctx_k, mut ctx_v) = (ctx, ctx);
    for h in hooks {
        ctx_k = h.transform_context(b, site, Projection::K, ctx_k)?;
        ctx_v = h.transform_context(b, site, Projection::V, ctx_v)?;
    }
    let q = project(b, p, &prefix, site, Projection::Q, x, hooks)?;
    let k = project(b, p, &prefix, site, Projection::K, ctx_k, hooks)?;
    let v = project(b, p, &prefix, site, Projection::V, ctx_v, hooks)?;
    let a = attend(b, q, k, v, heads, None)?;
    let o = project(b, p, &prefix, site, Projection::O, a, hooks)?;
    let bo = b.get(p, &format!("{prefix}.bo"))?;
    g.add(o, bo)
}

/// Text self-attention sub-block with key masking.
pub(crate) fn self_attention(b: &Binder, p: &ParamStore, prefix: &str, heads: usize, x: Var, mask: Var) -> Result<Var> {
    let g = b.graph();
    let proj = |n: &str, v: Var| -> Result<Var> {
        let w = b.get(p, &format!("{prefix}.w{n}"))?;
        g.matmul_nt(v, w)
    };
    let (q, k, v) = (proj("q", x)?, proj("k", x)?, proj("v", x)?);
    let a = attend(b, q, k, v, heads, Some(mask))?;
    let o = proj("o", a)?;
    g.add(o, b.get(p, &format!("{prefix}.bo"))?)
}

/// Additive key mask `[B*heads, 1, L]`: zero up to and including each
/// sequence's end token, a large negative value after it.
pub(crate) fn key_mask(ends: &[usize], heads: usize, len: usize) -> Tensor {
    let mut data = Vec::with_capacity(ends.len() * heads * len);
    for &e in ends {
        for _ in 0..heads {
            data.extend((0..len).map(|j| if j <= e { 0.0 } else { -1e9 }));
        }
    }
    Tensor::new(vec![ends.len() * heads, 1, len], data).expect("mask shape")
}
