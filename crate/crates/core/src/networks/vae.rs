use super::{push_conv, Binder, Manifest, ModelConfig, ParamStore};
use crate::error::Result;
use crate::scheduler::LATENT_SCALE;
use crate::tensor::Var;

pub(crate) fn manifest(cfg: &ModelConfig) -> Manifest {
    let [c0, c1, c2] = cfg.vae_channels;
    let lc = cfg.latent_channels;
    let mut m = Manifest::new();
    push_conv(&mut m, "vae.enc.conv_in", 3, c0, 1.0);
    push_conv(&mut m, "vae.enc.down1", c0, c1, 1.0);
    push_conv(&mut m, "vae.enc.down2", c1, c2, 1.0);
    push_conv(&mut m, "vae.enc.mid", c2, c2, 1.0);
    push_conv(&mut m, "vae.enc.mean", c2, lc, 1.0);
    push_conv(&mut m, "vae.enc.logvar", c2, lc, 0.0);
    push_conv(&mut m, "vae.dec.conv_in", lc, c2, 1.0);
    push_conv(&mut m, "vae.dec.mid", c2, c2, 1.0);
    push_conv(&mut m, "vae.dec.up1", c2, c1, 1.0);
    push_conv(&mut m, "vae.dec.up2", c1, c0, 1.0);
    push_conv(&mut m, "vae.dec.out", c0, 3, 1.0);
    m
}

/// Images in `[0, 1]` to latent mean and log-variance. The convolutions work
/// in diffusion units; the latent itself is `1 / LATENT_SCALE` larger.
pub(crate) fn encode(b: &Binder, p: &ParamStore, images: Var) -> Result<(Var, Var)> {
    let g = b.graph();
    let x = g.add_scalar(g.scale(images, 2.0)?, -1.0)?;
    let h = g.silu(b.conv(p, "vae.enc.conv_in", x, 1)?)?;
    let h = g.silu(b.conv(p, "vae.enc.down1", h, 2)?)?;
    let h = g.silu(b.conv(p, "vae.enc.down2", h, 2)?)?;
    let h = g.silu(b.conv(p, "vae.enc.mid", h, 1)?)?;
    let mean = g.scale(b.conv(p, "vae.enc.mean", h, 1)?, 1.0 / LATENT_SCALE)?;
    let logvar = g.add_scalar(b.conv(p, "vae.enc.logvar", h, 1)?, -2.0 * LATENT_SCALE.ln())?;
    Ok((mean, logvar))
}

/// Latents to unclamped images.
pub(crate) fn decode(b: &Binder, p: &ParamStore, z: Var) -> Result<Var> {
    let g = b.graph();
    let z = g.scale(z, LATENT_SCALE)?;
    let h = g.silu(b.conv(p, "vae.dec.conv_in", z, 1)?)?;
    let h = g.silu(b.conv(p, "vae.dec.mid", h, 1)?)?;
    let h = g.upsample2x(h)?;
    let h = g.silu(b.conv(p, "vae.dec.up1", h, 1)?)?;
    let h = g.upsample2x(h)?;
    let h = g.silu(b.conv(p, "vae.dec.up2", h, 1)?)?;
    let y = b.conv(p, "vae.dec.out", h, 1)?;
    g.add_scalar(g.scale(y, 0.5)?, 0.5)
}
