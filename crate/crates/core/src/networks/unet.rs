use super::attention::cross_attention;
use super::{push_conv, push_linear, push_norm, Binder, Hooks, Init, Manifest, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

fn push_res(m: &mut Manifest, p: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    push_norm(m, &format!("{p}.gn1"), d);
    push_conv(m, &format!("{p}.conv1"), d, d, 1.0);
    push_linear(m, &format!("{p}.temb"), cfg.time_dim, d);
    push_norm(m, &format!("{p}.gn2"), d);
    push_conv(m, &format!("{p}.conv2"), d, d, 0.1);
}

fn push_attn(m: &mut Manifest, site: &str, cfg: &ModelConfig) {
    let p = super::ModelBundle::site_prefix(site);
    let (d, dt) = (cfg.d_model, cfg.d_txt);
    push_norm(m, &format!("unet.{site}.norm"), d);
    m.push((format!("{p}.wq"), vec![d, d], Init::Normal((1.0 / d as f64).sqrt())));
    m.push((format!("{p}.wk"), vec![d, dt], Init::Normal((1.0 / dt as f64).sqrt())));
    m.push((format!("{p}.wv"), vec![d, dt], Init::Normal((1.0 / dt as f64).sqrt())));
    m.push((format!("{p}.wo"), vec![d, d], Init::Normal((1.0 / d as f64).sqrt())));
    m.push((format!("{p}.bo"), vec![d], Init::Zeros));
}

pub(crate) fn manifest(cfg: &ModelConfig) -> Manifest {
    let d = cfg.d_model;
    let mut m = Manifest::new();
    push_linear(&mut m, "unet.time.fc1", cfg.time_dim, 2 * cfg.time_dim);
    push_linear(&mut m, "unet.time.fc2", 2 * cfg.time_dim, cfg.time_dim);
    push_conv(&mut m, "unet.conv_in", cfg.latent_channels, d, 1.0);
    for site in ["down1", "down2"] {
        push_res(&mut m, &format!("unet.{site}.res"), cfg);
        push_attn(&mut m, site, cfg);
        push_conv(&mut m, &format!("unet.{site}.down"), d, d, 1.0);
    }
    push_res(&mut m, "unet.mid.res", cfg);
    push_attn(&mut m, "mid", cfg);
    for site in ["up1", "up2"] {
        push_conv(&mut m, &format!("unet.{site}.fuse"), 2 * d, d, 1.0);
        push_res(&mut m, &format!("unet.{site}.res"), cfg);
        push_attn(&mut m, site, cfg);
    }
    push_norm(&mut m, "unet.out.norm", d);
    push_conv(&mut m, "unet.out.conv", d, cfg.latent_channels, 0.1);
    m
}

struct Ctx<'a, 'g> {
    b: &'a Binder<'g>,
    p: &'a ParamStore,
    cfg: &'a ModelConfig,
    temb: Var,
    ctx: Var,
    hooks: &'a Hooks<'a>,
}

impl Ctx<'_, '_> {
    fn res(&self, name: &str, x: Var) -> Result<Var> {
        let (b, p, g) = (self.b, self.p, self.b.graph());
        let groups = self.cfg.groups;
        let h = g.silu(b.group_norm(p, &format!("{name}.gn1"), x, groups)?)?;
        let h = b.conv(p, &format!("{name}.conv1"), h, 1)?;
        let t = b.linear(p, &format!("{name}.temb"), self.temb)?;
        let batch = g.shape(t)[0];
        let t = g.reshape(t, &[batch, 1, 1, self.cfg.d_model])?;
        let h = g.add(h, t)?;
        let h = g.silu(b.group_norm(p, &format!("{name}.gn2"), h, groups)?)?;
        let h = b.conv(p, &format!("{name}.conv2"), h, 1)?;
        g.add(x, h)
    }

    fn attn(&self, site: &str, x: Var) -> Result<Var> {
        let g = self.b.graph();
        let s = g.shape(x);
        let flat = g.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        let h = self.b.layer_norm(self.p, &format!("unet.{site}.norm"), flat)?;
        let h = cross_attention(self.b, self.p, site, self.cfg.heads, h, self.ctx, self.hooks)?;
        let out = g.add(flat, h)?;
        g.reshape(out, &s)
    }
}

/// Noise prediction for `latents: [B, h, w, c]` with `temb: [B, time_dim]`
/// and `ctx: [B, L, d_txt]`.
pub(crate) fn forward(
    b: &Binder,
    p: &ParamStore,
    cfg: &ModelConfig,
    latents: Var,
    temb: Var,
    ctx: Var,
    hooks: &Hooks,
) -> Result<Var> {
    let g = b.graph();
    let (ls, ts, cs) = (g.shape(latents), g.shape(temb), g.shape(ctx));
    let ok = ls.len() == 4
        && ls[1] % 4 == 0
        && ls[2] % 4 == 0
        && ls[3] == cfg.latent_channels
        && ts == [ls[0], cfg.time_dim]
        && cs.len() == 3
        && cs[0] == ls[0]
        && cs[2] == cfg.d_txt;
    if !ok {
        return Err(Error::invalid(format!(
            "predict_noise shapes inconsistent: latents {ls:?}, timestep embedding {ts:?}, context {cs:?}"
        )));
    }
    let t = g.silu(b.linear(p, "unet.time.fc1", temb)?)?;
    let t = b.linear(p, "unet.time.fc2", t)?;
    let t = g.silu(t)?;
    let c = Ctx {
        b,
        p,
        cfg,
        temb: t,
        ctx,
        hooks,
    };

    let h = b.conv(p, "unet.conv_in", latents, 1)?;
    let h = c.res("unet.down1.res", h)?;
    let skip1 = c.attn("down1", h)?;
    let h = b.conv(p, "unet.down1.down", skip1, 2)?;
    let h = c.res("unet.down2.res", h)?;
    let skip2 = c.attn("down2", h)?;
    let h = b.conv(p, "unet.down2.down", skip2, 2)?;
    let h = c.res("unet.mid.res", h)?;
    let h = c.attn("mid", h)?;

    let h = g.upsample2x(h)?;
    let h = b.conv(p, "unet.up1.fuse", g.concat(&[h, skip2], 3)?, 1)?;
    let h = c.res("unet.up1.res", h)?;
    let h = c.attn("up1", h)?;
    let h = g.upsample2x(h)?;
    let h = b.conv(p, "unet.up2.fuse", g.concat(&[h, skip1], 3)?, 1)?;
    let h = c.res("unet.up2.res", h)?;
    let h = c.attn("up2", h)?;

    let h = g.silu(b.group_norm(p, "unet.out.norm", h, cfg.groups)?)?;
    b.conv(p, "unet.out.conv", h, 1)
}
