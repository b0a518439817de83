//! Procedural bridge silhouettes: dark anti-aliased strokes over a light
//! background, grayscale replicated to RGB.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Corpus, Image, ImageTextPair};
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Scene tags in canonical caption order.
pub const SCENE_TAGS: &[&str] = &[
    "no humans", "outdoors", "cloud", "scenery", "sky", "car", "tree", "day", "road", "building",
    "water", "reflection",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeStyle {
    Arch,
    Truss,
    Suspension,
    Coral,
}

impl BridgeStyle {
    pub const ALL: [BridgeStyle; 4] = [Self::Arch, Self::Truss, Self::Suspension, Self::Coral];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Arch => "arch",
            Self::Truss => "truss",
            Self::Suspension => "suspension",
            Self::Coral => "coral",
        }
    }

    /// Style tags written into captions. The coral style has none, so it can
    /// only be reached through a learned trigger.
    fn tags(self) -> &'static [&'static str] {
        match self {
            Self::Arch => &["arch"],
            Self::Truss => &["truss"],
            Self::Suspension => &["suspension", "cable"],
            Self::Coral => &[],
        }
    }
}

impl fmt::Display for BridgeStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BridgeStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown bridge style `{s}`")))
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
    ink: f64,
}

impl Canvas {
    fn new(size: usize, background: f64, ink: f64) -> Self {
        Self {
            size,
            px: vec![background; size * size],
            ink,
        }
    }

    /// One-pixel anti-aliased segment; coverage falls off linearly with the
    /// distance from the pixel centre to the segment.
    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) {
        let n = self.size as isize;
        let lo_x = (x0.min(x1) - 2.0).floor().max(0.0) as isize;
        let hi_x = ((x0.max(x1) + 2.0).ceil() as isize).min(n - 1);
        let lo_y = (y0.min(y1) - 2.0).floor().max(0.0) as isize;
        let hi_y = ((y0.max(y1) + 2.0).ceil() as isize).min(n - 1);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = dx * dx + dy * dy;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt();
                let cov = (1.0 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let i = y as usize * self.size + x as usize;
                    let bg = self.px[i];
                    self.px[i] = bg.min(bg + (self.ink - bg) * cov);
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1]);
        }
    }

    fn into_image(self) -> Image {
        let data = self
            .px
            .iter()
            .flat_map(|&v| [v as f32; 3])
            .collect();
        Image::new(self.size, data).expect("canvas is square")
    }
}

fn render(style: BridgeStyle, size: usize, rng: &mut RngStream) -> Image {
    let s = size as f64;
    let background = rng.uniform_range(0.8, 1.0);
    let ink = rng.uniform_range(0.05, 0.25);
    let mut c = Canvas::new(size, background, ink);
    let deck = s * rng.uniform_range(0.55, 0.7);
    let x0 = s * rng.uniform_range(0.04, 0.14);
    let x1 = s * rng.uniform_range(0.86, 0.96);
    let mid = 0.5 * (x0 + x1);
    let half = 0.5 * (x1 - x0);
    c.line((x0, deck), (x1, deck));
    let arc = |a: f64, b: f64, cx: f64, lobe: &dyn Fn(f64) -> f64| -> Vec<(f64, f64)> {
        (0..=48)
            .map(|k| {
                let th = PI * k as f64 / 48.0;
                let r = lobe(th);
                (cx + a * r * th.cos(), deck + b * r * th.sin())
            })
            .collect()
    };
    match style {
        BridgeStyle::Arch => {
            let a = half * rng.uniform_range(0.75, 1.0);
            let b = s * rng.uniform_range(0.15, 0.3);
            let pts = arc(a, b, mid, &|_| 1.0);
            c.polyline(&pts);
            let posts = 2 + rng.below(3);
            for k in 1..=posts {
                let th = PI * k as f64 / (posts + 1) as f64;
                let x = mid + a * th.cos();
                c.line((x, deck), (x, deck + b * th.sin()));
            }
        }
        BridgeStyle::Truss => {
            let h = s * rng.uniform_range(0.12, 0.22);
            let panels = 4 + rng.below(4);
            let (l, r) = (x0 + half * 0.1, x1 - half * 0.1);
            let w = (r - l) / panels as f64;
            c.line((l + 0.5 * w, deck - h), (r - 0.5 * w, deck - h));
            let mut pts = vec![(l, deck)];
            for k in 0..panels {
                let xa = l + w * k as f64;
                pts.push((xa + 0.5 * w, deck - h));
                pts.push((xa + w, deck));
            }
            c.polyline(&pts);
        }
        BridgeStyle::Suspension => {
            let inset = half * rng.uniform_range(0.35, 0.55);
            let (ta, tb) = (x0 + inset * 0.6, x1 - inset * 0.6);
            let top = deck - s * rng.uniform_range(0.3, 0.45);
            let sag = deck - s * rng.uniform_range(0.03, 0.08);
            c.line((ta, deck + s * 0.08), (ta, top));
            c.line((tb, deck + s * 0.08), (tb, top));
            let cable = |x: f64| {
                let u = (x - ta) / (tb - ta) * 2.0 - 1.0;
                sag + (top - sag) * u * u
            };
            let pts: Vec<(f64, f64)> = (0..=32)
                .map(|k| {
                    let x = ta + (tb - ta) * k as f64 / 32.0;
                    (x, cable(x))
                })
                .collect();
            c.polyline(&pts);
            c.line((x0, deck), (ta, top));
            c.line((x1, deck), (tb, top));
            let hangers = 4 + rng.below(4);
            for k in 1..hangers {
                let x = ta + (tb - ta) * k as f64 / hangers as f64;
                c.line((x, cable(x)), (x, deck));
            }
        }
        BridgeStyle::Coral => {
            let a = half * rng.uniform_range(0.8, 1.0);
            let b = s * rng.uniform_range(0.2, 0.3);
            let rings = 2 + rng.below(2);
            for ring in 0..rings {
                let lobes = 3.0 + rng.below(4) as f64;
                let amp = rng.uniform_range(0.1, 0.25);
                let phase = rng.uniform_range(0.0, PI);
                let scale = 1.0 - 0.28 * ring as f64;
                let lobe = move |th: f64| scale * (1.0 - amp + amp * (lobes * th + phase).sin().abs());
                c.polyline(&arc(a, b, mid, &lobe));
            }
        }
    }
    c.into_image()
}

fn caption(style: BridgeStyle, rng: &mut RngStream) -> Vec<String> {
    let mut tags = vec!["bridge".to_string()];
    tags.extend(style.tags().iter().map(|t| t.to_string()));
    for t in SCENE_TAGS {
        if rng.uniform() < 0.5 {
            tags.push(t.to_string());
        }
    }
    tags
}

/// `n` rendered bridges of one style. Image `i` draws from `rng.split(i)`,
/// so the corpus depends only on `(n, style, size, rng coordinates)`.
pub fn synth_bridges(n: usize, style: BridgeStyle, size: usize, rng: &RngStream) -> Result<Corpus> {
    synth_mixed(n, &[style], size, rng)
}

/// Like [`synth_bridges`], cycling through `styles`.
pub fn synth_mixed(n: usize, styles: &[BridgeStyle], size: usize, rng: &RngStream) -> Result<Corpus> {
    if n == 0 || styles.is_empty() || size < 8 {
        return Err(Error::invalid("synthetic corpus needs n >= 1, a style and size >= 8"));
    }
    let pairs = (0..n)
        .map(|i| {
            let style = styles[i % styles.len()];
            let mut r = rng.split(i as u64);
            let image = render(style, size, &mut r);
            ImageTextPair {
                image,
                caption: caption(style, &mut r),
                source: format!("{}_{i:04}", style.as_str()),
            }
        })
        .collect();
    Ok(Corpus { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let rng = RngStream::new(3, 0);
        let a = synth_bridges(20, BridgeStyle::Coral, 32, &rng).unwrap();
        let b = synth_bridges(20, BridgeStyle::Coral, 32, &rng).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        for p in &a.pairs {
            assert_eq!(p.caption[0], "bridge");
            assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(p.image.data().iter().any(|&v| v < 0.5));
        }
    }

    #[test]
    fn style_parse_round_trip() {
        for s in BridgeStyle::ALL {
            assert_eq!(s.as_str().parse::<BridgeStyle>().unwrap(), s);
        }
        assert!("cantilever".parse::<BridgeStyle>().is_err());
    }
}
