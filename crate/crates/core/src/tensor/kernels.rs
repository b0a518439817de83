//! Slice-level kernels shared by graph forward and backward passes.

use super::Element;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Output shape of numpy-style broadcasting, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|d| {
            if d < pad || shape[d - pad] == 1 {
                0
            } else {
                own[d - pad]
            }
        })
        .collect()
}

/// Calls `f(flat, off_a, off_b)` for every index of `shape` in row-major
/// order, where the offsets follow the given stride vectors.
pub(crate) fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut flat = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(flat, base_a + j * ia, base_b + j * ib);
            flat += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// `out[i] = x[offset(i)]` where `out` has the permuted layout.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape = permute_shape(shape, perm);
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_offset2(&out_shape, &gather, &zeros, |i, off, _| out[i] = x[off]);
    out
}

/// Inverse of [`permute`]: scatter-add a gradient laid out in permuted order.
pub(crate) fn permute_backward<T: Element>(g: &[T], shape: &[usize], perm: &[usize], gx: &mut [T]) {
    let in_strides = strides(shape);
    let out_shape = permute_shape(shape, perm);
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; shape.len()];
    for_each_offset2(&out_shape, &gather, &zeros, |i, off, _| {
        gx[off] = gx[off] + g[i]
    });
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || w[0] != 3 || w[1] != 3 || w[2] != x[3] {
            return None;
        }
        if stride != 1 && stride != 2 {
            return None;
        }
        let (h, wd) = (x[1], x[2]);
        Some(Self {
            batch: x[0],
            h,
            w: wd,
            cin: x[3],
            cout: w[3],
            stride,
            ho: (h - 1) / stride + 1,
            wo: (wd - 1) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        9 * self.cin
    }
}

/// 3x3, padding 1, NHWC im2col: `[B*Ho*Wo, 9*Cin]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let k = (ky * 3 + kx) * g.cin;
                        dst[k..k + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let srcrow = &cols[row * patch..(row + 1) * patch];
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let k = (ky * 3 + kx) * g.cin;
                        for c in 0..g.cin {
                            gx[dst + c] = gx[dst + c] + srcrow[k + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn upsample2x<T: Element>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); x.len() * 4];
    for n in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((n * h + y / 2) * w + xx / 2) * c;
                let dst = ((n * 2 * h + y) * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], shape: &[usize], gx: &mut [T]) {
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    for n in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let dst = ((n * h + y / 2) * w + xx / 2) * c;
                let src = ((n * 2 * h + y) * 2 * w + xx) * c;
                for k in 0..c {
                    gx[dst + k] = gx[dst + k] + g[src + k];
                }
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Element>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Element>(y: &[T], g: &[T], width: usize, gx: &mut [T]) {
    for ((yr, gr), dst) in y.chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = *d + yv * (gv - dot);
        }
    }
}

/// Normalizes each of `groups` contiguous index sets produced by `members`
/// to zero mean and unit variance. Returns `(xhat, rstd per group)`.
pub(crate) fn normalize_groups<T: Element>(
    x: &[T],
    n_groups: usize,
    group_len: usize,
    members: impl Fn(usize, &mut Vec<usize>),
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n_groups);
    let mut idx = Vec::with_capacity(group_len);
    let inv_n = T::from_f64(1.0 / group_len as f64);
    for gi in 0..n_groups {
        idx.clear();
        members(gi, &mut idx);
        let mean = idx.iter().map(|&i| x[i]).sum::<T>() * inv_n;
        let var = idx
            .iter()
            .map(|&i| (x[i] - mean) * (x[i] - mean))
            .sum::<T>()
            * inv_n;
        let r = T::one() / (var + T::from_f64(eps)).sqrt();
        for &i in &idx {
            xhat[i] = (x[i] - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

pub(crate) fn normalize_groups_backward<T: Element>(
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    group_len: usize,
    members: impl Fn(usize, &mut Vec<usize>),
    gx: &mut [T],
) {
    let mut idx = Vec::with_capacity(group_len);
    let inv_n = T::from_f64(1.0 / group_len as f64);
    for (gi, &r) in rstd.iter().enumerate() {
        idx.clear();
        members(gi, &mut idx);
        let mean_g = idx.iter().map(|&i| g[i]).sum::<T>() * inv_n;
        let mean_gx = idx.iter().map(|&i| g[i] * xhat[i]).sum::<T>() * inv_n;
        for &i in &idx {
            gx[i] = gx[i] + r * (g[i] - mean_g - xhat[i] * mean_gx);
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
