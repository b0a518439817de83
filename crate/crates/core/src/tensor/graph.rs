//! Define-by-run reverse-mode graph.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the vector-Jacobian product. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order because inputs always
//! precede their consumers.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradientMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Silu,
    Relu,
    Exp,
    Square,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` is shared across the batch (a 2-D weight).
        shared_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        cols: Vec<T>,
    },
    Upsample2x(usize),
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Scale(usize, T),
    AddScalar(usize),
    Unary(Unary, usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: usize,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Mean {
        x: usize,
        axes: Vec<usize>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// A single forward pass worth of recorded operations.
pub struct Graph<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, rg: bool) -> Result<Var> {
        check_finite(op_name, &data)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, rg))
    }

    /// A trainable leaf whose gradient is reported under `name`.
    pub fn param(&self, name: impl Into<String>, value: &Tensor<T>) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.0].param = Some(name.into());
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- matmul

    /// `a @ b` where `b` is a 2-D `[k, n]` weight and `a` is `[..., k]`, or
    /// both are 3-D `[batch, m, k]` x `[batch, k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, "matmul")
    }

    /// `a @ b^T`, with `b` stored `[n, k]` (or `[batch, n, k]`).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, "matmul_nt")
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || Error::shape(name, sa, sb);
        let (batch, m, k, n, shared_b, out_shape) = if sb.len() == 2 {
            let k = *sa.last().ok_or_else(bad)?;
            let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if bk != k {
                return Err(bad());
            }
            let mut out = sa.to_vec();
            *out.last_mut().unwrap() = n;
            (1, av.numel() / k, k, n, true, out)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if bk != sa[2] {
                return Err(bad());
            }
            (sa[0], sa[1], sa[2], n, false, vec![sa[0], sa[1], n])
        } else {
            return Err(bad());
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..batch {
            let bs = if shared_b { 0 } else { i * k * n };
            T::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[bs..bs + k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.record(
            name,
            out_shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        )
    }

    // ------------------------------------------------------------------ conv

    /// 3x3 convolution with zero padding 1 over NHWC input `x` and weight
    /// `[3, 3, Cin, Cout]`. Stride 1 keeps the spatial size, stride 2 halves it.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride)
            .ok_or_else(|| Error::shape("conv2d", xv.shape(), wv.shape()))?;
        let cols = kernels::im2col(xv.data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * geom.cout];
        T::gemm(
            geom.rows(),
            geom.patch(),
            geom.cout,
            &cols,
            false,
            wv.data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[x, w]);
        let cols = if rg { cols } else { Vec::new() };
        self.record(
            "conv2d",
            vec![geom.batch, geom.ho, geom.wo, geom.cout],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                cols,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of NHWC input.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", s, &[0, 0, 0, 0]));
        }
        let out = kernels::upsample2x(xv.data(), s);
        let rg = self.rg(&[x]);
        self.record(
            "upsample2x",
            vec![s[0], 2 * s[1], 2 * s[2], s[3]],
            out,
            Op::Upsample2x(x.0),
            rg,
        )
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<T> = if av.shape() == bv.shape() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = kernels::broadcast_strides(av.shape(), &out_shape);
            let sb = kernels::broadcast_strides(bv.shape(), &out_shape);
            let mut out = vec![T::zero(); numel(&out_shape)];
            kernels::for_each_offset2(&out_shape, &sa, &sb, |i, oa, ob| out[i] = f(ad[oa], bd[ob]));
            out
        };
        let rg = self.rg(&[a, b]);
        self.record(name, out_shape, out, Op::Binary { kind, a: a.0, b: b.0 }, rg)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.record("scale", av.shape().to_vec(), out, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x + s).collect();
        let rg = self.rg(&[a]);
        self.record("add_scalar", av.shape().to_vec(), out, Op::AddScalar(a.0), rg)
    }

    fn unary(&self, kind: Unary, a: Var, name: &'static str) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Silu => x * kernels::sigmoid(x),
                Unary::Relu => x.max(T::zero()),
                Unary::Exp => x.exp(),
                Unary::Square => x * x,
            })
            .collect();
        let rg = self.rg(&[a]);
        self.record(name, av.shape().to_vec(), out, Op::Unary(kind, a.0), rg)
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a, "silu")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a, "relu")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a, "exp")
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a, "square")
    }

    /// The "linear" activation.
    pub fn identity(&self, a: Var) -> Var {
        a
    }

    // --------------------------------------------------------- normalization

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let width = *av.shape().last().ok_or_else(|| Error::shape("softmax", av.shape(), &[]))?;
        let out = kernels::softmax_rows(av.data(), width);
        let rg = self.rg(&[a]);
        self.record("softmax", av.shape().to_vec(), out, Op::Softmax(a.0), rg)
    }

    /// Normalizes over the last axis (no affine terms).
    pub fn layer_norm(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm", xv.shape(), &[]))?;
        let rows = xv.numel() / width;
        let (xhat, rstd) = kernels::normalize_groups(
            xv.data(),
            rows,
            width,
            |r, idx| idx.extend(r * width..(r + 1) * width),
            1e-5,
        );
        let rg = self.rg(&[x]);
        let (saved_hat, saved_rstd) = if rg { (xhat.clone(), rstd) } else { (Vec::new(), Vec::new()) };
        self.record(
            "layer_norm",
            xv.shape().to_vec(),
            xhat,
            Op::LayerNorm {
                x: x.0,
                xhat: saved_hat,
                rstd: saved_rstd,
            },
            rg,
        )
    }

    /// Group normalization of NHWC input over (H, W, C/groups) per sample.
    pub fn group_norm(&self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() != 4 || groups == 0 || s[3] % groups != 0 {
            return Err(Error::shape("group_norm", &s, &[groups]));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let cg = c / groups;
        let members = move |gi: usize, idx: &mut Vec<usize>| {
            let (n, g) = (gi / groups, gi % groups);
            for p in 0..hw {
                let base = (n * hw + p) * c + g * cg;
                idx.extend(base..base + cg);
            }
        };
        let (xhat, rstd) = kernels::normalize_groups(xv.data(), b * groups, hw * cg, members, 1e-5);
        let rg = self.rg(&[x]);
        let (saved_hat, saved_rstd) = if rg { (xhat.clone(), rstd) } else { (Vec::new(), Vec::new()) };
        self.record(
            "group_norm",
            s,
            xhat,
            Op::GroupNorm {
                x: x.0,
                groups,
                xhat: saved_hat,
                rstd: saved_rstd,
            },
            rg,
        )
    }

    // ------------------------------------------------------------ structural

    /// Rows of `table` (`[V, d]`) selected by `ids`; output `[..lead, d]`.
    pub fn embedding(&self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let s = tv.shape();
        if s.len() != 2 || numel(lead) != ids.len() {
            return Err(Error::shape("embedding", s, lead));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        self.record(
            "embedding",
            shape,
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", s, perm));
        }
        let out = kernels::permute(xv.data(), s, perm);
        let rg = self.rg(&[x]);
        self.record(
            "permute",
            kernels::permute_shape(s, perm),
            out,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for v in &vals {
            let s = v.shape();
            let compatible = s.len() == rank
                && (0..rank).all(|d| d == axis || s[d] == first.shape()[d]);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &vals {
                let chunk = v.numel() / outer;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(xs);
        self.record(
            "concat",
            out_shape,
            out,
            Op::Concat {
                inputs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        )
    }

    /// Mean over `axes` (removed from the output shape).
    pub fn mean(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::shape("mean", s, axes));
        }
        let keep: Vec<usize> = (0..s.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| s[d]).collect();
        let reduced_shape: Vec<usize> = (0..s.len())
            .map(|d| if axes.contains(&d) { 1 } else { s[d] })
            .collect();
        let so = kernels::broadcast_strides(&reduced_shape, s);
        let count = (xv.numel() / numel(&out_shape)) as f64;
        let mut acc = vec![T::zero(); numel(&out_shape)];
        let zeros = vec![0; s.len()];
        let xd = xv.data();
        kernels::for_each_offset2(s, &so, &zeros, |i, o, _| acc[o] = acc[o] + xd[i]);
        let inv = T::from_f64(1.0 / count);
        for v in acc.iter_mut() {
            *v = *v * inv;
        }
        let rg = self.rg(&[x]);
        self.record(
            "mean",
            out_shape,
            acc,
            Op::Mean {
                x: x.0,
                axes: axes.to_vec(),
            },
            rg,
        )
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    /// Mean squared error over every element.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", &self.shape(a), &self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean_all(sq)
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter leaf the loss depends on; the graph cannot be reused.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        if self.consumed.replace(true) {
            return Err(Error::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if numel(loss_shape) != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut out = GradientMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(name) = &node.param {
                check_finite("backward", &g)?;
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.get_mut(name) {
                    Some(prev) => {
                        let sum = prev.zip_map(&t, "backward", |a: T, b: T| a + b)?;
                        *prev = sum;
                    }
                    None => {
                        out.insert(name.clone(), t);
                    }
                }
                continue;
            }
            vjp(&nodes, node, &g, &mut grads);
        }
        Ok(out)
    }
}

/// Accumulate into the gradient slot of `input` if it participates.
fn slot<'a, T: Element>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], input: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[input].requires_grad {
        return None;
    }
    Some(grads[input].get_or_insert_with(|| vec![T::zero(); nodes[input].value.numel()]))
}

fn vjp<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
            shared_b,
        } => {
            let ad = nodes[a].value.data();
            let bd = nodes[b].value.data();
            if let Some(ga) = slot(nodes, grads, a) {
                for i in 0..batch {
                    let bs = if shared_b { 0 } else { i * k * n };
                    // dA = dC op(B)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[bs..bs + k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        true,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let bs = if shared_b { 0 } else { i * k * n };
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // B stored [n, k]: dB = dC^T A
                        T::gemm(n, m, k, gi, true, ai, false, &mut gb[bs..bs + k * n], true);
                    } else {
                        // dB = A^T dC
                        T::gemm(k, m, n, ai, true, gi, false, &mut gb[bs..bs + k * n], true);
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, cols } => {
            let (x, w) = (*x, *w);
            let geom = ConvGeom::new(nodes[x].value.shape(), nodes[w].value.shape(), *stride)
                .expect("validated in forward");
            if let Some(gw) = slot(nodes, grads, w) {
                T::gemm(geom.patch(), geom.rows(), geom.cout, cols, true, g, false, gw, true);
            }
            if nodes[x].requires_grad {
                let mut gcols = vec![T::zero(); geom.rows() * geom.patch()];
                T::gemm(
                    geom.rows(),
                    geom.cout,
                    geom.patch(),
                    g,
                    false,
                    nodes[w].value.data(),
                    true,
                    &mut gcols,
                    false,
                );
                let gx = slot(nodes, grads, x).unwrap();
                kernels::col2im_add(&gcols, &geom, gx);
            }
        }
        &Op::Upsample2x(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                kernels::upsample2x_backward(g, nodes[x].value.shape(), gx);
            }
        }
        &Op::Binary { kind, a, b } => {
            let out_shape = node.value.shape();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let sa = kernels::broadcast_strides(av.shape(), out_shape);
            let sb = kernels::broadcast_strides(bv.shape(), out_shape);
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(nodes, grads, a) {
                kernels::for_each_offset2(out_shape, &sa, &sb, |i, oa, ob| {
                    let d = match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * bd[ob],
                    };
                    ga[oa] = ga[oa] + d;
                });
            }
            if let Some(gb) = slot(nodes, grads, b) {
                kernels::for_each_offset2(out_shape, &sa, &sb, |i, oa, ob| {
                    let d = match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * ad[oa],
                    };
                    gb[ob] = gb[ob] + d;
                });
            }
        }
        &Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d = *d + gv * s;
                }
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
        }
        &Op::Unary(kind, a) => {
            let xd = nodes[a].value.data();
            let yd = node.value.data();
            if let Some(ga) = slot(nodes, grads, a) {
                for i in 0..g.len() {
                    let x = xd[i];
                    let local = match kind {
                        Unary::Silu => {
                            let s = kernels::sigmoid(x);
                            s * (T::one() + x * (T::one() - s))
                        }
                        Unary::Relu => {
                            if x > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => yd[i],
                        Unary::Square => x + x,
                    };
                    ga[i] = ga[i] + g[i] * local;
                }
            }
        }
        &Op::Softmax(a) => {
            let width = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, a) {
                kernels::softmax_rows_backward(node.value.data(), g, width, ga);
            }
        }
        Op::LayerNorm { x, xhat, rstd } => {
            let width = *node.value.shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::normalize_groups_backward(
                    xhat,
                    rstd,
                    g,
                    width,
                    |r, idx| idx.extend(r * width..(r + 1) * width),
                    gx,
                );
            }
        }
        Op::GroupNorm { x, groups, xhat, rstd } => {
            let s = node.value.shape();
            let (hw, c, groups) = (s[1] * s[2], s[3], *groups);
            let cg = c / groups;
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::normalize_groups_backward(
                    xhat,
                    rstd,
                    g,
                    hw * cg,
                    |gi, idx| {
                        let (n, gr) = (gi / groups, gi % groups);
                        for p in 0..hw {
                            let base = (n * hw + p) * c + gr * cg;
                            idx.extend(base..base + cg);
                        }
                    },
                    gx,
                );
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[row * d + j];
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::permute_backward(g, nodes[*x].value.shape(), perm, gx);
            }
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = node.value.shape()[..*axis].iter().product();
            let mut offset = 0;
            let row = node.value.numel() / outer;
            for &inp in inputs {
                let chunk = nodes[inp].value.numel() / outer;
                if let Some(gi) = slot(nodes, grads, inp) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        for (d, &s) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Mean { x, axes } => {
            let s = nodes[*x].value.shape();
            let reduced_shape: Vec<usize> = (0..s.len())
                .map(|d| if axes.contains(&d) { 1 } else { s[d] })
                .collect();
            let so = kernels::broadcast_strides(&reduced_shape, s);
            let inv = T::from_f64(node.value.numel() as f64 / numel(s) as f64);
            let zeros = vec![0; s.len()];
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::for_each_offset2(s, &so, &zeros, |i, o, _| gx[i] = gx[i] + g[o] * inv);
            }
        }
    }
}

/// Zero every row of an embedding-table gradient except `keep_row`.
pub fn mask_embedding_gradient<T: Element>(grad: &Tensor<T>, keep_row: usize) -> crate::Result<Tensor<T>> {
    let s = grad.shape();
    if s.len() != 2 {
        return Err(Error::shape("mask_embedding_gradient", s, &[keep_row]));
    }
    if keep_row >= s[0] {
        return Err(Error::IndexOutOfRange {
            what: "embedding row",
            index: keep_row,
            limit: s[0],
        });
    }
    let d = s[1];
    let mut out = vec![T::zero(); grad.numel()];
    out[keep_row * d..(keep_row + 1) * d].copy_from_slice(&grad.data()[keep_row * d..(keep_row + 1) * d]);
    Tensor::new(s.to_vec(), out)
}
