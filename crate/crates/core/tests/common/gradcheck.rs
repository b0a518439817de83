use bridgetune::tensor::{Graph, RngStream, Tensor, Var};
use bridgetune::Result;

type Build = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

/// One op evaluated at one set of input shapes.
pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

/// Loss `mean(op(inputs) * r)` with a fixed random `r`, so every output
/// element contributes with its own weight.
fn loss(case: &Case, inputs: &[Tensor<f64>], r: &mut Option<Tensor<f64>>, seed: u64) -> Result<(f64, Vec<Tensor<f64>>)> {
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(format!("x{i}"), t))
        .collect();
    let out = (case.build)(&g, &vars)?;
    let shape = g.shape(out);
    let w = r.get_or_insert_with(|| RngStream::new(seed, 7).normal_tensor(&shape, 1.0));
    let l = g.mean_all(g.mul(out, g.constant(w))?)?;
    let value = g.value(l).item();
    let grads = g.backward(l)?;
    let grads = (0..inputs.len())
        .map(|i| {
            grads
                .get(&format!("x{i}"))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Largest norm-wise relative error between the analytic gradient and a
/// central finite difference, over every input of the case.
pub fn check(case: &Case, seed: u64) -> Result<f64> {
    let h = 1e-6;
    let mut r = None;
    let (_, analytic) = loss(case, &case.inputs, &mut r, seed)?;
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let (lp, _) = loss(case, &plus, &mut r, seed)?;
            let (lm, _) = loss(case, &minus, &mut r, seed)?;
            *slot = (lp - lm) / (2.0 * h);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn normal(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

/// Normal values pushed at least 0.1 away from zero, for kinked ops.
fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn case(op: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        op,
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable op, each at `per_op` random small shapes.
pub fn all_cases(per_op: usize, rng: &RngStream) -> Vec<Case> {
    let mut out = Vec::new();
    for k in 0..per_op {
        let r = &mut rng.split(k as u64);
        let (m, n, p) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
        out.push(case("matmul", vec![normal(r, &[m, n]), normal(r, &[n, p])], |g, v| g.matmul(v[0], v[1])));
        let b = dim(r, 1, 3);
        out.push(case("matmul_batched", vec![normal(r, &[b, m, n]), normal(r, &[b, n, p])], |g, v| {
            g.matmul(v[0], v[1])
        }));
        out.push(case("matmul_nt", vec![normal(r, &[b, m, n]), normal(r, &[p, n])], |g, v| g.matmul_nt(v[0], v[1])));
        let (h, w, ci, co) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 3), dim(r, 1, 3));
        let stride = 1 + k % 2;
        out.push(case(
            "conv2d",
            vec![normal(r, &[b, h, w, ci]), normal(r, &[3, 3, ci, co])],
            move |g, v| g.conv2d(v[0], v[1], stride),
        ));
        out.push(case("upsample2x", vec![normal(r, &[b, h, w, ci])], |g, v| g.upsample2x(v[0])));
        let shape = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
        let bshape = [1, shape[1], if k % 2 == 0 { shape[2] } else { 1 }];
        out.push(case("add", vec![normal(r, &shape), normal(r, &bshape)], |g, v| g.add(v[0], v[1])));
        out.push(case("sub", vec![normal(r, &bshape), normal(r, &shape)], |g, v| g.sub(v[0], v[1])));
        out.push(case("mul", vec![normal(r, &shape), normal(r, &bshape)], |g, v| g.mul(v[0], v[1])));
        let s = r.normal() * 2.0;
        out.push(case("scale", vec![normal(r, &shape)], move |g, v| g.scale(v[0], s)));
        out.push(case("add_scalar", vec![normal(r, &shape)], move |g, v| g.add_scalar(v[0], s)));
        out.push(case("silu", vec![normal(r, &shape)], |g, v| g.silu(v[0])));
        out.push(case("relu", vec![away_from_zero(r, &shape)], |g, v| g.relu(v[0])));
        out.push(case("exp", vec![normal(r, &shape)], |g, v| g.exp(v[0])));
        out.push(case("square", vec![normal(r, &shape)], |g, v| g.square(v[0])));
        out.push(case("softmax", vec![normal(r, &shape)], |g, v| g.softmax(v[0])));
        let ln_shape = [shape[0], shape[1], dim(r, 2, 6)];
        out.push(case("layer_norm", vec![normal(r, &ln_shape)], |g, v| g.layer_norm(v[0])));
        let groups = dim(r, 1, 3);
        let gshape = [b, h, w, groups * dim(r, 1, 3)];
        out.push(case("group_norm", vec![normal(r, &gshape)], move |g, v| g.group_norm(v[0], groups)));
        let (vocab, d) = (dim(r, 2, 6), dim(r, 1, 4));
        let lead = [dim(r, 1, 3), dim(r, 1, 3)];
        let ids: Vec<usize> = (0..lead[0] * lead[1]).map(|_| r.below(vocab)).collect();
        out.push(case("embedding", vec![normal(r, &[vocab, d])], move |g, v| g.embedding(v[0], &ids, &lead)));
        let flat = [shape[0] * shape[1], shape[2]];
        out.push(case("reshape", vec![normal(r, &shape)], move |g, v| {
            g.mul(g.reshape(v[0], &flat)?, g.reshape(v[0], &flat)?)
        }));
        let perm = [[2, 0, 1], [1, 2, 0], [0, 2, 1], [2, 1, 0], [1, 0, 2]][k % 5];
        out.push(case("permute", vec![normal(r, &shape)], move |g, v| g.permute(v[0], &perm)));
        out.push(case("transpose", vec![normal(r, &shape)], |g, v| g.transpose(v[0])));
        let axis = k % 3;
        let mut other = shape;
        other[axis] = dim(r, 1, 3);
        out.push(case("concat", vec![normal(r, &shape), normal(r, &other)], move |g, v| g.concat(&[v[0], v[1]], axis)));
        let axes: &'static [usize] = [&[0][..], &[1], &[2], &[0, 2], &[1, 2]][k % 5];
        out.push(case("mean", vec![normal(r, &shape)], move |g, v| g.mean(v[0], axes)));
        out.push(case("mean_all", vec![normal(r, &shape)], |g, v| g.mean_all(v[0])));
        out.push(case("mse", vec![normal(r, &shape), normal(r, &shape)], |g, v| g.mse(v[0], v[1])));
    }
    out
}
