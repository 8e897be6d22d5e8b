//! Forward and backward kernels. Every backward function returns the
//! gradient with respect to each differentiable input of its forward twin.

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Default LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Matrix product of `a [m×k]` and `b [k×n]`.
///
/// Accumulation runs over the inner index left to right for every output
/// cell, so results are reproducible bit for bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `w [rows×cols] · x [cols]`.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `wᵀ · y` for `w [rows×cols]`, `y [rows]`.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), rows);
    let mut out = vec![0.0; cols];
    for (row, &yr) in w.chunks_exact(cols).zip(y) {
        if yr == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * yr;
        }
    }
    out
}

/// `g += a ⊗ b` where `g` is `[a.len()×b.len()]`.
pub fn outer_accumulate(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    debug_assert_eq!(g.len(), a.len() * cols);
    for (row, &av) in g.chunks_exact_mut(cols).zip(a) {
        if av == 0.0 {
            continue;
        }
        for (gv, &bv) in row.iter_mut().zip(b) {
            *gv += av * bv;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn softmax_tensor(u: &Tensor) -> Result<Tensor> {
    if u.rank() != 1 {
        return Err(Error::dim(format!("softmax expects a vector, got {:?}", u.shape())));
    }
    let out = softmax(u.data())?;
    Ok(Tensor::from_parts(vec![out.len()], out))
}

/// Gradient with respect to the logits given the softmax output `alpha`.
pub fn softmax_backward(alpha: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(alpha, grad_out);
    alpha
        .iter()
        .zip(grad_out)
        .map(|(a, g)| a * (g - inner))
        .collect()
}

/// Intermediate values kept by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// LayerNorm over a single vector with population variance.
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    let d = x.len();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::dim(format!(
            "layer_norm: x {d}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Numeric(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = d as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((xh, g), b)| xh * g + b)
        .collect();
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (out, _) = layer_norm_forward(x.data(), gain.data(), bias.data(), eps)?;
    Ok(Tensor::from_parts(vec![out.len()], out))
}

/// Returns `(d_x, d_gain, d_bias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = grad_out.len();
    let n = d as f64;
    let d_norm: Vec<f64> = grad_out.iter().zip(gain).map(|(g, w)| g * w).collect();
    let sum_dn: f64 = d_norm.iter().sum();
    let sum_dn_xh: f64 = d_norm
        .iter()
        .zip(&cache.normalized)
        .map(|(a, b)| a * b)
        .sum();
    let d_x = d_norm
        .iter()
        .zip(&cache.normalized)
        .map(|(dn, xh)| cache.inv_std / n * (n * dn - sum_dn - xh * sum_dn_xh))
        .collect();
    let d_gain = grad_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, xh)| g * xh)
        .collect();
    (d_x, d_gain, grad_out.to_vec())
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given its output (zero where the output is zero).
pub fn relu_backward(output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Gradient through the logistic function given its output.
pub fn sigmoid_backward(output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect()
}

fn conv_shapes(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<[usize; 6]> {
    if input.rank() != 3 || kernels.rank() != 4 || bias.rank() != 1 {
        return Err(Error::dim(format!(
            "conv2d_valid: input {:?}, kernels {:?}, bias {:?}",
            input.shape(),
            kernels.shape(),
            bias.shape()
        )));
    }
    let [c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let ks = kernels.shape();
    let (c_out, k) = (ks[0], ks[2]);
    if ks[1] != c_in || ks[3] != k || bias.shape()[0] != c_out {
        return Err(Error::dim(format!(
            "conv2d_valid: kernels {ks:?} incompatible with input {:?} / bias {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    if h < k || w < k {
        return Err(Error::dim(format!(
            "conv2d_valid: input {h}x{w} smaller than {k}x{k} kernel"
        )));
    }
    Ok([c_in, h, w, c_out, k, 0])
}

/// Valid (unpadded) stride-1 cross-correlation. `kernels` is
/// `[C_out × C_in × k × k]`; the default spatial stack uses `k = 5`.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c_in, h, w, c_out, k, _] = conv_shapes(input, kernels, bias)?;
    let (ho, wo) = (h - k + 1, w - k + 1);
    let (x, kd) = (input.data(), kernels.data());
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(bias.data()[co]);
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kd[((co * c_in + ci) * k + ky) * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..ho {
                        let src = &xin[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                        let dst = &mut plane[y * wo..(y + 1) * wo];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c_out, ho, wo], out))
}

/// Gradients of [`conv2d_valid`] as `(d_input, d_kernels, d_bias)`.
/// `d_input` is skipped (returned as `None`) when `need_input` is false.
pub fn conv2d_valid_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let c_out = kernels.shape()[0];
    let bias_shape = Tensor::zeros(&[c_out]);
    let [c_in, h, w, _, k, _] = conv_shapes(input, kernels, &bias_shape)?;
    let (ho, wo) = (h - k + 1, w - k + 1);
    grad_out.expect_shape("conv2d_valid grad", &[c_out, ho, wo])?;
    let (x, kd, g) = (input.data(), kernels.data(), grad_out.data());
    let mut d_k = vec![0.0; kd.len()];
    let mut d_b = vec![0.0; c_out];
    let mut d_x = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    for co in 0..c_out {
        let gp = &g[co * ho * wo..(co + 1) * ho * wo];
        d_b[co] = gp.iter().sum();
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let kidx = ((co * c_in + ci) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..ho {
                        let src = &xin[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                        let gr = &gp[y * wo..(y + 1) * wo];
                        acc += dot(src, gr);
                    }
                    d_k[kidx] += acc;
                    if need_input {
                        let kv = kd[kidx];
                        if kv == 0.0 {
                            continue;
                        }
                        let dxin = &mut d_x[ci * h * w..(ci + 1) * h * w];
                        for y in 0..ho {
                            let dst = &mut dxin[(y + ky) * w + kx..(y + ky) * w + kx + wo];
                            let gr = &gp[y * wo..(y + 1) * wo];
                            for (d, gv) in dst.iter_mut().zip(gr) {
                                *d += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    let d_input = need_input.then(|| Tensor::from_parts(input.shape().to_vec(), d_x));
    Ok((
        d_input,
        Tensor::from_parts(kernels.shape().to_vec(), d_k),
        Tensor::from_parts(vec![c_out], d_b),
    ))
}

/// 2×2 non-overlapping max pooling. Also returns, for every output cell,
/// the flat input index that won (first maximum in row-major window order).
pub fn maxpool2_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::dim(format!("maxpool2 expects C×H×W, got {:?}", input.shape())));
    }
    let [c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("maxpool2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = ch * h * w;
                let cands = [
                    base + 2 * y * w + 2 * xo,
                    base + 2 * y * w + 2 * xo + 1,
                    base + (2 * y + 1) * w + 2 * xo,
                    base + (2 * y + 1) * w + 2 * xo + 1,
                ];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, ho, wo], out), idx))
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    maxpool2_with_indices(input).map(|(t, _)| t)
}

pub fn maxpool2_backward(input_shape: &[usize], indices: &[usize], grad_out: &[f64]) -> Tensor {
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out) {
        dd[i] += g;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::{finite_diff_check, FnObjective};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let v = t(&[3, 1], &[1.0, -2.0, 3.5]);
        assert_eq!(matmul(&Tensor::identity(3), &v).unwrap(), v);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(matches!(matmul(&a, &v), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        for c in [-1e3, 0.0, 7.25, 1e300] {
            assert_eq!(softmax(&[c; 4]).unwrap(), vec![0.25; 4]);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0, 1.0];
        let zeros = [0.0, 0.0];
        let tiny = 1e-14;
        let (y, _) = layer_norm_forward(&[1.0, -1.0], &ones, &zeros, tiny).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let (y, _) = layer_norm_forward(&[2.0, 0.0], &ones, &zeros, tiny).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let (y, _) =
            layer_norm_forward(&[3.0; 3], &[1.0; 3], &[0.5, -2.0, 4.0], LAYER_NORM_EPS).unwrap();
        assert_eq!(y, vec![0.5, -2.0, 4.0]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(relu(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn conv_examples() {
        let zero = Tensor::zeros(&[2, 7, 7]);
        let k = Tensor::filled(&[3, 2, 5, 5], 0.3);
        let out = conv2d_valid(&zero, &k, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let ones = Tensor::filled(&[1, 5, 5], 1.0);
        let k1 = Tensor::filled(&[1, 1, 5, 5], 1.0);
        let out = conv2d_valid(&ones, &k1, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[25.0]);

        // Impulse at the center of a 9x9 input: the 5x5 output is the kernel
        // rotated by 180 degrees, which pins the cross-correlation orientation.
        let mut delta = Tensor::zeros(&[1, 9, 9]);
        delta.data_mut()[4 * 9 + 4] = 1.0;
        let kern = Tensor::new(vec![1, 1, 5, 5], (0..25).map(f64::from).collect()).unwrap();
        let out = conv2d_valid(&delta, &kern, &Tensor::zeros(&[1])).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(out.data()[y * 5 + x], kern.data()[(4 - y) * 5 + (4 - x)]);
            }
        }

        assert!(conv2d_valid(&Tensor::zeros(&[1, 4, 8]), &k1, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let c = Tensor::filled(&[2, 4, 6], 1.5);
        assert!(maxpool2(&c).unwrap().data().iter().all(|&v| v == 1.5));
        assert_eq!(maxpool2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(), &[4.0]);
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let out = maxpool2(&t(&[1, 4, 4], &checker)).unwrap();
        assert_eq!(out.data(), &[1.0; 4]);
        assert!(maxpool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    fn seeded(n: usize, seed: u64) -> Vec<f64> {
        // Small LCG keeps these unit tests free of RNG crate details.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_and_pool_gradients_match_finite_differences() {
        let input = Tensor::new(vec![2, 8, 8], seeded(128, 1)).unwrap();
        let kshape = [3usize, 2, 3, 3];
        let nk = kshape.iter().product::<usize>();
        let weights = seeded(nk + 3, 2);
        let probe = seeded(3 * 3 * 3, 3);
        let loss = |theta: &[f64]| -> (f64, Vec<f64>) {
            let k = Tensor::new(kshape.to_vec(), theta[..nk].to_vec()).unwrap();
            let b = Tensor::new(vec![3], theta[nk..].to_vec()).unwrap();
            let conv = conv2d_valid(&input, &k, &b).unwrap();
            let act = relu(&conv);
            let (pooled, idx) = maxpool2_with_indices(&act).unwrap();
            let l = dot(pooled.data(), &probe);
            let d_act = maxpool2_backward(act.shape(), &idx, &probe);
            let d_conv = relu_backward(act.data(), d_act.data());
            let d_conv = Tensor::from_parts(conv.shape().to_vec(), d_conv);
            let (_, dk, db) = conv2d_valid_backward(&input, &k, &d_conv, false).unwrap();
            let mut g = dk.into_data();
            g.extend(db.into_data());
            (l, g)
        };
        let report = finite_diff_check(&mut FnObjective(loss), &weights, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert_eq!(report.parameter_count, nk + 3);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let kernels = Tensor::new(vec![2, 1, 3, 3], seeded(18, 4)).unwrap();
        let bias = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let probe = seeded(2 * 4 * 4, 5);
        let loss = |theta: &[f64]| -> (f64, Vec<f64>) {
            let x = Tensor::new(vec![1, 6, 6], theta.to_vec()).unwrap();
            let y = conv2d_valid(&x, &kernels, &bias).unwrap();
            let l = dot(y.data(), &probe);
            let g = Tensor::from_parts(y.shape().to_vec(), probe.clone());
            let (dx, _, _) = conv2d_valid_backward(&x, &kernels, &g, true).unwrap();
            (l, dx.unwrap().into_data())
        };
        let report = finite_diff_check(&mut FnObjective(loss), &seeded(36, 6), 1e-4).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_and_softmax_gradients_match_finite_differences() {
        let d = 6;
        let probe = seeded(d, 7);
        let loss = |theta: &[f64]| -> (f64, Vec<f64>) {
            let (x, rest) = theta.split_at(d);
            let (gain, bias) = rest.split_at(d);
            let (y, cache) = layer_norm_forward(x, gain, bias, LAYER_NORM_EPS).unwrap();
            let s = softmax(&y).unwrap();
            let l = dot(&s, &probe);
            let dy = softmax_backward(&s, &probe);
            let (dx, dg, db) = layer_norm_backward(&cache, gain, &dy);
            let mut g = dx;
            g.extend(dg);
            g.extend(db);
            (l, g)
        };
        let theta = seeded(3 * d, 8);
        let report = finite_diff_check(&mut FnObjective(loss), &theta, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let loss = |theta: &[f64]| -> (f64, Vec<f64>) {
            let x = Tensor::vector(theta.to_vec()).unwrap();
            let s = sigmoid(&x);
            let l: f64 = s.data().iter().map(|v| v * v).sum();
            let up: Vec<f64> = s.data().iter().map(|v| 2.0 * v).collect();
            (l, sigmoid_backward(s.data(), &up))
        };
        let report = finite_diff_check(&mut FnObjective(loss), &seeded(5, 9), 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
