//! Small numeric building blocks shared by the forward and backward passes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub const LN_EPS: f64 = 1e-10;

/// Sinusoidal relative time encoding, one row per time step:
/// `TE[t, 2i] = sin(t / 10000^(2i/d_model))`, `TE[t, 2i+1] = cos(same)`.
pub fn temporal_encoding(rows: usize, d_model: usize) -> DMatrix<f64> {
    assert!(d_model % 2 == 0, "temporal encoding needs an even d_model");
    let mut te = DMatrix::<f64>::zeros(rows, d_model);
    for t in 0..rows {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            te[(t, 2 * i)] = angle.sin();
            te[(t, 2 * i + 1)] = angle.cos();
        }
    }
    te
}

pub fn softmax_vec(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let exps = z.map(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// d(softmax)/d(logits) applied to an upstream gradient:
/// `dz = p .* (dp - <p, dp>)`.
pub fn softmax_backward(p: &DVector<f64>, dp: &DVector<f64>) -> DVector<f64> {
    let inner = p.dot(dp);
    DVector::from_fn(p.len(), |i, _| p[i] * (dp[i] - inner))
}

/// Row-wise softmax of a score matrix.
pub fn softmax_rows(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = scores.clone();
    for r in 0..out.nrows() {
        let row_max = out.row(r).max();
        let mut sum = 0.0;
        for c in 0..out.ncols() {
            let e = (out[(r, c)] - row_max).exp();
            out[(r, c)] = e;
            sum += e;
        }
        for c in 0..out.ncols() {
            out[(r, c)] /= sum;
        }
    }
    out
}

pub fn softmax_rows_backward(p: &DMatrix<f64>, dp: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(p.nrows(), p.ncols());
    for r in 0..p.nrows() {
        let mut inner = 0.0;
        for c in 0..p.ncols() {
            inner += p[(r, c)] * dp[(r, c)];
        }
        for c in 0..p.ncols() {
            out[(r, c)] = p[(r, c)] * (dp[(r, c)] - inner);
        }
    }
    out
}

/// Row-wise layer normalization cache: normalized rows pre-affine plus the
/// inverse standard deviation per row.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: DMatrix<f64>,
    pub inv_std: DVector<f64>,
}

pub fn layer_norm(
    x: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    beta: &DMatrix<f64>,
) -> (DMatrix<f64>, LayerNormCache) {
    let n = x.nrows();
    let d = x.ncols();
    let mut xhat = DMatrix::<f64>::zeros(n, d);
    let mut inv_std = DVector::<f64>::zeros(n);
    let mut out = DMatrix::<f64>::zeros(n, d);
    for r in 0..n {
        let mean = x.row(r).sum() / d as f64;
        let mut var = 0.0;
        for c in 0..d {
            let dv = x[(r, c)] - mean;
            var += dv * dv;
        }
        var /= d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..d {
            xhat[(r, c)] = (x[(r, c)] - mean) * istd;
            out[(r, c)] = gamma[(c, 0)] * xhat[(r, c)] + beta[(c, 0)];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Backward through layer norm; accumulates parameter gradients and returns
/// the input gradient.
pub fn layer_norm_backward(
    dy: &DMatrix<f64>,
    cache: &LayerNormCache,
    gamma: &DMatrix<f64>,
    dgamma: &mut DMatrix<f64>,
    dbeta: &mut DMatrix<f64>,
) -> DMatrix<f64> {
    let n = dy.nrows();
    let d = dy.ncols();
    let mut dx = DMatrix::<f64>::zeros(n, d);
    for r in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let g = dy[(r, c)];
            dgamma[(c, 0)] += g * cache.xhat[(r, c)];
            dbeta[(c, 0)] += g;
            let dxhat = g * gamma[(c, 0)];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * cache.xhat[(r, c)];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let dxhat = dy[(r, c)] * gamma[(c, 0)];
            dx[(r, c)] =
                cache.inv_std[r] * (dxhat - mean_dxhat - cache.xhat[(r, c)] * mean_dxhat_xhat);
        }
    }
    dx
}

pub fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

/// Inverted dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let keep = 1.0 - p;
    DMatrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            1.0 / keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn temporal_encoding_values() {
        let te = temporal_encoding(4, 8);
        // t = 0: sin components zero, cos components one.
        for i in 0..4 {
            assert_relative_eq!(te[(0, 2 * i)], 0.0);
            assert_relative_eq!(te[(0, 2 * i + 1)], 1.0);
        }
        assert_relative_eq!(te[(1, 0)], 1.0f64.sin(), epsilon = 1e-12);
        assert!(te.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let scores = DMatrix::from_fn(5, 7, |_, _| rng.gen_range(-3.0..3.0));
        let p = softmax_rows(&scores);
        for r in 0..5 {
            assert_relative_eq!(p.row(r).sum(), 1.0, epsilon = 1e-12);
            assert!(p.row(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(6, 16, |_, _| rng.gen_range(-2.0..2.0));
        let gamma = DMatrix::from_element(16, 1, 1.0);
        let beta = DMatrix::zeros(16, 1);
        let (y, _) = layer_norm(&x, &gamma, &beta);
        for r in 0..6 {
            let mean = y.row(r).sum() / 16.0;
            let var = y.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let m = dropout_mask(50, 50, 0.2, &mut rng);
        let kept: Vec<f64> = m.iter().copied().filter(|v| *v != 0.0).collect();
        assert!(kept.iter().all(|v| (*v - 1.25).abs() < 1e-12));
        let frac = kept.len() as f64 / 2500.0;
        assert!((frac - 0.8).abs() < 0.05, "kept fraction {frac}");
    }
}
