//! Three-part training loss and its gradient.
//!
//! For one window anchored at T with horizon F:
//!   recon:     mean over f = 0..=F of the (v, h) error after encode+decode
//!              at each ground-truth offset (teacher forcing),
//!   pred:      mean over f = 1..=F of the decoded multi-step prediction
//!              error,
//!   evolution: lifted-space error between the F-step evolved state and the
//!              state encoded at T+F.
//! The weighted sum uses weights rebalanced per epoch from loss-ratio
//! history (dynamic weight averaging).

use super::encoder::{encode_backward, encode_forward, EncodeCache, Grads};
use super::params::{ModelConfig, Params};
use crate::dataio::{Normalization, SampleWindow};
use crate::error::{CoreError, Result};
use nalgebra::DVector;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub pred: f64,
    pub evolution: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.alpha_recon * self.recon + w.alpha_pred * self.pred + w.alpha_evolution * self.evolution
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.recon, self.pred, self.evolution]
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.pred.is_finite() && self.evolution.is_finite()
    }
}

/// Loss-component weights; the DWA update keeps their sum at 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_recon: f64,
    pub alpha_pred: f64,
    pub alpha_evolution: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_recon: 1.0,
            alpha_pred: 1.0,
            alpha_evolution: 1.0,
        }
    }
}

const DWA_TEMPERATURE: f64 = 2.0;

/// Dynamic weight averaging from per-epoch component history: with fewer
/// than two recorded epochs the weights stay uniform, otherwise
/// `alpha_k = 3 * softmax_k(r_k / tau)` with `r_k` the ratio of the last two
/// epoch losses.
pub fn dwa_update(history: &[[f64; 3]]) -> LossWeights {
    if history.len() < 2 {
        return LossWeights::default();
    }
    let last = history[history.len() - 1];
    let prev = history[history.len() - 2];
    let mut r = [0.0f64; 3];
    for k in 0..3 {
        r[k] = if prev[k].abs() > 1e-300 {
            last[k] / prev[k]
        } else {
            1.0
        };
    }
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = r.iter().map(|v| ((v - m) / DWA_TEMPERATURE).exp()).collect();
    let sum: f64 = exps.iter().sum();
    LossWeights {
        alpha_recon: 3.0 * exps[0] / sum,
        alpha_pred: 3.0 * exps[1] / sum,
        alpha_evolution: 3.0 * exps[2] / sum,
    }
}

fn mse2(a: &DVector<f64>, b0: f64, b1: f64) -> f64 {
    let d0 = a[0] - b0;
    let d1 = a[1] - b1;
    0.5 * (d0 * d0 + d1 * d1)
}

/// Loss components for one window; when `grads` is given, accumulates
/// d(weighted loss)/d(params) scaled by `scale` (callers pass 1/batch).
pub fn sample_loss(
    cfg: &ModelConfig,
    params: &Params,
    norm: &Normalization,
    window: &SampleWindow,
    weights: &LossWeights,
    scale: f64,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
    mut grads: Option<&mut Grads>,
) -> Result<LossBreakdown> {
    if window.context_rows != cfg.context_rows || window.horizon != cfg.horizon {
        return Err(CoreError::InvalidParameter(format!(
            "window shape ({}, {}) does not match model ({}, {})",
            window.context_rows, window.horizon, cfg.context_rows, cfg.horizon
        )));
    }
    let f_max = cfg.horizon;
    let dm = cfg.d_model;

    // Encode at every ground-truth offset (teacher forcing).
    let mut caches: Vec<EncodeCache> = Vec::with_capacity(f_max + 1);
    let mut es_norm: Vec<(f64, f64)> = Vec::with_capacity(f_max + 1);
    for f in 0..=f_max {
        let ctx = norm.normalize_rows(&window.context_at(f));
        let (v, h) = window.es_at(f);
        let es = norm.normalize_es(v, h);
        let dropout = dropout_rng
            .as_deref_mut()
            .map(|rng| (rng, cfg.dropout))
            .filter(|(_, p)| *p > 0.0);
        caches.push(encode_forward(cfg, params, &ctx, es, None, dropout));
        es_norm.push(es);
    }

    // Reconstruction at each offset.
    let mut recon = 0.0;
    let mut recon_out: Vec<DVector<f64>> = Vec::with_capacity(f_max + 1);
    for f in 0..=f_max {
        let y = &params.w_dec * &caches[f].s;
        recon += mse2(&y, es_norm[f].0, es_norm[f].1);
        recon_out.push(y);
    }
    recon /= (f_max + 1) as f64;

    // Multi-step evolution from the anchor state.
    let inputs: Vec<f64> = (0..f_max)
        .map(|f| norm.normalize_velocity(window.lead_velocity_at(f)))
        .collect();
    let states = crate::edmd::evolve(&params.koop_a, &params.koop_b, &caches[0].s, &inputs);

    let mut pred = 0.0;
    let mut pred_out: Vec<DVector<f64>> = Vec::with_capacity(f_max);
    for f in 1..=f_max {
        let y = &params.w_dec * &states[f - 1];
        pred += mse2(&y, es_norm[f].0, es_norm[f].1);
        pred_out.push(y);
    }
    pred /= f_max as f64;

    let evo_diff = &states[f_max - 1] - &caches[f_max].s;
    let evolution = evo_diff.norm_squared() / dm as f64;

    let breakdown = LossBreakdown {
        recon,
        pred,
        evolution,
    };

    let Some(g) = grads.as_deref_mut() else {
        return Ok(breakdown);
    };

    let mut ds_enc: Vec<DVector<f64>> = vec![DVector::zeros(dm); f_max + 1];

    // Reconstruction path.
    let w_recon = weights.alpha_recon * scale / (f_max + 1) as f64;
    for f in 0..=f_max {
        let dy = DVector::from_row_slice(&[
            (recon_out[f][0] - es_norm[f].0) * w_recon,
            (recon_out[f][1] - es_norm[f].1) * w_recon,
        ]);
        g.w_dec += &dy * caches[f].s.transpose();
        ds_enc[f] += params.w_dec.transpose() * &dy;
    }

    // Prediction path: gradients on the evolved states.
    let mut ds_states: Vec<DVector<f64>> = vec![DVector::zeros(dm); f_max];
    let w_pred = weights.alpha_pred * scale / f_max as f64;
    for f in 1..=f_max {
        let dy = DVector::from_row_slice(&[
            (pred_out[f - 1][0] - es_norm[f].0) * w_pred,
            (pred_out[f - 1][1] - es_norm[f].1) * w_pred,
        ]);
        g.w_dec += &dy * states[f - 1].transpose();
        ds_states[f - 1] += params.w_dec.transpose() * &dy;
    }

    // Evolution-consistency path.
    let w_evo = 2.0 * weights.alpha_evolution * scale / dm as f64;
    ds_states[f_max - 1] += &evo_diff * w_evo;
    ds_enc[f_max] -= &evo_diff * w_evo;

    // Backpropagate through the recurrence s_f = A s_{f-1} + B u_{f-1}.
    let mut carry = DVector::<f64>::zeros(dm);
    for f in (1..=f_max).rev() {
        carry += &ds_states[f - 1];
        let prev_state = if f >= 2 { &states[f - 2] } else { &caches[0].s };
        g.koop_a += &carry * prev_state.transpose();
        g.koop_b += &carry * inputs[f - 1];
        carry = params.koop_a.transpose() * &carry;
    }
    ds_enc[0] += &carry;

    // Encoder backward at every offset.
    for f in 0..=f_max {
        encode_backward(cfg, params, &caches[f], &ds_enc[f], g);
    }

    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dwa_bootstrap_and_equal_rates() {
        let w = dwa_update(&[]);
        assert_eq!(w, LossWeights::default());
        let w = dwa_update(&[[1.0, 2.0, 3.0]]);
        assert_eq!(w, LossWeights::default());
        // Equal decay rates keep the weights uniform.
        let w = dwa_update(&[[1.0, 2.0, 3.0], [0.5, 1.0, 1.5]]);
        assert_relative_eq!(w.alpha_recon, 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.alpha_pred, 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.alpha_evolution, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dwa_boosts_the_stagnating_component() {
        // recon stalls while the others halve.
        let w = dwa_update(&[[1.0, 1.0, 1.0], [1.0, 0.5, 0.5]]);
        assert!(w.alpha_recon > w.alpha_pred);
        assert!(w.alpha_recon > w.alpha_evolution);
        assert_relative_eq!(
            w.alpha_recon + w.alpha_pred + w.alpha_evolution,
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn alpha_selects_components() {
        use crate::adapkoopnet::params::{ModelConfig, Params};
        let cfg = ModelConfig::desk();
        let params = Params::init(&cfg, 3);
        let norm = Normalization::identity();
        let window = crate::adapkoopnet::test_support::toy_window(&cfg, 11);
        let parts = sample_loss(
            &cfg,
            &params,
            &norm,
            &window,
            &LossWeights::default(),
            1.0,
            None,
            None,
        )
        .unwrap();
        let only_recon = LossWeights {
            alpha_recon: 1.0,
            alpha_pred: 0.0,
            alpha_evolution: 0.0,
        };
        assert_relative_eq!(parts.weighted(&only_recon), parts.recon, epsilon = 1e-15);
    }

    /// Hand-built one-dimensional check: identity-like encoder is not
    /// reachable through the full architecture, so instead freeze a model
    /// and verify the loss formula against a manual recomputation.
    #[test]
    fn loss_matches_manual_recomputation() {
        use crate::adapkoopnet::params::{ModelConfig, Params};
        let cfg = ModelConfig::desk();
        let params = Params::init(&cfg, 5);
        let norm = Normalization::identity();
        let window = crate::adapkoopnet::test_support::toy_window(&cfg, 13);
        let parts = sample_loss(
            &cfg,
            &params,
            &norm,
            &window,
            &LossWeights::default(),
            1.0,
            None,
            None,
        )
        .unwrap();

        // Manual: encode every offset, decode, evolve.
        let f_max = cfg.horizon;
        let mut caches = Vec::new();
        for f in 0..=f_max {
            let ctx = norm.normalize_rows(&window.context_at(f));
            let (v, h) = window.es_at(f);
            caches.push(super::encode_forward(&cfg, &params, &ctx, (v, h), None, None));
        }
        let mut recon = 0.0;
        for f in 0..=f_max {
            let y = &params.w_dec * &caches[f].s;
            let (v, h) = window.es_at(f);
            recon += 0.5 * ((y[0] - v).powi(2) + (y[1] - h).powi(2));
        }
        recon /= (f_max + 1) as f64;
        assert_relative_eq!(parts.recon, recon, epsilon = 1e-12);

        let inputs: Vec<f64> = (0..f_max).map(|f| window.lead_velocity_at(f)).collect();
        let states = crate::edmd::evolve(&params.koop_a, &params.koop_b, &caches[0].s, &inputs);
        let evo = (&states[f_max - 1] - &caches[f_max].s).norm_squared() / cfg.d_model as f64;
        assert_relative_eq!(parts.evolution, evo, epsilon = 1e-12);
    }
}
