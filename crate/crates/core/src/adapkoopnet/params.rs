//! Model hyperparameters and the named parameter tree.

use super::ops::temporal_encoding;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every encoding (also the lifted dimension d).
    pub d_model: usize,
    pub attention_heads: usize,
    /// Per-head attention dimension, independent of d_model and head count.
    pub d_att: usize,
    /// Feedforward hidden width.
    pub d_ff: usize,
    pub scenario_count: usize,
    /// Context rows P (current step plus P-1 past steps).
    pub context_rows: usize,
    /// Prediction horizon F.
    pub horizon: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Driving-characteristics path present (false for the ablated variant).
    pub dc_path: bool,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn full() -> Self {
        Self {
            d_model: 128,
            attention_heads: 4,
            d_att: 64,
            d_ff: 512,
            scenario_count: 3,
            context_rows: 31,
            horizon: 15,
            encoder_layers: 3,
            dropout: 0.2,
            batch_size: 256,
            max_epochs: 25,
            learning_rate: 1e-5,
            lr_decay: 0.6,
            dc_path: true,
        }
    }

    /// Same structure with every layer width scaled (0.5 gives the S
    /// variant).
    pub fn scaled_width(mut self, factor: f64) -> Self {
        let scale = |v: usize| ((v as f64 * factor).round() as usize).max(2) & !1usize;
        self.d_model = scale(self.d_model);
        self.d_att = ((self.d_att as f64 * factor).round() as usize).max(1);
        self.d_ff = ((self.d_ff as f64 * factor).round() as usize).max(2);
        self
    }

    /// Ablated variant without the driving-characteristics path.
    pub fn without_dc_path(mut self) -> Self {
        self.dc_path = false;
        self
    }

    /// Small configuration for fast tests and desk-scale training.
    pub fn desk() -> Self {
        Self {
            d_model: 8,
            attention_heads: 2,
            d_att: 8,
            d_ff: 32,
            scenario_count: 3,
            context_rows: 8,
            horizon: 4,
            encoder_layers: 3,
            dropout: 0.2,
            batch_size: 64,
            max_epochs: 30,
            learning_rate: 2e-3,
            lr_decay: 0.9,
            dc_path: true,
        }
    }

    pub fn gate_input_dim(&self) -> usize {
        if self.dc_path {
             2 * self.d_model
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        if self.d_model % 2 != 0 {
            return Err(crate::error::CoreError::InvalidParameter(
                "d_model must be even for the temporal encoding".into(),
            ));
        }
        if self.d_model == 0
            || self.attention_heads == 0
            || self.d_att == 0
            || self.d_ff == 0
            || self.scenario_count == 0
            || self.context_rows == 0
            || self.horizon == 0
            || self.encoder_layers == 0
        {
            return Err(crate::error::CoreError::InvalidParameter(
                "model dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::error::CoreError::InvalidParameter(
                "dropout must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One attention block: multi-head self-attention with residual + layer norm
/// followed by a position-wise feedforward with residual + layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlockParams {
    pub wq: Vec<DMatrix<f64>>,
    pub wk: Vec<DMatrix<f64>>,
    pub wv: Vec<DMatrix<f64>>,
    pub w_out: DMatrix<f64>,
    pub ln1_gamma: DMatrix<f64>,
    pub ln1_beta: DMatrix<f64>,
    pub w_ff1: DMatrix<f64>,
    pub b_ff1: DMatrix<f64>,
    pub w_ff2: DMatrix<f64>,
    pub b_ff2: DMatrix<f64>,
    pub ln2_gamma: DMatrix<f64>,
    pub ln2_beta: DMatrix<f64>,
}

impl AttnBlockParams {
    fn empty() -> Self {
        Self {
            wq: Vec::new(),
            wk: Vec::new(),
            wv: Vec::new(),
            w_out: DMatrix::zeros(0, 0),
            ln1_gamma: DMatrix::zeros(0, 0),
            ln1_beta: DMatrix::zeros(0, 0),
            w_ff1: DMatrix::zeros(0, 0),
            b_ff1: DMatrix::zeros(0, 0),
            w_ff2: DMatrix::zeros(0, 0),
            b_ff2: DMatrix::zeros(0, 0),
            ln2_gamma: DMatrix::zeros(0, 0),
            ln2_beta: DMatrix::zeros(0, 0),
        }
    }

    fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let dm = cfg.d_model;
        let da = cfg.d_att;
        let h = cfg.attention_heads;
        Self {
            wq: (0..h).map(|_| uniform_fan_in(da, dm, rng)).collect(),
            wk: (0..h).map(|_| uniform_fan_in(da, dm, rng)).collect(),
            wv: (0..h).map(|_| uniform_fan_in(da, dm, rng)).collect(),
            w_out: uniform_fan_in(dm, h * da, rng),
            ln1_gamma: DMatrix::from_element(dm, 1, 1.0),
            ln1_beta: DMatrix::zeros(dm, 1),
            w_ff1: uniform_fan_in(cfg.d_ff, dm, rng),
            b_ff1: DMatrix::zeros(cfg.d_ff, 1),
            w_ff2: uniform_fan_in(dm, cfg.d_ff, rng),
            b_ff2: DMatrix::zeros(dm, 1),
            ln2_gamma: DMatrix::from_element(dm, 1, 1.0),
            ln2_beta: DMatrix::zeros(dm, 1),
        }
    }

    fn flatten<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a DMatrix<f64>)>) {
        for (i, m) in self.wq.iter().enumerate() {
            out.push((format!("{prefix}.wq{i}"), m));
        }
        for (i, m) in self.wk.iter().enumerate() {
            out.push((format!("{prefix}.wk{i}"), m));
        }
        for (i, m) in self.wv.iter().enumerate() {
            out.push((format!("{prefix}.wv{i}"), m));
        }
        out.push((format!("{prefix}.w_out"), &self.w_out));
        out.push((format!("{prefix}.ln1_gamma"), &self.ln1_gamma));
        out.push((format!("{prefix}.ln1_beta"), &self.ln1_beta));
        out.push((format!("{prefix}.w_ff1"), &self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &self.b_ff2));
        out.push((format!("{prefix}.ln2_gamma"), &self.ln2_gamma));
        out.push((format!("{prefix}.ln2_beta"), &self.ln2_beta));
    }

    fn flatten_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut DMatrix<f64>)>) {
        for (i, m) in self.wq.iter_mut().enumerate() {
            out.push((format!("{prefix}.wq{i}"), m));
        }
        for (i, m) in self.wk.iter_mut().enumerate() {
            out.push((format!("{prefix}.wk{i}"), m));
        }
        for (i, m) in self.wv.iter_mut().enumerate() {
            out.push((format!("{prefix}.wv{i}"), m));
        }
        out.push((format!("{prefix}.w_out"), &mut self.w_out));
        out.push((format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma));
        out.push((format!("{prefix}.ln1_beta"), &mut self.ln1_beta));
        out.push((format!("{prefix}.w_ff1"), &mut self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &mut self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &mut self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &mut self.b_ff2));
        out.push((format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma));
        out.push((format!("{prefix}.ln2_beta"), &mut self.ln2_beta));
    }
}

/// Every learnable tensor, vectors stored as n x 1 matrices. The Koopman
/// blocks `koop_a`, `koop_b` and the decoder `w_dec` are bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w_ie: DMatrix<f64>,
    pub b_ie: DMatrix<f64>,
    pub dti: AttnBlockParams,
    pub se_token: DMatrix<f64>,
    pub dsr: AttnBlockParams,
    pub w_ds: DMatrix<f64>,
    pub ds_fc: DMatrix<f64>,
    pub ese_emb_w: DMatrix<f64>,
    pub ese_emb_b: DMatrix<f64>,
    pub ese_w: Vec<DMatrix<f64>>,
    pub ese_b: Vec<DMatrix<f64>>,
    pub gate_w_value: DMatrix<f64>,
    pub gate_b_value: DMatrix<f64>,
    pub gate_w_gate: DMatrix<f64>,
    pub gate_b_gate: DMatrix<f64>,
    pub koop_a: DMatrix<f64>,
    pub koop_b: DMatrix<f64>,
    pub w_dec: DMatrix<f64>,
}

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dm = cfg.d_model;
        let (dti, se_token, dsr, w_ds, ds_fc) = if cfg.dc_path {
            // The scenario token starts from the temporal-encoding row one
            // past the context and is refined by training.
            let te = temporal_encoding(cfg.context_rows + 1, dm);
            let se = DMatrix::from_fn(dm, 1, |i, _| te[(cfg.context_rows, i)]);
            (
                AttnBlockParams::init(cfg, &mut rng),
                se,
                AttnBlockParams::init(cfg, &mut rng),
                uniform_fan_in(cfg.scenario_count, dm, &mut rng),
                uniform_fan_in(dm, cfg.scenario_count, &mut rng),
            )
        } else {
            (
                AttnBlockParams::empty(),
                DMatrix::zeros(0, 0),
                AttnBlockParams::empty(),
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, 0),
            )
        };
        // Near-identity A keeps the F-step evolution loss finite at the
        // start; a random spectral radius above one makes it explode.
        let mut koop_a = uniform_fan_in(dm, dm, &mut rng) * 0.02;
        for i in 0..dm {
            koop_a[(i, i)] += 1.0;
        }
        Self {
            w_ie: uniform_fan_in(dm, crate::dataio::NUM_FEATURES, &mut rng),
            b_ie: DMatrix::zeros(dm, 1),
            dti,
            se_token,
            dsr,
            w_ds,
            ds_fc,
            ese_emb_w: uniform_fan_in(dm, 2, &mut rng),
            ese_emb_b: DMatrix::zeros(dm, 1),
            ese_w: (0..cfg.encoder_layers)
                .map(|_| uniform_fan_in(dm, dm, &mut rng))
                .collect(),
            ese_b: (0..cfg.encoder_layers).map(|_| DMatrix::zeros(dm, 1)).collect(),
            gate_w_value: uniform_fan_in(dm, cfg.gate_input_dim(), &mut rng),
            gate_b_value: DMatrix::zeros(dm, 1),
            gate_w_gate: uniform_fan_in(dm, cfg.gate_input_dim(), &mut rng),
            gate_b_gate: DMatrix::zeros(dm, 1),
            koop_a,
            koop_b: uniform_fan_in(dm, 1, &mut rng) * 0.1,
            w_dec: uniform_fan_in(2, dm, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.flatten_mut() {
            m.fill(0.0);
        }
        out
    }

    /// Stable-ordered view of every parameter group.
    pub fn flatten(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        out.push(("w_ie".to_string(), &self.w_ie));
        out.push(("b_ie".to_string(), &self.b_ie));
        self.dti.flatten("dti", &mut out);
        if self.se_token.nrows() > 0 {
            out.push(("se_token".to_string(), &self.se_token));
        }
        self.dsr.flatten("dsr", &mut out);
        if self.w_ds.nrows() > 0 {
            out.push(("w_ds".to_string(), &self.w_ds));
        }
        if self.ds_fc.nrows() > 0 {
            out.push(("ds_fc".to_string(), &self.ds_fc));
        }
        out.push(("ese_emb_w".to_string(), &self.ese_emb_w));
        out.push(("ese_emb_b".to_string(), &self.ese_emb_b));
        for (i, m) in self.ese_w.iter().enumerate() {
            out.push((format!("ese_w{i}"), m));
        }
        for (i, m) in self.ese_b.iter().enumerate() {
            out.push((format!("ese_b{i}"), m));
        }
        out.push(("gate_w_value".to_string(), &self.gate_w_value));
        out.push(("gate_b_value".to_string(), &self.gate_b_value));
        out.push(("gate_w_gate".to_string(), &self.gate_w_gate));
        out.push(("gate_b_gate".to_string(), &self.gate_b_gate));
        out.push(("koop_a".to_string(), &self.koop_a));
        out.push(("koop_b".to_string(), &self.koop_b));
        out.push(("w_dec".to_string(), &self.w_dec));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let Params {
            w_ie,
            b_ie,
            dti,
            se_token,
            dsr,
            w_ds,
            ds_fc,
            ese_emb_w,
            ese_emb_b,
            ese_w,
            ese_b,
            gate_w_value,
            gate_b_value,
            gate_w_gate,
            gate_b_gate,
            koop_a,
            koop_b,
            w_dec,
        } = self;
        let mut out: Vec<(String, &mut DMatrix<f64>)> = Vec::new();
        out.push(("w_ie".to_string(), w_ie));
        out.push(("b_ie".to_string(), b_ie));
        dti.flatten_mut("dti", &mut out);
        if se_token.nrows() > 0 {
            out.push(("se_token".to_string(), se_token));
        }
        dsr.flatten_mut("dsr", &mut out);
        if w_ds.nrows() > 0 {
            out.push(("w_ds".to_string(), w_ds));
        }
        if ds_fc.nrows() > 0 {
            out.push(("ds_fc".to_string(), ds_fc));
        }
        out.push(("ese_emb_w".to_string(), ese_emb_w));
        out.push(("ese_emb_b".to_string(), ese_emb_b));
        for (i, m) in ese_w.iter_mut().enumerate() {
            out.push((format!("ese_w{i}"), m));
        }
        for (i, m) in ese_b.iter_mut().enumerate() {
            out.push((format!("ese_b{i}"), m));
        }
        out.push(("gate_w_value".to_string(), gate_w_value));
        out.push(("gate_b_value".to_string(), gate_b_value));
        out.push(("gate_w_gate".to_string(), gate_w_gate));
        out.push(("gate_b_gate".to_string(), gate_b_gate));
        out.push(("koop_a".to_string(), koop_a));
        out.push(("koop_b".to_string(), koop_b));
        out.push(("w_dec".to_string(), w_dec));
        out
    }

    /// self += other * alpha over every group.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        let theirs = other.flatten();
        for ((_, mine), (_, them)) in self.flatten_mut().into_iter().zip(theirs) {
            *mine += them * alpha;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_orders_match() {
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 1);
        let names: Vec<String> = p.flatten().into_iter().map(|(n, _)| n).collect();
        let mut p2 = p.clone();
        let names_mut: Vec<String> = p2.flatten_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"koop_a".to_string()));
        assert!(names.contains(&"dti.wq0".to_string()));
    }

    #[test]
    fn ablated_variant_drops_dc_groups() {
        let cfg = ModelConfig::desk().without_dc_path();
        let p = Params::init(&cfg, 1);
        let names: Vec<String> = p.flatten().into_iter().map(|(n, _)| n).collect();
        assert!(!names.iter().any(|n| n.starts_with("dti") || n.starts_with("dsr")));
        assert!(!names.contains(&"ds_fc".to_string()));
        assert_eq!(p.gate_w_value.ncols(), cfg.d_model);
    }

    #[test]
    fn s_variant_halves_widths() {
        let full = ModelConfig::full();
        let s = ModelConfig::full().scaled_width(0.5);
        assert_eq!(s.d_model, full.d_model / 2);
        assert_eq!(s.d_att, full.d_att / 2);
        assert_eq!(s.d_ff, full.d_ff / 2);
        assert_eq!(s.attention_heads, full.attention_heads);
    }

    #[test]
    fn koopman_block_initialized_near_identity() {
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 7);
        let dev = (&p.koop_a - DMatrix::<f64>::identity(cfg.d_model, cfg.d_model)).abs().max();
        assert!(dev < 0.05, "deviation {dev}");
    }
}
