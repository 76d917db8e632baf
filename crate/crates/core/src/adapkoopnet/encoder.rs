//! Encoder forward pass with full caches and the matching hand-derived
//! backward pass.
//!
//! The pipeline per context window: input embedding + temporal encoding,
//! temporal-interaction attention block, scenario-recognition attention
//! block over [token; sequence], scenario-guided aggregation into a driving
//! characteristic, explicit-state MLP, and a gated fusion producing the
//! lifted state.

use super::ops::{
    dropout_mask, layer_norm, layer_norm_backward, relu, softmax_backward, softmax_rows,
    softmax_rows_backward, softmax_vec, temporal_encoding, LayerNormCache,
};
use super::params::{AttnBlockParams, ModelConfig, Params};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct AttnCache {
    input: DMatrix<f64>,
    q: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    /// Row-softmax probabilities, pre dropout.
    probs: Vec<DMatrix<f64>>,
    probs_mask: Vec<Option<DMatrix<f64>>>,
    concat: DMatrix<f64>,
    proj: DMatrix<f64>,
    proj_mask: Option<DMatrix<f64>>,
    ln1: LayerNormCache,
    out1: DMatrix<f64>,
    ffn_pre: DMatrix<f64>,
    ffn_hidden: DMatrix<f64>,
    ffn_out_mask: Option<DMatrix<f64>>,
    ln2: LayerNormCache,
    pub out2: DMatrix<f64>,
}

/// Gradient accumulator aliased to the parameter tree.
pub type Grads = Params;

fn maybe_mask(
    rows: usize,
    cols: usize,
    dropout: &mut Option<(&mut ChaCha20Rng, f64)>,
) -> Option<DMatrix<f64>> {
    match dropout {
        Some((rng, p)) if *p > 0.0 => Some(dropout_mask(rows, cols, *p, rng)),
        _ => None,
    }
}

fn apply_mask(x: &DMatrix<f64>, mask: &Option<DMatrix<f64>>) -> DMatrix<f64> {
    match mask {
        Some(m) => x.component_mul(m),
        None => x.clone(),
    }
}

fn attn_block_forward(
    p: &AttnBlockParams,
    input: &DMatrix<f64>,
    heads: usize,
    d_att: usize,
    dropout: &mut Option<(&mut ChaCha20Rng, f64)>,
) -> AttnCache {
    let n = input.nrows();
    let scale = 1.0 / (d_att as f64).sqrt();

    let mut q = Vec::with_capacity(heads);
    let mut k = Vec::with_capacity(heads);
    let mut v = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    let mut probs_mask = Vec::with_capacity(heads);
    let mut concat = DMatrix::<f64>::zeros(n, heads * d_att);
    for h in 0..heads {
        let qh = input * p.wq[h].transpose();
        let kh = input * p.wk[h].transpose();
        let vh = input * p.wv[h].transpose();
        let scores = (&qh * kh.transpose()) * scale;
        let ph = softmax_rows(&scores);
        let mask = maybe_mask(n, n, dropout);
        let ph_eff = apply_mask(&ph, &mask);
        let oh = &ph_eff * &vh;
        concat.view_mut((0, h * d_att), (n, d_att)).copy_from(&oh);
        q.push(qh);
        k.push(kh);
        v.push(vh);
        probs.push(ph);
        probs_mask.push(mask);
    }

    let proj = &concat * p.w_out.transpose();
    let proj_mask = maybe_mask(n, proj.ncols(), dropout);
    let res1 = apply_mask(&proj, &proj_mask) + input;
    let (out1, ln1) = layer_norm(&res1, &p.ln1_gamma, &p.ln1_beta);

    let mut ffn_pre = &out1 * p.w_ff1.transpose();
    for r in 0..n {
        for c in 0..ffn_pre.ncols() {
            ffn_pre[(r, c)] += p.b_ff1[(c, 0)];
        }
    }
    let ffn_hidden = relu(&ffn_pre);
    let mut ffn_out = &ffn_hidden * p.w_ff2.transpose();
    for r in 0..n {
        for c in 0..ffn_out.ncols() {
            ffn_out[(r, c)] += p.b_ff2[(c, 0)];
        }
    }
    let ffn_out_mask = maybe_mask(n, ffn_out.ncols(), dropout);
    let res2 = apply_mask(&ffn_out, &ffn_out_mask) + &out1;
    let (out2, ln2) = layer_norm(&res2, &p.ln2_gamma, &p.ln2_beta);

    AttnCache {
        input: input.clone(),
        q,
        k,
        v,
        probs,
        probs_mask,
        concat,
        proj,
        proj_mask,
        ln1,
        out1,
        ffn_pre,
        ffn_hidden,
        ffn_out_mask,
        ln2,
        out2,
    }
}

fn colsum_into(d: &DMatrix<f64>, acc: &mut DMatrix<f64>) {
    for c in 0..d.ncols() {
        let mut s = 0.0;
        for r in 0..d.nrows() {
            s += d[(r, c)];
        }
        acc[(c, 0)] += s;
    }
}

fn attn_block_backward(
    p: &AttnBlockParams,
    cache: &AttnCache,
    d_out: &DMatrix<f64>,
    g: &mut AttnBlockParams,
    heads: usize,
    d_att: usize,
) -> DMatrix<f64> {
    let scale = 1.0 / (d_att as f64).sqrt();

    let dres2 = layer_norm_backward(d_out, &cache.ln2, &p.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
    let dffn_out = apply_mask(&dres2, &cache.ffn_out_mask);
    let mut dout1 = dres2;

    g.w_ff2 += dffn_out.transpose() * &cache.ffn_hidden;
    colsum_into(&dffn_out, &mut g.b_ff2);
    let mut dhidden = &dffn_out * &p.w_ff2;
    for r in 0..dhidden.nrows() {
        for c in 0..dhidden.ncols() {
            if cache.ffn_pre[(r, c)] <= 0.0 {
                dhidden[(r, c)] = 0.0;
            }
        }
    }
    g.w_ff1 += dhidden.transpose() * &cache.out1;
    colsum_into(&dhidden, &mut g.b_ff1);
    dout1 += &dhidden * &p.w_ff1;

    let dres1 =
        layer_norm_backward(&dout1, &cache.ln1, &p.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
    let dproj = apply_mask(&dres1, &cache.proj_mask);
    let mut dinput = dres1;

    g.w_out += dproj.transpose() * &cache.concat;
    let dconcat = &dproj * &p.w_out;

    let n = cache.input.nrows();
    for h in 0..heads {
        let doh = dconcat.view((0, h * d_att), (n, d_att)).into_owned();
        let ph_eff = apply_mask(&cache.probs[h], &cache.probs_mask[h]);
        let dv = ph_eff.transpose() * &doh;
        let dp_eff = &doh * cache.v[h].transpose();
        let dp = apply_mask(&dp_eff, &cache.probs_mask[h]);
        let dscores = softmax_rows_backward(&cache.probs[h], &dp) * scale;
        let dq = &dscores * &cache.k[h];
        let dk = dscores.transpose() * &cache.q[h];

        g.wq[h] += dq.transpose() * &cache.input;
        g.wk[h] += dk.transpose() * &cache.input;
        g.wv[h] += dv.transpose() * &cache.input;
        dinput += &dq * &p.wq[h];
        dinput += &dk * &p.wk[h];
        dinput += &dv * &p.wv[h];
    }
    dinput
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    x_norm: DMatrix<f64>,
    ite_pre: DMatrix<f64>,
    dti: Option<AttnCache>,
    dsr: Option<AttnCache>,
    pub h_ds: DVector<f64>,
    h_ds_forced: bool,
    dcse_weights: DVector<f64>,
    dcse_proj: DVector<f64>,
    h_tc: DMatrix<f64>,
    pub dc: DVector<f64>,
    es: DVector<f64>,
    ese_pre: Vec<DVector<f64>>,
    ese_act: Vec<DVector<f64>>,
    ese_masks: Vec<Option<DMatrix<f64>>>,
    gate_in: DVector<f64>,
    gate_val: DVector<f64>,
    gate_sig: DVector<f64>,
    /// Lifted state s(T).
    pub s: DVector<f64>,
}

/// Forward encode of one normalized context window plus explicit state.
///
/// `forced_hds` replaces the scenario distribution before the aggregation
/// stage (used for scenario probing); it must already be a distribution.
pub fn encode_forward(
    cfg: &ModelConfig,
    p: &Params,
    x_norm: &DMatrix<f64>,
    es_norm: (f64, f64),
    forced_hds: Option<&DVector<f64>>,
    mut dropout: Option<(&mut ChaCha20Rng, f64)>,
) -> EncodeCache {
    debug_assert_eq!(x_norm.nrows(), cfg.context_rows);
    debug_assert_eq!(x_norm.ncols(), crate::dataio::NUM_FEATURES);
    let dm = cfg.d_model;
    let rows = cfg.context_rows;

    // Input embedding + temporal encoding.
    let mut ite_pre = x_norm * p.w_ie.transpose();
    for r in 0..rows {
        for c in 0..dm {
            ite_pre[(r, c)] += p.b_ie[(c, 0)];
        }
    }
    let te = temporal_encoding(rows, dm);
    let h_ite = relu(&ite_pre) + te;

    let (dti, dsr, h_ds, h_ds_forced, dcse_weights, dcse_proj, h_tc, dc) = if cfg.dc_path {
        let dti = attn_block_forward(&p.dti, &h_ite, cfg.attention_heads, cfg.d_att, &mut dropout);
        let mut dsr_in = DMatrix::<f64>::zeros(rows + 1, dm);
        for c in 0..dm {
            dsr_in[(0, c)] = p.se_token[(c, 0)];
        }
        dsr_in.view_mut((1, 0), (rows, dm)).copy_from(&dti.out2);
        let dsr = attn_block_forward(&p.dsr, &dsr_in, cfg.attention_heads, cfg.d_att, &mut dropout);

        let h_dsr_ds = dsr.out2.row(0).transpose();
        let h_tc = dsr.out2.rows(1, rows).into_owned();
        let (h_ds, forced) = match forced_hds {
            Some(f) => (f.clone(), true),
            None => (softmax_vec(&(&p.w_ds * &h_dsr_ds)), false),
        };
        // Scenario-guided aggregation over the context rows.
        let proj = &p.ds_fc * &h_ds; // d_model
        let scores = &h_tc * &proj; // rows
        let weights = softmax_vec(&scores);
        let dc = h_tc.transpose() * &weights;
        (
            Some(dti),
            Some(dsr),
            h_ds,
            forced,
            weights,
            proj,
            h_tc,
            dc,
        )
    } else {
        (
            None,
            None,
            DVector::zeros(0),
            false,
            DVector::zeros(0),
            DVector::zeros(0),
            DMatrix::zeros(0, dm),
            DVector::zeros(0),
        )
    };

    // Explicit-state encoder: linear embed + ReLU, then tanh layers.
    let es = DVector::from_row_slice(&[es_norm.0, es_norm.1]);
    let mut ese_pre = Vec::with_capacity(cfg.encoder_layers + 1);
    let mut ese_act = Vec::with_capacity(cfg.encoder_layers + 1);
    let mut ese_masks = Vec::with_capacity(cfg.encoder_layers + 1);
    let pre0 = &p.ese_emb_w * &es + &p.ese_emb_b;
    let mut act0 = pre0.map(|v| v.max(0.0));
    let mask0 = maybe_mask(dm, 1, &mut dropout);
    if let Some(m) = &mask0 {
        act0.component_mul_assign(&m.column(0).into_owned());
    }
    ese_pre.push(pre0);
    ese_act.push(act0);
    ese_masks.push(mask0);
    for layer in 0..cfg.encoder_layers {
        let pre = &p.ese_w[layer] * ese_act.last().unwrap() + &p.ese_b[layer];
        let mut act = pre.map(f64::tanh);
        let mask = maybe_mask(dm, 1, &mut dropout);
        if let Some(m) = &mask {
            act.component_mul_assign(&m.column(0).into_owned());
        }
        ese_pre.push(pre);
        ese_act.push(act);
        ese_masks.push(mask);
    }
    let es_enc = ese_act.last().unwrap().clone();

    // Gated fusion into the lifted state.
    let gate_in = if cfg.dc_path {
        let mut v = DVector::<f64>::zeros(2 * dm);
        v.rows_mut(0, dm).copy_from(&dc);
        v.rows_mut(dm, dm).copy_from(&es_enc);
        v
    } else {
        es_enc
    };
    let gate_val = &p.gate_w_value * &gate_in + &p.gate_b_value;
    let gate_sig = (&p.gate_w_gate * &gate_in + &p.gate_b_gate).map(|v| 1.0 / (1.0 + (-v).exp()));
    let s = gate_val.component_mul(&gate_sig);

    EncodeCache {
        x_norm: x_norm.clone(),
        ite_pre,
        dti,
        dsr,
        h_ds,
        h_ds_forced,
        dcse_weights,
        dcse_proj,
        h_tc,
        dc,
        es,
        ese_pre,
        ese_act,
        ese_masks,
        gate_in,
        gate_val,
        gate_sig,
        s,
    }
}

/// Backward from a gradient on the lifted state through the whole encoder.
pub fn encode_backward(cfg: &ModelConfig, p: &Params, cache: &EncodeCache, ds: &DVector<f64>, g: &mut Grads) {
    let dm = cfg.d_model;
    let rows = cfg.context_rows;

    // Gate.
    let dval = ds.component_mul(&cache.gate_sig);
    let dsig = ds.component_mul(&cache.gate_val);
    let dsig_pre = DVector::from_fn(dm, |i, _| {
        dsig[i] * cache.gate_sig[i] * (1.0 - cache.gate_sig[i])
    });
    g.gate_w_value += &dval * cache.gate_in.transpose();
    g.gate_b_value += &dval;
    g.gate_w_gate += &dsig_pre * cache.gate_in.transpose();
    g.gate_b_gate += &dsig_pre;
    let dgate_in = p.gate_w_value.transpose() * &dval + p.gate_w_gate.transpose() * &dsig_pre;

    let (ddc, mut dese) = if cfg.dc_path {
        (
            dgate_in.rows(0, dm).into_owned(),
            dgate_in.rows(dm, dm).into_owned(),
        )
    } else {
        (DVector::zeros(0), dgate_in)
    };

    // Explicit-state encoder.
    for layer in (0..cfg.encoder_layers).rev() {
        let act_idx = layer + 1;
        if let Some(m) = &cache.ese_masks[act_idx] {
            dese.component_mul_assign(&m.column(0).into_owned());
        }
        let pre = &cache.ese_pre[act_idx];
        let dpre = DVector::from_fn(dm, |i, _| {
            let t = pre[i].tanh();
            dese[i] * (1.0 - t * t)
        });
        g.ese_w[layer] += &dpre * cache.ese_act[act_idx - 1].transpose();
        g.ese_b[layer] += &dpre;
        dese = p.ese_w[layer].transpose() * &dpre;
    }
    if let Some(m) = &cache.ese_masks[0] {
        dese.component_mul_assign(&m.column(0).into_owned());
    }
    let dpre0 = DVector::from_fn(dm, |i, _| {
        if cache.ese_pre[0][i] > 0.0 {
            dese[i]
        } else {
            0.0
        }
    });
    g.ese_emb_w += &dpre0 * cache.es.transpose();
    g.ese_emb_b += &dpre0;

    if !cfg.dc_path {
        return;
    }

    // Scenario-guided aggregation.
    let dweights = &cache.h_tc * &ddc;
    let mut dh_tc = &cache.dcse_weights * ddc.transpose();
    let dscores = softmax_backward(&cache.dcse_weights, &dweights);
    let dproj = cache.h_tc.transpose() * &dscores;
    dh_tc += &dscores * cache.dcse_proj.transpose();
    g.ds_fc += &dproj * cache.h_ds.transpose();

    let mut dh_dsr_ds = DVector::<f64>::zeros(dm);
    if !cache.h_ds_forced {
        let dh_ds = p.ds_fc.transpose() * &dproj;
        let dlogits = softmax_backward(&cache.h_ds, &dh_ds);
        let dsr_cache = cache.dsr.as_ref().unwrap();
        let h_dsr_ds = dsr_cache.out2.row(0).transpose();
        g.w_ds += &dlogits * h_dsr_ds.transpose();
        dh_dsr_ds = p.w_ds.transpose() * &dlogits;
    }

    // Scenario-recognition block.
    let mut ddsr_out = DMatrix::<f64>::zeros(rows + 1, dm);
    for c in 0..dm {
        ddsr_out[(0, c)] = dh_dsr_ds[c];
    }
    ddsr_out.view_mut((1, 0), (rows, dm)).copy_from(&dh_tc);
    let ddsr_in = attn_block_backward(
        &p.dsr,
        cache.dsr.as_ref().unwrap(),
        &ddsr_out,
        &mut g.dsr,
        cfg.attention_heads,
        cfg.d_att,
    );
    for c in 0..dm {
        g.se_token[(c, 0)] += ddsr_in[(0, c)];
    }
    let ddti_out = ddsr_in.rows(1, rows).into_owned();

    // Temporal-interaction block.
    let dh_ite = attn_block_backward(
        &p.dti,
        cache.dti.as_ref().unwrap(),
        &ddti_out,
        &mut g.dti,
        cfg.attention_heads,
        cfg.d_att,
    );

    // Input embedding (the temporal encoding is constant).
    let mut dpre = dh_ite;
    for r in 0..rows {
        for c in 0..dm {
            if cache.ite_pre[(r, c)] <= 0.0 {
                dpre[(r, c)] = 0.0;
            }
        }
    }
    g.w_ie += dpre.transpose() * &cache.x_norm;
    colsum_into(&dpre, &mut g.b_ie);
}
