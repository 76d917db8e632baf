//! Deep Koopman car-following predictor: attention-based context encoding,
//! explicit-state encoder with a gated fusion into a lifted state, bias-free
//! linear evolution under future predecessor velocities, and a bias-free
//! linear decoder back to (velocity, headway).

mod encoder;
mod loss;
mod ops;
mod params;
mod train;

pub use encoder::{encode_forward, EncodeCache, Grads};
pub use loss::{dwa_update, sample_loss, LossBreakdown, LossWeights};
pub use ops::temporal_encoding;
pub use params::{AttnBlockParams, ModelConfig, Params};
pub use train::{
    constant_velocity_baseline, evaluate_rmse, train, Adam, EpochMetrics, HorizonRmse, TrainReport,
};

use crate::dataio::{Normalization, SampleWindow};
use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetVariant {
    Adapkoopnet,
    Koopnet,
    SAdapkoopnet,
}

impl NetVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetVariant::Adapkoopnet => "adapkoopnet",
            NetVariant::Koopnet => "koopnet",
            NetVariant::SAdapkoopnet => "s-adapkoopnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adapkoopnet" => Ok(Self::Adapkoopnet),
            "koopnet" => Ok(Self::Koopnet),
            "s-adapkoopnet" => Ok(Self::SAdapkoopnet),
            other => Err(CoreError::InvalidParameter(format!(
                "unknown net variant `{other}`"
            ))),
        }
    }

    /// Structural adjustments relative to a base configuration.
    pub fn apply(&self, base: ModelConfig) -> ModelConfig {
        match self {
            NetVariant::Adapkoopnet => base,
            NetVariant::Koopnet => base.without_dc_path(),
            NetVariant::SAdapkoopnet => base.scaled_width(0.5),
        }
    }
}

/// Scenario-conditioned context summary.
#[derive(Debug, Clone)]
pub struct DrivingCharacteristics {
    pub dc: DVector<f64>,
    pub scenario_probs: DVector<f64>,
}

/// A configured predictor: parameters plus the feature normalization it was
/// trained under.
#[derive(Debug, Clone)]
pub struct AdapKoopNet {
    pub variant: NetVariant,
    pub config: ModelConfig,
    pub params: Params,
    pub normalization: Normalization,
}

impl AdapKoopNet {
    pub fn new(variant: NetVariant, base: ModelConfig, normalization: Normalization, seed: u64) -> Result<Self> {
        let config = variant.apply(base);
        config.validate()?;
        Ok(Self {
            variant,
            config,
            params: Params::init(&config, seed),
            normalization,
        })
    }

    /// Lifted dimension d.
    pub fn lifted_dim(&self) -> usize {
        self.config.d_model
    }

    /// Encode a raw (unnormalized) context window into the lifted state.
    /// The explicit state is the (v, h) of the last context row.
    pub fn encode(&self, context_raw: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.encode_cache(context_raw, None)?.s)
    }

    fn encode_cache(&self, context_raw: &DMatrix<f64>, forced: Option<&DVector<f64>>) -> Result<EncodeCache> {
        if context_raw.nrows() != self.config.context_rows
            || context_raw.ncols() != crate::dataio::NUM_FEATURES
        {
            return Err(CoreError::InvalidParameter(format!(
                "context must be {} x {}, got {} x {}",
                self.config.context_rows,
                crate::dataio::NUM_FEATURES,
                context_raw.nrows(),
                context_raw.ncols()
            )));
        }
        if context_raw.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("context window".into()));
        }
        let ctx = self.normalization.normalize_rows(context_raw);
        let last = self.config.context_rows - 1;
        let es = (ctx[(last, 0)], ctx[(last, 1)]);
        Ok(encode_forward(&self.config, &self.params, &ctx, es, forced, None))
    }

    /// Scenario probabilities and the aggregated driving characteristic for
    /// a raw context window. Errors for the ablated variant, which has no
    /// driving-characteristics path.
    pub fn driving_characteristics(&self, context_raw: &DMatrix<f64>) -> Result<DrivingCharacteristics> {
        if !self.config.dc_path {
            return Err(CoreError::InvalidParameter(
                "variant has no driving-characteristics path".into(),
            ));
        }
        let cache = self.encode_cache(context_raw, None)?;
        Ok(DrivingCharacteristics {
            dc: cache.dc,
            scenario_probs: cache.h_ds,
        })
    }

    /// Predict F steps of (v, h), in physical units, from a raw context
    /// window and the future predecessor velocities.
    pub fn predict_from_context(
        &self,
        context_raw: &DMatrix<f64>,
        future_lead_v: &[f64],
    ) -> Result<Vec<(f64, f64)>> {
        self.predict_inner(context_raw, future_lead_v, None)
    }

    fn predict_inner(
        &self,
        context_raw: &DMatrix<f64>,
        future_lead_v: &[f64],
        forced: Option<&DVector<f64>>,
    ) -> Result<Vec<(f64, f64)>> {
        if future_lead_v.is_empty() {
            return Err(CoreError::InvalidParameter(
                "need at least one future predecessor velocity".into(),
            ));
        }
        let cache = self.encode_cache(context_raw, forced)?;
        let inputs: Vec<f64> = future_lead_v
            .iter()
            .map(|v| self.normalization.normalize_velocity(*v))
            .collect();
        let states = crate::edmd::evolve(&self.params.koop_a, &self.params.koop_b, &cache.s, &inputs);
        Ok(states
            .iter()
            .map(|s| {
                let y = &self.params.w_dec * s;
                self.normalization.denormalize_es(y[0], y[1])
            })
            .collect())
    }

    /// Full-pipeline prediction for a prepared sample window.
    pub fn predict_multistep(&self, window: &SampleWindow) -> Result<Vec<(f64, f64)>> {
        self.check_window(window)?;
        self.predict_from_context(&window.context_at(0), &window.future_lead_velocities())
    }

    /// Same as [`predict_multistep`] with the scenario distribution replaced
    /// by `forced` before the aggregation stage.
    pub fn predict_with_forced_scenario(
        &self,
        window: &SampleWindow,
        forced: &[f64],
    ) -> Result<Vec<(f64, f64)>> {
        self.check_window(window)?;
        if !self.config.dc_path {
            return Err(CoreError::InvalidParameter(
                "variant has no scenario path to force".into(),
            ));
        }
        if forced.len() != self.config.scenario_count
            || forced.iter().any(|p| *p < 0.0 || !p.is_finite())
            || (forced.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(CoreError::InvalidParameter(
                "forced scenario must be a probability distribution".into(),
            ));
        }
        let forced = DVector::from_row_slice(forced);
        self.predict_inner(
            &window.context_at(0),
            &window.future_lead_velocities(),
            Some(&forced),
        )
    }

    fn check_window(&self, window: &SampleWindow) -> Result<()> {
        if window.context_rows != self.config.context_rows || window.horizon != self.config.horizon {
            return Err(CoreError::InvalidParameter(format!(
                "window ({}, {}) does not match model ({}, {})",
                window.context_rows, window.horizon, self.config.context_rows, self.config.horizon
            )));
        }
        Ok(())
    }

    /// The linear blocks used by the platoon-level predictive model: A, B
    /// and the decoder as observation matrix C.
    pub fn export_koopman_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            self.params.koop_a.clone(),
            self.params.koop_b.clone(),
            self.params.w_dec.clone(),
        )
    }
}
