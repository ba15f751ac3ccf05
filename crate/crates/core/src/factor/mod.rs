//! Low-rank factorization under the generalized KL divergence, with and
//! without learned per-feature quantile maps.
//!
//! * [`nmf_multiplicative`]: plain multiplicative-update NMF, the baseline.
//! * [`qmf_train`]: `min KL(X, T(UV))` over exp-parameterized factors and the
//!   weights/pinned quantiles of the row-wise soft quantile map `T`.
//! * [`qmfq_train`]: `min KL(X, T(NMF_k(T'(X))))` over the parameters of an
//!   inflating map `T` and a deflating map `T'`, differentiating through the
//!   unrolled inner NMF iterations.

mod kl;
mod nmf;
mod optim;
mod qmf;
mod qmfq;

pub use kl::{kl_div, kl_grad_row, kl_row, KL_FLOOR};
pub use nmf::{nmf_init, nmf_multiplicative, nmf_step, unrolled_nmf, NmfTape};
pub use optim::{Optimizer, OptimizerKind};
pub use qmf::{qmf_loss, qmf_loss_and_grad, qmf_objective, qmf_train, QmfGradient};
pub use qmfq::{deflate, qmfq_loss, qmfq_loss_and_grad, qmfq_train, QmfqEval, QmfqGradient};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::SinkhornOptions;
use crate::params::{FactorPrecursors, PrecursorSet};

/// Which model a [`FactorModel`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nmf,
    Qmf,
    Qmfq,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmf" => Ok(Method::Nmf),
            "qmf" => Ok(Method::Qmf),
            "qmfq" => Ok(Method::Qmfq),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    /// Number of target quantiles `m`.
    pub quantiles: usize,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Features per step; `None` means all of them.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Inner NMF iterations per outer step (QMFQ).
    pub inner_iters: usize,
    /// Backpropagate only through the last this-many inner iterations.
    pub unroll_depth: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Whether the quantile weights `b` are learned.
    pub train_weights: bool,
    pub sinkhorn_tolerance: f64,
    pub sinkhorn_max_iter: usize,
    /// Floor applied to reconstructions and denominators in NMF updates.
    pub nmf_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            quantiles: 16,
            epsilon: 0.01,
            learning_rate: 0.01,
            batch_size: None,
            epochs: 100,
            inner_iters: 100,
            unroll_depth: None,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            train_weights: true,
            sinkhorn_tolerance: 1e-4,
            sinkhorn_max_iter: 2000,
            nmf_floor: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn sinkhorn(&self) -> SinkhornOptions {
        SinkhornOptions::tolerance(self.epsilon, self.sinkhorn_tolerance, self.sinkhorn_max_iter)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let positive = [
            ("rank", self.rank),
            ("quantiles", self.quantiles),
            ("epochs", self.epochs),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.quantiles < 2 {
            return Err(Error::invalid("pinned quantiles need at least 2 levels"));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("learning_rate", self.learning_rate),
            ("sinkhorn_tolerance", self.sinkhorn_tolerance),
            ("nmf_floor", self.nmf_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(bs) = self.batch_size {
            if bs == 0 || bs > d {
                return Err(Error::invalid(format!("batch size {bs} must lie in 1..={d}")));
            }
        }
        Ok(())
    }

    pub(crate) fn batch(&self, d: usize) -> usize {
        self.batch_size.unwrap_or(d).clamp(1, d.max(1))
    }
}

/// Per-step and per-epoch KL values of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// KL at the initial parameters.
    pub initial: f64,
    /// Loss of each step on its own feature batch, before the update.
    pub steps: Vec<f64>,
    /// Full-data KL after each epoch.
    pub epochs: Vec<f64>,
    /// Seconds since the start of training at the end of each epoch.
    pub seconds: Vec<f64>,
    /// Inner NMF KL curve of the last outer step (QMFQ only).
    #[serde(default)]
    pub inner: Vec<f64>,
    /// Mean Sinkhorn iterations per row solve.
    #[serde(default)]
    pub mean_sinkhorn_iterations: f64,
    /// Row solves that missed the tolerance and were left out of a gradient.
    #[serde(default)]
    pub skipped_rows: usize,
    /// Epoch at which the loss became non-finite; the model is the last
    /// finite state.
    #[serde(default)]
    pub diverged_at: Option<usize>,
}

impl LossCurve {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

/// A trained factorization model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub method: Method,
    /// Log-factors. For QMFQ these are the inner factors of the last
    /// evaluation, kept for inspection; reconstruction recomputes them.
    pub factors: FactorPrecursors,
    /// Inflating map (pinned quantiles).
    pub inflate: Option<PrecursorSet>,
    /// Deflating map (free quantiles), QMFQ only.
    pub deflate: Option<PrecursorSet>,
    pub config: TrainConfig,
}

/// Row minima and maxima.
pub fn row_ranges(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let s = x.map_axis(Axis(1), |r| r.iter().fold(f64::INFINITY, |a, &v| a.min(v)));
    let t = x.map_axis(Axis(1), |r| r.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)));
    (s, t)
}

pub(crate) fn check_data(x: ArrayView2<f64>) -> Result<()> {
    let (d, n) = x.dim();
    if d == 0 || n == 0 {
        return Err(Error::invalid(format!("data matrix is {d}x{n}")));
    }
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(format!(
            "data must be finite and nonnegative, found {v}"
        )));
    }
    Ok(())
}

/// The model's reconstruction of `x`: `T(UV)` for QMF, `T(NMF_k(T'(x)))` for
/// QMFQ and `UV` for NMF.
pub fn reconstruct(model: &FactorModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    match model.method {
        Method::Nmf => Ok(model.factors.u().dot(&model.factors.v())),
        Method::Qmf => qmf::reconstruct_qmf(model),
        Method::Qmfq => qmfq::reconstruct_qmfq(model, x),
    }
}

/// Trains the NMF baseline and wraps it as a [`FactorModel`]; the curve has
/// one entry per multiplicative iteration.
pub fn nmf_train(x: ArrayView2<f64>, config: &TrainConfig) -> Result<(FactorModel, LossCurve)> {
    check_data(x)?;
    let (u, v, curve) = nmf_multiplicative(x, config.rank, config.epochs, config.seed, config.nmf_floor)?;
    let tiny = f64::MIN_POSITIVE;
    let factors = FactorPrecursors::new(u.mapv(|t| t.max(tiny).ln()), v.mapv(|t| t.max(tiny).ln()))?;
    Ok((
        FactorModel {
            method: Method::Nmf,
            factors,
            inflate: None,
            deflate: None,
            config: config.clone(),
        },
        curve,
    ))
}

/// Dispatches on `method`.
pub fn train(method: Method, x: ArrayView2<f64>, config: &TrainConfig) -> Result<(FactorModel, LossCurve)> {
    match method {
        Method::Nmf => nmf_train(x, config),
        Method::Qmf => qmf_train(x, config),
        Method::Qmfq => qmfq_train(x, config),
    }
}
