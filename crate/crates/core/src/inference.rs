//! Sampling from trained models: one-step maps, Euler flows and rollouts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{PointCloud, Trajectory};
use crate::metrics::{mean_report, metric_report, MetricReport};
use crate::neural::ModelParams;

pub const DEFAULT_INFERENCE_STEPS: usize = 100;

/// Explicit Euler integration of the learned velocity field.
///
/// Time is advanced before each evaluation, so the field is queried at
/// `t_start + dt, ..., t_end`.
pub fn integrate_flow(
    params: &ModelParams,
    source: &PointCloud,
    num_steps: usize,
    t_start: f64,
    t_end: f64,
) -> Result<PointCloud> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
    }
    if !params.config().time_conditioned {
        return Err(Error::InvalidArgument("integrate_flow needs a time-conditioned model".into()));
    }
    let dt = (t_end - t_start) / num_steps as f64;
    let mut t = t_start;
    let mut z = source.points().clone();
    for step in 1..=num_steps {
        t += dt;
        let v = params.forward(&z, Some(t))?;
        z.scaled_add(dt, &v);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow state after step {step}")));
        }
    }
    PointCloud::new(z)
}

/// `F(x)` for every source point; the map is direct, not residual.
pub fn static_map(params: &ModelParams, source: &PointCloud) -> Result<PointCloud> {
    if params.config().time_conditioned {
        return Err(Error::InvalidArgument("static_map needs a static model".into()));
    }
    PointCloud::new(params.forward(source.points(), None)?)
}

/// One hop: flow over `[0, 1]` for dynamic models, one application for static ones.
pub fn predict_next(params: &ModelParams, source: &PointCloud, steps: usize) -> Result<PointCloud> {
    if params.config().time_conditioned {
        integrate_flow(params, source, steps, 0.0, 1.0)
    } else {
        static_map(params, source)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutResult {
    /// Starting measure followed by every prediction.
    #[serde(skip)]
    pub predicted: Trajectory,
    /// Metrics of prediction `k` against truth marginal `k` (k >= 1).
    pub reports: Vec<MetricReport>,
    pub mean: Option<MetricReport>,
}

/// Autoregressive prediction from `mu0`, feeding each output back as the next input.
pub fn rollout(
    params: &ModelParams,
    mu0: &PointCloud,
    n_marginals: usize,
    steps_per_marginal: usize,
    truth: Option<&Trajectory>,
) -> Result<RolloutResult> {
    if n_marginals < 2 {
        return Err(Error::InvalidArgument("rollout needs at least 2 marginals".into()));
    }
    if let Some(tr) = truth {
        if tr.len() < n_marginals {
            return Err(Error::InvalidArgument(format!(
                "truth has {} marginals, rollout wants {n_marginals}",
                tr.len()
            )));
        }
    }
    let mut marginals = Vec::with_capacity(n_marginals);
    marginals.push(mu0.clone());
    let mut reports = Vec::new();
    for k in 1..n_marginals {
        let next = predict_next(params, &marginals[k - 1], steps_per_marginal)?;
        if let Some(tr) = truth {
            reports.push(metric_report(&next, &tr.marginals()[k])?);
        }
        marginals.push(next);
    }
    let times = match truth {
        Some(tr) => tr.times()[..n_marginals].to_vec(),
        None => (0..n_marginals).map(|k| k as f64).collect(),
    };
    let mean = mean_report(&reports);
    Ok(RolloutResult {
        predicted: Trajectory::new(marginals, times)?,
        reports,
        mean,
    })
}
