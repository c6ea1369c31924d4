//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::model::ModelParams;
use super::tape::{Graph, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub coordinates: usize,
    pub max_abs_error: f64,
    /// Largest relative error among coordinates that miss the absolute tolerance.
    pub max_rel_error: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    /// Name of the parameter holding the worst coordinate.
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Build graphs with the deliberately wrong layer-norm backward.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            rel_tol: DEFAULT_REL_TOL,
            abs_tol: DEFAULT_ABS_TOL,
            corrupt_backward: false,
        }
    }
}

/// Compares every gradient coordinate of `loss` against central differences.
///
/// `loss` must be deterministic: it is re-evaluated twice per coordinate.
pub fn gradcheck<F>(params: &ModelParams, loss: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&ModelParams, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_corrupt_backward(opts.corrupt_backward);
    let l = loss(params, &mut g)?;
    let mut analytic = params.clone();
    analytic.store_mut().zero_grad();
    g.backward(l)?.accumulate_into(analytic.store_mut());

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(p, &mut g)?;
        Ok(g.scalar(l))
    };

    let mut groups = BTreeMap::new();
    let mut worst: Option<(f64, String)> = None;
    let mut probe = params.clone();
    let ids: Vec<_> = params.store().ids().collect();
    for id in ids {
        let name = params.store().get(id).name.clone();
        let n = params.store().value(id).len();
        let mut report = GroupReport {
            name: name.clone(),
            coordinates: n,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            failures: 0,
        };
        for k in 0..n {
            let orig = params.store().value(id).as_slice().expect("standard layout")[k];
            probe.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.store_mut().value_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = analytic.store().grad(id).as_slice().expect("standard layout")[k];
            let err = (exact - numeric).abs();
            let rel = if err <= opts.abs_tol {
                0.0
            } else {
                err / exact.abs().max(numeric.abs())
            };
            report.max_abs_error = report.max_abs_error.max(err);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > opts.rel_tol || !rel.is_finite() {
                report.failures += 1;
            }
            if worst.as_ref().is_none_or(|(w, _)| rel > *w) {
                worst = Some((rel, name.clone()));
            }
        }
        groups.insert(id_order(params, &name), report);
    }
    let groups: Vec<GroupReport> = groups.into_values().collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let passed = groups.iter().all(|g| g.failures == 0);
    Ok(GradcheckReport {
        groups,
        max_rel_error,
        worst: worst.map(|(_, n)| n),
        passed,
    })
}

fn id_order(params: &ModelParams, name: &str) -> usize {
    params.store().find(name).map_or(usize::MAX, |id| id.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::{Arch, ModelConfig};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams {
        let mut p = ModelParams::init(ModelConfig {
            hidden_dim: 4,
            num_layers: 1,
            num_heads: 2,
            fourier_frequencies: 2,
            time_embed_dim: 4,
            mlp_ratio: 1,
            dropout_rate: 0.0,
            time_conditioned: false,
            arch: Arch::Transformer,
            ..ModelConfig::default()
        })
        .unwrap();
        p.store_mut().jitter(0.3, &mut ChaCha8Rng::seed_from_u64(2));
        p
    }

    fn squared_output(p: &ModelParams, g: &mut Graph) -> Result<Var> {
        let x = g.constant(array![[0.1, 0.2], [-0.4, 0.3], [0.5, -0.6]]);
        let y = p.forward_graph(g, x, None, None)?;
        let sq = g.mul(y, y);
        Ok(g.sum(sq))
    }

    #[test]
    fn correct_backward_passes_and_lists_every_group() {
        let p = tiny();
        let report = gradcheck(&p, squared_output, GradcheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.groups.len(), p.store().len());
        let names: Vec<&str> = report.groups.iter().map(|g| g.name.as_str()).collect();
        let expected: Vec<&str> = p.store().iter().map(|q| q.name.as_str()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn corrupted_backward_fails() {
        let p = tiny();
        let opts = GradcheckOptions {
            corrupt_backward: true,
            ..GradcheckOptions::default()
        };
        let report = gradcheck(&p, squared_output, opts).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > DEFAULT_REL_TOL);
        assert!(report.worst.is_some());
    }
}
