//! Distributional distances between point clouds and the aggregated report.
//!
//! MMD and ED use the biased (V-statistic) three-sum estimator, diagonal
//! terms included. The RBF kernel is parameterized by bandwidth:
//! `k(x, y) = exp(-|x - y|^2 / (2 gamma^2))`.
//!
//! `r2` is implementation-defined: the squared Pearson correlation between the
//! strict upper triangles of the two clouds' feature-correlation matrices.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::PointCloud;
use crate::ot::wasserstein_p;

/// Bandwidths averaged by [`mmd_avg`].
pub const MMD_GAMMAS: [f64; 6] = [2.0, 1.0, 0.5, 0.1, 0.01, 0.005];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub w1: f64,
    pub w2: f64,
    pub ed: f64,
    pub mmd_avg: f64,
    /// Keyed by the bandwidth's decimal representation.
    #[serde(rename = "mmd")]
    pub mmd_per_gamma: BTreeMap<String, f64>,
    pub r2: Option<f64>,
}

fn check_dims(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch(format!(
            "clouds have d={} and d={}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Orders the argument pair canonically so symmetric metrics are bit-symmetric.
fn canonical<'a>(x: &'a PointCloud, y: &'a PointCloud) -> (&'a PointCloud, &'a PointCloud) {
    let key = |p: &PointCloud| (p.len(), p.dim());
    let ord = key(x).cmp(&key(y)).then_with(|| {
        x.points()
            .iter()
            .zip(y.points().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    if ord == Ordering::Greater {
        (y, x)
    } else {
        (x, y)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn mean_kernel(a: ArrayView2<f64>, b: ArrayView2<f64>, k: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for ar in a.rows() {
        for br in b.rows() {
            total += k(sq_dist(ar, br));
        }
    }
    total / (a.nrows() * b.nrows()) as f64
}

fn three_sum(x: &PointCloud, y: &PointCloud, k: impl Fn(f64) -> f64 + Copy) -> f64 {
    let (x, y) = canonical(x, y);
    let kxx = mean_kernel(x.points().view(), x.points().view(), k);
    let kyy = mean_kernel(y.points().view(), y.points().view(), k);
    let kxy = mean_kernel(x.points().view(), y.points().view(), k);
    (kxx + kyy) - 2.0 * kxy
}

/// Energy distance: `2 E|x - y| - E|x - x'| - E|y - y'|`.
pub fn energy_distance(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    check_dims(x, y)?;
    Ok(three_sum(x, y, |sq| -sq.sqrt()))
}

/// Biased MMD^2 under the bandwidth-parameterized RBF kernel.
pub fn mmd_rbf(x: &PointCloud, y: &PointCloud, gamma: f64) -> Result<f64> {
    check_dims(x, y)?;
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "RBF bandwidth must be positive, got {gamma}"
        )));
    }
    let scale = 1.0 / (2.0 * gamma * gamma);
    Ok(three_sum(x, y, move |sq| (-sq * scale).exp()))
}

/// Mean of [`mmd_rbf`] over [`MMD_GAMMAS`].
pub fn mmd_avg(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    Ok(mmd_per_gamma(x, y)?.iter().map(|(_, v)| v).sum::<f64>() / MMD_GAMMAS.len() as f64)
}

fn mmd_per_gamma(x: &PointCloud, y: &PointCloud) -> Result<Vec<(f64, f64)>> {
    MMD_GAMMAS
        .iter()
        .map(|&g| mmd_rbf(x, y, g).map(|v| (g, v)))
        .collect()
}

/// Pearson correlation matrix of the columns; zero-variance columns get 0 correlations.
fn feature_correlations(points: &Array2<f64>) -> Array2<f64> {
    let n = points.nrows() as f64;
    let d = points.ncols();
    let mean = points.sum_axis(ndarray::Axis(0)) / n;
    let centered = points - &mean;
    let cov = centered.t().dot(&centered) / n;
    Array2::from_shape_fn((d, d), |(i, j)| {
        let denom = (cov[[i, i]] * cov[[j, j]]).sqrt();
        if denom > 0.0 {
            cov[[i, j]] / denom
        } else {
            0.0
        }
    })
}

fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| m[[i, j]])
        .collect()
}

/// Squared correlation between the feature-correlation structures of two clouds.
///
/// With a single off-diagonal entry (d = 2) Pearson correlation is undefined;
/// the result is 1.0 when the two entries agree in magnitude and 0.0 otherwise.
pub fn r_squared(pred: &PointCloud, target: &PointCloud) -> Result<f64> {
    check_dims(pred, target)?;
    if pred.dim() < 2 {
        return Err(Error::InvalidArgument(format!(
            "r2 needs at least 2 features, got {}",
            pred.dim()
        )));
    }
    let a = upper_triangle(&feature_correlations(pred.points()));
    let b = upper_triangle(&feature_correlations(target.points()));
    if a.len() < 2 {
        return Ok(if (a[0].abs() - b[0].abs()).abs() <= 1e-12 {
            1.0
        } else {
            0.0
        });
    }
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in a.iter().zip(&b) {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        let equal = a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-12);
        return Ok(if equal { 1.0 } else { 0.0 });
    }
    let r = sab / (saa * sbb).sqrt();
    Ok(r * r)
}

pub fn metric_report(pred: &PointCloud, target: &PointCloud) -> Result<MetricReport> {
    check_dims(pred, target)?;
    let per_gamma = mmd_per_gamma(pred, target)?;
    let mmd_avg = per_gamma.iter().map(|(_, v)| v).sum::<f64>() / per_gamma.len() as f64;
    Ok(MetricReport {
        w1: wasserstein_p(pred, target, 1)?,
        w2: wasserstein_p(pred, target, 2)?,
        ed: energy_distance(pred, target)?,
        mmd_avg,
        mmd_per_gamma: per_gamma
            .into_iter()
            .map(|(g, v)| (g.to_string(), v))
            .collect(),
        r2: if pred.dim() >= 2 {
            Some(r_squared(pred, target)?)
        } else {
            None
        },
    })
}

/// Field-wise mean of several reports; `r2` is averaged over the reports that have it.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let r2s: Vec<f64> = reports.iter().filter_map(|r| r.r2).collect();
    Some(MetricReport {
        w1: avg(&|r| r.w1),
        w2: avg(&|r| r.w2),
        ed: avg(&|r| r.ed),
        mmd_avg: avg(&|r| r.mmd_avg),
        mmd_per_gamma: first
            .mmd_per_gamma
            .keys()
            .map(|k| (k.clone(), avg(&|r| r.mmd_per_gamma.get(k).copied().unwrap_or(0.0))))
            .collect(),
        r2: if r2s.is_empty() {
            None
        } else {
            Some(r2s.iter().sum::<f64>() / r2s.len() as f64)
        },
    })
}
