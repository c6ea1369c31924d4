//! Interacting-particle SDEs and corruption processes for synthetic data.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{save_pointcloud, Manifest, PairEntry, PointCloud, Trajectory, TrajectoryEntry};

/// Gaussian share of the initial mixture: 167 of every 500 particles.
const GAUSSIAN_NUM: f64 = 167.0;
const MIXTURE_DEN: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Kuramoto,
    #[serde(alias = "fhn")]
    FitzhughNagumo,
    Atlas,
}

impl System {
    pub fn default_t_end(self, d: usize) -> f64 {
        match self {
            System::Kuramoto => 5.0,
            System::FitzhughNagumo if d == 2 => 4.0,
            System::FitzhughNagumo => 10.0,
            System::Atlas => 2.0,
        }
    }

    pub fn default_sigma(self) -> f64 {
        match self {
            System::Kuramoto => 0.2,
            System::FitzhughNagumo => 0.1,
            System::Atlas => 0.5,
        }
    }

    /// `(uniform half-width, gaussian std, half-width of the gaussian-mean range)`
    fn initial_mixture(self) -> (f64, f64, f64) {
        match self {
            System::Kuramoto => (1.0, 0.1, 1.0),
            System::FitzhughNagumo => (6.0, 0.1, 6.0),
            System::Atlas => (2.0, 0.3, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub system: System,
    pub d: usize,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_timepoints")]
    pub n_timepoints: usize,
    /// Defaults per system when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_particles() -> usize {
    500
}

fn default_timepoints() -> usize {
    100
}

impl SdeConfig {
    pub fn new(system: System, d: usize) -> Self {
        SdeConfig {
            system,
            d,
            n_particles: default_particles(),
            n_timepoints: default_timepoints(),
            t_end: None,
            sigma: None,
            seed: 0,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t_end.unwrap_or_else(|| self.system.default_t_end(self.d))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| self.system.default_sigma())
    }

    pub fn dt(&self) -> f64 {
        self.t_end() / (self.n_timepoints - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d: must be at least 1".into()));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles: must be at least 1".into()));
        }
        if self.n_timepoints < 2 {
            return Err(Error::Config(format!("n_timepoints: must be at least 2, got {}", self.n_timepoints)));
        }
        let t_end = self.t_end();
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Config(format!("t_end: must be positive, got {t_end}")));
        }
        let sigma = self.sigma();
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma: must be >= 0, got {sigma}")));
        }
        Ok(())
    }

    /// RNG for system number `index` of a dataset.
    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// `(uniform, gaussian)` row counts for `n` particles.
pub fn mixture_counts(n: usize) -> (usize, usize) {
    let gaussian = ((n as f64) * GAUSSIAN_NUM / MIXTURE_DEN).round() as usize;
    (n - gaussian.min(n), gaussian.min(n))
}

/// Uniform rows first, then Gaussian rows around a per-coordinate random mean.
pub fn sample_initial<R: Rng + ?Sized>(system: System, d: usize, n_particles: usize, rng: &mut R) -> Result<PointCloud> {
    if n_particles == 0 || d == 0 {
        return Err(Error::InvalidArgument("need at least one particle and one dimension".into()));
    }
    let (half_width, std, mean_range) = system.initial_mixture();
    let (n_uniform, n_gauss) = mixture_counts(n_particles);
    let center: Vec<f64> = (0..d).map(|_| rng.random_range(-mean_range..=mean_range)).collect();
    let mut points = Array2::zeros((n_particles, d));
    for i in 0..n_uniform {
        for k in 0..d {
            points[[i, k]] = rng.random_range(-half_width..=half_width);
        }
    }
    for i in n_uniform..n_uniform + n_gauss {
        for k in 0..d {
            points[[i, k]] = center[k] + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    PointCloud::new(points)
}

/// `n` evenly spaced values over `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Per-dimension `(b, c, d, tau)` of the linear FitzHugh-Nagumo equations.
#[derive(Debug, Clone, PartialEq)]
pub struct FhnCoefficients {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub tau: Vec<f64>,
}

impl FhnCoefficients {
    pub fn new(dims: usize) -> Self {
        FhnCoefficients {
            b: linspace(0.5, 0.8, dims),
            c: linspace(0.5, 1.0, dims),
            d: linspace(0.3, 0.7, dims),
            tau: linspace(1.0, 10.0, dims),
        }
    }
}

/// Deterministic part of the dynamics: `drift(x, t, x0)`.
pub type Drift<'a> = dyn Fn(&Array2<f64>, f64, &Array2<f64>) -> Array2<f64> + 'a;

fn kuramoto_drift(x: &Array2<f64>) -> Array2<f64> {
    // (2/N) sum_j sin(x_j - x_i) = 2 (cos x_i mean(sin x) - sin x_i mean(cos x)), per coordinate.
    let s = x.mapv(f64::sin);
    let c = x.mapv(f64::cos);
    let mean_s = s.mean_axis(Axis(0)).expect("non-empty");
    let mean_c = c.mean_axis(Axis(0)).expect("non-empty");
    let coupling = (&c * &mean_s - &s * &mean_c) * 2.0;
    s + coupling
}

fn fhn_drift(x: &Array2<f64>, t: f64, x0: &Array2<f64>, coef: &FhnCoefficients) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let current = 0.1 * (10.0 * t).sin();
    let mean_x2 = if d > 1 { x.column(1).mean().expect("non-empty") } else { 0.0 };
    let mean_x1_initial = x0.column(0).mean().expect("non-empty");
    for i in 0..n {
        let v = x[[i, 0]];
        out[[i, 0]] = 0.2 * v * (v - 0.5) * (1.0 - v) - mean_x2 + current + (v - mean_x1_initial);
        for k in 1..d {
            let w = x[[i, k]];
            out[[i, k]] = (-coef.b[k] * w + coef.c[k] * w + coef.d[k]) / coef.tau[k];
        }
    }
    out
}

/// Fraction of particles with coordinate `<=` each particle's own (self included).
pub fn empirical_cdf_column(col: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let n = col.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut out = Array1::zeros(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && col[order[end]] == col[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            out[i] = end as f64 / n as f64;
        }
        start = end;
    }
    out
}

fn atlas_drift(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for k in 0..d {
        let cdf = empirical_cdf_column(x.column(k));
        let prev = (k + d - 1) % d;
        for i in 0..n {
            let v = x[[i, k]];
            out[[i, k]] = 5.0 * (0.5 - cdf[i]) + (v - 0.01 * v * v * v) + 1.5 * x[[i, prev]].sin();
        }
    }
    out
}

/// The drift of `system` in dimension `d`.
pub fn system_drift(system: System, d: usize) -> Box<Drift<'static>> {
    match system {
        System::Kuramoto => Box::new(|x, _, _| kuramoto_drift(x)),
        System::FitzhughNagumo => {
            let coef = FhnCoefficients::new(d);
            Box::new(move |x, t, x0| fhn_drift(x, t, x0, &coef))
        }
        System::Atlas => Box::new(|x, _, _| atlas_drift(x)),
    }
}

/// Euler-Maruyama from `x0` with one step per recorded timepoint.
pub fn simulate_with_drift<R: Rng + ?Sized>(
    config: &SdeConfig,
    x0: PointCloud,
    drift: &Drift<'_>,
    rng: &mut R,
) -> Result<Trajectory> {
    config.validate()?;
    let dt = config.dt();
    let noise = config.sigma() * dt.sqrt();
    let initial = x0.points().clone();
    let mut x = initial.clone();
    let mut marginals = Vec::with_capacity(config.n_timepoints);
    marginals.push(x0);
    for k in 1..config.n_timepoints {
        let t = (k - 1) as f64 * dt;
        let mut next = &x + &(drift(&x, t, &initial) * dt);
        if noise > 0.0 {
            next.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("simulation state at timestep {k}")));
        }
        marginals.push(PointCloud::new(next.clone())?);
        x = next;
    }
    let times = (0..config.n_timepoints).map(|k| k as f64 * dt).collect();
    Trajectory::new(marginals, times)
}

/// Simulates system number `index` (selects the RNG stream).
pub fn simulate_system(config: &SdeConfig, index: usize) -> Result<Trajectory> {
    config.validate()?;
    let mut rng = config.rng(index);
    let x0 = sample_initial(config.system, config.d, config.n_particles, &mut rng)?;
    simulate_with_drift(config, x0, &*system_drift(config.system, config.d), &mut rng)
}

pub fn simulate_mkv(config: &SdeConfig) -> Result<Trajectory> {
    simulate_system(config, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Diffusion,
    KernelInteraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub process: Corruption,
    /// Repulsion strength of the kernel process.
    pub eta: f64,
    /// Noise scale of the kernel process.
    pub sigma: f64,
    /// Kernel bandwidth.
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    /// Total displacement std of the diffusion process.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            process: Corruption::KernelInteraction,
            eta: 0.3,
            sigma: 0.001,
            h: 0.75,
            dt: 0.05,
            steps: 50,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: must be finite and >= 0, got {v}")))
            }
        };
        nonneg("eta", self.eta)?;
        nonneg("sigma", self.sigma)?;
        nonneg("noise_scale", self.noise_scale)?;
        if !(self.h > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("h and dt must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, target: &PointCloud, rng: &mut R) -> Result<PointCloud> {
        match self.process {
            Corruption::Diffusion => corrupt_diffusion(target, self.steps, self.noise_scale, rng),
            Corruption::KernelInteraction => corrupt_kernel(target, self, rng),
        }
    }
}

/// Brownian noising: `x += noise_scale sqrt(dt) xi` for `steps` steps of `dt = 1/steps`.
pub fn corrupt_diffusion<R: Rng + ?Sized>(
    target: &PointCloud,
    steps: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let mut x = target.points().clone();
    let scale = noise_scale * (1.0 / steps as f64).sqrt();
    if scale > 0.0 {
        for _ in 0..steps {
            x.mapv_inplace(|v| v + scale * rng.sample::<f64, _>(StandardNormal));
        }
    }
    PointCloud::new(x)
}

/// Repulsive kernel interaction:
/// `x_i += eta (x_i - sum_j A_ij x_j) dt + sigma sqrt(dt) eps`, with `A` the
/// row-normalized Gaussian kernel of bandwidth `h`.
pub fn corrupt_kernel<R: Rng + ?Sized>(target: &PointCloud, config: &CorruptionConfig, rng: &mut R) -> Result<PointCloud> {
    config.validate()?;
    let mut x = target.points().clone();
    let (n, d) = x.dim();
    let inv = 1.0 / (2.0 * config.h * config.h);
    let noise = config.sigma * config.dt.sqrt();
    for _ in 0..config.steps {
        let mut next = x.clone();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let sq: f64 = (0..d).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum();
                    -sq * inv
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for k in 0..d {
                let avg: f64 = (0..n).map(|j| weights[j] * x[[j, k]]).sum::<f64>() / total;
                next[[i, k]] += config.eta * (x[[i, k]] - avg) * config.dt;
            }
        }
        if noise > 0.0 {
            next.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
        }
        x = next;
    }
    PointCloud::new(x)
}

/// Simulates every config (system index = position), writes all marginals and
/// a manifest of adjacent-timepoint pairs. Returns the manifest path.
pub fn emit_mkv_dataset(configs: &[SdeConfig], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no systems to simulate".into()));
    }
    let d = configs[0].d;
    if let Some(c) = configs.iter().find(|c| c.d != d) {
        return Err(Error::DimensionMismatch(format!("systems mix d={d} and d={}", c.d)));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut pairs = Vec::new();
    let mut trajectories = Vec::new();
    for (index, config) in configs.iter().enumerate() {
        let traj = simulate_system(config, index)?;
        let mut files = Vec::with_capacity(traj.len());
        for (k, marginal) in traj.marginals().iter().enumerate() {
            let name = PathBuf::from(format!("sys{index:03}_t{k:03}.m2m"));
            save_pointcloud(marginal, out_dir.join(&name))?;
            files.push(name);
        }
        for k in 0..files.len() - 1 {
            pairs.push(PairEntry {
                source: files[k].clone(),
                target: files[k + 1].clone(),
                tag: Some(format!("system={index} t={}", traj.times()[k])),
            });
        }
        trajectories.push(TrajectoryEntry {
            system: index,
            times: traj.times().to_vec(),
            marginals: files,
        });
    }
    let manifest = Manifest {
        ambient_dim: d,
        pairs,
        trajectories,
    };
    let path = out_dir.join("dataset.json");
    manifest.write(&path)?;
    Ok(path)
}
