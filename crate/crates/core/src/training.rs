//! Static pushforward objectives, flow-matching objective and training loops.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::inference::predict_next;
use crate::measures::{subsample_points, Dataset};
use crate::metrics::{mean_report, metric_report, MetricReport};
use crate::neural::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::neural::{adam_step, AdamState, Arch, Graph, ModelConfig, ModelParams, Var};
use crate::ot::{minibatch_ot_pairs, sinkhorn, DEFAULT_RELATIVE_EPSILON, DEFAULT_SINKHORN_TOL};

/// Bandwidth of the RBF kernel in the MMD training loss.
pub const MMD_LOSS_GAMMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mmd,
    Ed,
    W1,
    W2,
    Otmse,
    Tfm,
}

impl LossKind {
    pub fn is_dynamic(self) -> bool {
        self == LossKind::Tfm
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mmd => "mmd",
            LossKind::Ed => "ed",
            LossKind::W1 => "w1",
            LossKind::W2 => "w2",
            LossKind::Otmse => "otmse",
            LossKind::Tfm => "tfm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Linear { start_factor: f64, end_factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub lr: f64,
    pub iterations: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "defaults::measure_batch")]
    pub measure_batch: usize,
    #[serde(default = "defaults::particle_batch")]
    pub particle_batch: usize,
    #[serde(default = "defaults::yes")]
    pub use_ot_coupling: bool,
    #[serde(default)]
    pub seed: u64,
    /// Entropic regularization as a fraction of the mean batch cost.
    #[serde(default = "defaults::sinkhorn_epsilon")]
    pub sinkhorn_epsilon: f64,
    #[serde(default = "defaults::sinkhorn_iters")]
    pub sinkhorn_iters: usize,
    /// Evaluate on held-out pairs every this many steps (and at the end); 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    /// Euler steps used when evaluating a dynamic model.
    #[serde(default = "defaults::eval_steps")]
    pub eval_steps: usize,
    /// Fraction of pairs, taken from the end of the dataset, held out for evaluation.
    #[serde(default = "defaults::holdout_fraction")]
    pub holdout_fraction: f64,
}

mod defaults {
    pub fn measure_batch() -> usize {
        16
    }
    pub fn particle_batch() -> usize {
        128
    }
    pub fn yes() -> bool {
        true
    }
    pub fn sinkhorn_epsilon() -> f64 {
        crate::ot::DEFAULT_RELATIVE_EPSILON
    }
    pub fn sinkhorn_iters() -> usize {
        100
    }
    pub fn eval_steps() -> usize {
        100
    }
    pub fn holdout_fraction() -> f64 {
        0.1
    }
}

impl TrainConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(loss_kind: LossKind, lr: f64, iterations: usize) -> Self {
        TrainConfig {
            loss_kind,
            lr,
            iterations,
            schedule: Schedule::default(),
            measure_batch: defaults::measure_batch(),
            particle_batch: defaults::particle_batch(),
            use_ot_coupling: true,
            seed: 0,
            sinkhorn_epsilon: defaults::sinkhorn_epsilon(),
            sinkhorn_iters: defaults::sinkhorn_iters(),
            eval_every: 0,
            eval_steps: defaults::eval_steps(),
            holdout_fraction: defaults::holdout_fraction(),
        }
    }

    /// Parses the `train` section of a run config, naming missing or bad fields.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("train: expected an object".into()))?;
        for key in ["lr", "loss_kind", "iterations"] {
            if !obj.contains_key(key) {
                return Err(Error::Config(format!("train.{key}: missing required field")));
            }
        }
        let config: TrainConfig =
            serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("train: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if self.measure_batch == 0 {
            return bad("measure_batch", "must be at least 1".into());
        }
        if self.particle_batch < 2 {
            return bad("particle_batch", format!("must be at least 2, got {}", self.particle_batch));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_epsilon.is_finite()) {
            return bad("sinkhorn_epsilon", format!("must be positive, got {}", self.sinkhorn_epsilon));
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters", "must be at least 1".into());
        }
        if self.eval_steps == 0 {
            return bad("eval_steps", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction", format!("must lie in [0, 1), got {}", self.holdout_fraction));
        }
        if let Schedule::Linear {
            start_factor,
            end_factor,
        } = self.schedule
        {
            if !(start_factor > 0.0 && end_factor > 0.0) {
                return bad("schedule", "factors must be positive".into());
            }
        }
        if self.loss_kind == LossKind::Otmse && !self.use_ot_coupling {
            return bad("use_ot_coupling", "the otmse loss requires OT coupling".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear {
                start_factor,
                end_factor,
            } => self.lr * lr_factor(step, self.iterations, start_factor, end_factor),
        }
    }
}

/// Linear interpolation from `start` at step 0 to `end` at `total`.
pub fn lr_factor(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let frac = step.min(total) as f64 / total as f64;
    start + (end - start) * frac
}

/// Subsampled source/target particles of one measure pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

/// `b` pairs drawn uniformly with replacement, `m` particles per side.
pub fn sample_pairs<R: Rng + ?Sized>(dataset: &Dataset, b: usize, m: usize, rng: &mut R) -> Result<Vec<PairBatch>> {
    (0..b)
        .map(|_| {
            let pair = &dataset.pairs()[rng.random_range(0..dataset.len())];
            Ok(PairBatch {
                x: subsample_points(pair.source.points(), m, rng)?,
                y: subsample_points(pair.target.points(), m, rng)?,
            })
        })
        .collect()
}

/// One interpolated measure for the flow-matching loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    /// `t y + (1 - t) x`
    pub z: Array2<f64>,
    /// `y - x`
    pub velocity: Array2<f64>,
}

/// Couples each pair (optionally by exact OT), draws one `t` per measure and
/// builds the linear-path sample.
pub fn flow_samples<R: Rng + ?Sized>(batch: &[PairBatch], use_ot: bool, rng: &mut R) -> Result<Vec<FlowSample>> {
    batch
        .iter()
        .map(|pb| {
            let (x, y) = if use_ot {
                minibatch_ot_pairs(&pb.x, &pb.y, 2)?
            } else {
                (pb.x.clone(), pb.y.clone())
            };
            let t: f64 = rng.random();
            let z = &y * t + &x * (1.0 - t);
            Ok(FlowSample { t, z, velocity: y - x })
        })
        .collect()
}

/// `(1 / (b m)) sum_i sum_j |v_theta(z_ij, t_i) - (y_ij - x_ij)|^2`
pub fn tfm_loss_graph(
    params: &ModelParams,
    g: &mut Graph,
    samples: &[FlowSample],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    let mut rows = 0;
    for s in samples {
        let z = g.constant(s.z.clone());
        let pred = params.forward_graph(g, z, Some(s.t), rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let v = g.constant(s.velocity.clone());
        let diff = g.sub(pred, v);
        let sq = g.mul(diff, diff);
        let term = g.sum(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
        rows += s.z.nrows();
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / rows as f64))
}

/// Settings of the static distributional losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticLoss {
    pub kind: LossKind,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
}

impl StaticLoss {
    pub fn from_config(config: &TrainConfig) -> Self {
        StaticLoss {
            kind: config.loss_kind,
            sinkhorn_epsilon: config.sinkhorn_epsilon,
            sinkhorn_iters: config.sinkhorn_iters,
        }
    }
}

/// `E exp(scale |a - b|^2)` over all row pairs.
fn mean_rbf(g: &mut Graph, a: Var, b: Var, scale: f64) -> Var {
    let sq = g.pairwise_sq_dist(a, b);
    let e = g.scale(sq, scale);
    let k = g.exp(e);
    g.mean(k)
}

/// Loss between the pushed batch `p` and target batch `y` of one measure.
fn static_measure_loss(g: &mut Graph, loss: &StaticLoss, p: Var, y: Var) -> Result<Var> {
    Ok(match loss.kind {
        LossKind::Mmd => {
            let scale = -1.0 / (2.0 * MMD_LOSS_GAMMA * MMD_LOSS_GAMMA);
            let kpp = mean_rbf(g, p, p, scale);
            let kyy = mean_rbf(g, y, y, scale);
            let kpy = mean_rbf(g, p, y, scale);
            let same = g.add(kpp, kyy);
            let cross = g.scale(kpy, 2.0);
            g.sub(same, cross)
        }
        LossKind::Ed => {
            let dpy = g.pairwise_dist(p, y);
            let dpp = g.pairwise_dist(p, p);
            let dyy = g.pairwise_dist(y, y);
            let (mpy, mpp, myy) = (g.mean(dpy), g.mean(dpp), g.mean(dyy));
            let twice = g.scale(mpy, 2.0);
            let a = g.sub(twice, mpp);
            g.sub(a, myy)
        }
        LossKind::W1 | LossKind::W2 => {
            let c = if loss.kind == LossKind::W1 {
                g.pairwise_dist(p, y)
            } else {
                g.pairwise_sq_dist(p, y)
            };
            let cost = g.value(c).clone();
            let mean = cost.mean().unwrap_or(0.0);
            if mean <= 0.0 {
                let zero = g.scale(c, 0.0);
                return Ok(g.sum(zero));
            }
            let plan = sinkhorn(
                &cost,
                loss.sinkhorn_epsilon * mean,
                loss.sinkhorn_iters,
                DEFAULT_SINKHORN_TOL,
            )?
            .plan;
            let plan = g.constant(plan);
            let weighted = g.mul(plan, c);
            g.sum(weighted)
        }
        LossKind::Otmse => {
            let diff = g.sub(p, y);
            let sq = g.mul(diff, diff);
            let rows = g.value(p).nrows() as f64;
            let total = g.sum(sq);
            g.scale(total, 1.0 / rows)
        }
        LossKind::Tfm => {
            return Err(Error::InvalidArgument(
                "tfm is not a static loss".into(),
            ))
        }
    })
}

/// Mean over measures of `D(F(x_i), y_i)`. For OTMSE the targets must already
/// be OT-aligned with the sources (see [`align_batch`]).
pub fn static_loss_graph(
    params: &ModelParams,
    g: &mut Graph,
    batch: &[PairBatch],
    loss: &StaticLoss,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for pb in batch {
        let x = g.constant(pb.x.clone());
        let p = params.forward_graph(g, x, None, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let y = g.constant(pb.y.clone());
        let term = static_measure_loss(g, loss, p, y)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
}

/// Reorders each target batch onto its exact-OT partners of the source batch.
pub fn align_batch(batch: Vec<PairBatch>) -> Result<Vec<PairBatch>> {
    batch
        .into_iter()
        .map(|pb| {
            let (x, y) = minibatch_ot_pairs(&pb.x, &pb.y, 2)?;
            Ok(PairBatch { x, y })
        })
        .collect()
}

fn check_model(params: &ModelParams, config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let dynamic = config.loss_kind.is_dynamic();
    if params.config().time_conditioned != dynamic {
        return Err(Error::Config(format!(
            "loss {} needs a {} model",
            config.loss_kind.name(),
            if dynamic { "time-conditioned" } else { "static" }
        )));
    }
    if params.config().ambient_dim != dataset.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model d={} but dataset d={}",
            params.config().ambient_dim,
            dataset.ambient_dim()
        )));
    }
    Ok(())
}

fn dropout_rng<'a>(params: &ModelParams, rng: &'a mut ChaCha8Rng) -> Option<&'a mut dyn RngCore> {
    (params.config().dropout_rate > 0.0).then_some(rng as &mut dyn RngCore)
}

fn optimize(params: &mut ModelParams, state: &mut AdamState, g: &Graph, loss: Var, lr: f64) -> Result<f64> {
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    params.store_mut().zero_grad();
    g.backward(loss)?.accumulate_into(params.store_mut());
    adam_step(params.store_mut(), state, lr)?;
    Ok(value)
}

/// One flow-matching update. Returns the loss before the update.
pub fn tfm_training_step(
    dataset: &Dataset,
    params: &mut ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if config.loss_kind != LossKind::Tfm {
        return Err(Error::Config("tfm step called with a static loss".into()));
    }
    check_model(params, config, dataset)?;
    let batch = sample_pairs(dataset, config.measure_batch, config.particle_batch, rng)?;
    let samples = flow_samples(&batch, config.use_ot_coupling, rng)?;
    let mut g = Graph::new();
    let loss = tfm_loss_graph(params, &mut g, &samples, dropout_rng(params, rng))?;
    optimize(params, state, &g, loss, lr)
}

/// One update of a static pushforward objective. Returns the loss before the update.
pub fn static_training_step(
    dataset: &Dataset,
    params: &mut ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    config.validate()?;
    if config.loss_kind.is_dynamic() {
        return Err(Error::Config("static step called with the tfm loss".into()));
    }
    check_model(params, config, dataset)?;
    let mut batch = sample_pairs(dataset, config.measure_batch, config.particle_batch, rng)?;
    if config.loss_kind == LossKind::Otmse {
        batch = align_batch(batch)?;
    }
    let mut g = Graph::new();
    let loss = static_loss_graph(params, &mut g, &batch, &StaticLoss::from_config(config), dropout_rng(params, rng))?;
    optimize(params, state, &g, loss, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    /// One JSON object per line: step records then eval records, in step order.
    pub fn to_json_lines(&self, first_step: usize) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        for (i, loss) in self.losses.iter().enumerate() {
            let step = first_step + i + 1;
            let rec = serde_json::json!({
                "type": "step",
                "step": step,
                "loss": loss,
                "lr": self.learning_rates[i],
                "seconds": self.step_seconds[i],
            });
            out.push_str(&rec.to_string());
            out.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == step) {
                let rec = serde_json::json!({"type": "eval", "step": e.step, "metrics": e.report});
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }

    pub fn append_to(&self, path: impl AsRef<Path>, first_step: usize) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines(first_step).as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Mean metric report of one-hop predictions on `pairs`.
pub fn evaluate_pairs(params: &ModelParams, pairs: &Dataset, steps: usize) -> Result<Option<MetricReport>> {
    let reports = pairs
        .pairs()
        .iter()
        .map(|pair| {
            let pred = predict_next(params, &pair.source, steps)?;
            metric_report(&pred, &pair.target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

/// Resumable training state. Each step draws from its own RNG stream
/// `(seed, step)`, so a resumed run replays exactly what an uninterrupted run would.
pub struct Trainer {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::new(params.store());
        Ok(Trainer {
            params,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn resume(params: ModelParams, optimizer: AdamState, config: TrainConfig, step: usize) -> Result<Self> {
        config.validate()?;
        if !optimizer.matches(params.store()) {
            return Err(Error::DimensionMismatch("optimizer state does not match parameters".into()));
        }
        Ok(Trainer {
            params,
            optimizer,
            config,
            step,
        })
    }

    /// Runs one update; aborts on a non-finite loss.
    pub fn step(&mut self, dataset: &Dataset) -> Result<(f64, f64)> {
        let lr = self.config.lr_at(self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64);
        let loss = if self.config.loss_kind.is_dynamic() {
            tfm_training_step(dataset, &mut self.params, &mut self.optimizer, &self.config, lr, &mut rng)?
        } else {
            static_training_step(dataset, &mut self.params, &mut self.optimizer, &self.config, lr, &mut rng)?
        };
        self.step += 1;
        if !loss.is_finite() || !self.params.store().all_finite() {
            return Err(Error::NumericAbort {
                step: self.step,
                lr,
                loss_kind: self.config.loss_kind.name().into(),
                loss,
            });
        }
        Ok((loss, lr))
    }

    /// Mean one-hop metrics on `heldout`. Non-finite predictions mean the
    /// weights have diverged and are reported as a numeric abort.
    pub fn evaluate(&self, heldout: &Dataset, last_loss: f64) -> Result<Option<MetricReport>> {
        evaluate_pairs(&self.params, heldout, self.config.eval_steps).map_err(|e| match e {
            Error::NonFinite(_) => Error::NumericAbort {
                step: self.step,
                lr: self.config.lr_at(self.step.saturating_sub(1)),
                loss_kind: self.config.loss_kind.name().into(),
                loss: last_loss,
            },
            e => e,
        })
    }

    /// Trains until `config.iterations` total steps, evaluating on `heldout`
    /// every `eval_every` steps and after the final step.
    pub fn run(&mut self, train: &Dataset, heldout: Option<&Dataset>) -> Result<TrainHistory> {
        let mut history = TrainHistory::default();
        while self.step < self.config.iterations {
            let started = Instant::now();
            let (loss, lr) = self.step(train)?;
            history.losses.push(loss);
            history.learning_rates.push(lr);
            history.step_seconds.push(started.elapsed().as_secs_f64());
            let every = self.config.eval_every;
            if let Some(h) = heldout {
                if every > 0 && (self.step.is_multiple_of(every) || self.step == self.config.iterations) {
                    let report = self.evaluate(h, loss)?;
                    if let Some(report) = report {
                        history.evals.push(EvalRecord {
                            step: self.step,
                            report,
                        });
                    }
                }
            }
        }
        Ok(history)
    }
}

/// Trains a fresh model, holding out the tail of `dataset` for evaluation.
pub fn train(dataset: &Dataset, params: ModelParams, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let (train_set, heldout) = dataset.split_tail(config.holdout_fraction);
    let mut trainer = Trainer::new(params, config.clone())?;
    let history = trainer.run(&train_set, heldout.as_ref())?;
    Ok((trainer.params, history))
}

/// Gradient checks of the flow-matching loss on a time-conditioned copy of
/// `config` and, for the transformer, the energy-distance loss on a static copy.
/// Weights are jittered away from their zero initialization and dropout is off.
pub fn gradcheck_losses(
    config: &ModelConfig,
    particles: usize,
    seed: u64,
    opts: GradcheckOptions,
) -> Result<Vec<(LossKind, GradcheckReport)>> {
    if particles == 0 {
        return Err(Error::InvalidArgument("particles must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.ambient_dim;
    let cloud = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((particles, d), |_| rng.sample::<f64, _>(StandardNormal));
    let batch = vec![PairBatch {
        x: cloud(&mut rng),
        y: cloud(&mut rng),
    }];
    let model = |time_conditioned: bool, rng: &mut ChaCha8Rng| -> Result<ModelParams> {
        let mut p = ModelParams::init(ModelConfig {
            time_conditioned,
            dropout_rate: 0.0,
            ..config.clone()
        })?;
        p.store_mut().jitter(0.3, rng);
        Ok(p)
    };
    let mut out = Vec::new();
    let samples = flow_samples(&batch, true, &mut rng)?;
    let dynamic = model(true, &mut rng)?;
    out.push((
        LossKind::Tfm,
        gradcheck(&dynamic, |p, g| tfm_loss_graph(p, g, &samples, None), opts)?,
    ));
    if config.arch == Arch::Transformer {
        let static_model = model(false, &mut rng)?;
        let loss = StaticLoss {
            kind: LossKind::Ed,
            sinkhorn_epsilon: DEFAULT_RELATIVE_EPSILON,
            sinkhorn_iters: 10,
        };
        out.push((
            LossKind::Ed,
            gradcheck(&static_model, |p, g| static_loss_graph(p, g, &batch, &loss, None), opts)?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{MeasurePair, PointCloud};

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn tiny(time_conditioned: bool) -> ModelConfig {
        ModelConfig {
            ambient_dim: 2,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            fourier_frequencies: 2,
            time_embed_dim: 4,
            mlp_ratio: 2,
            dropout_rate: 0.0,
            time_conditioned,
            arch: Arch::Transformer,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    fn jittered(time_conditioned: bool) -> ModelParams {
        let mut p = ModelParams::init(tiny(time_conditioned)).unwrap();
        p.store_mut().jitter(0.3, &mut ChaCha8Rng::seed_from_u64(11));
        p
    }

    fn shift_dataset(rng: &mut ChaCha8Rng, pairs: usize, n: usize, c: [f64; 2]) -> Dataset {
        let shift = Array2::from_shape_fn((1, 2), |(_, k)| c[k]);
        Dataset::new(
            (0..pairs)
                .map(|_| {
                    let x = cloud(rng, n, 2);
                    let y = &x + &shift;
                    MeasurePair::new(PointCloud::new(x).unwrap(), PointCloud::new(y).unwrap(), None).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lr_factor_values() {
        assert_eq!(lr_factor(0, 100, 1.0, 0.01), 1.0);
        assert!((lr_factor(100, 100, 1.0, 0.01) - 0.01).abs() < 1e-15);
        assert!((lr_factor(50, 100, 1.0, 0.01) - 0.505).abs() < 1e-15);
        assert_eq!(lr_factor(3, 0, 0.7, 0.01), 0.7);
    }

    #[test]
    fn config_parsing_names_missing_fields() {
        let err = TrainConfig::from_json(&serde_json::json!({"loss_kind": "tfm", "iterations": 5})).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
        let err = TrainConfig::from_json(&serde_json::json!({"lr": 1e-3, "iterations": 5})).unwrap_err();
        assert!(err.to_string().contains("train.loss_kind"), "{err}");
        let ok = TrainConfig::from_json(&serde_json::json!({
            "lr": 1e-3, "loss_kind": "w1", "iterations": 5,
            "schedule": {"kind": "linear", "start_factor": 1.0, "end_factor": 0.01}
        }))
        .unwrap();
        assert_eq!(ok.loss_kind, LossKind::W1);
        assert!((ok.lr_at(5) - 1e-5).abs() < 1e-18);
        let err = TrainConfig::from_json(&serde_json::json!({
            "lr": 1e-3, "loss_kind": "otmse", "iterations": 5, "use_ot_coupling": false
        }))
        .unwrap_err();
        assert!(err.to_string().contains("use_ot_coupling"));
    }

    #[test]
    fn zero_velocity_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 6, 2);
        let batch = vec![PairBatch { x: x.clone(), y: x }];
        let samples = flow_samples(&batch, true, &mut rng).unwrap();
        assert!(samples[0].velocity.iter().all(|&v| v == 0.0));
        let p = ModelParams::init(tiny(true)).unwrap();
        let mut g = Graph::new();
        let l = tfm_loss_graph(&p, &mut g, &samples, None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn initial_loss_is_mean_squared_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = shift_dataset(&mut rng, 3, 10, [0.3, -0.4]);
        let config = TrainConfig {
            measure_batch: 2,
            particle_batch: 5,
            ..TrainConfig::new(LossKind::Tfm, 1e-3, 1)
        };
        let mut params = ModelParams::init(tiny(true)).unwrap();
        let mut state = AdamState::new(params.store());
        let mut step_rng = ChaCha8Rng::seed_from_u64(9);
        let loss = tfm_training_step(&data, &mut params, &mut state, &config, 1e-3, &mut step_rng).unwrap();
        // Replay the same draws independently.
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_pairs(&data, 2, 5, &mut replay).unwrap();
        let samples = flow_samples(&batch, true, &mut replay).unwrap();
        let mut total = 0.0;
        for s in &samples {
            total += s.velocity.iter().map(|v| v * v).sum::<f64>();
        }
        let expected = total / 10.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn tfm_loss_invariant_to_joint_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = jittered(true);
        let x = cloud(&mut rng, 5, 2);
        let y = cloud(&mut rng, 5, 2);
        let batch = vec![PairBatch { x, y }];
        let samples = flow_samples(&batch, true, &mut rng).unwrap();
        let perm = [4, 2, 0, 1, 3];
        let permuted: Vec<FlowSample> = samples
            .iter()
            .map(|s| FlowSample {
                t: s.t,
                z: crate::measures::select_rows(&s.z, &perm).unwrap(),
                velocity: crate::measures::select_rows(&s.velocity, &perm).unwrap(),
            })
            .collect();
        let eval = |s: &[FlowSample]| {
            let mut g = Graph::new();
            let l = tfm_loss_graph(&p, &mut g, s, None).unwrap();
            g.scalar(l)
        };
        assert!((eval(&samples) - eval(&permuted)).abs() < 1e-10);
    }

    #[test]
    fn otmse_matches_one_step_flow_at_t1() {
        // A time-ignoring velocity v(z) = F(z) - z evaluated at t=1 with a single
        // Euler step reproduces the static OTMSE objective on the same coupled batch.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = jittered(false);
        let batch = align_batch(vec![PairBatch {
            x: cloud(&mut rng, 6, 2),
            y: cloud(&mut rng, 6, 2),
        }])
        .unwrap();
        let mut g = Graph::new();
        let loss = StaticLoss {
            kind: LossKind::Otmse,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 10,
        };
        let l = static_loss_graph(&p, &mut g, &batch, &loss, None).unwrap();
        let otmse = g.scalar(l);
        let pb = &batch[0];
        let velocity_pred = p.forward(&pb.x, None).unwrap() - &pb.x;
        let target = &pb.y - &pb.x;
        let flow = (velocity_pred - target).mapv(|v| v * v).sum() / 6.0;
        assert!((otmse - flow).abs() < 1e-10);
    }

    #[test]
    fn ed_loss_hand_computed() {
        let p = ModelParams::init(tiny(false)).unwrap(); // zero output: F(x) = 0
        let batch = vec![PairBatch {
            x: ndarray::array![[1.0, 1.0], [2.0, 0.0]],
            y: ndarray::array![[3.0, 4.0], [0.0, 1.0]],
        }];
        let loss = StaticLoss {
            kind: LossKind::Ed,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 10,
        };
        let mut g = Graph::new();
        let l = static_loss_graph(&p, &mut g, &batch, &loss, None).unwrap();
        // P = {0, 0}; E|P-y| = (5 + 1) / 2; E|P-P'| = 0; E|y-y'| = 2 * sqrt(18) / 4.
        let expected = 2.0 * 3.0 - 0.0 - 18f64.sqrt() / 2.0;
        assert!((g.scalar(l) - expected).abs() < 1e-14);
    }

    #[test]
    fn ed_loss_zero_when_prediction_matches() {
        let p = ModelParams::init(tiny(false)).unwrap();
        let batch = vec![PairBatch {
            x: ndarray::array![[1.0, 1.0], [2.0, 0.0]],
            y: Array2::zeros((2, 2)),
        }];
        let loss = StaticLoss {
            kind: LossKind::Ed,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 10,
        };
        let mut g = Graph::new();
        let l = static_loss_graph(&p, &mut g, &batch, &loss, None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn mmd_loss_matches_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = jittered(false);
        let batch = vec![PairBatch {
            x: cloud(&mut rng, 5, 2),
            y: cloud(&mut rng, 6, 2),
        }];
        let loss = StaticLoss {
            kind: LossKind::Mmd,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 10,
        };
        let mut g = Graph::new();
        let l = static_loss_graph(&p, &mut g, &batch, &loss, None).unwrap();
        let pushed = crate::inference::static_map(&p, &PointCloud::new(batch[0].x.clone()).unwrap()).unwrap();
        let want = crate::metrics::mmd_rbf(&pushed, &PointCloud::new(batch[0].y.clone()).unwrap(), MMD_LOSS_GAMMA).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_loss_gradient_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = jittered(false);
        let batch = vec![PairBatch {
            x: cloud(&mut rng, 8, 2),
            y: cloud(&mut rng, 8, 2),
        }];
        for kind in [LossKind::W1, LossKind::W2] {
            let loss = StaticLoss {
                kind,
                sinkhorn_epsilon: 0.05,
                sinkhorn_iters: 200,
            };
            let mut g = Graph::new();
            let l = static_loss_graph(&p, &mut g, &batch, &loss, None).unwrap();
            let before = g.scalar(l);
            p.store_mut().zero_grad();
            g.backward(l).unwrap().accumulate_into(p.store_mut());
            let mut q = p.clone();
            for param in q.store_mut().iter_mut() {
                let grad = param.grad.clone();
                param.value.scaled_add(-1e-3, &grad);
            }
            let mut g2 = Graph::new();
            let l2 = static_loss_graph(&q, &mut g2, &batch, &loss, None).unwrap();
            assert!(g2.scalar(l2) < before, "{kind:?}");
        }
    }

    #[test]
    fn tfm_and_ed_losses_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = vec![PairBatch {
            x: cloud(&mut rng, 3, 2),
            y: cloud(&mut rng, 3, 2),
        }];
        let samples = flow_samples(&batch, true, &mut rng).unwrap();
        let dynamic = jittered(true);
        let report = gradcheck(
            &dynamic,
            |p, g| tfm_loss_graph(p, g, &samples, None),
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        let static_model = jittered(false);
        let loss = StaticLoss {
            kind: LossKind::Ed,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 10,
        };
        let report = gradcheck(
            &static_model,
            |p, g| static_loss_graph(p, g, &batch, &loss, None),
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn loss_gradcheck_helper_catches_a_broken_backward() {
        let ok = gradcheck_losses(&tiny(true), 3, 1, GradcheckOptions::default()).unwrap();
        assert_eq!(ok.len(), 2);
        assert!(ok.iter().all(|(_, r)| r.passed));
        let opts = GradcheckOptions {
            corrupt_backward: true,
            ..GradcheckOptions::default()
        };
        let bad = gradcheck_losses(&tiny(true), 3, 1, opts).unwrap();
        assert!(bad.iter().any(|(_, r)| !r.passed));
    }

    #[test]
    fn step_kind_and_model_must_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = shift_dataset(&mut rng, 2, 4, [1.0, 0.0]);
        let mut params = ModelParams::init(tiny(false)).unwrap();
        let mut state = AdamState::new(params.store());
        let config = TrainConfig {
            particle_batch: 4,
            ..TrainConfig::new(LossKind::Tfm, 1e-3, 1)
        };
        assert!(tfm_training_step(&data, &mut params, &mut state, &config, 1e-3, &mut rng).is_err());
    }

    #[test]
    fn otmse_without_coupling_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = shift_dataset(&mut rng, 2, 4, [1.0, 0.0]);
        let mut params = ModelParams::init(tiny(false)).unwrap();
        let mut state = AdamState::new(params.store());
        let config = TrainConfig {
            particle_batch: 4,
            use_ot_coupling: false,
            ..TrainConfig::new(LossKind::Otmse, 1e-3, 1)
        };
        let err = static_training_step(&data, &mut params, &mut state, &config, 1e-3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = shift_dataset(&mut rng, 4, 8, [0.5, 0.5]);
        let config = TrainConfig {
            measure_batch: 2,
            particle_batch: 8,
            holdout_fraction: 0.0,
            ..TrainConfig::new(LossKind::Tfm, 1e-3, 6)
        };
        let mut model = tiny(true);
        model.dropout_rate = 0.1;
        let (a, ha) = train(&data, ModelParams::init(model.clone()).unwrap(), &config).unwrap();
        let (b, hb) = train(&data, ModelParams::init(model.clone()).unwrap(), &config).unwrap();
        assert_eq!(ha.losses.len(), 6);
        assert_eq!(ha.losses, hb.losses);
        assert_eq!(a, b);

        let mut short = config.clone();
        short.iterations = 3;
        let mut first = Trainer::new(ModelParams::init(model).unwrap(), short).unwrap();
        let h1 = first.run(&data, None).unwrap();
        let mut resumed = Trainer::resume(first.params, first.optimizer, config, first.step).unwrap();
        let h2 = resumed.run(&data, None).unwrap();
        let joined: Vec<f64> = h1.losses.iter().chain(&h2.losses).copied().collect();
        assert_eq!(joined, ha.losses);
        assert_eq!(resumed.params, a);
    }

    #[test]
    fn single_iteration_history_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = shift_dataset(&mut rng, 10, 6, [0.5, 0.0]);
        let config = TrainConfig {
            measure_batch: 1,
            particle_batch: 4,
            eval_every: 1,
            eval_steps: 2,
            ..TrainConfig::new(LossKind::Tfm, 1e-3, 1)
        };
        let (_, h) = train(&data, ModelParams::init(tiny(true)).unwrap(), &config).unwrap();
        assert_eq!(h.losses.len(), 1);
        assert_eq!(h.evals.len(), 1);
        let lines = h.to_json_lines(0);
        assert_eq!(lines.lines().count(), 2);
        for line in lines.lines() {
            let _: Value = serde_json::from_str(line).unwrap();
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = shift_dataset(&mut rng, 2, 4, [0.5, 0.0]);
        let config = TrainConfig {
            measure_batch: 1,
            particle_batch: 4,
            holdout_fraction: 0.0,
            ..TrainConfig::new(LossKind::Tfm, 1e-3, 3)
        };
        let mut params = ModelParams::init(tiny(true)).unwrap();
        let id = params.store().find("output.bias").unwrap();
        params.store_mut().value_mut(id).fill(1e300);
        let err = train(&data, params, &config).unwrap_err();
        match err {
            Error::NumericAbort { step, loss_kind, .. } => {
                assert_eq!(step, 1);
                assert_eq!(loss_kind, "tfm");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
