use std::path::Path;

use anyhow::{bail, Context};
use m2m::inference::{predict_next, DEFAULT_INFERENCE_STEPS};
use m2m::measures::{load_dataset, load_pointcloud, save_pointcloud, Manifest, PairEntry};
use m2m::metrics::metric_report;
use m2m::neural::gradcheck::GradcheckOptions;
use m2m::neural::{load_checkpoint, save_checkpoint, Arch, ModelConfig, ModelParams};
use m2m::simulators::emit_mkv_dataset;
use m2m::training::{evaluate_pairs, gradcheck_losses, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{
    freeze, parse_corruption, parse_model, parse_systems, parse_train, resolve_seed, ConfigError,
    GradcheckFailed, RawConfig, SEED_ENV,
};
use crate::{Command, RunArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate(args) => simulate(&args),
        Command::Corrupt(args) => corrupt(&args),
        Command::Train { run, resume } => train(&run, resume),
        Command::Predict {
            checkpoint,
            input,
            output,
            steps,
            hops,
        } => predict(&checkpoint, &input, &output, steps, hops),
        Command::Eval {
            pred,
            target,
            checkpoint,
            manifest,
            steps,
        } => eval(pred, target, checkpoint, manifest, steps),
        Command::Gradcheck {
            config,
            particles,
            seed,
            corrupt_backward,
        } => gradcheck(config.as_deref(), particles, seed, corrupt_backward),
    }
}

struct Prepared {
    raw: RawConfig,
    out_dir: std::path::PathBuf,
    seed: Option<u64>,
}

fn prepare(args: &RunArgs) -> anyhow::Result<Prepared> {
    let raw = RawConfig::read(&args.config)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(args.seed, env.as_deref(), raw.seed()?)?;
    let out_dir = raw.out_dir(args.out_dir.as_deref())?;
    Ok(Prepared { raw, out_dir, seed })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn simulate(args: &RunArgs) -> anyhow::Result<()> {
    let Prepared { raw, out_dir, seed } = prepare(args)?;
    let mut systems = parse_systems(raw.section("data")?)?;
    if let Some(seed) = seed {
        for s in &mut systems {
            s.seed = seed;
        }
    }
    create_dir(&out_dir)?;
    freeze(
        &out_dir,
        &json!({"out_dir": out_dir, "seed": seed, "data": {"systems": systems}}),
    )?;
    let manifest = emit_mkv_dataset(&systems, &out_dir)?;
    println!("{}", manifest.display());
    Ok(())
}

fn corrupt(args: &RunArgs) -> anyhow::Result<()> {
    let Prepared { raw, out_dir, seed } = prepare(args)?;
    let data = raw.section("data")?;
    let targets = data
        .get("targets")
        .and_then(Value::as_array)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| ConfigError("data.targets: expected a non-empty list of paths".into()))?;
    let targets = targets
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(|s| raw.path(s))
                .ok_or_else(|| ConfigError(format!("data.targets[{i}]: expected a string")).into())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut corruption = parse_corruption(raw.root.get("corruption").unwrap_or(&json!({})))?;
    if let Some(seed) = seed {
        corruption.seed = seed;
    }
    create_dir(&out_dir)?;
    freeze(
        &out_dir,
        &json!({"out_dir": out_dir, "seed": seed, "data": {"targets": targets}, "corruption": corruption}),
    )?;
    let mut pairs = Vec::with_capacity(targets.len());
    let mut dim = None;
    for (i, path) in targets.iter().enumerate() {
        let clean = load_pointcloud(path)?;
        if *dim.get_or_insert(clean.dim()) != clean.dim() {
            bail!("{}: dimension {} differs from the first target", path.display(), clean.dim());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(corruption.seed);
        rng.set_stream(i as u64);
        let noisy = corruption.apply(&clean, &mut rng)?;
        let source = format!("corrupted_{i:03}.m2m");
        let target = format!("clean_{i:03}.m2m");
        save_pointcloud(&noisy, out_dir.join(&source))?;
        save_pointcloud(&clean, out_dir.join(&target))?;
        pairs.push(PairEntry {
            source: source.into(),
            target: target.into(),
            tag: Some(format!("target={}", path.display())),
        });
    }
    let manifest_path = out_dir.join("dataset.json");
    Manifest {
        ambient_dim: dim.unwrap_or(0),
        pairs,
        trajectories: Vec::new(),
    }
    .write(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn train(args: &RunArgs, resume: bool) -> anyhow::Result<()> {
    let Prepared { raw, out_dir, seed } = prepare(args)?;
    let data = raw.section("data")?;
    let manifest = raw.string(data, "data", "manifest")?;
    let heldout_manifest = match data.get("heldout_manifest") {
        Some(_) => Some(raw.string(data, "data", "heldout_manifest")?),
        None => None,
    };
    let mut train_config = parse_train(raw.section("train")?)?;
    let dataset = load_dataset(&manifest)?;
    let model_section = raw.section("model")?;
    let mut model_section = model_section.clone();
    let dynamic = train_config.loss_kind.is_dynamic();
    if let Some(obj) = model_section.as_object_mut() {
        let declared = obj.entry("time_conditioned").or_insert(Value::Bool(dynamic));
        if declared.as_bool() != Some(dynamic) {
            return Err(ConfigError(format!(
                "model.time_conditioned: must be {dynamic} for loss_kind {}",
                train_config.loss_kind.name()
            ))
            .into());
        }
    }
    let mut model_config = parse_model(&model_section, dataset.ambient_dim())?;
    if let Some(seed) = seed {
        train_config.seed = seed;
        model_config.init_seed = seed;
    }

    let (train_set, split) = match &heldout_manifest {
        Some(_) => (dataset.clone(), None),
        None => dataset.split_tail(train_config.holdout_fraction),
    };
    let heldout = match &heldout_manifest {
        Some(p) => Some(load_dataset(p)?),
        None => split,
    };

    create_dir(&out_dir)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let history_path = out_dir.join(HISTORY_FILE);
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&checkpoint_path)
            .with_context(|| format!("--resume needs {}", checkpoint_path.display()))?;
        if ckpt.params.config() != &model_config {
            return Err(ConfigError("model: differs from the checkpoint being resumed".into()).into());
        }
        let optimizer = ckpt
            .optimizer
            .context("checkpoint has no optimizer state to resume from")?;
        Trainer::resume(ckpt.params, optimizer, train_config.clone(), ckpt.step as usize)?
    } else {
        if history_path.exists() {
            std::fs::remove_file(&history_path)?;
        }
        Trainer::new(ModelParams::init(model_config.clone())?, train_config.clone())?
    };
    freeze(
        &out_dir,
        &json!({
            "out_dir": out_dir,
            "seed": seed,
            "data": {"manifest": manifest, "heldout_manifest": heldout_manifest},
            "model": model_config,
            "train": train_config,
        }),
    )?;

    let first_step = trainer.step;
    let result = trainer.run(&train_set, heldout.as_ref());
    let history = match result {
        Ok(h) => h,
        Err(err) => {
            // Keep the last finite state around for inspection.
            if trainer.params.store().all_finite() {
                save_checkpoint(&checkpoint_path, &trainer.params, trainer.step as u64, Some(&trainer.optimizer))?;
            }
            return Err(err.into());
        }
    };
    history.append_to(&history_path, first_step)?;
    save_checkpoint(&checkpoint_path, &trainer.params, trainer.step as u64, Some(&trainer.optimizer))?;

    let final_eval = match (history.evals.last(), &heldout) {
        (Some(e), _) if e.step == trainer.step => Some(e.report.clone()),
        (_, Some(h)) => trainer.evaluate(h, history.losses.last().copied().unwrap_or(f64::NAN))?,
        _ => None,
    };
    let summary = json!({
        "step": trainer.step,
        "final_loss": history.losses.last(),
        "checkpoint": checkpoint_path,
        "heldout": final_eval,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, output: &Path, steps: Option<usize>, hops: usize) -> anyhow::Result<()> {
    if hops == 0 {
        return Err(ConfigError("--hops: must be at least 1".into()).into());
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.params;
    let source = load_pointcloud(input)?;
    if source.dim() != params.config().ambient_dim {
        bail!(
            "{} has dimension {}, the model expects {}",
            input.display(),
            source.dim(),
            params.config().ambient_dim
        );
    }
    if !params.config().time_conditioned && steps.is_some() {
        eprintln!("warning: --steps is ignored for static (one-step) models");
    }
    let steps = steps.unwrap_or(DEFAULT_INFERENCE_STEPS);
    if steps == 0 {
        return Err(ConfigError("--steps: must be at least 1".into()).into());
    }
    let mut cloud = source;
    for _ in 0..hops {
        cloud = predict_next(&params, &cloud, steps)?;
    }
    save_pointcloud(&cloud, output)?;
    println!("{}", output.display());
    Ok(())
}

fn eval(
    pred: Option<std::path::PathBuf>,
    target: Option<std::path::PathBuf>,
    checkpoint: Option<std::path::PathBuf>,
    manifest: Option<std::path::PathBuf>,
    steps: usize,
) -> anyhow::Result<()> {
    let report = match (pred, target, checkpoint, manifest) {
        (Some(p), Some(t), None, None) => metric_report(&load_pointcloud(p)?, &load_pointcloud(t)?)?,
        (None, None, Some(c), Some(m)) => {
            let params = load_checkpoint(c)?.params;
            let dataset = load_dataset(m)?;
            evaluate_pairs(&params, &dataset, steps)?.context("dataset has no pairs")?
        }
        _ => {
            return Err(ConfigError("eval: pass --pred and --target, or --checkpoint and --manifest".into()).into())
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        ambient_dim: 2,
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        fourier_frequencies: 4,
        time_embed_dim: 8,
        dropout_rate: 0.0,
        arch: Arch::Transformer,
        ..ModelConfig::default()
    }
}

fn gradcheck(config: Option<&Path>, particles: usize, seed: u64, corrupt_backward: bool) -> anyhow::Result<()> {
    let model = match config {
        None => tiny_model(),
        Some(path) => {
            let raw = RawConfig::read(path)?;
            let value = raw.root.get("model").cloned().unwrap_or(Value::Object(raw.root.clone()));
            let dim = value.get("ambient_dim").and_then(Value::as_u64).unwrap_or(2) as usize;
            parse_model(&value, dim)?
        }
    };
    let opts = GradcheckOptions {
        corrupt_backward,
        ..GradcheckOptions::default()
    };
    let results = gradcheck_losses(&model, particles, seed, opts)?;
    let mut max_rel: f64 = 0.0;
    let mut worst: Option<(f64, String)> = None;
    for (kind, report) in &results {
        println!("loss {}", kind.name());
        for group in &report.groups {
            println!(
                "  {:<40} coords {:>5}  max abs err {:.3e}  max rel err {:.3e}  {}",
                group.name,
                group.coordinates,
                group.max_abs_error,
                group.max_rel_error,
                if group.failures == 0 { "ok" } else { "FAIL" }
            );
        }
        max_rel = max_rel.max(report.max_rel_error);
        if !report.passed && worst.as_ref().is_none_or(|(w, _)| report.max_rel_error > *w) {
            let name = report.worst.clone().unwrap_or_default();
            worst = Some((report.max_rel_error, format!("{name} ({} loss)", kind.name())));
        }
    }
    println!("max relative error: {max_rel:.3e}");
    match worst {
        None => {
            println!("gradcheck passed");
            Ok(())
        }
        Some((rel, name)) => Err(GradcheckFailed(format!("worst parameter {name}, relative error {rel:.3e}")).into()),
    }
}
