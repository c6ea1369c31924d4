//! Run-config parsing, seed resolution and exit codes.

use std::fmt;
use std::path::{Path, PathBuf};

use m2m::neural::ModelConfig;
use m2m::simulators::{CorruptionConfig, SdeConfig, System};
use m2m::training::TrainConfig;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "M2M_SEED";

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

/// Invalid or incomplete configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Gradient check beyond tolerance (exit code 4).
#[derive(Debug)]
pub struct GradcheckFailed(pub String);

impl fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return EXIT_GRADCHECK;
    }
    match err.downcast_ref::<m2m::Error>() {
        Some(m2m::Error::Config(_)) => EXIT_CONFIG,
        Some(m2m::Error::NumericAbort { .. }) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// `--seed` beats `M2M_SEED`, which beats the config's top-level `seed`.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(raw) = env {
        let seed = raw
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}: not an unsigned integer: {raw:?}")))?;
        return Ok(Some(seed));
    }
    Ok(config)
}

/// Parsed JSON config with its location, for resolving relative paths.
pub struct RawConfig {
    pub root: Map<String, Value>,
    pub dir: PathBuf,
}

impl RawConfig {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let Value::Object(root) = value else {
            return Err(config_err("top level must be a JSON object"));
        };
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(RawConfig { root, dir })
    }

    pub fn section(&self, name: &str) -> anyhow::Result<&Value> {
        self.root
            .get(name)
            .ok_or_else(|| config_err(format!("{name}: missing required section")))
    }

    pub fn path(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn string(&self, section: &Value, prefix: &str, key: &str) -> anyhow::Result<PathBuf> {
        let v = section
            .get(key)
            .ok_or_else(|| config_err(format!("{prefix}.{key}: missing required field")))?;
        let s = v
            .as_str()
            .ok_or_else(|| config_err(format!("{prefix}.{key}: expected a string")))?;
        Ok(self.path(s))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        match self.root.get("out_dir") {
            Some(Value::String(s)) => Ok(self.path(s)),
            Some(_) => Err(config_err("out_dir: expected a string")),
            None => Err(config_err("out_dir: missing (set it in the config or pass --out-dir)")),
        }
    }

    pub fn seed(&self) -> anyhow::Result<Option<u64>> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| config_err("seed: expected an unsigned integer")),
        }
    }
}

pub fn parse_systems(data: &Value) -> anyhow::Result<Vec<SdeConfig>> {
    let list = data
        .get("systems")
        .and_then(Value::as_array)
        .ok_or_else(|| config_err("data.systems: expected a list of system configs"))?;
    if list.is_empty() {
        return Err(config_err("data.systems: list is empty"));
    }
    let repeat = match data.get("repeat") {
        None => 1,
        Some(v) => v
            .as_u64()
            .filter(|&r| r >= 1)
            .ok_or_else(|| config_err("data.repeat: expected a positive integer"))? as usize,
    };
    let mut systems = Vec::new();
    for (i, v) in list.iter().enumerate() {
        let prefix = format!("data.systems[{i}]");
        let name = v
            .get("system")
            .ok_or_else(|| config_err(format!("{prefix}.system: missing required field")))?;
        serde_json::from_value::<System>(name.clone())
            .map_err(|e| config_err(format!("{prefix}.system: {e}")))?;
        let sde: SdeConfig =
            serde_json::from_value(v.clone()).map_err(|e| config_err(format!("{prefix}: {e}")))?;
        sde.validate()
            .map_err(|e| config_err(format!("{prefix}.{}", e.to_string().trim_start_matches("config error: "))))?;
        systems.push(sde);
    }
    let one_pass = systems.clone();
    for _ in 1..repeat {
        systems.extend(one_pass.iter().cloned());
    }
    Ok(systems)
}

pub fn parse_model(value: &Value, ambient_dim: usize) -> anyhow::Result<ModelConfig> {
    let mut value = value.clone();
    let obj = value
        .as_object_mut()
        .ok_or_else(|| config_err("model: expected an object"))?;
    obj.entry("ambient_dim").or_insert(Value::from(ambient_dim));
    let config: ModelConfig = serde_json::from_value(value).map_err(|e| config_err(format!("model: {e}")))?;
    if config.ambient_dim != ambient_dim {
        return Err(config_err(format!(
            "model.ambient_dim: {} does not match the data dimension {ambient_dim}",
            config.ambient_dim
        )));
    }
    config.validate()?;
    Ok(config)
}

pub fn parse_train(value: &Value) -> anyhow::Result<TrainConfig> {
    Ok(TrainConfig::from_json(value)?)
}

pub fn parse_corruption(value: &Value) -> anyhow::Result<CorruptionConfig> {
    let config: CorruptionConfig =
        serde_json::from_value(value.clone()).map_err(|e| config_err(format!("corruption: {e}")))?;
    config
        .validate()
        .map_err(|e| config_err(format!("corruption.{}", e.to_string().trim_start_matches("config error: "))))?;
    Ok(config)
}

/// Writes the resolved config as `config.json` in `out_dir`.
pub fn freeze<T: Serialize>(out_dir: &Path, resolved: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    std::fs::write(out_dir.join("config.json"), text)?;
    Ok(())
}
