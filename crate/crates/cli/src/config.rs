//! Config resolution: built-in defaults, then the JSON file, then flag
//! overrides. Keys the defaults do not know are rejected, type errors name
//! the offending field, and range checks come back as one aggregated list.

use std::fs;
use std::path::{Path, PathBuf};

use oscifit::harness::{Experiment, ExperimentConfig};
use oscifit::model::{ArchConfig, ScaleProfile, TrainConfig};
use oscifit::signalgen::{GenerationConfig, LatentRanges, ProcessKind, TimeGrid, MIN_LENGTH};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// A subcommand's configuration.
pub trait CommandConfig: Serialize + DeserializeOwned {
    /// Defaults, which may depend on what the user supplied (a profile
    /// switch changes the training schedule, for instance).
    fn defaults(given: &Value) -> Value;
    /// Range and consistency problems, each naming its field.
    fn issues(&self) -> Vec<String>;
    /// Master seed, when the command uses randomness.
    fn seed(&self) -> Option<u64>;
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config types serialize")
}

/// Parse `key=value`; the value is read as JSON when possible and as a
/// string otherwise, so `beta=0.5` and `kinds=["am"]` both work.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{s}` is not of the form key=value")))?;
    if k.is_empty() {
        return Err(CliError::Usage(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Set a dotted path inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("just made an object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return;
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

/// Recursive object merge; non-object values in `over` replace `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Keys of `given` that do not appear in `known`, as dotted paths.
pub fn unknown_keys(known: &Value, given: &Value, prefix: &str) -> Vec<String> {
    let (Value::Object(k), Value::Object(g)) = (known, given) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => out.extend(unknown_keys(kv, v, &path)),
        }
    }
    out
}

/// Non-object values of `v` with their dotted paths.
fn leaves(v: &Value, prefix: &str) -> Vec<(String, Value)> {
    match v {
        Value::Object(m) => m
            .iter()
            .flat_map(|(k, x)| leaves(x, &if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }))
            .collect(),
        other => vec![(prefix.to_string(), other.clone())],
    }
}

/// Read a config file as a JSON object.
pub fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("config: cannot read {}: {e}", path.display())]))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(vec![format!("config: {} is not valid JSON: {e}", path.display())]))?;
    if !v.is_object() {
        return Err(CliError::Config(vec![format!("config: {} must hold a JSON object", path.display())]));
    }
    Ok(v)
}

/// Resolve a config from already-read user input.
pub fn resolve_value<C: CommandConfig>(given: Value) -> Result<C, CliError> {
    let mut merged = C::defaults(&given);
    let unknown = unknown_keys(&merged, &given, "");
    if !unknown.is_empty() {
        return Err(CliError::Config(unknown.into_iter().map(|k| format!("{k}: unknown field")).collect()));
    }
    let defaults = merged.clone();
    merge(&mut merged, given.clone());
    let cfg: C = match serde_json::from_value(merged) {
        Ok(c) => c,
        Err(whole) => {
            // Apply each supplied leaf to the defaults alone to find the
            // fields at fault.
            let mut errs = Vec::new();
            for (path, value) in leaves(&given, "") {
                let mut probe = defaults.clone();
                set_path(&mut probe, &path, value);
                if let Err(e) = serde_json::from_value::<C>(probe) {
                    errs.push(format!("{path}: {e}"));
                }
            }
            if errs.is_empty() {
                errs.push(format!("config: {whole}"));
            }
            return Err(CliError::Config(errs));
        }
    };
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(issues))
    }
}

/// Defaults, then `file`, then `overrides`.
pub fn resolve<C: CommandConfig>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<C, CliError> {
    let mut given = match file {
        Some(p) => read_file(p)?,
        None => Value::Object(Map::new()),
    };
    for (k, v) in overrides {
        set_path(&mut given, k, v.clone());
    }
    resolve_value(given)
}

/// Validate a config file for `command`, returning the effective config
/// with every default filled in.
pub fn validate_config(command: &str, path: &Path) -> Result<Value, Vec<String>> {
    fn go<C: CommandConfig>(path: &Path) -> Result<Value, CliError> {
        let c: C = resolve(Some(path), &[])?;
        Ok(to_value(&c))
    }
    let r = match command {
        "generate" => go::<GenerationConfig>(path),
        "train" => go::<TrainCommand>(path),
        "beta-sweep" => go::<BetaSweepCommand>(path),
        "predict" => go::<PredictCommand>(path),
        "fit" => go::<FitCommand>(path),
        "benchmark" | "assisted" | "partial" => go::<ExperimentConfig>(path),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    };
    r.map_err(|e| match e {
        CliError::Config(list) => list,
        other => vec![other.to_string()],
    })
}

fn required_file(field: &str, p: &Path, out: &mut Vec<String>) {
    if p.as_os_str().is_empty() {
        out.push(format!("{field}: required"));
    } else if !p.is_file() {
        out.push(format!("{field}: file not found: {}", p.display()));
    }
}

impl CommandConfig for GenerationConfig {
    fn defaults(_: &Value) -> Value {
        to_value(&GenerationConfig::new(&[ProcessKind::Mono], 1000, 256, 0))
    }

    fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kinds.is_empty() {
            out.push("kinds: must not be empty".into());
        }
        if self.n == 0 {
            out.push("n: must be at least 1".into());
        }
        if self.length < MIN_LENGTH {
            out.push(format!("T = {}: must be at least {MIN_LENGTH}", self.length));
        } else if let Err(e) = self.grid().and_then(LatentRanges::for_grid) {
            out.push(format!("T = {}: {e}", self.length));
        } else if let Err(e) = self.ranges() {
            out.push(format!("fm_range_override: {e}"));
        }
        out
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

/// `train`: network shape plus the training schedule, in one flat object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCommand {
    pub profile: ScaleProfile,
    pub latent_dim: usize,
    /// `null` means the profile's default length.
    #[serde(rename = "T")]
    pub length: Option<usize>,
    pub bottleneck_dim: usize,
    /// Replace `beta` by the loss-balancing value measured on the untrained
    /// model.
    pub auto_beta: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl TrainCommand {
    fn defaults_for(profile: ScaleProfile) -> Self {
        let kinds = [ProcessKind::Mono];
        Self {
            profile,
            latent_dim: 7,
            length: None,
            bottleneck_dim: 64,
            auto_beta: false,
            train: match profile {
                ScaleProfile::Full => TrainConfig::full(&kinds),
                ScaleProfile::Desk => TrainConfig::desk(&kinds),
            },
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            length: self.length.unwrap_or(self.profile.default_length()),
            bottleneck_dim: self.bottleneck_dim,
            latent_dim: self.latent_dim,
            profile: self.profile,
        }
    }
}

fn profile_of(given: &Value) -> ScaleProfile {
    given
        .get("profile")
        .and_then(|v| v.as_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(ScaleProfile::Desk)
}

impl CommandConfig for TrainCommand {
    fn defaults(given: &Value) -> Value {
        to_value(&Self::defaults_for(profile_of(given)))
    }

    fn issues(&self) -> Vec<String> {
        let arch = self.arch();
        let mut out = arch.issues();
        if out.is_empty() {
            if let Err(e) = TimeGrid::new(arch.length).and_then(LatentRanges::for_grid) {
                out.push(format!("T = {}: {e}", arch.length));
            }
        }
        out.extend(self.train.issues());
        out
    }

    fn seed(&self) -> Option<u64> {
        Some(self.train.seed)
    }
}

/// `beta-sweep`: one training run per β, everything else shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepCommand {
    pub betas: Vec<f64>,
    #[serde(flatten)]
    pub base: TrainCommand,
}

impl CommandConfig for BetaSweepCommand {
    fn defaults(given: &Value) -> Value {
        to_value(&BetaSweepCommand {
            betas: vec![0.0, 0.001, 0.5, 1.0],
            base: TrainCommand::defaults_for(profile_of(given)),
        })
    }

    fn issues(&self) -> Vec<String> {
        let mut out = self.base.issues();
        if self.betas.is_empty() {
            out.push("betas: must not be empty".into());
        }
        for b in &self.betas {
            if !(0.0..=1.0).contains(b) {
                out.push(format!("betas: {b} must lie in [0, 1]"));
            }
        }
        if self.base.auto_beta {
            out.push("auto_beta: cannot be combined with an explicit beta sweep".into());
        }
        out
    }

    fn seed(&self) -> Option<u64> {
        Some(self.base.train.seed)
    }
}

/// `predict`: run a checkpoint over a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictCommand {
    pub model: PathBuf,
    pub data: PathBuf,
}

impl CommandConfig for PredictCommand {
    fn defaults(_: &Value) -> Value {
        to_value(&PredictCommand {
            model: PathBuf::new(),
            data: PathBuf::new(),
        })
    }

    fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        required_file("model", &self.model, &mut out);
        required_file("data", &self.data, &mut out);
        out
    }

    fn seed(&self) -> Option<u64> {
        None
    }
}

/// Where a batch fit takes its initial guesses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitSource {
    Truth,
    Model,
}

/// `fit`: Levenberg-Marquardt over every record of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCommand {
    pub data: PathBuf,
    pub init: InitSource,
    pub model: Option<PathBuf>,
    pub max_iter: usize,
}

impl CommandConfig for FitCommand {
    fn defaults(_: &Value) -> Value {
        to_value(&FitCommand {
            data: PathBuf::new(),
            init: InitSource::Truth,
            model: None,
            max_iter: 200,
        })
    }

    fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        required_file("data", &self.data, &mut out);
        match (&self.init, &self.model) {
            (InitSource::Model, None) => out.push("model: required when init = model".into()),
            (_, Some(m)) => required_file("model", m, &mut out),
            _ => {}
        }
        if self.max_iter == 0 {
            out.push("max_iter: must be at least 1".into());
        }
        out
    }

    fn seed(&self) -> Option<u64> {
        None
    }
}

impl CommandConfig for ExperimentConfig {
    fn defaults(_: &Value) -> Value {
        to_value(&ExperimentConfig::default())
    }

    fn issues(&self) -> Vec<String> {
        let mut out = ExperimentConfig::issues(self);
        required_file("checkpoint", &self.checkpoint, &mut out);
        if let (Experiment::Partial, Some(p)) = (self.experiment, &self.specialized_checkpoint) {
            required_file("specialized_checkpoint", p, &mut out);
        }
        out
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_error<C: CommandConfig + std::fmt::Debug>(v: Value) -> Vec<String> {
        match resolve_value::<C>(v) {
            Err(CliError::Config(list)) => list,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn beta_out_of_range_names_field() {
        let errs = config_error::<TrainCommand>(serde_json::json!({"beta": 1.5}));
        assert_eq!(errs.len(), 1);
        assert!(errs[0].contains("beta") && errs[0].contains("[0, 1]"), "{errs:?}");
    }

    #[test]
    fn issues_are_aggregated() {
        let errs = config_error::<TrainCommand>(serde_json::json!({"beta": -1.0, "epochs": 0, "latent_dim": 6}));
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn type_errors_carry_the_path() {
        let errs = config_error::<TrainCommand>(serde_json::json!({"adam": {"lr": "fast"}, "profile": "huge", "epochs": 3}));
        assert_eq!(errs.len(), 2, "{errs:?}");
        assert!(errs[0].starts_with("adam.lr: "), "{errs:?}");
        assert!(errs[1].starts_with("profile: "), "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let errs = config_error::<TrainCommand>(serde_json::json!({"betta": 0.1, "adam": {"gamma": 1}}));
        assert_eq!(errs, ["adam.gamma: unknown field", "betta: unknown field"]);
    }

    #[test]
    fn minimal_config_fills_defaults_and_is_idempotent() {
        let c: TrainCommand = resolve_value(serde_json::json!({})).unwrap();
        assert_eq!(c.train, TrainConfig::desk(&[ProcessKind::Mono]));
        let echo = to_value(&c);
        let again: TrainCommand = resolve_value(echo.clone()).unwrap();
        assert_eq!(to_value(&again), echo);
    }

    #[test]
    fn profile_switches_schedule_defaults() {
        let c: TrainCommand = resolve_value(serde_json::json!({"profile": "full"})).unwrap();
        assert_eq!((c.train.sets, c.train.samples_per_set, c.train.epochs), (12, 100_000, 17));
        assert_eq!(c.arch().length, 512);
        let c: TrainCommand = resolve_value(serde_json::json!({"profile": "full", "epochs": 2})).unwrap();
        assert_eq!(c.train.epochs, 2);
    }

    #[test]
    fn overrides_parse_json_or_string() {
        assert_eq!(parse_override("beta=0.5").unwrap(), ("beta".into(), serde_json::json!(0.5)));
        assert_eq!(parse_override("profile=full").unwrap(), ("profile".into(), serde_json::json!("full")));
        assert_eq!(parse_override("kinds=[\"am\"]").unwrap().1, serde_json::json!(["am"]));
        assert!(parse_override("beta").is_err());
        let mut v = serde_json::json!({});
        set_path(&mut v, "adam.lr", serde_json::json!(0.01));
        assert_eq!(v, serde_json::json!({"adam": {"lr": 0.01}}));
    }

    #[test]
    fn generation_checks() {
        let errs = config_error::<GenerationConfig>(serde_json::json!({"kinds": [], "n": 0, "T": 8}));
        assert_eq!(errs.len(), 3, "{errs:?}");
        let errs = config_error::<GenerationConfig>(serde_json::json!({"T": 64}));
        assert!(errs[0].starts_with("T = 64"), "{errs:?}");
        let errs = config_error::<TrainCommand>(serde_json::json!({"T": 64}));
        assert!(errs[0].starts_with("T = 64"), "{errs:?}");
    }

    #[test]
    fn fit_needs_model_for_model_init() {
        let errs = config_error::<FitCommand>(serde_json::json!({"init": "model"}));
        assert!(errs.iter().any(|e| e.starts_with("data: required")));
        assert!(errs.iter().any(|e| e.starts_with("model: required")));
    }
}
