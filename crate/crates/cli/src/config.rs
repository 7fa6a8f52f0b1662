//! The run configuration: a JSON document whose every field can be
//! overridden by a `--dotted.name value` flag.

use std::path::{Path, PathBuf};

use mvtn::dataset::SyntheticSpec;
use mvtn::retrieval::{ApMode, DEFAULT_EPSILON, DEFAULT_NEIGHBORS};
use mvtn::train::{BaseConfig, RobustnessOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Seed keys filled from `MVTN_SEED` unless the config file sets them.
const SEED_KEYS: [&str; 4] = ["train.seed", "data.synthetic.seed", "robustness.seed", "gradcheck.seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated from `data.synthetic`.
    Synthetic,
    /// A directory written by `gen-data`.
    Dir,
    /// A ModelNet-style `class/split/*.off` tree.
    Modelnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub face_cap: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            face_cap: mvtn::mesh::LoadOptions::default().face_cap,
            synthetic: SyntheticSpec::benchmark(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// LFDA target rank; `None` ranks raw signatures.
    pub lfda_rank: Option<usize>,
    pub neighbors: usize,
    pub epsilon: f64,
    pub ap_mode: ApMode,
    /// Ranks per query written to `retrieval.csv`.
    pub top: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { lfda_rank: None, neighbors: DEFAULT_NEIGHBORS, epsilon: DEFAULT_EPSILON, ap_mode: ApMode::Standard, top: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreviewConfig {
    pub mesh: Option<PathBuf>,
    pub config: BaseConfig,
    pub views: usize,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self { mesh: None, config: BaseConfig::Circular, views: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub fixtures: usize,
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { fixtures: 20, coordinates: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/checkpoint.mvtn`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub robustness: RobustnessOptions,
    pub retrieval: RetrievalConfig,
    pub preview: PreviewConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            robustness: RobustnessOptions::default(),
            retrieval: RetrievalConfig::default(),
            preview: PreviewConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint.mvtn"))
    }
}

/// A rejected flag or config document.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn get<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |v, k| v.as_object()?.get(k))
}

fn set(v: &mut Value, path: &str, new: Value) -> bool {
    let mut cur = v;
    for k in path.split('.') {
        match cur.as_object_mut().and_then(|o| o.get_mut(k)) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    *cur = new;
    true
}

/// Every dotted path in `v` whose last segment is `leaf`.
fn find_leaf(v: &Value, prefix: &str, leaf: &str, out: &mut Vec<String>) {
    if let Some(o) = v.as_object() {
        for (k, child) in o {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if k == leaf {
                out.push(path.clone());
            }
            find_leaf(child, &path, leaf, out);
        }
    }
}

/// Resolves a flag name to a dotted path. A bare name must be a top-level
/// key, a command alias, or the unique leaf of that name.
fn resolve_key(tree: &Value, name: &str, aliases: &[(&str, &str)]) -> Result<String, UsageError> {
    if let Some((_, path)) = aliases.iter().find(|(a, _)| *a == name) {
        return Ok(path.to_string());
    }
    if name.contains('.') || tree.get(name).is_some() {
        return if get(tree, name).is_some() { Ok(name.into()) } else { Err(UsageError(format!("unknown flag --{name}"))) };
    }
    let mut hits = Vec::new();
    find_leaf(tree, "", name, &mut hits);
    match hits.len() {
        0 => Err(UsageError(format!("unknown flag --{name}"))),
        1 => Ok(hits.remove(0)),
        _ => Err(UsageError(format!("ambiguous flag --{name}: use one of --{}", hits.join(", --")))),
    }
}

/// A flag value: JSON when it parses (numbers, booleans, null, objects),
/// otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()))
}

/// Splits `--name value` and `--name=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(UsageError(format!("unexpected argument {a:?}")));
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| UsageError(format!("flag --{flag} needs a value")))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Layers defaults, the config file, `MVTN_SEED`, then flag overrides.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[(String, String)],
    aliases: &[(&str, &str)],
    env_seed: Option<&str>,
) -> Result<RunConfig, UsageError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut from_file = Value::Object(Default::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        from_file = serde_json::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_value(from_file.clone()).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        tree = serde_json::to_value(cfg).expect("config serializes");
    }
    if let Some(raw) = env_seed {
        let seed: u64 = raw.trim().parse().map_err(|_| UsageError(format!("MVTN_SEED={raw:?} is not an unsigned integer")))?;
        for key in SEED_KEYS {
            if get(&from_file, key).is_none() {
                set(&mut tree, key, Value::from(seed));
            }
        }
    }
    for (name, raw) in overrides {
        let key = resolve_key(&tree, name, aliases)?;
        set(&mut tree, &key, parse_value(raw));
        serde_json::from_value::<RunConfig>(tree.clone()).map_err(|e| UsageError(format!("--{name} {raw}: {e}")))?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| UsageError(e.to_string()))?;
    cfg.train.validate().map_err(|e| UsageError(format!("train: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvtn::train::Variant;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn dotted_and_bare_overrides() {
        let o = parse_overrides(&args(&["--train.epochs", "3", "--variant=fixed", "--output_dir", "x"])).unwrap();
        let cfg = resolve(None, &o, &[], None).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.variant, Variant::Fixed);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn unknown_and_ambiguous_flags_are_named() {
        let bad = |a: &[&str]| resolve(None, &parse_overrides(&args(a)).unwrap(), &[], None).unwrap_err().0;
        assert!(bad(&["--train.nope", "1"]).contains("--train.nope"));
        assert!(bad(&["--views", "3"]).contains("ambiguous"));
        assert!(bad(&["--train.epochs", "many"]).contains("--train.epochs"));
        assert!(parse_overrides(&args(&["--seed"])).unwrap_err().0.contains("--seed"));
        let aliased = resolve(None, &parse_overrides(&args(&["--views", "6"])).unwrap(), &[("views", "preview.views")], None).unwrap();
        assert_eq!(aliased.preview.views, 6);
    }

    #[test]
    fn file_env_and_echo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"seed": 9, "views": 6}}"#).unwrap();
        let cfg = resolve(Some(&p), &[], &[], Some("4")).unwrap();
        assert_eq!((cfg.train.seed, cfg.train.views, cfg.robustness.seed, cfg.data.synthetic.seed), (9, 6, 4, 4));
        let echoed = serde_json::to_string(&cfg).unwrap();
        let q = dir.path().join("echo.json");
        std::fs::write(&q, &echoed).unwrap();
        assert_eq!(resolve(Some(&q), &[], &[], None).unwrap(), cfg);
        std::fs::write(&p, r#"{"train": {"sed": 9}}"#).unwrap();
        assert!(resolve(Some(&p), &[], &[], None).unwrap_err().0.contains("sed"));
    }
}
