//! Declarative run configuration: TOML file, then `GNET__SECTION__KEY`
//! environment overrides, then `--set section.key=value` flags.

use std::path::{Path, PathBuf};

use gnet_core::data::PrepareConfig;
use gnet_core::models::{DiscriminatorConfig, GeneratorConfig};
use gnet_core::synth::StormConfig;
use gnet_core::train::TrainConfig;
use gnet_core::uncertainty::GroupBy;
use gnet_core::verify::{EvalConfig, DEFAULT_THRESHOLDS};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "GNET__";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Ingestion schema id for raw archives.
    pub schema: String,
    pub train_archive: PathBuf,
    pub test_archive: PathBuf,
    pub container: PathBuf,
    /// Chronological tail of the training split held out for validation.
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            schema: "generic-h5".into(),
            train_archive: "data/train_archive.h5".into(),
            test_archive: "data/test_archive.h5".into(),
            container: "data/dataset.h5".into(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_frames: usize,
    pub test_frames: usize,
    /// Test archive continues where the training archive ends, with seed + 1.
    pub storm: StormConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train_frames: 2016,
            test_frames: 576,
            storm: StormConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: Option<PathBuf>,
    /// Score the persistence baseline instead of a checkpoint.
    pub persistence: bool,
    /// Name in reports; derived from the checkpoint when absent.
    pub label: Option<String>,
    pub runs: usize,
    pub thresholds: Vec<f64>,
    pub batch_size: usize,
    pub by_season: bool,
    pub test_time_dropout: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            checkpoint: None,
            persistence: false,
            label: None,
            runs: e.runs,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            batch_size: e.batch_size,
            by_season: e.by_season,
            test_time_dropout: e.test_time_dropout,
        }
    }
}

impl EvaluateSection {
    pub fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            runs: self.runs,
            thresholds: self.thresholds.clone(),
            batch_size: self.batch_size,
            seed,
            by_season: self.by_season,
            test_time_dropout: self.test_time_dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    pub samples: Vec<usize>,
    pub runs: usize,
    pub test_time_dropout: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: SplitName::Test,
            samples: vec![0],
            runs: 10,
            test_time_dropout: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub checkpoint: Option<PathBuf>,
    pub label: Option<String>,
    pub split: SplitName,
    /// Test-time-dropout passes.
    pub k: usize,
    pub batch_size: usize,
    pub group_by: Vec<GroupBy>,
    /// Samples whose maps are exported as arrays and images.
    pub map_samples: Vec<usize>,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            label: None,
            split: SplitName::Test,
            k: 10,
            batch_size: 8,
            group_by: vec![GroupBy::Leadtime, GroupBy::Season],
            map_samples: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamSection {
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    pub sample: usize,
    /// Activation sites such as `enc_map/d1/cbam`; empty means all of them.
    pub sites: Vec<String>,
    pub binarize_mm: f64,
}

impl Default for GradcamSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: SplitName::Test,
            sample: 0,
            sites: Vec::new(),
            binarize_mm: gnet_core::explain::DEFAULT_BINARIZE_MM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Run directories holding `metrics.json` and/or uncertainty summaries.
    pub inputs: Vec<PathBuf>,
    /// Threshold used for the per-season score charts.
    pub season_threshold_mm: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            season_threshold_mm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every section's own seed.
    pub seed: Option<u64>,
    pub run_dir: PathBuf,
    pub precision: Precision,
    pub data: DataSection,
    pub synth: SynthSection,
    pub prepare: PrepareConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
    pub predict: PredictSection,
    pub uncertainty: UncertaintySection,
    pub gradcam: GradcamSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            run_dir: "runs/latest".into(),
            precision: Precision::F32,
            data: DataSection::default(),
            synth: SynthSection::default(),
            prepare: PrepareConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateSection::default(),
            predict: PredictSection::default(),
            uncertainty: UncertaintySection::default(),
            gradcam: GradcamSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl RunConfig {
    /// Seed shared by evaluation, prediction and uncertainty passes.
    pub fn eval_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.synth.storm.seed = s;
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(e.into()))
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(root: &mut Table, path: &[String], value: Value, origin: &str) -> Result<(), CliError> {
    let (last, parents) = path.split_last().ok_or_else(|| CliError::Config(format!("empty key in {origin}")))?;
    let mut table = root;
    for (i, key) in parents.iter().enumerate() {
        let entry = table.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("`{}` is not a section ({origin})", path[..=i].join(".")))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Applies `GNET__SECTION__KEY=value` variables; keys are lower-cased.
pub fn apply_env(root: &mut Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, v) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed override variable `{k}`")));
        }
        set_path(root, &path, parse_value(&v), &k)?;
    }
    Ok(())
}

/// Applies `section.key=value` assignments.
pub fn apply_sets(root: &mut Table, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`--set {s}` is not of the form key=value")))?;
        let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
        set_path(root, &path, parse_value(v.trim()), &format!("--set {s}"))?;
    }
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))
}

pub fn from_table(table: Table) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
    cfg.apply_seed();
    Ok(cfg)
}

/// File, then environment, then `--set` flags.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    apply_env(&mut table, env)?;
    apply_sets(&mut table, sets)?;
    from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_is_file_env_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nbatch_size = 4\nlambda = 5.0\nmax_epochs = 3\n").unwrap();
        let cfg = load(
            Some(&p),
            env(&[("GNET__TRAIN__BATCH_SIZE", "6"), ("GNET__TRAIN__LAMBDA", "7.5"), ("OTHER", "x")]),
            &["train.batch_size=8".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lambda, 7.5);
        assert_eq!(cfg.train.max_epochs, 3);
    }

    #[test]
    fn nested_and_string_overrides() {
        let cfg = load(
            None,
            env(&[("GNET__SYNTH__STORM__N_CELLS", "3"), ("GNET__DATA__CONTAINER", "x/y.h5")]),
            &["evaluate.thresholds=[1.0, 2.0]".into()],
        )
        .unwrap();
        assert_eq!(cfg.synth.storm.n_cells, 3);
        assert_eq!(cfg.data.container, PathBuf::from("x/y.h5"));
        assert_eq!(cfg.evaluate.thresholds, vec![1.0, 2.0]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = load(None, env(&[("GNET__TRAIN__BATCH_SIZ", "6")]), &[]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("batch_siz")), "{err}");
        let err = load(None, Vec::new(), &["nosuch.key=1".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("nosuch")), "{err}");
    }

    #[test]
    fn wrong_type_is_a_config_error() {
        let err = load(None, Vec::new(), &["train.batch_size=\"many\"".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = load(None, Vec::new(), &["train.batch_size.x=1".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("train.batch_size")), "{err}");
    }

    #[test]
    fn master_seed_propagates() {
        let cfg = load(None, Vec::new(), &["seed=42".into()]).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.synth.storm.seed, 42);
        assert_eq!(cfg.eval_seed(), 42);
    }
}
