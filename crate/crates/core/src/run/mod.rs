//! Declarative run configuration and the training, inference and
//! evaluation drivers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub mod infer;
pub mod train;

pub use infer::{evaluate_dirs, evaluate_samples, predict_image, Predictor};
pub use train::{train, StepRecord, TrainOutcome, Trained, LOSS_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Passes over the training patches; ignored when `steps` is set.
    pub epochs: usize,
    /// Exact number of optimizer steps, cycling through epochs as needed.
    pub steps: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Writes `last.mct` every this many steps, and always at the end.
    pub checkpoint_interval: usize,
    /// Trailing fraction of samples (sorted by id) held out for validation.
    pub val_fraction: f64,
    pub augment: bool,
    /// Train in double precision.
    pub f64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            epochs: 10,
            steps: None,
            seed: 0,
            output_dir: PathBuf::from("runs/mcads"),
            checkpoint_interval: 100,
            val_fraction: 0.2,
            augment: true,
            f64: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub hw: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `images/` and `masks/`; takes precedence over `synth`.
    pub dataset_dir: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub patch: usize,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset_dir: None, synth: Some(SynthSpec { count: 16, hw: 64 }), patch: 64, stride: 32 }
    }
}

impl DataConfig {
    /// Reads the dataset directory or generates the synthetic set.
    pub fn load(&self, seed: u64) -> Result<Vec<Sample>> {
        if let Some(dir) = &self.dataset_dir {
            return data::load_dir(dir);
        }
        let spec = self.synth.ok_or_else(|| Error::Config("data needs `dataset_dir` or `synth`".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        data::synth_dataset(spec.count, spec.hw, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub output_dir: PathBuf,
    /// Also write the probability map next to each predicted mask.
    pub save_probability: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, output_dir: PathBuf::from("predictions"), save_probability: false }
    }
}

/// Learning rate and batch size follow the reference training setup; the
/// model and patches are scaled down to train on one CPU core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        for o in overrides {
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut v, key, parse_value(raw))?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.val_fraction) || t.checkpoint_interval == 0 {
            return Err(Error::Config("train needs batch >= 1, lr > 0, 0 <= val_fraction < 1, interval >= 1".into()));
        }
        let d = &self.data;
        if d.patch == 0 || !d.patch.is_multiple_of(32) || d.stride == 0 || d.stride > d.patch {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of 32 with 1 <= stride <= patch (stride {})",
                d.patch, d.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Replaces the value at a dotted path. Objects along the way must exist
/// so that misspelled keys are reported; a null leaf may be replaced.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().unwrap()
            }
            _ => return Err(Error::Config(format!("`{key}`: `{}` is not a section", parts[..i].join(".")))),
        };
        if last {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry(*part).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}
