//! Experiment configuration: a named profile, then a TOML file, then
//! command-line overrides, each layer winning over the previous one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::encoder::ContextMode;
use crate::error::{Error, Result};
use crate::numerics::optim::OptimizerKind;
use crate::transducer::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    /// Record `wall_ms` in the metrics log; off gives byte-reproducible logs.
    pub log_wall_time: bool,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 30,
            max_steps: None,
            learning_rate: 3e-3,
            warmup_steps: 50,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(5.0),
            log_wall_time: true,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub history_frames: Vec<usize>,
    /// Current-utterance frames after subsampling.
    pub current_frames: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            history_frames: vec![25, 50, 100, 200, 400, 800],
            current_frames: 64,
            repetitions: 30,
            warmup: 3,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    /// Raw feature frames per second, used for real-time factors.
    pub frame_rate: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub corpus: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

/// Command-line values that replace whatever the file said.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub context_mode: Option<ContextMode>,
    pub n_prev: Option<usize>,
    pub pool_slots: Option<usize>,
    pub streaming: Option<bool>,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let model = match profile {
            Profile::Paper => ModelConfig::paper(),
            Profile::Desk => ModelConfig::desk(),
        };
        let corpus = SyntheticSpec {
            feature_dim: model.encoder.input_dim,
            ..SyntheticSpec::default()
        };
        Self {
            seed: 0,
            profile,
            frame_rate: 100.0,
            model,
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            corpus,
        }
    }

    /// Parses TOML on top of the defaults of the profile it names (or
    /// `profile` if given, which wins).
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let named = match user.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse()?),
            Some(_) => return Err(Error::Config("profile must be a string".into())),
            None => None,
        };
        let profile = profile.or(named).unwrap_or_default();
        let base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(user));
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.profile = profile;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text, overrides.profile)?
            }
            None => Self::for_profile(overrides.profile.unwrap_or_default()),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.context_mode {
            self.model.encoder.context_mode = m;
        }
        if let Some(n) = o.n_prev {
            self.model.context.n_prev = n;
        }
        if let Some(l) = o.pool_slots {
            self.model.context.pool_slots = l;
        }
        if let Some(s) = o.streaming {
            self.model.encoder.streaming = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        if self.bench.repetitions == 0 || self.bench.current_frames == 0 {
            return Err(Error::Config("bench needs repetitions and current_frames > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
