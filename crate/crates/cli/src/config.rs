//! Experiment configuration: defaults, then a TOML file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvlstm::data::{FoldConfig, GeneratorConfig, ModeList};
use mvlstm::model::{ModelConfig, OptimizerKind, TauPolicy, TrainConfig};
use mvlstm::probe::{DEFAULT_EPSILON, DEFAULT_FIRST_K, DEFAULT_STEPS};
use mvlstm::{CellOptions, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Data generation, initialization and shuffling all derive
    /// from it.
    pub seed: u64,
    /// Directory that receives every artifact.
    pub out: PathBuf,
    /// Dataset stem (`<stem>.manifest`, `<stem>.frames`). Defaults to
    /// `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub split: SplitConfig,
    pub probe: ProbeConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            dataset: None,
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            split: SplitConfig::default(),
            probe: ProbeConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Training settings; the seed is the experiment's master seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub tau_policy: TauPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            grad_clip: t.grad_clip,
            tau_policy: t.tau_policy,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            grad_clip: self.grad_clip,
            tau_policy: self.tau_policy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seen: Vec<u32>,
    /// Empty means every mode that is not seen.
    pub unseen: Vec<u32>,
    pub folds: usize,
    pub fold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seen: vec![0],
            unseen: Vec::new(),
            folds: 5,
            fold: 0,
        }
    }
}

impl SplitConfig {
    pub fn fold_config(&self) -> FoldConfig {
        FoldConfig {
            folds: self.folds,
            index: self.fold,
        }
    }

    pub fn resolve_unseen(&self, all_modes: &[u32]) -> Vec<u32> {
        if self.unseen.is_empty() {
            all_modes.iter().copied().filter(|m| !self.seen.contains(m)).collect()
        } else {
            self.unseen.clone()
        }
    }
}

/// Which samples a probe runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    /// Same class, different mode.
    SameClassDiffMode,
    /// Same class, same mode, different sample.
    SameClassSameMode,
    /// One sample by dataset index.
    Sample(usize),
}

impl FromStr for Selector {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "same-class-diff-mode" => Ok(Selector::SameClassDiffMode),
            "same-class-same-mode" => Ok(Selector::SameClassSameMode),
            other => other
                .strip_prefix("sample:")
                .and_then(|i| i.parse().ok())
                .map(Selector::Sample)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "unknown selector '{other}' (expected same-class-diff-mode, same-class-same-mode or sample:<index>)"
                    ))
                }),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::SameClassDiffMode => f.write_str("same-class-diff-mode"),
            Selector::SameClassSameMode => f.write_str("same-class-same-mode"),
            Selector::Sample(i) => write!(f, "sample:{i}"),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub tau: TauPolicy,
    /// Length of the static sequence.
    pub n_static: usize,
    /// Feature rows drawn in each figure.
    pub first_k: usize,
    pub epsilon: f64,
    pub selector: Selector,
    /// Number of pairs for the pair selectors.
    pub pairs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tau: TauPolicy::FirstFrame,
            n_static: DEFAULT_STEPS,
            first_k: DEFAULT_FIRST_K,
            epsilon: DEFAULT_EPSILON,
            selector: Selector::SameClassDiffMode,
            pairs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub tolerance: f64,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub options: CellOptions,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            tolerance: 1e-5,
            input_dim: 4,
            hidden_dim: 4,
            steps: 5,
            options: CellOptions::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub tau: Option<TauPolicy>,
    pub n_static: Option<usize>,
    pub first_k: Option<usize>,
    pub tolerance: Option<f64>,
    pub modes: Option<ModeList>,
    pub selector: Option<Selector>,
    pub pairs: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.seed => self.seed);
        set!(o.variant => self.model.variant);
        set!(o.out => self.out);
        set!(o.epochs => self.train.epochs);
        set!(o.lr => self.train.learning_rate);
        set!(o.n_static => self.probe.n_static);
        set!(o.first_k => self.probe.first_k);
        set!(o.tolerance => self.gradcheck.tolerance);
        set!(o.modes => self.data.modes);
        set!(o.selector => self.probe.selector);
        set!(o.pairs => self.probe.pairs);
        if let Some(d) = &o.dataset {
            self.dataset = Some(d.clone());
        }
        if let Some(t) = o.tau {
            self.train.tau_policy = t;
            self.probe.tau = t;
        }
    }

    pub fn dataset_stem(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.with_seed(self.seed)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: mvlstm::Error| CliError::Usage(e.to_string());
        self.data.validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        if self.model.hidden_dim == 0 {
            return Err(CliError::Usage("model.hidden_dim must be positive".into()));
        }
        if self.split.seen.is_empty() {
            return Err(CliError::Usage("split.seen must name at least one mode".into()));
        }
        let p = &self.probe;
        if p.n_static == 0 || p.first_k == 0 || p.pairs == 0 {
            return Err(CliError::Usage("probe.n_static, probe.first_k and probe.pairs must be positive".into()));
        }
        if p.epsilon.is_nan() || p.epsilon <= 0.0 {
            return Err(CliError::Usage("probe.epsilon must be positive".into()));
        }
        let g = &self.gradcheck;
        if g.seeds == 0 || g.input_dim == 0 || g.hidden_dim == 0 || g.steps == 0 {
            return Err(CliError::Usage("gradcheck seeds and dimensions must be positive".into()));
        }
        if g.tolerance.is_nan() || g.tolerance <= 0.0 {
            return Err(CliError::Usage("gradcheck.tolerance must be positive".into()));
        }
        Ok(())
    }
}
