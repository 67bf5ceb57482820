//! Run configuration: parsing, validation against the chosen method, and the
//! fully resolved echo written next to every run.
//!
//! ```toml
//! task = "single"            # single | multi
//! method = "mamba2"          # mamba2 | svm | cnn_lstm | baseline
//! dataset = "data/synthetic" # dataset directory or manifest path
//! output = "runs/mamba2"     # default: runs/<method>-<task>
//! seed = 7
//!
//! [split]                    # optional
//! ratios = [0.5, 0.2, 0.3]
//! seed = 7                   # default: the run seed
//! stratified = true
//!
//! [train]                    # optional overrides of the method's recipe
//! epochs = 5
//!
//! [model]                    # optional method-specific hyperparameters
//! d_state = 16
//! ```

use std::path::{Path, PathBuf};

use ripbench::classical::SvmConfig;
use ripbench::models::{BaselineConfig, CnnLstmConfig, MambaConfig, Model};
use ripbench::train::{rng_stream, streams, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Failure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mamba2,
    Svm,
    CnnLstm,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mamba2, Method::Svm, Method::CnnLstm, Method::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mamba2 => "mamba2",
            Method::Svm => "svm",
            Method::CnnLstm => "cnn_lstm",
            Method::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Failure::usage(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }

    pub fn is_neural(self) -> bool {
        self != Method::Svm
    }

    /// Published (or, for the baseline, ledger) training recipe.
    pub fn train_preset(self) -> Option<TrainConfig> {
        match self {
            Method::Mamba2 => Some(TrainConfig::mamba2()),
            Method::CnnLstm => Some(TrainConfig::cnn_lstm()),
            Method::Baseline => Some(TrainConfig::baseline()),
            Method::Svm => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Front camera only.
    Single,
    /// Front, left and right mirror views.
    Multi,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Single, Task::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Single => "single",
            Task::Multi => "multi",
        }
    }

    pub fn n_views(self) -> usize {
        match self {
            Task::Single => 1,
            Task::Multi => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    ratios: Option<[f64; 3]>,
    seed: Option<u64>,
    stratified: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Task,
    method: String,
    dataset: PathBuf,
    output: Option<PathBuf>,
    seed: Option<u64>,
    split: Option<RawSplit>,
    train: Option<toml::Table>,
    model: Option<toml::Table>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Mamba2(MambaConfig),
    CnnLstm(CnnLstmConfig),
    Baseline(BaselineConfig),
    Svm(SvmConfig),
}

/// Every setting a run uses, defaults included. Its TOML form is itself a
/// valid run configuration that resolves to the same value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub task: Task,
    pub method: Method,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub split: SplitSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub model: ModelConfig,
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: Option<&toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Failure::usage(format!("{what}: {e}")))?;
    if let Some(o) = overrides {
        for (k, v) in o {
            table.insert(k.clone(), v.clone());
        }
    }
    table.try_into().map_err(|e| Failure::usage(format!("[{what}]: {e}")))
}

impl ResolvedConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Failure::usage(format!("run config: {e}")))?;
        Self::resolve(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Defaults for `method` on `task`, as `bench` runs them.
    pub fn defaults(method: Method, task: Task, dataset: &Path, output: &Path, seed: u64) -> Self {
        let raw = RawConfig {
            task,
            method: method.as_str().into(),
            dataset: dataset.to_path_buf(),
            output: Some(output.to_path_buf()),
            seed: Some(seed),
            split: None,
            train: None,
            model: None,
        };
        Self::resolve(raw).expect("defaults are valid")
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let method = Method::parse(&raw.method)?;
        let seed = raw.seed.unwrap_or(0);
        let rs = raw.split.unwrap_or_default();
        let split = SplitSpec {
            ratios: rs.ratios.unwrap_or([0.5, 0.2, 0.3]),
            seed: rs.seed.unwrap_or(seed),
            stratified: rs.stratified.unwrap_or(true),
        };
        if split.ratios.iter().any(|r| !(*r >= 0.0)) || (split.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Failure::usage(format!("split ratios {:?} must be non-negative and sum to 1", split.ratios)));
        }
        let train = match method.train_preset() {
            Some(preset) => {
                let preset = TrainConfig { seed, ..preset };
                let t: TrainConfig = overlay(&preset, raw.train.as_ref(), "train")?;
                t.validate().map_err(Failure::usage)?;
                Some(t)
            }
            None => {
                if let Some(t) = raw.train.as_ref().filter(|t| !t.is_empty()) {
                    let keys: Vec<&str> = t.keys().map(String::as_str).collect();
                    log::warn!("svm has no gradient training; ignoring [train] keys: {}", keys.join(", "));
                }
                None
            }
        };
        let m = raw.model.as_ref();
        let model = match method {
            Method::Mamba2 => ModelConfig::Mamba2(overlay(&MambaConfig::default(), m, "model")?),
            Method::CnnLstm => ModelConfig::CnnLstm(overlay(&CnnLstmConfig::default(), m, "model")?),
            Method::Baseline => ModelConfig::Baseline(overlay(&BaselineConfig::default(), m, "model")?),
            Method::Svm => {
                let c: SvmConfig = overlay(&SvmConfig::default(), m, "model")?;
                c.validate().map_err(Failure::usage)?;
                ModelConfig::Svm(c)
            }
        };
        let output = raw
            .output
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", method.as_str(), raw.task.as_str())));
        let cfg = Self {
            task: raw.task,
            method,
            dataset: raw.dataset,
            output,
            seed,
            split,
            train,
            model,
        };
        if method.is_neural() {
            // catches inconsistent sizes before any data is touched
            cfg.build_model(1).map_err(|e| Failure::usage(format!("[model]: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("resolved config serializes");
        format!("# Resolved run configuration: every default is spelled out.\n{body}")
    }

    pub fn n_views(&self) -> usize {
        self.task.n_views()
    }

    /// Fresh, seeded model for this configuration and input width.
    pub fn build_model(&self, dim: usize) -> std::result::Result<Model, ripbench::tensor::TensorError> {
        let mut rng = rng_stream(self.seed, streams::INIT);
        let v = self.n_views();
        match (&self.model, self.task) {
            (ModelConfig::Mamba2(c), Task::Single) => Model::frontal_mamba(c, dim, &mut rng),
            (ModelConfig::Mamba2(c), Task::Multi) => Model::ensemble(c, dim, &mut rng),
            (ModelConfig::CnnLstm(c), _) => Model::cnn_lstm(c, dim, v, &mut rng),
            (ModelConfig::Baseline(c), _) => Model::baseline(c, dim, v, &mut rng),
            (ModelConfig::Svm(_), _) => Err(ripbench::tensor::TensorError::Invalid("svm is not a neural model".into())),
        }
    }

    pub fn svm(&self) -> Option<&SvmConfig> {
        match &self.model {
            ModelConfig::Svm(c) => Some(c),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(method: &str) -> String {
        format!("task = \"single\"\nmethod = \"{method}\"\ndataset = \"data\"\n")
    }

    #[test]
    fn echo_resolves_to_itself() {
        for m in Method::ALL {
            for t in Task::ALL {
                let cfg = ResolvedConfig::defaults(m, t, Path::new("data/x"), Path::new("out/y"), 3);
                let again = ResolvedConfig::from_toml(&cfg.to_toml()).unwrap();
                assert_eq!(again, cfg, "{m:?} {t:?}");
            }
        }
    }

    #[test]
    fn unknown_method_lists_valid_ones() {
        let e = ResolvedConfig::from_toml(&base("transformer")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let msg = e.to_string();
        for m in Method::ALL {
            assert!(msg.contains(m.as_str()), "{msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_per_method() {
        let bad_model = format!("{}[model]\nd_state = 8\n", base("cnn_lstm"));
        assert_eq!(ResolvedConfig::from_toml(&bad_model).unwrap_err().exit_code(), 2);
        let ok_model = format!("{}[model]\nd_state = 8\n", base("mamba2"));
        let cfg = ResolvedConfig::from_toml(&ok_model).unwrap();
        assert!(matches!(cfg.model, ModelConfig::Mamba2(MambaConfig { d_state: 8, .. })));
        let bad_train = format!("{}[train]\nmomentum = 0.9\n", base("mamba2"));
        assert_eq!(ResolvedConfig::from_toml(&bad_train).unwrap_err().exit_code(), 2);
        let top = format!("{}learning_rate = 0.1\n", base("mamba2"));
        assert_eq!(ResolvedConfig::from_toml(&top).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn overrides_apply_on_top_of_the_recipe() {
        let text = format!("{}seed = 9\n[train]\nepochs = 5\nscheduler = {{ kind = \"none\" }}\n", base("mamba2"));
        let cfg = ResolvedConfig::from_toml(&text).unwrap();
        let t = cfg.train.unwrap();
        assert_eq!(t.epochs, 5);
        assert_eq!(t.scheduler, ripbench::train::Scheduler::None);
        assert_eq!((t.lr, t.batch_size, t.seed), (0.001, 16, 9));
        assert_eq!(cfg.split.seed, 9);
    }

    #[test]
    fn svm_ignores_training_keys() {
        let text = format!("{}[train]\nepochs = 5\noptimizer = \"adamw\"\n", base("svm"));
        let cfg = ResolvedConfig::from_toml(&text).unwrap();
        assert!(cfg.train.is_none());
        assert!(!cfg.to_toml().contains("[train]"));
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for extra in [
            "[split]\nratios = [0.5, 0.5, 0.5]\n",
            "[train]\nbatch_size = 0\n",
            "[model]\nn_heads = 3\n",
        ] {
            let text = format!("{}{extra}", base("mamba2"));
            assert_eq!(ResolvedConfig::from_toml(&text).unwrap_err().exit_code(), 2, "{extra}");
        }
        let svm = format!("{}[model]\nc = -1.0\n", base("svm"));
        assert_eq!(ResolvedConfig::from_toml(&svm).unwrap_err().exit_code(), 2);
    }
}
