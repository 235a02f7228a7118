//! TOML experiment configuration.
//!
//! ```toml
//! [data.synthetic]            # or [data.files] train = "…", val = "…"
//! num_classes = 6
//! train_samples = 3000
//! val_samples = 600
//! modality_dims = [16, 16]
//! signal_scales = [4.0, 1.0]
//! noise_stds = [1.0, 1.0]
//! seed = 1
//!
//! [model]
//! encoding_dim = 16
//! encoder_hidden = [32]
//! classifier_hidden = [32]
//!
//! [train]
//! strategy = "naive"          # unimodal | dropout | modality_dropout | umt | ogm
//! epochs = 20
//! batch_size = 64
//! seed = 1
//!
//! [amr]
//! enabled = true
//! ratios = [1.0, 1.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amr::AttributionTarget;
use crate::attribution::AttributedLogit;
use crate::baselines::{StrategyConfig, StrategyKind};
use crate::data::{generate_synthetic, load_csv, load_feature_file, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::harness::{OptimizerConfig, TrainConfig};
use crate::model::{FusionKind, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub amr: AmrSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub matrix: Option<MatrixSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticConfig>,
    pub files: Option<FileSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub train: PathBuf,
    pub val: PathBuf,
    /// Required for CSV inputs when labels may not cover every class.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoding_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub fusion_dim: Option<usize>,
    pub classifier_hidden: Vec<usize>,
    /// Defaults to `train.seed`.
    pub init_seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoding_dim: 16,
            encoder_hidden: vec![32],
            fusion_dim: None,
            classifier_hidden: vec![32],
            init_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Naive,
    Unimodal,
    Dropout,
    ModalityDropout,
    Umt,
    Ogm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbSection {
    pub p: f64,
}

impl Default for ProbSection {
    fn default() -> Self {
        ProbSection { p: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UmtSection {
    pub tau: f64,
    pub beta: f64,
    pub teacher_epochs: usize,
}

impl Default for UmtSection {
    fn default() -> Self {
        UmtSection {
            tau: 2.0,
            beta: 1.0,
            teacher_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OgmSection {
    pub alpha: f64,
}

impl Default for OgmSection {
    fn default() -> Self {
        OgmSection { alpha: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnimodalSection {
    pub modality: usize,
}

fn default_strategy() -> StrategyName {
    StrategyName::Naive
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    OptimizerConfig::default().lr
}
fn default_momentum() -> f64 {
    OptimizerConfig::default().momentum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_strategy")]
    pub strategy: StrategyName,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub eval_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub dropout: ProbSection,
    #[serde(default)]
    pub mdrop: ProbSection,
    #[serde(default)]
    pub umt: UmtSection,
    #[serde(default)]
    pub ogm: OgmSection,
    #[serde(default)]
    pub unimodal: UnimodalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmrSection {
    pub enabled: bool,
    pub ratios: Option<Vec<f64>>,
    pub lambda: f64,
    pub lr: f64,
    pub every_k_steps: usize,
    pub use_per_sample: bool,
    pub logit: AttributedLogit,
}

impl Default for AmrSection {
    fn default() -> Self {
        AmrSection {
            enabled: false,
            ratios: None,
            lambda: 1.0,
            lr: 1e-2,
            every_k_steps: 1,
            use_per_sample: false,
            logit: AttributedLogit::Predicted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub attribution_dump: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("amrlab-out"),
            attribution_dump: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    pub strategies: Vec<StrategyName>,
    #[serde(default = "default_amr_axis")]
    pub amr: Vec<bool>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_amr_axis() -> Vec<bool> {
    vec![false, true]
}

fn default_seeds() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        Ok(cfg)
    }

    /// Parses a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(files), Some(dir)) = (cfg.data.files.as_mut(), path.parent()) {
            files.train = dir.join(&files.train);
            files.val = dir.join(&files.val);
        }
        Ok(cfg)
    }

    /// Shifts every seed by `offset` (used for multi-seed runs).
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.data.synthetic.as_mut() {
            s.seed = s.seed.wrapping_add(offset);
        }
        c.train.seed = c.train.seed.wrapping_add(offset);
        c.model.init_seed = c.model.init_seed.map(|s| s.wrapping_add(offset));
        c
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.data.synthetic.as_mut() {
            s.seed = seed;
        }
        c.train.seed = seed;
        c.model.init_seed = None;
        c
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.files) {
            (Some(s), None) => s.validate()?,
            (None, Some(f)) => {
                for p in [&f.train, &f.val] {
                    if !p.exists() {
                        return Err(Error::Data(format!(
                            "data.files: `{}` does not exist",
                            p.display()
                        )));
                    }
                }
            }
            _ => {
                return Err(Error::Config(
                    "data: specify exactly one of [data.synthetic] or [data.files]".into(),
                ))
            }
        }
        let (m, c) = self.data_shape()?;
        self.model_config(m.clone(), c).validate()?;
        self.train_config(&self.train.strategy, self.amr.enabled)?
            .validate(m.len())
    }

    /// Modality widths and class count, read from the files if needed.
    fn data_shape(&self) -> Result<(Vec<usize>, usize)> {
        if let Some(s) = &self.data.synthetic {
            return Ok((s.modality_dims.clone(), s.num_classes));
        }
        let (train, _) = self.load_data()?;
        Ok((train.modality_dims(), train.num_classes()))
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match (&self.data.synthetic, &self.data.files) {
            (Some(s), None) => generate_synthetic(s),
            (None, Some(f)) => {
                let read = |p: &Path| {
                    if p.extension().is_some_and(|e| e == "csv") {
                        load_csv(p, f.num_classes)
                    } else {
                        load_feature_file(p)
                    }
                };
                let train = read(&f.train)?.with_split(Split::Train);
                let val = read(&f.val)?.with_split(Split::Val);
                if train.modality_dims() != val.modality_dims()
                    || train.num_classes() != val.num_classes()
                {
                    return Err(Error::Data("train and val files disagree on shape".into()));
                }
                Ok((train, val))
            }
            _ => Err(Error::Config(
                "data: specify exactly one of [data.synthetic] or [data.files]".into(),
            )),
        }
    }

    pub fn model_config(&self, modality_dims: Vec<usize>, num_classes: usize) -> ModelConfig {
        ModelConfig {
            modality_dims,
            encoding_dim: self.model.encoding_dim,
            encoder_hidden: self.model.encoder_hidden.clone(),
            fusion: FusionKind::ConcatLinear,
            fusion_dim: self.model.fusion_dim,
            classifier_hidden: self.model.classifier_hidden.clone(),
            num_classes,
            init_seed: self.model.init_seed.unwrap_or(self.train.seed),
            aux_heads: false,
        }
    }

    pub fn strategy(&self, name: &StrategyName) -> StrategyConfig {
        let t = &self.train;
        let kind = match name {
            StrategyName::Naive => StrategyKind::Naive,
            StrategyName::Unimodal => StrategyKind::Unimodal {
                modality: t.unimodal.modality,
            },
            StrategyName::Dropout => StrategyKind::Dropout { p: t.dropout.p },
            StrategyName::ModalityDropout => StrategyKind::ModalityDropout { p: t.mdrop.p },
            StrategyName::Umt => StrategyKind::Umt {
                tau: t.umt.tau,
                beta: t.umt.beta,
                teacher_epochs: t.umt.teacher_epochs,
            },
            StrategyName::Ogm => StrategyKind::Ogm { alpha: t.ogm.alpha },
        };
        StrategyConfig {
            kind,
            seed: t.seed,
        }
    }

    pub fn amr_target(&self, num_modalities: usize) -> AttributionTarget {
        let a = &self.amr;
        AttributionTarget {
            ratios: a.ratios.clone().unwrap_or_else(|| vec![1.0; num_modalities]),
            lambda: a.lambda,
            lr: a.lr,
            every_k_steps: a.every_k_steps,
            use_per_sample: a.use_per_sample,
            logit: a.logit,
        }
    }

    pub fn train_config(&self, strategy: &StrategyName, amr: bool) -> Result<TrainConfig> {
        let m = self.data_shape()?.0.len();
        let trained = if *strategy == StrategyName::Unimodal { 1 } else { m };
        Ok(TrainConfig {
            strategy: self.strategy(strategy),
            amr: amr.then(|| self.amr_target(trained)),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: OptimizerConfig {
                lr: self.train.lr,
                momentum: self.train.momentum,
            },
            eval_every: self.train.eval_every,
            seed: self.train.seed,
        })
    }

    /// Hex SHA-256 of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(&json))
    }
}
