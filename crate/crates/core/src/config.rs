//! Declarative run configuration (TOML) with per-module sections.
//!
//! Every key is optional. `materialize` fills the dataset-dependent defaults
//! so the echoed config fully describes a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugConfig;
use crate::condense::{default_iterations, default_lr, CondenseConfig, NormMode, SamplerSpec};
use crate::continual::MemoryBuilder;
use crate::datasets::DatasetSpec;
use crate::error::{Error, Result};
use crate::evaluation::{EvalProtocol, TrainRecipe};
use crate::networks::{AccuracyBucket, EmbedderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub name: String,
    /// Root holding one directory per dataset; `$DMC_DATA_DIR` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            name: "mnist".into(),
            root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondenseSection {
    pub ipc: usize,
    /// 20000, or 10000 for 64x64 data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// 1 below 100 images per class, 10 from there on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub momentum: f64,
    pub real_batch: usize,
    pub arch: String,
    /// Overrides the architecture's default width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub augmentation: String,
    pub norm_mode: NormMode,
    pub nets_per_iter: usize,
    /// Checkpoint directory; random initialisation when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_pool: Option<PathBuf>,
    /// Accuracy bucket such as `"40-50"`, applied to the pool.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_bucket: Option<String>,
}

impl Default for CondenseSection {
    fn default() -> Self {
        Self {
            ipc: 10,
            iterations: None,
            lr: None,
            momentum: 0.5,
            real_batch: 256,
            arch: "convnet".into(),
            width: None,
            augmentation: "default".into(),
            norm_mode: NormMode::SyntheticStats,
            nets_per_iter: 1,
            sampler_pool: None,
            sampler_bucket: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cosine: bool,
    pub augmentation: String,
    /// Independently condensed sets.
    pub repeats: usize,
    /// Networks trained per set.
    pub nets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            arch: "convnet".into(),
            width: None,
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            cosine: true,
            augmentation: "default".into(),
            repeats: 5,
            nets: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    /// `random` or `herding`.
    pub method: String,
    /// Epochs for the herding embedder, trained on the whole training set.
    pub herding_epochs: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            method: "random".into(),
            herding_epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSection {
    pub steps: usize,
    pub budget: usize,
    pub builder: MemoryBuilder,
}

impl Default for ContinualSection {
    fn default() -> Self {
        Self {
            steps: 5,
            budget: 20,
            builder: MemoryBuilder::Dm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NasSection {
    /// Architectures drawn from the 720-config grid.
    pub subsample: usize,
    pub proxy_ipc: usize,
    pub proxy_epochs: usize,
    pub reference_epochs: usize,
    /// Whole-data training cut short, the cheap non-proxy baseline.
    pub early_epochs: usize,
    pub repeats: usize,
    pub val_fraction: f64,
    /// Top fraction (by proxy score) the correlation is computed on.
    pub slice: f64,
    /// Widths of the grid are divided by this (toy-scale runs).
    pub width_divisor: usize,
}

impl Default for NasSection {
    fn default() -> Self {
        Self {
            subsample: 36,
            proxy_ipc: 50,
            proxy_epochs: 200,
            reference_epochs: 100,
            early_epochs: 10,
            repeats: 5,
            val_fraction: 0.1,
            slice: 0.05,
            width_divisor: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub dataset: DatasetSection,
    pub condense: CondenseSection,
    pub eval: EvalSection,
    pub baseline: BaselineSection,
    pub continual: ContinualSection,
    pub nas: NasSection,
}

/// Parses TOML text, rejecting unknown keys (all of them are reported).
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    let cfg: RunConfig =
        serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| Error::Config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(Error::Schema(unknown));
    }
    Ok(cfg)
}

/// Reads, validates and materialises a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut cfg = parse_config_str(&text)?;
    cfg.materialize()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        DatasetSpec::from_name(&self.dataset.name, self.dataset.root.as_deref())
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }

    /// Fills dataset-dependent defaults and validates every section.
    pub fn materialize(&mut self) -> Result<()> {
        let spec = self.dataset_spec()?;
        let c = &mut self.condense;
        c.iterations.get_or_insert(default_iterations(spec.image_shape));
        c.lr.get_or_insert(default_lr(c.ipc));
        self.workers.get_or_insert(1);
        self.validate()
    }

    /// Every violated constraint, in one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let c = &self.condense;
        if c.ipc == 0 {
            problems.push("condense.ipc must be at least 1".to_string());
        }
        if let Some(lr) = c.lr {
            if !(lr.is_finite() && lr > 0.0) {
                problems.push(format!("condense.lr must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&c.momentum) {
            problems.push(format!("condense.momentum must be in [0, 1), got {}", c.momentum));
        }
        if c.real_batch == 0 || c.nets_per_iter == 0 {
            problems.push("condense.real_batch and condense.nets_per_iter must be at least 1".into());
        }
        if let Some(b) = &c.sampler_bucket {
            if let Err(e) = AccuracyBucket::parse(b) {
                problems.push(e.to_string());
            }
        }
        let e = &self.eval;
        if !(e.lr.is_finite() && e.lr > 0.0) {
            problems.push(format!("eval.lr must be positive, got {}", e.lr));
        }
        if e.batch_size == 0 || e.repeats == 0 || e.nets == 0 {
            problems.push("eval.batch_size, eval.repeats and eval.nets must be at least 1".into());
        }
        if !(0.0..1.0).contains(&e.momentum) || e.weight_decay < 0.0 {
            problems.push("eval.momentum must be in [0, 1) and eval.weight_decay non-negative".into());
        }
        if !matches!(self.baseline.method.as_str(), "random" | "herding") {
            problems.push(format!("baseline.method must be random or herding, got {}", self.baseline.method));
        }
        if self.continual.steps == 0 || self.continual.budget == 0 {
            problems.push("continual.steps and continual.budget must be at least 1".into());
        }
        let n = &self.nas;
        if !(n.val_fraction > 0.0 && n.val_fraction < 1.0) || !(n.slice > 0.0 && n.slice <= 1.0) {
            problems.push("nas.val_fraction must be in (0, 1) and nas.slice in (0, 1]".into());
        }
        if n.subsample == 0 || n.repeats == 0 || n.width_divisor == 0 {
            problems.push("nas.subsample, nas.repeats and nas.width_divisor must be at least 1".into());
        }
        if self.workers == Some(0) {
            problems.push("workers must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn condense_config(&self) -> Result<CondenseConfig> {
        let spec = self.dataset_spec()?;
        let c = &self.condense;
        let mut cfg = CondenseConfig::defaults(spec.name.as_str(), spec.image_shape, spec.num_classes, c.ipc);
        cfg.iterations = c.iterations.unwrap_or(cfg.iterations);
        cfg.lr = c.lr.unwrap_or(cfg.lr);
        cfg.momentum = c.momentum;
        cfg.real_batch = c.real_batch;
        cfg.embedder = EmbedderConfig::from_label(&c.arch, spec.image_shape, spec.num_classes)?;
        if let Some(w) = c.width {
            cfg.embedder.width = w;
        }
        cfg.augmentation = AugConfig::from_list(&c.augmentation, spec.image_shape[0])?;
        cfg.norm_mode = c.norm_mode;
        cfg.nets_per_iter = c.nets_per_iter;
        cfg.sampler = match &c.sampler_pool {
            Some(dir) => SamplerSpec::CheckpointPool {
                dir: dir.clone(),
                bucket: c.sampler_bucket.as_deref().map(AccuracyBucket::parse).transpose()?,
            },
            None => SamplerSpec::RandomInit,
        };
        cfg.seed = self.seed;
        cfg.workers = self.workers();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_recipe(&self, channels: usize) -> Result<TrainRecipe> {
        let e = &self.eval;
        let r = TrainRecipe {
            epochs: e.epochs,
            lr: e.lr,
            momentum: e.momentum,
            weight_decay: e.weight_decay,
            batch_size: e.batch_size,
            cosine: e.cosine,
            augmentation: AugConfig::from_list(&e.augmentation, channels)?,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn eval_protocol(&self, channels: usize) -> Result<EvalProtocol> {
        Ok(EvalProtocol {
            recipe: self.train_recipe(channels)?,
            nets: self.eval.nets,
            seed: self.seed,
            workers: self.workers(),
        })
    }

    pub fn eval_arch(&self) -> Result<EmbedderConfig> {
        let spec = self.dataset_spec()?;
        let mut cfg = EmbedderConfig::from_label(&self.eval.arch, spec.image_shape, spec.num_classes)?;
        if let Some(w) = self.eval.width {
            cfg.width = w;
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_the_standard_setup() {
        let mut cfg = parse_config_str("").unwrap();
        cfg.materialize().unwrap();
        assert_eq!(cfg.dataset.name, "mnist");
        assert_eq!(cfg.condense.iterations, Some(20_000));
        assert_eq!(cfg.condense.lr, Some(1.0));
        assert_eq!(cfg.condense.real_batch, 256);
        let c = cfg.condense_config().unwrap();
        assert_eq!(c.embedder.width, 128);
        assert_eq!(c.embedder.depth, 3);
        assert_eq!(cfg.eval.repeats * cfg.eval.nets, 100);
    }

    #[test]
    fn large_ipc_raises_the_learning_rate() {
        let mut cfg = parse_config_str("[condense]\nipc = 100\n").unwrap();
        cfg.materialize().unwrap();
        assert_eq!(cfg.condense.lr, Some(10.0));
        let mut pinned = parse_config_str("[condense]\nipc = 100\nlr = 2.5\n").unwrap();
        pinned.materialize().unwrap();
        assert_eq!(pinned.condense.lr, Some(2.5));
    }

    #[test]
    fn tiny_imagenet_uses_fewer_iterations() {
        let mut cfg = parse_config_str("[dataset]\nname = \"tinyimagenet\"\n").unwrap();
        cfg.materialize().unwrap();
        assert_eq!(cfg.condense.iterations, Some(10_000));
        assert_eq!(cfg.condense_config().unwrap().embedder.depth, 4);
    }

    #[test]
    fn negative_lr_is_rejected() {
        let mut cfg = parse_config_str("[condense]\nlr = -1.0\n").unwrap();
        let err = cfg.materialize().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("condense.lr")), "{err}");
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = parse_config_str("sed = 1\n[condense]\nipc = 1\nlearning_rate = 2.0\n[nope]\nx = 1\n").unwrap_err();
        match err {
            Error::Schema(keys) => {
                assert_eq!(keys.len(), 3, "{keys:?}");
                assert!(keys.contains(&"condense.learning_rate".to_string()), "{keys:?}");
                assert!(keys.contains(&"sed".to_string()), "{keys:?}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn materialised_config_round_trips_through_toml() {
        let mut cfg = parse_config_str("seed = 3\n[dataset]\nname = \"toy\"\n").unwrap();
        cfg.materialize().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_sampler_is_wired_through() {
        let cfg = parse_config_str("[dataset]\nname = \"toy\"\n[condense]\nsampler_pool = \"pool\"\nsampler_bucket = \"40-50\"\n")
            .unwrap();
        match cfg.condense_config().unwrap().sampler {
            SamplerSpec::CheckpointPool { dir, bucket } => {
                assert_eq!(dir, PathBuf::from("pool"));
                assert_eq!(bucket, Some(AccuracyBucket { lo: 40.0, hi: 50.0 }));
            }
            other => panic!("{other:?}"),
        }
    }
}
