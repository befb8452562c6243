//! Flat, versioned run configuration.

use std::path::{Path, PathBuf};

use civt_core::{DistillConfig, Error, Family, Mode, ModelSpec, Result, SynthSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

/// Every knob of a run. Keys absent from a file take the desk defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,

    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_image: usize,
    pub synth_texture_strength: f64,
    pub synth_structure_strength: f64,
    pub synth_p_tex: f64,
    pub synth_p_struct: f64,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_seed: u64,

    pub family: Family,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub gn_groups: usize,
    pub inv_kernel: usize,
    pub inv_groups: usize,
    pub inv_reduction: usize,

    pub mode: Mode,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub min_lr: f64,
    pub augment: bool,
    pub crop_pad: usize,
    /// Beta(α, α) mixup; 0 disables it.
    pub mixup_alpha: f64,

    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let model = ModelSpec::desk_ti();
        let distill = DistillConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            synth_classes: synth.classes,
            synth_image: synth.image,
            synth_texture_strength: synth.texture_strength,
            synth_structure_strength: synth.structure_strength,
            synth_p_tex: synth.p_tex,
            synth_p_struct: synth.p_struct,
            synth_train: synth.train,
            synth_test: synth.test,
            synth_seed: synth.seed,
            family: model.family,
            width: model.width,
            depth: model.depth,
            heads: model.heads,
            patch: model.patch,
            mlp_ratio: model.mlp_ratio,
            stage_widths: model.stage_widths,
            blocks_per_stage: model.blocks_per_stage,
            gn_groups: model.gn_groups,
            inv_kernel: model.inv_kernel,
            inv_groups: model.inv_groups,
            inv_reduction: model.inv_reduction,
            mode: distill.mode,
            lambda0: distill.lambda0,
            lambda1: distill.lambda1,
            lambda2: distill.lambda2,
            tau1: distill.tau1,
            tau2: distill.tau2,
            epochs: 30,
            batch_size: 128,
            eval_batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 5.0,
            min_lr: 0.0,
            augment: true,
            crop_pad: 4,
            mixup_alpha: 0.0,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    /// The 300-epoch ImageNet recipe with mixup, kept for reference runs.
    pub fn imagenet_protocol() -> Self {
        Self { epochs: 300, mixup_alpha: 0.8, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            bad.push("batch sizes must be positive".to_string());
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            bad.push(format!("mixup_alpha must be finite and nonnegative, got {}", self.mixup_alpha));
        }
        if self.warmup_epochs > self.epochs as f64 {
            bad.push(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.dataset == DatasetKind::Cifar10 && self.data_dir.is_none() {
            bad.push("dataset cifar10 needs data_dir".to_string());
        }
        if bad.is_empty() {
            self.distill().validate()
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.synth_classes,
            image: self.synth_image,
            texture_strength: self.synth_texture_strength,
            structure_strength: self.synth_structure_strength,
            p_tex: self.synth_p_tex,
            p_struct: self.synth_p_struct,
            train: self.synth_train,
            test: self.synth_test,
            seed: self.synth_seed,
        }
    }

    /// Architecture for inputs of the given geometry.
    pub fn model_spec(&self, channels: usize, height: usize, width: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            family: self.family,
            image_height: height,
            image_width: width,
            channels,
            classes,
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            patch: self.patch,
            mlp_ratio: self.mlp_ratio,
            stage_widths: self.stage_widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            gn_groups: self.gn_groups,
            inv_kernel: self.inv_kernel,
            inv_groups: self.inv_groups,
            inv_reduction: self.inv_reduction,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig { mode: self.mode, lambda0: self.lambda0, lambda1: self.lambda1, lambda2: self.lambda2, tau1: self.tau1, tau2: self.tau2 }
    }
}
