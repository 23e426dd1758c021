//! TOML run configuration. Every key has a default; unknown keys are errors.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/default"
//! grid = "16x16@0.5:2,-4"
//! # rig = "rigs/toy2.json"   (relative to this file; omitted = built-in toy rig)
//!
//! [field]
//! lambda = 1.0
//! lambda_learnable = false
//! visibility_mode = "literal"   # or "masked"
//! uniform_weights = false       # W = 1 baseline
//!
//! [model]
//! d_model = 32
//! n_heads = 4
//! patches = [16, 4]             # coarse to fine
//!
//! [train]
//! steps = 1500
//! optimizer = "adam"            # or "sgd"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use eaf_core::field::{FieldConfig, VisibilityMode};
use eaf_core::loss::LossConfig;
use eaf_core::model::ModelConfig;
use eaf_core::synth::{toy_rig, GenParams};
use eaf_core::train::{Optimizer, SceneStream, TrainConfig};

use crate::rig::Rig;
use crate::specs::GridSpec;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Literal,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub lambda: f64,
    pub lambda_learnable: bool,
    pub visibility_mode: Visibility,
    pub uniform_weights: bool,
    /// Minimum camera distance in meters; omitted means one cell.
    pub min_distance_clamp: Option<f64>,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_learnable: false,
            visibility_mode: Visibility::Literal,
            uniform_weights: false,
            min_distance_clamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub patches: Vec<usize>,
    pub blocks_per_scale: usize,
    pub ff_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            patches: m.patches,
            blocks_per_scale: m.blocks_per_scale,
            ff_hidden: m.ff_hidden,
            decoder_hidden: m.decoder_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self { alpha: l.alpha, gamma: l.gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub optimizer: OptimizerName,
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub base_momentum: f64,
    pub max_momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    /// Number of held-out scenes used for evaluation.
    pub eval_scenes: usize,
    /// Train on a single scene repeated (overfitting runs) instead of a stream.
    pub fixed_scene: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 1500,
            optimizer: OptimizerName::Adam,
            max_lr: t.max_lr,
            pct_start: t.pct_start,
            div_factor: t.div_factor,
            final_div_factor: t.final_div_factor,
            base_momentum: t.base_momentum,
            max_momentum: t.max_momentum,
            beta2: 0.999,
            weight_decay: 0.0,
            clip_norm: t.clip_norm,
            eval_every: 100,
            eval_scenes: 32,
            fixed_scene: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub box_count: [usize; 2],
    pub size_range: [f64; 2],
    pub height_range: [f64; 2],
    pub drivable_half_width: [f64; 2],
}

impl Default for SceneSection {
    fn default() -> Self {
        let g = GenParams::for_grid(&eaf_core::synth::toy_grid());
        Self {
            box_count: [g.box_count.0, g.box_count.1],
            size_range: [g.size_range.0, g.size_range.1],
            height_range: [g.height_range.0, g.height_range.1],
            drivable_half_width: [g.drivable_half_width.0, g.drivable_half_width.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub rig: Option<PathBuf>,
    pub grid: String,
    pub field: FieldSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub scenes: SceneSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            rig: None,
            grid: "16x16@0.5:2,-4".into(),
            field: FieldSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            scenes: SceneSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

/// Training scenes use seeds `seed · 2²⁰ + k`; evaluation scenes live in a
/// disjoint range starting at this offset.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.parse::<GridSpec>().map_err(|e| CliError::Config(e.to_string()))?;
        let l = &self.loss;
        if !(l.alpha > 0.0 && l.alpha < 1.0) || !(l.gamma >= 0.0) {
            return Err(CliError::Config(format!("loss needs 0 < alpha < 1 and gamma >= 0, got {l:?}")));
        }
        if self.train.eval_scenes == 0 {
            return Err(CliError::Config("eval_scenes must be positive".into()));
        }
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        self.gen_params()?.validate()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out_dir)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        self.grid.parse().map_err(|e: CliError| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let f = &self.field;
        let m = &self.model;
        Ok(ModelConfig {
            grid: self.grid_spec()?.grid()?,
            d_model: m.d_model,
            n_heads: m.n_heads,
            patches: m.patches.clone(),
            blocks_per_scale: m.blocks_per_scale,
            ff_hidden: m.ff_hidden,
            decoder_hidden: m.decoder_hidden,
            channels: 3,
            seed: self.seed,
            field: FieldConfig {
                lambda: f.lambda,
                lambda_learnable: f.lambda_learnable,
                visibility_mode: match f.visibility_mode {
                    Visibility::Literal => VisibilityMode::Literal,
                    Visibility::Masked => VisibilityMode::Masked,
                },
                min_distance_clamp: f.min_distance_clamp,
            },
            uniform_weights: f.uniform_weights,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { alpha: self.loss.alpha, gamma: self.loss.gamma }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: match t.optimizer {
                OptimizerName::Adam => {
                    Optimizer::Adam { beta2: t.beta2, eps: 1e-8, weight_decay: t.weight_decay }
                }
                OptimizerName::Sgd => Optimizer::Sgd,
            },
            steps: t.steps,
            max_lr: t.max_lr,
            pct_start: t.pct_start,
            div_factor: t.div_factor,
            final_div_factor: t.final_div_factor,
            base_momentum: t.base_momentum,
            max_momentum: t.max_momentum,
            clip_norm: t.clip_norm,
            eval_every: t.eval_every,
        }
    }

    pub fn gen_params(&self) -> Result<GenParams> {
        let s = &self.scenes;
        let grid = self.grid_spec()?.grid()?;
        Ok(GenParams {
            box_count: (s.box_count[0], s.box_count[1]),
            size_range: (s.size_range[0], s.size_range[1]),
            height_range: (s.height_range[0], s.height_range[1]),
            drivable_half_width: (s.drivable_half_width[0], s.drivable_half_width[1]),
            ..GenParams::for_grid(&grid)
        })
    }

    /// The configured rig, or the built-in toy rig.
    pub fn rig(&self) -> Result<Rig> {
        match &self.rig {
            Some(p) => Rig::load(&self.resolve(p)),
            None => Ok(Rig::from_views(&toy_rig())),
        }
    }

    pub fn rig_reference(&self) -> String {
        self.rig.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "toy".into())
    }

    pub fn train_stream(&self, rig: &Rig) -> Result<SceneStream> {
        Ok(SceneStream {
            params: self.gen_params()?,
            rig: rig.views(),
            grid: self.grid_spec()?.grid()?,
            base_seed: self.seed << 20,
            fixed: self.train.fixed_scene,
        })
    }

    /// Held-out scenes, or the training scene itself for fixed-scene runs.
    pub fn eval_stream(&self, rig: &Rig) -> Result<SceneStream> {
        let mut s = self.train_stream(rig)?;
        if !self.train.fixed_scene {
            s.base_seed = EVAL_SEED_OFFSET + (self.seed << 20);
        }
        Ok(s)
    }

    pub fn eval_count(&self) -> usize {
        if self.train.fixed_scene {
            1
        } else {
            self.train.eval_scenes
        }
    }
}
