//! Run configuration: a JSON document mirrored by CLI flags.
//!
//! Flags win over config-file values, which win over the `CYC_SEED`
//! environment fallback and the built-in desk-scale defaults. Unknown keys
//! are rejected. The merged effective configuration is echoed into every
//! output artifact.

use serde::{Deserialize, Serialize};

use crate::conditions::ConditionKind;
use crate::dataset::DatasetConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::metrics::{EvalConfig, ViewSetting};
use crate::render::RenderConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_scenes: usize,
    /// Ring sizes [upper, equatorial]; top/bottom views are always added.
    pub views: [usize; 2],
    pub res: usize,
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_scenes: 72,
            views: [8, 4],
            res: 64,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub c_p: usize,
    pub h_p: usize,
    pub w_p: usize,
    pub mlp_width: usize,
    pub cond_res: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            c_p: 8,
            h_p: 16,
            w_p: 16,
            mlp_width: 32,
            cond_res: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f32,
    pub alpha: f32,
    pub lambda: f32,
    pub beta: f32,
    pub p_identity: f32,
    pub kind: ConditionKind,
    pub two_phase: bool,
    pub detach_cycle: bool,
    pub seed: Option<u64>,
    pub render_res: usize,
    pub n_samples: usize,
    pub n_gt_views: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2000,
            lr: 4e-4,
            alpha: 5.0,
            lambda: 1.0,
            beta: 0.1,
            p_identity: 0.25,
            kind: ConditionKind::Edge,
            two_phase: true,
            detach_cycle: false,
            seed: None,
            render_res: 32,
            n_samples: 48,
            n_gt_views: 2,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub view_setting: ViewSetting,
    pub kinds: Vec<ConditionKind>,
    pub n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            view_setting: ViewSetting::Front4,
            kinds: ConditionKind::ALL.to_vec(),
            n_samples: 48,
        }
    }
}

pub const DEFAULT_SEED: u64 = 7;

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Environment fallback for unset seeds.
    pub fn apply_env_seed(&mut self) {
        if let Ok(v) = std::env::var("CYC_SEED") {
            if let Ok(seed) = v.parse::<u64>() {
                self.dataset.seed.get_or_insert(seed);
                self.train.seed.get_or_insert(seed);
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model.h_p != self.model.w_p {
            return Err("model.h_p must equal model.w_p (square planes)".into());
        }
        if self.model.h_p * 4 != self.model.cond_res {
            return Err(format!(
                "model.h_p ({}) must be cond_res/4 ({}); the generator's four stride-2 stages and two upsamples fix that ratio",
                self.model.h_p,
                self.model.cond_res / 4
            ));
        }
        if self.model.cond_res != self.dataset.res {
            return Err(format!(
                "model.cond_res ({}) must equal dataset.res ({}); the generator reads dataset conditions directly",
                self.model.cond_res, self.dataset.res
            ));
        }
        if self.train.render_res == 0 || self.dataset.res % self.train.render_res != 0 {
            return Err(format!(
                "train.render_res ({}) must divide dataset.res ({})",
                self.train.render_res, self.dataset.res
            ));
        }
        let factor = self.model.cond_res / self.train.render_res;
        if !factor.is_power_of_two() {
            return Err(format!(
                "cond_res / render_res ({factor}) must be a power of two"
            ));
        }
        if !(0.0..=1.0).contains(&self.train.p_identity) {
            return Err("train.p_identity must lie in [0, 1]".into());
        }
        if self.train.lr <= 0.0 {
            return Err("train.lr must be positive".into());
        }
        if self.train.n_samples < 2 {
            return Err("train.n_samples must be >= 2".into());
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_scenes: self.dataset.n_scenes,
            views: self.dataset.views,
            res: self.dataset.res,
            seed: self.dataset.seed.unwrap_or(DEFAULT_SEED),
            ..DatasetConfig::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            c_p: self.model.c_p,
            plane_res: self.model.h_p,
            cond_res: self.model.cond_res,
            bound: 1.0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            weights: LossWeights {
                alpha: self.train.alpha,
                lambda: self.train.lambda,
                beta: self.train.beta,
            },
            p_identity: self.train.p_identity,
            kind: self.train.kind,
            seed: self.train.seed.unwrap_or(DEFAULT_SEED),
            checkpoint_interval: self.train.checkpoint_interval,
            two_phase_backward: self.train.two_phase,
            detach_cycle: self.train.detach_cycle,
            n_gt_views: self.train.n_gt_views,
            render_res: self.train.render_res,
            render: RenderConfig {
                n_samples: self.train.n_samples,
                ..RenderConfig::default()
            },
            gen: self.generator_config(),
            mlp_width: self.model.mlp_width,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kinds: self.eval.kinds.clone(),
            setting: self.eval.view_setting,
            render: RenderConfig {
                n_samples: self.eval.n_samples,
                ..RenderConfig::default()
            },
            res: None,
        }
    }

    /// Pretty JSON echo written next to every artifact.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"train": {"steps": 10, "learning_rate": 0.1}}"#;
        let got: Result<RunConfig, _> = serde_json::from_str(text);
        assert!(got.is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let text = r#"{"train": {"steps": 10}, "dataset": {"n_scenes": 4}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.dataset.n_scenes, 4);
        assert_eq!(cfg.train.lr, 4e-4);
        cfg.validate().unwrap();
    }

    #[test]
    fn mismatched_resolutions_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.render_res = 24;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.h_p = 8;
        assert!(cfg.validate().is_err());
    }
}
