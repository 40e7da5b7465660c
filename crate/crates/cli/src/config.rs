//! The run configuration file: a TOML document with one section per
//! concern, every key defaulted, unknown keys rejected. A parsed config
//! is canonical: serializing and re-parsing it is the identity, and the
//! config hash is computed over the canonical form so key order in the
//! source file never matters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sgvla_core::backbone::{BackboneConfig, DiscretizerConfig};
use sgvla_core::decoders::{default_proj_dim, DecoderConfig, LossWeights};
use sgvla_core::eval::{EvalConfig, HeadSelection};
use sgvla_core::flow::FlowConfig;
use sgvla_core::perception::ModalityConfig;
use sgvla_core::rng::fnv1a64;
use sgvla_core::trainer::{ModelConfig, StageSchedule, TaskSet, TrainConfig};
use sgvla_core::world::{Camera, WorldConfig};

pub const SECTIONS: &str = "world, modalities, model, loss_weights, schedule, eval";

#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file or an override does not parse or names unknown keys.
    #[error("{0}")]
    Parse(String),
    /// The parsed values cannot be turned into a runnable setup.
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub frame_size: usize,
    pub max_steps: u32,
    pub episodes_per_subtask: usize,
    pub spawn_dist_min: f32,
    pub spawn_dist_max: f32,
    pub heading_jitter: f32,
    pub head_view: f32,
    pub hand_view: f32,
    /// Camera whose mask becomes the segmentation target: "head" or "hand".
    pub seg_view: String,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            frame_size: w.frame_size,
            max_steps: w.max_steps,
            episodes_per_subtask: 200,
            spawn_dist_min: w.spawn_dist_min,
            spawn_dist_max: w.spawn_dist_max,
            heading_jitter: w.heading_jitter,
            head_view: w.head_view,
            hand_view: w.hand_view,
            seg_view: "head".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalitySection {
    pub use_hand_view: bool,
    pub use_depth: bool,
    pub history_len: usize,
    pub patch_size: usize,
}

impl Default for ModalitySection {
    fn default() -> Self {
        let m = ModalityConfig::default();
        Self {
            use_hand_view: m.use_hand_view,
            use_depth: m.use_depth,
            history_len: m.history_len,
            patch_size: m.patch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub bins: usize,
    pub flow_layers: usize,
    pub flow_heads: usize,
    pub mask_res: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let f = FlowConfig::default();
        Self {
            d_model: b.d_model,
            layers: b.layers,
            heads: b.heads,
            max_seq: b.max_seq,
            bins: DiscretizerConfig::default().bins,
            flow_layers: f.layers,
            flow_heads: f.heads,
            mask_res: DecoderConfig::default().mask_res,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub pos: f32,
    pub grasp: f32,
    pub qpos: f32,
    pub obj: f32,
    pub seg: f32,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            pos: w.pos,
            grasp: w.grasp,
            qpos: w.qpos,
            obj: w.obj,
            seg: w.seg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub aux_pos: bool,
    pub aux_grasp: bool,
    pub aux_qpos: bool,
    pub aux_obj: bool,
    pub aux_seg: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = StageSchedule::full_task();
        let t = TrainConfig::default();
        Self {
            stage1_epochs: s.stage1,
            stage2_epochs: s.stage2,
            stage3_epochs: s.stage3,
            lr: t.lr,
            batch_size: t.batch_size,
            aux_pos: t.tasks.pos,
            aux_grasp: t.tasks.grasp,
            aux_qpos: t.tasks.qpos,
            aux_obj: t.tasks.obj,
            aux_seg: t.tasks.seg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub max_steps: usize,
    pub seeds: Vec<u64>,
    /// Action head at rollout time: "tokens" or "flow".
    pub head: String,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            episodes: e.episodes,
            max_steps: e.max_steps,
            seeds: e.seeds,
            head: "tokens".to_string(),
            jobs: e.jobs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub modalities: ModalitySection,
    pub model: ModelSection,
    pub loss_weights: WeightsSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    /// Canonical serialization: fixed section and key order regardless of
    /// how the source file was laid out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the canonical form, so two files that parse to the same
    /// configuration hash identically.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    /// Applies one `section.key=value` override. The value is coerced to
    /// the type the key already has; anything else is an error naming the
    /// expected type.
    pub fn apply_set(&mut self, expr: &str) -> Result<(), ConfigError> {
        let bad = |what: String| ConfigError::Parse(format!("--set {expr}: {what}"));
        let (key, value) = expr
            .split_once('=')
            .ok_or_else(|| bad("expected SECTION.KEY=VALUE".to_string()))?;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| bad(format!("expected SECTION.KEY, e.g. schedule.lr; sections are {SECTIONS}")))?;

        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let table = root.as_table_mut().expect("config is a table");
        let sec = table.get_mut(section).ok_or_else(|| {
            bad(format!("unknown section `{section}`; valid sections are {SECTIONS}"))
        })?;
        let sec_table = sec.as_table_mut().expect("sections are tables");
        let keys = sec_table.keys().cloned().collect::<Vec<_>>().join(", ");
        let slot = sec_table.get_mut(field).ok_or_else(|| {
            bad(format!(
                "unknown key `{field}` in [{section}]; valid keys are {keys}"
            ))
        })?;
        *slot = coerce(value, slot).map_err(|what| bad(what))?;
        *self = root
            .try_into()
            .map_err(|e| bad(format!("rejected: {e}")))?;
        Ok(())
    }

    pub fn world_config(&self) -> Result<WorldConfig, ConfigError> {
        let seg_view = match self.world.seg_view.as_str() {
            "head" => Camera::Head,
            "hand" => Camera::Hand,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "world.seg_view must be \"head\" or \"hand\", got {other:?}"
                )))
            }
        };
        Ok(WorldConfig {
            frame_size: self.world.frame_size,
            spawn_dist_min: self.world.spawn_dist_min,
            spawn_dist_max: self.world.spawn_dist_max,
            heading_jitter: self.world.heading_jitter,
            head_view: self.world.head_view,
            hand_view: self.world.hand_view,
            max_steps: self.world.max_steps,
            seg_view,
        })
    }

    pub fn modality_config(&self) -> ModalityConfig {
        ModalityConfig {
            use_hand_view: self.modalities.use_hand_view,
            use_depth: self.modalities.use_depth,
            history_len: self.modalities.history_len,
            frame_size: self.world.frame_size,
            patch_size: self.modalities.patch_size,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let cfg = ModelConfig {
            modality: self.modality_config(),
            backbone: BackboneConfig {
                d_model: m.d_model,
                layers: m.layers,
                heads: m.heads,
                max_seq: m.max_seq,
            },
            disc: DiscretizerConfig {
                bins: m.bins,
                ..DiscretizerConfig::default()
            },
            decoder: DecoderConfig {
                d_model: m.d_model,
                proj_dim: default_proj_dim(m.d_model),
                mask_res: m.mask_res,
                heads: m.heads,
                ..DecoderConfig::default()
            },
            flow: FlowConfig {
                d_model: m.d_model,
                layers: m.flow_layers,
                heads: m.flow_heads,
            },
        };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let s = &self.schedule;
        TrainConfig {
            lr: s.lr,
            batch_size: s.batch_size,
            weights: LossWeights {
                pos: self.loss_weights.pos,
                grasp: self.loss_weights.grasp,
                qpos: self.loss_weights.qpos,
                obj: self.loss_weights.obj,
                seg: self.loss_weights.seg,
            },
            modality: self.modality_config(),
            tasks: TaskSet {
                pos: s.aux_pos,
                grasp: s.aux_grasp,
                qpos: s.aux_qpos,
                obj: s.aux_obj,
                seg: s.aux_seg,
            },
            seed,
        }
    }

    pub fn stage_schedule(&self) -> StageSchedule {
        StageSchedule {
            stage1: self.schedule.stage1_epochs,
            stage2: self.schedule.stage2_epochs,
            stage3: self.schedule.stage3_epochs,
        }
    }

    pub fn head_selection(&self) -> Result<HeadSelection, ConfigError> {
        match self.eval.head.as_str() {
            "tokens" => Ok(HeadSelection::DiscreteTokens),
            "flow" => Ok(HeadSelection::FlowExpert),
            other => Err(ConfigError::Invalid(format!(
                "eval.head must be \"tokens\" or \"flow\", got {other:?}"
            ))),
        }
    }

    pub fn eval_config(&self, jobs_override: Option<usize>) -> Result<EvalConfig, ConfigError> {
        Ok(EvalConfig {
            episodes: self.eval.episodes,
            max_steps: self.eval.max_steps,
            seeds: self.eval.seeds.clone(),
            head: self.head_selection()?,
            jobs: jobs_override.unwrap_or(self.eval.jobs),
            world: self.world_config()?,
        })
    }
}

/// Parses `text` as the same TOML type `like` already holds.
fn coerce(text: &str, like: &toml::Value) -> Result<toml::Value, String> {
    use toml::Value;
    match like {
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Boolean(_) => text
            .parse()
            .map(Value::Boolean)
            .map_err(|_| format!("key expects a boolean, got `{text}`")),
        Value::Integer(_) => text
            .parse()
            .map(Value::Integer)
            .map_err(|_| format!("key expects an integer, got `{text}`")),
        Value::Float(_) => text
            .parse::<f64>()
            .map(Value::Float)
            .map_err(|_| format!("key expects a float, got `{text}`")),
        Value::Array(_) => {
            let doc: toml::Table = format!("v = {text}")
                .parse()
                .map_err(|_| format!("key expects an array like [0,1,2], got `{text}`"))?;
            match &doc["v"] {
                Value::Array(a) => Ok(Value::Array(a.clone())),
                _ => Err(format!("key expects an array like [0,1,2], got `{text}`")),
            }
        }
        other => Err(format!("key of type {} cannot be overridden", other.type_str())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_documented_defaults() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.loss_weights.pos, 1.0);
        assert_eq!(cfg.loss_weights.grasp, 5.0);
        assert_eq!(cfg.loss_weights.qpos, 1.0);
        assert_eq!(cfg.loss_weights.obj, 1.0);
        assert_eq!(cfg.loss_weights.seg, 1.0);
        assert_eq!(cfg.eval.episodes, 30);
        assert_eq!(cfg.schedule.stage1_epochs, 3);
    }

    #[test]
    fn serialization_round_trips_and_hash_ignores_key_order() {
        let mut cfg = RunConfig::default();
        cfg.schedule.lr = 2e-5;
        cfg.eval.seeds = vec![3, 5];
        let text = cfg.to_toml();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());

        let a = RunConfig::parse_str("[schedule]\nlr = 0.5\nbatch_size = 8\n").unwrap();
        let b = RunConfig::parse_str("[schedule]\nbatch_size = 8\nlr = 0.5\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse_str("[foo]\nbar = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = RunConfig::parse_str("[schedule]\nlearning = 1\n").unwrap_err();
        assert!(err.to_string().contains("learning"), "{err}");
    }

    #[test]
    fn set_overrides_apply_last_and_check_types() {
        let mut cfg = RunConfig::parse_str("[schedule]\nstage1_epochs = 3\n").unwrap();
        cfg.apply_set("schedule.stage1_epochs=0").unwrap();
        assert_eq!(cfg.schedule.stage1_epochs, 0);
        cfg.apply_set("schedule.lr=5e-4").unwrap();
        assert!((cfg.schedule.lr - 5e-4).abs() < 1e-12);
        cfg.apply_set("eval.head=flow").unwrap();
        assert_eq!(cfg.head_selection().unwrap(), HeadSelection::FlowExpert);
        cfg.apply_set("eval.seeds=[1,2,3]").unwrap();
        assert_eq!(cfg.eval.seeds, vec![1, 2, 3]);
        cfg.apply_set("modalities.use_depth=false").unwrap();
        assert!(!cfg.modalities.use_depth);

        let err = cfg.apply_set("foo.bar=1").unwrap_err();
        assert!(err.to_string().contains(SECTIONS), "{err}");
        let err = cfg.apply_set("schedule.nope=1").unwrap_err();
        assert!(err.to_string().contains("valid keys"), "{err}");
        let err = cfg.apply_set("schedule.lr=fast").unwrap_err();
        assert!(err.to_string().contains("float"), "{err}");
        let err = cfg.apply_set("schedule.lr").unwrap_err();
        assert!(err.to_string().contains("SECTION.KEY=VALUE"), "{err}");
    }

    #[test]
    fn bridges_build_runnable_configs() {
        let mut cfg = RunConfig::default();
        cfg.world.frame_size = 16;
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.max_seq = 64;
        cfg.model.flow_heads = 2;

        let wc = cfg.world_config().unwrap();
        assert_eq!(wc.frame_size, 16);
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.modality.frame_size, 16);
        assert_eq!(mc.flow.d_model, 16);
        let tc = cfg.train_config(9);
        assert_eq!(tc.seed, 9);
        assert_eq!(tc.weights.grasp, 5.0);
        let ec = cfg.eval_config(Some(4)).unwrap();
        assert_eq!(ec.jobs, 4);
        assert_eq!(ec.world.frame_size, 16);

        cfg.world.seg_view = "elbow".to_string();
        assert!(cfg.world_config().is_err());
        cfg.world.seg_view = "hand".to_string();
        assert_eq!(cfg.world_config().unwrap().seg_view, Camera::Hand);
    }
}
