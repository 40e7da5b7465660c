//! Closed-loop evaluation: rollouts against the simulator, success tables
//! over seed sets, the ablation grid, and metric export.
//!
//! Evaluation is a pure function of the trained parameters and the seed
//! set. Every source of randomness inside a rollout derives from the
//! episode seed, so the same policy and seed always replay the same
//! trajectory, and parallel evaluation merges per-episode results back in
//! index order to produce the identical table.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::Rng as _;
use serde_json::json;
use thiserror::Error;

use crate::backbone::{
    tokenize_instruction, undiscretize_action, BackboneError, InstructionTokens,
};
use crate::flow::{select_executed, DenoiseConfig, FlowError};
use crate::perception::{assemble_observation, PerceptError, ViewSet};
use crate::rng::{fnv1a64, mix, rng_from_seed, Rng};
use crate::tensor::{Graph, ParamStore};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_full, CheckpointError, ModelConfig, SgvlaModel,
    StageSchedule, TrainConfig, TrainError,
};
use crate::world::{
    check_success, expert_action, render, reset, step, Action13, Camera, EpisodeRecord, Subtask,
    WorldConfig, WorldError, WorldState,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad eval config: {0}")]
    BadConfig(String),
    #[error("bad metrics table: {0}")]
    BadMetrics(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which action head drives a model policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelection {
    /// Per-step argmax over the bin logits.
    DiscreteTokens,
    /// Chunked flow sampling: plan a chunk, execute its prefix, re-plan.
    FlowExpert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Rollouts per (task, seed) cell.
    pub episodes: usize,
    /// Hard cap on simulator steps per rollout.
    pub max_steps: usize,
    /// Evaluation seeds; each yields one table row per task.
    pub seeds: Vec<u64>,
    /// Head used when the caller builds a model policy from a checkpoint.
    pub head: HeadSelection,
    /// Worker threads for episode-level parallelism; 1 runs serially.
    pub jobs: usize,
    pub world: WorldConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 30,
            max_steps: 200,
            seeds: (0..5).collect(),
            head: HeadSelection::DiscreteTokens,
            jobs: 1,
            world: WorldConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes == 0 {
            return Err(EvalError::BadConfig("episodes must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(EvalError::BadConfig("max_steps must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(EvalError::BadConfig("need at least one eval seed".into()));
        }
        if self.jobs == 0 {
            return Err(EvalError::BadConfig("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// An action source for closed-loop rollouts.
pub enum Policy<'a> {
    /// The privileged scripted controller; reads simulator state directly.
    Expert,
    /// Uniform noise within the per-dimension action limits.
    Random,
    /// Replays a fixed prefix, then holds still.
    Scripted(&'a [Action13]),
    /// A trained model driven by its own rendered observations.
    Model {
        model: &'a SgvlaModel,
        store: &'a ParamStore,
        head: HeadSelection,
    },
}

/// What happened during one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub success: bool,
    /// Simulator steps actually applied.
    pub steps: usize,
    /// Every action the policy emitted, including a final non-finite one.
    pub actions: Vec<Action13>,
    /// The policy emitted a non-finite action and the episode was cut
    /// short as a failure.
    pub diverged: bool,
    /// Flow-expert planning calls; zero for per-step heads.
    pub plans: usize,
}

/// Stable lowercase label for a subtask, used in metric tables.
pub fn task_label(subtask: Subtask) -> &'static str {
    match subtask {
        Subtask::Pick => "pick",
        Subtask::Place => "place",
        Subtask::OpenFridge => "open_fridge",
        Subtask::OpenDrawer => "open_drawer",
        Subtask::CloseFridge => "close_fridge",
        Subtask::CloseDrawer => "close_drawer",
    }
}

fn random_action(rng: &mut Rng) -> Action13 {
    let mut out = [0.0f32; 13];
    for (v, &lim) in out.iter_mut().zip(&Action13::LIMITS) {
        *v = rng.random_range(-lim..=lim);
    }
    Action13(out)
}

/// Per-episode state a model policy carries between steps.
struct ModelRollState {
    /// Most recent view sets, oldest first, capped at `history_len`.
    past: Vec<ViewSet>,
    /// Actions already planned but not yet executed.
    queue: VecDeque<Action13>,
    instr: InstructionTokens,
    text: &'static str,
}

fn model_action(
    model: &SgvlaModel,
    store: &ParamStore,
    head: HeadSelection,
    state: &WorldState,
    roll: &mut ModelRollState,
    plans: &mut usize,
    episode_seed: u64,
    cfg: &EvalConfig,
) -> Result<Action13, EvalError> {
    let modality = model.cfg.modality;
    // Render every step, not just at plan time: the history the model was
    // trained on is the frames immediately before the current one.
    let current = ViewSet {
        head: render(state, Camera::Head, &cfg.world),
        hand: modality
            .use_hand_view
            .then(|| render(state, Camera::Hand, &cfg.world)),
    };
    let action = match head {
        HeadSelection::DiscreteTokens => {
            let bundle =
                assemble_observation(current.clone(), &roll.past, roll.text, &modality)?;
            let mut g = Graph::new();
            let seq = model.perception.forward(&mut g, store, &bundle)?;
            let (_, logits) =
                model
                    .backbone
                    .forward(&mut g, store, &[seq], std::slice::from_ref(&roll.instr))?;
            let mut tokens = [0usize; 13];
            for (dim, &node) in logits.iter().enumerate() {
                let row = g.value(node);
                let data = row.data();
                let mut best = 0;
                for (j, &v) in data.iter().enumerate() {
                    if v > data[best] {
                        best = j;
                    }
                }
                tokens[dim] = best;
            }
            undiscretize_action(&tokens, &model.cfg.disc)?
        }
        HeadSelection::FlowExpert => {
            if roll.queue.is_empty() {
                let bundle =
                    assemble_observation(current.clone(), &roll.past, roll.text, &modality)?;
                let mut g = Graph::new();
                let seq = model.perception.forward(&mut g, store, &bundle)?;
                let (latents, _) = model.backbone.forward(
                    &mut g,
                    store,
                    &[seq],
                    std::slice::from_ref(&roll.instr),
                )?;
                let lat = g.value(latents.latents).clone();
                *plans += 1;
                let chunk = model.expert.sample_chunk(
                    store,
                    &lat,
                    &DenoiseConfig::default(),
                    mix(episode_seed, *plans as u64),
                )?;
                roll.queue.extend(select_executed(&chunk));
            }
            roll.queue.pop_front().expect("refilled above")
        }
    };
    if modality.history_len > 0 {
        roll.past.push(current);
        if roll.past.len() > modality.history_len {
            roll.past.remove(0);
        }
    }
    Ok(action)
}

/// Runs one closed-loop episode. The policy acts until the shared success
/// predicate fires or `max_steps` elapse; a non-finite action ends the
/// episode immediately as a recorded failure so a bad arm cannot poison
/// the rest of an evaluation run.
pub fn rollout(
    policy: &Policy,
    subtask: Subtask,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<RolloutOutcome, EvalError> {
    if cfg.max_steps == 0 {
        return Err(EvalError::BadConfig("max_steps must be at least 1".into()));
    }
    if let Policy::Model { model, .. } = policy {
        if model.cfg.modality.frame_size != cfg.world.frame_size {
            return Err(EvalError::BadConfig(format!(
                "model expects {}px frames but the world renders {}px",
                model.cfg.modality.frame_size, cfg.world.frame_size
            )));
        }
    }

    let mut state = reset(subtask, seed, &cfg.world);
    let mut rng = rng_from_seed(mix(seed, 0x7011));
    let mut roll = ModelRollState {
        past: Vec::new(),
        queue: VecDeque::new(),
        instr: tokenize_instruction(subtask.instruction()),
        text: subtask.instruction(),
    };
    let mut plans = 0usize;
    let mut actions = Vec::new();

    for idx in 0..cfg.max_steps {
        if check_success(&state, subtask) {
            return Ok(RolloutOutcome {
                success: true,
                steps: idx,
                actions,
                diverged: false,
                plans,
            });
        }
        let action = match policy {
            Policy::Expert => expert_action(&state, subtask),
            Policy::Random => random_action(&mut rng),
            Policy::Scripted(list) => list.get(idx).copied().unwrap_or_else(Action13::zero),
            Policy::Model { model, store, head } => {
                model_action(model, store, *head, &state, &mut roll, &mut plans, seed, cfg)?
            }
        };
        actions.push(action);
        if !action.is_finite() {
            return Ok(RolloutOutcome {
                success: false,
                steps: idx,
                actions,
                diverged: true,
                plans,
            });
        }
        state = step(&state, &action)?;
    }

    Ok(RolloutOutcome {
        success: check_success(&state, subtask),
        steps: cfg.max_steps,
        actions,
        diverged: false,
        plans,
    })
}

/// One success-table cell: all episodes of one (task, variant, seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub episodes: usize,
    pub successes: usize,
}

impl EvalRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

pub const METRICS_HEADER: &str = "task,variant,seed,episodes,successes,rate";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuccessTable {
    pub rows: Vec<EvalRow>,
}

impl SuccessTable {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    /// Mean and population standard deviation of the per-seed rates for
    /// one (task, variant) pair; `None` when the pair is absent.
    pub fn seed_stats(&self, task: &str, variant: &str) -> Option<(f64, f64)> {
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task && r.variant == variant)
            .map(EvalRow::rate)
            .collect();
        if rates.is_empty() {
            return None;
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
        Some((mean, var.sqrt()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.4}",
                r.task,
                r.variant,
                r.seed,
                r.episodes,
                r.successes,
                r.rate()
            )
            .expect("string write");
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let line = json!({
                "task": r.task,
                "variant": r.variant,
                "seed": r.seed,
                "episodes": r.episodes,
                "successes": r.successes,
                "rate": (r.rate() * 1e4).round() / 1e4,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses [`SuccessTable::to_csv`] output and cross-checks every rate
    /// column against the counts it claims to summarize.
    pub fn from_csv(text: &str) -> Result<SuccessTable, EvalError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EvalError::BadMetrics("empty file".into()))?;
        if header != METRICS_HEADER {
            return Err(EvalError::BadMetrics(format!(
                "unexpected header {header:?}"
            )));
        }
        let mut rows = Vec::new();
        for (num, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: String| EvalError::BadMetrics(format!("line {}: {what}", num + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", fields.len())));
            }
            let row = EvalRow {
                task: fields[0].to_string(),
                variant: fields[1].to_string(),
                seed: fields[2]
                    .parse()
                    .map_err(|_| bad(format!("bad seed {:?}", fields[2])))?,
                episodes: fields[3]
                    .parse()
                    .map_err(|_| bad(format!("bad episode count {:?}", fields[3])))?,
                successes: fields[4]
                    .parse()
                    .map_err(|_| bad(format!("bad success count {:?}", fields[4])))?,
            };
            check_row(&row).map_err(|what| bad(what))?;
            if format!("{:.4}", row.rate()) != fields[5] {
                return Err(bad(format!(
                    "rate column {:?} disagrees with {}/{}",
                    fields[5], row.successes, row.episodes
                )));
            }
            rows.push(row);
        }
        Ok(SuccessTable { rows })
    }
}

fn check_row(row: &EvalRow) -> Result<(), String> {
    if row.episodes == 0 {
        return Err("row has zero episodes".into());
    }
    if row.successes > row.episodes {
        return Err(format!(
            "{} successes out of {} episodes",
            row.successes, row.episodes
        ));
    }
    for field in [&row.task, &row.variant] {
        if field.is_empty() || field.contains([',', '\n', '"']) {
            return Err(format!("label {field:?} does not fit the csv layout"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Jsonl,
}

/// Writes the table to disk in a stable row order.
pub fn export_metrics(
    table: &SuccessTable,
    path: &Path,
    format: MetricsFormat,
) -> Result<(), EvalError> {
    for row in &table.rows {
        check_row(row).map_err(EvalError::BadMetrics)?;
    }
    let text = match format {
        MetricsFormat::Csv => table.to_csv(),
        MetricsFormat::Jsonl => table.to_jsonl(),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Evaluates one subtask: for every eval seed, `cfg.episodes` rollouts
/// with per-episode seeds `mix(seed, index)`. With `jobs > 1` the
/// episodes are spread over worker threads and merged back in index
/// order, so the table matches the serial run exactly.
pub fn evaluate_task(
    policy: &Policy,
    subtask: Subtask,
    variant: &str,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>, EvalError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcomes = run_episodes(policy, subtask, seed, cfg)?;
        rows.push(EvalRow {
            task: task_label(subtask).to_string(),
            variant: variant.to_string(),
            seed,
            episodes: cfg.episodes,
            successes: outcomes.iter().filter(|o| o.success).count(),
        });
    }
    Ok(rows)
}

fn run_episodes(
    policy: &Policy,
    subtask: Subtask,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<RolloutOutcome>, EvalError> {
    let n = cfg.episodes;
    if cfg.jobs <= 1 || n == 1 {
        return (0..n)
            .map(|i| rollout(policy, subtask, mix(seed, i as u64), cfg))
            .collect();
    }
    let workers = cfg.jobs.min(n);
    let mut slots: Vec<Option<Result<RolloutOutcome, EvalError>>> =
        (0..n).map(|_| None).collect();
    thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                let mut i = w;
                while i < n {
                    let out = rollout(policy, subtask, mix(seed, i as u64), cfg);
                    if tx.send((i, out)).is_err() {
                        return;
                    }
                    i += workers;
                }
            });
        }
        drop(tx);
        for (i, out) in rx {
            slots[i] = Some(out);
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every episode index covered"))
        .collect()
}

/// Which study an ablation arm belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmKind {
    Modality,
    Auxiliary,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub kind: ArmKind,
    pub schedule: StageSchedule,
    pub train: TrainConfig,
    pub head: HeadSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub arms: Vec<AblationArm>,
}

impl AblationSpec {
    /// The full study grid: input-modality arms, auxiliary-supervision
    /// arms in progressive and naive variants plus the segmentation arm,
    /// and the two action heads. Every arm shares the base seed and
    /// hyperparameters; only the studied axis varies.
    pub fn standard(base: &TrainConfig) -> AblationSpec {
        let mut arms = Vec::new();

        let modality_arms = [
            ("single-view", false, false, 0usize),
            ("multiview", true, false, 0),
            ("multiview+depth", true, true, 0),
            ("multiview+depth+history", true, true, 4),
        ];
        for (name, hand, depth, hist) in modality_arms {
            let mut modality = base.modality;
            modality.use_hand_view = hand;
            modality.use_depth = depth;
            modality.history_len = hist;
            arms.push(AblationArm {
                name: name.to_string(),
                kind: ArmKind::Modality,
                schedule: StageSchedule::full_task(),
                train: TrainConfig {
                    modality,
                    ..base.clone()
                },
                head: HeadSelection::DiscreteTokens,
            });
        }

        let none = crate::trainer::TaskSet::none();
        let aux_arms = [
            ("aux-none", none),
            (
                "aux+is_grasped",
                crate::trainer::TaskSet {
                    grasp: true,
                    ..none
                },
            ),
            ("aux+qpos", crate::trainer::TaskSet { qpos: true, ..none }),
            (
                "aux+global_pos",
                crate::trainer::TaskSet { pos: true, ..none },
            ),
            (
                "aux+all",
                crate::trainer::TaskSet {
                    pos: true,
                    grasp: true,
                    qpos: true,
                    ..none
                },
            ),
        ];
        for (name, tasks) in aux_arms {
            let train = TrainConfig {
                tasks,
                ..base.clone()
            };
            let full = StageSchedule::full_task();
            for (suffix, schedule) in [("progressive", full), ("naive", full.naive())] {
                arms.push(AblationArm {
                    name: format!("{name}/{suffix}"),
                    kind: ArmKind::Auxiliary,
                    schedule,
                    train: train.clone(),
                    head: HeadSelection::DiscreteTokens,
                });
            }
        }
        arms.push(AblationArm {
            name: "aux+seg+obj_pos".to_string(),
            kind: ArmKind::Auxiliary,
            schedule: StageSchedule::seg_pick_place(),
            train: TrainConfig {
                tasks: crate::trainer::TaskSet::all(),
                ..base.clone()
            },
            head: HeadSelection::DiscreteTokens,
        });

        arms.push(AblationArm {
            name: "head-tokens".to_string(),
            kind: ArmKind::Head,
            schedule: StageSchedule {
                stage3: 0,
                ..StageSchedule::full_task()
            },
            train: base.clone(),
            head: HeadSelection::DiscreteTokens,
        });
        arms.push(AblationArm {
            name: "head-flow".to_string(),
            kind: ArmKind::Head,
            schedule: StageSchedule::full_task(),
            train: base.clone(),
            head: HeadSelection::FlowExpert,
        });

        AblationSpec { arms }
    }
}

/// Stable digest of everything that shapes an arm's trained parameters.
/// The head is deliberately left out: it only matters at rollout time, so
/// two arms that train identically share one checkpoint.
pub fn arm_config_hash(arm: &AblationArm, model_cfg: &ModelConfig) -> u64 {
    let text = format!("{:?}|{:?}|{:?}", arm.schedule, arm.train, model_cfg);
    fnv1a64(text.as_bytes())
}

/// One trained-and-evaluated study.
#[derive(Debug)]
pub struct AblationOutcome {
    pub table: SuccessTable,
    /// Arm names trained during this run.
    pub trained: Vec<String>,
    /// Arm names restored from cached checkpoints.
    pub cached: Vec<String>,
}

/// Trains (or restores) every arm and evaluates it on all six subtasks.
/// Each arm contributes one row per (task, seed) plus an `avg` row per
/// seed that pools the six tasks. Checkpoints land in `cache_dir` keyed
/// by the arm's configuration hash, so re-running a study only retrains
/// arms whose configuration changed.
pub fn run_ablation(
    spec: &AblationSpec,
    model_cfg: &ModelConfig,
    episodes: &[EpisodeRecord],
    eval_cfg: &EvalConfig,
    cache_dir: &Path,
) -> Result<AblationOutcome, EvalError> {
    eval_cfg.validate()?;
    if spec.arms.is_empty() {
        return Err(EvalError::BadConfig("ablation needs at least one arm".into()));
    }
    for (i, arm) in spec.arms.iter().enumerate() {
        if spec.arms[..i].iter().any(|a| a.name == arm.name) {
            return Err(EvalError::BadConfig(format!(
                "duplicate arm name {:?}",
                arm.name
            )));
        }
    }
    fs::create_dir_all(cache_dir)?;

    let mut table = SuccessTable::default();
    let mut trained = Vec::new();
    let mut cached = Vec::new();
    for arm in &spec.arms {
        let arm_cfg = ModelConfig {
            modality: arm.train.modality,
            ..model_cfg.clone()
        };
        let hash = arm_config_hash(arm, &arm_cfg);
        let path = cache_dir.join(format!("arm-{hash:016x}.sgvc"));
        let (model, store) = if path.is_file() {
            let ckpt = load_checkpoint(&path)?;
            if ckpt.config_hash != hash {
                return Err(EvalError::BadConfig(format!(
                    "cache file {} was written for a different configuration",
                    path.display()
                )));
            }
            let mut store = ParamStore::new();
            let mut rng = rng_from_seed(mix(arm.train.seed, 0x1217));
            let model = SgvlaModel::init(&mut store, &arm_cfg, &mut rng)?;
            ckpt.apply(&mut store, &model.decoders)?;
            cached.push(arm.name.clone());
            (model, store)
        } else {
            let out = train_full(&arm.schedule, &arm_cfg, &arm.train, episodes)?;
            let stage = if arm.schedule.stage3 > 0 {
                3
            } else if arm.schedule.stage2 > 0 {
                2
            } else {
                1
            };
            save_checkpoint(
                &path,
                &out.store,
                &out.model.decoders.bn_state(),
                stage,
                hash,
                None,
            )?;
            trained.push(arm.name.clone());
            (out.model, out.store)
        };

        let policy = Policy::Model {
            model: &model,
            store: &store,
            head: arm.head,
        };
        let arm_eval = EvalConfig {
            head: arm.head,
            ..eval_cfg.clone()
        };
        let mut pooled = vec![(0usize, 0usize); arm_eval.seeds.len()];
        for subtask in Subtask::ALL {
            let rows = evaluate_task(&policy, subtask, &arm.name, &arm_eval)?;
            for (slot, row) in pooled.iter_mut().zip(&rows) {
                slot.0 += row.episodes;
                slot.1 += row.successes;
            }
            table.rows.extend(rows);
        }
        for (&seed, &(episodes, successes)) in arm_eval.seeds.iter().zip(&pooled) {
            table.push(EvalRow {
                task: "avg".to_string(),
                variant: arm.name.clone(),
                seed,
                episodes,
                successes,
            });
        }
    }
    Ok(AblationOutcome {
        table,
        trained,
        cached,
    })
}
