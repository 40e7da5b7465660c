//! Three-stage training.
//!
//! Stage 1 warms the auxiliary decoders on detached latents while the
//! backbone keeps learning discrete action tokens; stage 2 opens full
//! gradient flow through the combined objective; stage 3 freezes every
//! parameter outside the flow expert and fits the velocity field. The
//! module also owns the assembled model, the epoch log, and the
//! checkpoint file format.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::json;
use thiserror::Error;

use crate::backbone::{
    action_token_loss, discretize_action, tokenize_instruction, BackboneConfig, BackboneError,
    BackboneModel, DiscretizerConfig, InstructionTokens, LatentFeatures,
};
use crate::decoders::{
    aux_total, loss_grasp, loss_obj, loss_pos, loss_qpos, loss_seg, AuxDecoders, AuxLossTerms,
    BnStats, DecoderConfig, DecoderError, LossWeights,
};
use crate::flow::{
    fm_loss, make_training_pair, ActionChunk, FlowConfig, FlowError, FlowExpert, HORIZON,
};
use crate::perception::{
    assemble_observation, ModalityConfig, ObservationBundle, PerceptError, PerceptionModel,
    ViewSet,
};
use crate::rng::{mix, rng_from_seed};
use crate::tensor::{Adam, AdamConfig, Graph, NodeId, NormPhase, ParamStore, Tensor, TensorError};
use crate::world::{Action13, EpisodeRecord, StepRecord};

/// Epochs of expert training when the schedule does not say otherwise.
pub const DEFAULT_STAGE3_EPOCHS: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("dataset holds no transitions")]
    EmptyDataset,
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Epochs per stage. Zero skips a stage entirely; (0, E, 0) is the naive
/// co-training baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSchedule {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

impl StageSchedule {
    /// Default epochs for runs over the full task mix.
    pub fn full_task() -> Self {
        Self {
            stage1: 3,
            stage2: 7,
            stage3: DEFAULT_STAGE3_EPOCHS,
        }
    }

    /// Default epochs for segmentation-enabled pick/place runs.
    pub fn seg_pick_place() -> Self {
        Self {
            stage1: 2,
            stage2: 4,
            stage3: DEFAULT_STAGE3_EPOCHS,
        }
    }

    /// The same epoch budget with the warm-up folded into joint training:
    /// every stage-1 epoch becomes a stage-2 epoch.
    pub fn naive(&self) -> StageSchedule {
        StageSchedule {
            stage1: 0,
            stage2: self.stage1 + self.stage2,
            stage3: self.stage3,
        }
    }

    pub fn total(&self) -> usize {
        self.stage1 + self.stage2 + self.stage3
    }
}

/// Which auxiliary heads contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSet {
    pub pos: bool,
    pub grasp: bool,
    pub qpos: bool,
    pub obj: bool,
    pub seg: bool,
}

impl TaskSet {
    pub fn all() -> Self {
        Self {
            pos: true,
            grasp: true,
            qpos: true,
            obj: true,
            seg: true,
        }
    }

    pub fn none() -> Self {
        Self {
            pos: false,
            grasp: false,
            qpos: false,
            obj: false,
            seg: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub modality: ModalityConfig,
    pub tasks: TaskSet,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            weights: LossWeights::default(),
            modality: ModalityConfig::default(),
            tasks: TaskSet::all(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The hyperparameters the reference system trained with. Recorded
    /// for provenance; at this scale they are far too timid.
    pub fn paper_scale() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be nonzero".into()));
        }
        if self.tasks.seg && self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "segmentation batch norm needs batches of at least 2".into(),
            ));
        }
        self.weights.validate()?;
        self.modality.validate()?;
        Ok(())
    }
}

/// Shapes of every component; the shared width ties them together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modality: ModalityConfig,
    pub backbone: BackboneConfig,
    pub disc: DiscretizerConfig,
    pub decoder: DecoderConfig,
    pub flow: FlowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality: ModalityConfig::default(),
            backbone: BackboneConfig::default(),
            disc: DiscretizerConfig::default(),
            decoder: DecoderConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.modality.validate()?;
        self.disc.validate()?;
        self.decoder.validate()?;
        let d = self.backbone.d_model;
        if self.decoder.d_model != d || self.flow.d_model != d {
            return Err(TrainError::BadConfig(format!(
                "decoders ({}) and expert ({}) must match the backbone width {d}: both cross-attend its latents",
                self.decoder.d_model, self.flow.d_model
            )));
        }
        Ok(())
    }
}

/// The assembled system: encoder/projector, backbone with discrete action
/// heads, auxiliary decoders, and the flow expert, all over one store.
pub struct SgvlaModel {
    pub cfg: ModelConfig,
    pub perception: PerceptionModel,
    pub backbone: BackboneModel,
    pub decoders: AuxDecoders,
    pub expert: FlowExpert,
}

impl SgvlaModel {
    pub fn init(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut crate::rng::Rng,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            perception: PerceptionModel::init(store, cfg.modality, cfg.backbone.d_model, rng)?,
            backbone: BackboneModel::init(store, cfg.backbone, cfg.disc.clone(), rng)?,
            decoders: AuxDecoders::init(store, cfg.decoder, rng)?,
            expert: FlowExpert::init(store, cfg.flow, rng)?,
            cfg: cfg.clone(),
        })
    }

    /// Encodes a batch of observations through the encoder and backbone.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[Sample],
    ) -> Result<(LatentFeatures, Vec<NodeId>), TrainError> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut instrs = Vec::with_capacity(batch.len());
        for s in batch {
            seqs.push(self.perception.forward(g, store, &s.bundle)?);
            instrs.push(s.instr.clone());
        }
        Ok(self.backbone.forward(g, store, &seqs, &instrs)?)
    }
}

/// One supervised transition, ready for the graph: observation bundle,
/// tokenized instruction, and every training target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub bundle: ObservationBundle,
    pub instr: InstructionTokens,
    /// Discretized expert action, one bin id per dimension.
    pub bins: [usize; 13],
    pub pos: [f32; 2],
    pub grasp: f32,
    pub qpos: [f32; 12],
    pub obj_t: [f32; 3],
    pub obj_q: [f32; 4],
    /// Mask target resampled to the decoder resolution, row-major.
    pub seg: Vec<f32>,
    /// The next 8 expert actions in normalized space. Past the end of the
    /// episode the chunk pads with zero actions: holding still is the
    /// correct continuation of a finished demonstration.
    pub chunk: ActionChunk,
}

pub fn make_sample(
    ep: &EpisodeRecord,
    idx: usize,
    modality: &ModalityConfig,
    disc: &DiscretizerConfig,
    mask_res: usize,
) -> Result<Sample, TrainError> {
    let step = ep
        .steps
        .get(idx)
        .ok_or_else(|| TrainError::BadConfig(format!("step {idx} out of range")))?;
    let lo = idx.saturating_sub(modality.history_len);
    let past: Vec<ViewSet> = ep.steps[lo..idx].iter().map(view_set).collect();
    let text = ep.subtask.instruction();
    let bundle = assemble_observation(view_set(step), &past, text, modality)?;
    let mut acts = [Action13::zero(); HORIZON];
    for (k, slot) in acts.iter_mut().enumerate() {
        if let Some(s) = ep.steps.get(idx + k) {
            *slot = s.action;
        }
    }
    Ok(Sample {
        bundle,
        instr: tokenize_instruction(text),
        bins: discretize_action(&step.action, disc)?,
        pos: step.aux.global_pos,
        grasp: if step.aux.is_grasped { 1.0 } else { 0.0 },
        qpos: step.aux.qpos,
        obj_t: step.aux.obj_t,
        obj_q: step.aux.obj_q,
        seg: step.aux.seg.resample(mask_res).to_f32(),
        chunk: ActionChunk::from_actions(&acts),
    })
}

fn view_set(step: &StepRecord) -> ViewSet {
    ViewSet {
        head: step.head.clone(),
        hand: Some(step.hand.clone()),
    }
}

/// Loss nodes of one training step. Component nodes stay addressable so
/// callers can read their values for the epoch log.
pub struct StageLosses {
    pub total: NodeId,
    pub action: Option<NodeId>,
    pub aux: AuxLossTerms,
    pub fm: Option<NodeId>,
}

/// Builds the stage-1/2 objective. `gate_decoders` detaches the latents
/// at the decoder boundary, which is exactly the stage-1 contract: the
/// decoders train, but no auxiliary gradient reaches the backbone or the
/// encoder. The action cross-entropy is left out only for gradient-flow
/// diagnostics.
pub fn supervised_losses(
    g: &mut Graph,
    model: &SgvlaModel,
    store: &ParamStore,
    batch: &[Sample],
    gate_decoders: bool,
    include_action: bool,
    cfg: &TrainConfig,
    phase: NormPhase,
) -> Result<StageLosses, TrainError> {
    let n = batch.len();
    let (latents, logits) = model.encode_batch(g, store, batch)?;
    let feats = if gate_decoders {
        g.detach(latents.latents)
    } else {
        latents.latents
    };

    let mut aux = AuxLossTerms::default();
    if cfg.tasks.pos {
        let pred = model.decoders.decode_global_pos(g, store, feats)?;
        let t = Tensor::new(vec![n, 2], batch.iter().flat_map(|s| s.pos).collect())?;
        aux.pos = Some(loss_pos(g, pred, t)?);
    }
    if cfg.tasks.grasp {
        let pred = model.decoders.decode_grasp(g, store, feats)?;
        let t = Tensor::new(vec![n, 1], batch.iter().map(|s| s.grasp).collect())?;
        aux.grasp = Some(loss_grasp(g, pred, t)?);
    }
    if cfg.tasks.qpos {
        let pred = model.decoders.decode_qpos(g, store, feats)?;
        let t = Tensor::new(vec![n, 12], batch.iter().flat_map(|s| s.qpos).collect())?;
        aux.qpos = Some(loss_qpos(g, pred, t)?);
    }
    if cfg.tasks.obj {
        let pose = model.decoders.decode_object_pose(g, store, feats)?;
        let t = Tensor::new(vec![n, 3], batch.iter().flat_map(|s| s.obj_t).collect())?;
        let q = Tensor::new(vec![n, 4], batch.iter().flat_map(|s| s.obj_q).collect())?;
        aux.obj = Some(loss_obj(g, pose.t, pose.q, t, q)?);
    }
    if cfg.tasks.seg {
        let res = model.cfg.decoder.mask_res;
        let pred = model.decoders.decode_mask(g, store, feats, phase)?;
        let t = Tensor::new(
            vec![n, 1, res, res],
            batch.iter().flat_map(|s| s.seg.iter().copied()).collect(),
        )?;
        aux.seg = Some(loss_seg(g, pred, t)?);
    }
    let aux_sum = aux_total(g, &aux, &cfg.weights)?;

    let (action, total) = if include_action {
        let bins: Vec<[usize; 13]> = batch.iter().map(|s| s.bins).collect();
        let ce = action_token_loss(g, &logits, &bins)?;
        (Some(ce), g.add(ce, aux_sum)?)
    } else {
        (None, aux_sum)
    };
    Ok(StageLosses {
        total,
        action,
        aux,
        fm: None,
    })
}

/// Builds the stage-3 objective: flow-matching regression on latents that
/// are always detached, because by contract the backbone is frozen.
pub fn expert_losses(
    g: &mut Graph,
    model: &SgvlaModel,
    store: &ParamStore,
    batch: &[Sample],
    t: f32,
    noise: &[ActionChunk],
) -> Result<StageLosses, TrainError> {
    assert_eq!(batch.len(), noise.len(), "one noise chunk per sample");
    let (latents, _) = model.encode_batch(g, store, batch)?;
    let feats = g.detach(latents.latents);

    let n = batch.len();
    let dims = crate::flow::ACTION_DIM;
    let mut xs = Vec::with_capacity(n * HORIZON * dims);
    let mut vs = Vec::with_capacity(n * HORIZON * dims);
    for (s, z) in batch.iter().zip(noise) {
        let (x_t, v) = make_training_pair(&s.chunk, z, t)?;
        xs.extend(x_t.flat());
        vs.extend(v.flat());
    }
    let xn = g.input(Tensor::new(vec![n, HORIZON, dims], xs)?);
    let pred = model.expert.velocity(g, store, xn, t, feats)?;
    let fm = fm_loss(g, pred, Tensor::new(vec![n, HORIZON, dims], vs)?)?;
    Ok(StageLosses {
        total: fm,
        action: None,
        aux: AuxLossTerms::default(),
        fm: Some(fm),
    })
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub total: f32,
    pub action: Option<f32>,
    pub pos: Option<f32>,
    pub grasp: Option<f32>,
    pub qpos: Option<f32>,
    pub obj: Option<f32>,
    pub seg: Option<f32>,
    pub fm: Option<f32>,
    pub wall_ms: u64,
    pub seed: u64,
}

impl EpochLog {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "stage": self.stage,
            "epoch": self.epoch,
            "total": self.total,
            "action": self.action,
            "pos": self.pos,
            "grasp": self.grasp,
            "qpos": self.qpos,
            "obj": self.obj,
            "seg": self.seg,
            "fm": self.fm,
            "wall_ms": self.wall_ms,
            "seed": self.seed,
        })
    }
}

/// One JSON object per epoch, newline-delimited.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&entry.to_json().to_string());
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StageKind {
    Gated,
    Full,
    Expert,
}

impl StageKind {
    fn id(self) -> u8 {
        match self {
            StageKind::Gated => 1,
            StageKind::Full => 2,
            StageKind::Expert => 3,
        }
    }
}

/// Running means of the component losses across an epoch.
#[derive(Default)]
struct LossSums {
    batches: usize,
    total: f64,
    action: Option<f64>,
    pos: Option<f64>,
    grasp: Option<f64>,
    qpos: Option<f64>,
    obj: Option<f64>,
    seg: Option<f64>,
    fm: Option<f64>,
}

impl LossSums {
    fn add(&mut self, g: &Graph, losses: &StageLosses) {
        fn acc(slot: &mut Option<f64>, g: &Graph, node: Option<NodeId>) {
            if let Some(n) = node {
                *slot = Some(slot.unwrap_or(0.0) + f64::from(g.value(n).data()[0]));
            }
        }
        self.batches += 1;
        self.total += f64::from(g.value(losses.total).data()[0]);
        acc(&mut self.action, g, losses.action);
        acc(&mut self.pos, g, losses.aux.pos);
        acc(&mut self.grasp, g, losses.aux.grasp);
        acc(&mut self.qpos, g, losses.aux.qpos);
        acc(&mut self.obj, g, losses.aux.obj);
        acc(&mut self.seg, g, losses.aux.seg);
        acc(&mut self.fm, g, losses.fm);
    }

    fn into_log(self, stage: u8, epoch: usize, wall_ms: u64, seed: u64) -> EpochLog {
        let n = self.batches.max(1) as f64;
        let mean = |v: Option<f64>| v.map(|s| (s / n) as f32);
        EpochLog {
            stage,
            epoch,
            total: (self.total / n) as f32,
            action: mean(self.action),
            pos: mean(self.pos),
            grasp: mean(self.grasp),
            qpos: mean(self.qpos),
            obj: mean(self.obj),
            seg: mean(self.seg),
            fm: mean(self.fm),
            wall_ms,
            seed,
        }
    }
}

fn run_epochs(
    kind: StageKind,
    model: &SgvlaModel,
    store: &mut ParamStore,
    episodes: &[EpisodeRecord],
    cfg: &TrainConfig,
    epochs: usize,
    start_epoch: usize,
    log: &mut Vec<EpochLog>,
) -> Result<usize, TrainError> {
    if epochs == 0 {
        return Ok(start_epoch);
    }
    cfg.validate()?;
    let transitions: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |s| (e, s)))
        .collect();
    if transitions.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    match kind {
        // A stage-3 run after manual experiments must not inherit stale
        // freezes; conversely the expert stage freezes the whole trunk.
        StageKind::Gated | StageKind::Full => store.unfreeze_all(),
        StageKind::Expert => store.freeze_where(|name| !name.starts_with("expert.")),
    }
    // Fresh optimizer per stage: moments estimated under one objective
    // are stale under the next.
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        store,
    );
    // Batch-norm statistics in the mask decoder need two samples.
    let min_batch = if cfg.tasks.seg && kind != StageKind::Expert {
        2
    } else {
        1
    };

    for e in 0..epochs {
        let epoch = start_epoch + e;
        let started = Instant::now();
        let mut order = transitions.clone();
        order.shuffle(&mut rng_from_seed(mix(
            mix(cfg.seed, u64::from(kind.id())),
            epoch as u64,
        )));
        let mut draw = rng_from_seed(mix(mix(cfg.seed, 0x5a17), epoch as u64));
        let mut sums = LossSums::default();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&(e, s)| {
                    make_sample(
                        &episodes[e],
                        s,
                        &cfg.modality,
                        &model.backbone.disc,
                        model.cfg.decoder.mask_res,
                    )
                })
                .collect::<Result<_, _>>()?;
            let mut g = Graph::new();
            let losses = match kind {
                StageKind::Gated => {
                    supervised_losses(&mut g, model, store, &batch, true, true, cfg, NormPhase::Train)?
                }
                StageKind::Full => {
                    supervised_losses(&mut g, model, store, &batch, false, true, cfg, NormPhase::Train)?
                }
                StageKind::Expert => {
                    let t = draw.random_range(0.0..=1.0f32);
                    let noise: Vec<ActionChunk> =
                        batch.iter().map(|_| ActionChunk::noise(&mut draw)).collect();
                    expert_losses(&mut g, model, store, &batch, t, &noise)?
                }
            };
            store.zero_grads();
            g.backward(losses.total, store)?;
            opt.step(store);
            sums.add(&g, &losses);
        }
        if sums.batches == 0 {
            return Err(TrainError::BadConfig(format!(
                "no batch reached the minimum size {min_batch}; {} transitions with batch size {}",
                transitions.len(),
                cfg.batch_size
            )));
        }
        log.push(sums.into_log(
            kind.id(),
            epoch,
            started.elapsed().as_millis() as u64,
            cfg.seed,
        ));
    }
    Ok(start_epoch + epochs)
}

/// Stage 1: decoders learn on detached latents, the backbone learns from
/// the action cross-entropy alone. Returns the next global epoch index.
pub fn run_stage1(
    model: &SgvlaModel,
    store: &mut ParamStore,
    episodes: &[EpisodeRecord],
    cfg: &TrainConfig,
    epochs: usize,
    start_epoch: usize,
    log: &mut Vec<EpochLog>,
) -> Result<usize, TrainError> {
    run_epochs(StageKind::Gated, model, store, episodes, cfg, epochs, start_epoch, log)
}

/// Stage 2: full gradient flow through action and auxiliary losses.
pub fn run_stage2(
    model: &SgvlaModel,
    store: &mut ParamStore,
    episodes: &[EpisodeRecord],
    cfg: &TrainConfig,
    epochs: usize,
    start_epoch: usize,
    log: &mut Vec<EpochLog>,
) -> Result<usize, TrainError> {
    run_epochs(StageKind::Full, model, store, episodes, cfg, epochs, start_epoch, log)
}

/// Stage 3: everything except `expert.*` parameters freezes (the decoders
/// too: only the action head trains), and the flow-matching loss is the
/// whole objective. Parameters stay frozen on return.
pub fn run_stage3(
    model: &SgvlaModel,
    store: &mut ParamStore,
    episodes: &[EpisodeRecord],
    cfg: &TrainConfig,
    epochs: usize,
    start_epoch: usize,
    log: &mut Vec<EpochLog>,
) -> Result<usize, TrainError> {
    run_epochs(StageKind::Expert, model, store, episodes, cfg, epochs, start_epoch, log)
}

pub struct TrainOutcome {
    pub model: SgvlaModel,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Initializes a model and runs the staged schedule over the dataset.
/// Deterministic in (configs, schedule, dataset): two identical calls
/// produce bit-identical parameters.
pub fn train_full(
    schedule: &StageSchedule,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    episodes: &[EpisodeRecord],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if episodes.iter().all(|e| e.steps.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(mix(cfg.seed, 0x1217));
    let model = SgvlaModel::init(&mut store, model_cfg, &mut rng)?;
    let mut log = Vec::new();
    let mut epoch = 0;
    epoch = run_stage1(&model, &mut store, episodes, cfg, schedule.stage1, epoch, &mut log)?;
    epoch = run_stage2(&model, &mut store, episodes, cfg, schedule.stage2, epoch, &mut log)?;
    run_stage3(&model, &mut store, episodes, cfg, schedule.stage3, epoch, &mut log)?;
    Ok(TrainOutcome { model, store, log })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {what}")]
    Format { offset: usize, what: String },
    #[error("checkpoint version {got} unsupported, this build reads version {want}")]
    Version { got: u32, want: u32 },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// A parsed checkpoint. Parameters are matched to a store by name when
/// applied, so loading is independent of registration order.
#[derive(Debug)]
pub struct Checkpoint {
    pub stage: u8,
    pub config_hash: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub bn: Vec<BnStats>,
    /// Adam state rows (step count, m, v) in table order, if saved.
    pub moments: Option<Vec<(u64, Vec<f32>, Vec<f32>)>>,
}

impl Checkpoint {
    /// Overwrites the store's parameters and the mask decoder's running
    /// statistics. The store must hold exactly the named parameters, with
    /// matching shapes.
    pub fn apply(
        &self,
        store: &mut ParamStore,
        decoders: &AuxDecoders,
    ) -> Result<(), CheckpointError> {
        let ids: HashMap<String, crate::tensor::ParamId> = store
            .iter()
            .map(|(id, p)| (p.name.clone(), id))
            .collect();
        if ids.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "store has {} parameters, checkpoint has {}",
                ids.len(),
                self.params.len()
            )));
        }
        for (name, dims, vals) in &self.params {
            let id = *ids
                .get(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("{name} not in the model")))?;
            if store.value(id).shape() != &dims[..] {
                return Err(CheckpointError::Mismatch(format!(
                    "{name} has shape {:?} in the model, {:?} in the checkpoint",
                    store.value(id).shape(),
                    dims
                )));
            }
            store.value_mut(id).data_mut().copy_from_slice(vals);
        }
        decoders
            .set_bn_state(self.bn.clone())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    bn: &[BnStats],
    stage: u8,
    config_hash: u64,
    moments: Option<&[(u64, Vec<f32>, Vec<f32>)]>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(stage);
    buf.extend_from_slice(&config_hash.to_le_bytes());

    let table = store.snapshot();
    buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, dims, vals) in &table {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    buf.extend_from_slice(&(bn.len() as u32).to_le_bytes());
    for stat in bn {
        buf.extend_from_slice(&(stat.mean.len() as u32).to_le_bytes());
        for &v in &stat.mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &stat.var {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    match moments {
        None => buf.push(0),
        Some(rows) => {
            if rows.len() != table.len() {
                return Err(CheckpointError::Mismatch(format!(
                    "{} optimizer rows for {} parameters",
                    rows.len(),
                    table.len()
                )));
            }
            buf.push(1);
            for ((t, m, v), (name, _, vals)) in rows.iter().zip(&table) {
                if m.len() != vals.len() || v.len() != vals.len() {
                    return Err(CheckpointError::Mismatch(format!(
                        "optimizer row for {name} has {} values, parameter has {}",
                        m.len(),
                        vals.len()
                    )));
                }
                buf.extend_from_slice(&t.to_le_bytes());
                for &x in m {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Byte cursor that reports the offset of the first malformed field.
struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.off + n > self.buf.len() {
            return Err(CheckpointError::Format {
                offset: self.off,
                what: format!("file ends inside {what}"),
            });
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, off: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format {
            offset: 0,
            what: format!("bad magic {magic:02x?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            got: version,
            want: CHECKPOINT_VERSION,
        });
    }
    let stage = cur.u8("stage marker")?;
    let config_hash = cur.u64("config hash")?;

    let nparams = cur.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(nparams.min(1 << 16));
    for i in 0..nparams {
        let name_off = cur.off;
        let name_len = cur.u16("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "parameter name")?.to_vec()).map_err(
            |_| CheckpointError::Format {
                offset: name_off,
                what: format!("parameter {i} name is not utf-8"),
            },
        )?;
        let ndim_off = cur.off;
        let ndim = cur.u8("rank")? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Format {
                offset: ndim_off,
                what: format!("{name} claims rank {ndim}"),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let dim_off = cur.off;
            let d = cur.u32("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| CheckpointError::Format {
                offset: dim_off,
                what: format!("{name} dimensions overflow"),
            })?;
            dims.push(d);
        }
        let vals = cur.f32s(numel, &format!("values of {name}"))?;
        params.push((name, dims, vals));
    }

    let nbn = cur.u32("batch-norm stage count")? as usize;
    let mut bn = Vec::with_capacity(nbn.min(1 << 10));
    for _ in 0..nbn {
        let ch = cur.u32("batch-norm width")? as usize;
        let mean = cur.f32s(ch, "batch-norm means")?;
        let var = cur.f32s(ch, "batch-norm variances")?;
        bn.push(BnStats { mean, var });
    }

    let moments = match cur.u8("optimizer-state flag")? {
        0 => None,
        1 => {
            let mut rows = Vec::with_capacity(params.len());
            for (name, _, vals) in &params {
                let t = cur.u64("optimizer step count")?;
                let m = cur.f32s(vals.len(), &format!("first moments of {name}"))?;
                let v = cur.f32s(vals.len(), &format!("second moments of {name}"))?;
                rows.push((t, m, v));
            }
            Some(rows)
        }
        other => {
            return Err(CheckpointError::Format {
                offset: cur.off - 1,
                what: format!("optimizer-state flag must be 0 or 1, got {other}"),
            });
        }
    };

    if cur.off != buf.len() {
        return Err(CheckpointError::Format {
            offset: cur.off,
            what: format!("{} trailing bytes", buf.len() - cur.off),
        });
    }
    Ok(Checkpoint {
        stage,
        config_hash,
        params,
        bn,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_episode, Subtask, WorldConfig};

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            frame_size: 16,
            ..WorldConfig::default()
        }
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            modality: ModalityConfig {
                frame_size: 16,
                ..ModalityConfig::default()
            },
            backbone: BackboneConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                max_seq: 64,
            },
            disc: DiscretizerConfig {
                bins: 32,
                ..DiscretizerConfig::default()
            },
            decoder: DecoderConfig {
                d_model: 16,
                proj_dim: crate::decoders::default_proj_dim(16),
                heads: 2,
                ..DecoderConfig::default()
            },
            flow: FlowConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
            },
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            seed: 7,
            modality: tiny_model_cfg().modality,
            ..TrainConfig::default()
        }
    }

    fn tiny_episode(seed: u64, keep: usize) -> EpisodeRecord {
        let mut ep = generate_episode(Subtask::Pick, seed, &tiny_world());
        ep.steps.truncate(keep);
        ep
    }

    fn tiny_batch(n: usize) -> Vec<Sample> {
        let mc = tiny_model_cfg();
        let ep = tiny_episode(11, n);
        (0..n)
            .map(|i| make_sample(&ep, i, &mc.modality, &mc.disc, mc.decoder.mask_res).unwrap())
            .collect()
    }

    fn init_tiny(seed: u64) -> (ParamStore, SgvlaModel) {
        let mut store = ParamStore::new();
        let model =
            SgvlaModel::init(&mut store, &tiny_model_cfg(), &mut rng_from_seed(seed)).unwrap();
        (store, model)
    }

    fn grad_linf(store: &ParamStore, id: crate::tensor::ParamId) -> f32 {
        store.grad(id).iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    #[test]
    fn samples_pad_chunks_and_resample_masks() {
        let mc = tiny_model_cfg();
        let ep = tiny_episode(3, 6);
        let s = make_sample(&ep, 4, &mc.modality, &mc.disc, mc.decoder.mask_res).unwrap();
        assert_eq!(s.bins, discretize_action(&ep.steps[4].action, &mc.disc).unwrap());
        assert_eq!(s.seg.len(), mc.decoder.mask_res * mc.decoder.mask_res);
        let flat = s.chunk.flat();
        assert_eq!(&flat[..13], &ep.steps[4].action.normalized());
        assert_eq!(&flat[13..26], &ep.steps[5].action.normalized());
        assert!(flat[26..].iter().all(|&v| v == 0.0), "padding must be zero");
    }

    #[test]
    fn stage1_gating_blocks_pre_decoder_gradients_exactly() {
        let (mut store, model) = init_tiny(1);
        let batch = tiny_batch(3);
        let cfg = tiny_train_cfg();
        let mut g = Graph::new();
        // Action loss off: any surviving gradient would be aux leakage.
        let losses =
            supervised_losses(&mut g, &model, &store, &batch, true, false, &cfg, NormPhase::Train)
                .unwrap();
        store.zero_grads();
        g.backward(losses.total, &mut store).unwrap();
        let mut decoder_signal = 0.0f32;
        for id in store.ids().collect::<Vec<_>>() {
            let linf = grad_linf(&store, id);
            if store.name(id).starts_with("dec.") {
                decoder_signal = decoder_signal.max(linf);
            } else {
                assert_eq!(linf, 0.0, "leak into {}", store.name(id));
            }
        }
        assert!(decoder_signal > 0.0, "decoders saw no gradient at all");
    }

    #[test]
    fn stage1_action_loss_still_reaches_the_backbone() {
        let (mut store, model) = init_tiny(1);
        let batch = tiny_batch(3);
        let cfg = tiny_train_cfg();
        let mut g = Graph::new();
        let losses =
            supervised_losses(&mut g, &model, &store, &batch, true, true, &cfg, NormPhase::Train)
                .unwrap();
        store.zero_grads();
        g.backward(losses.total, &mut store).unwrap();
        for prefix in ["percept.", "backbone."] {
            let moved = store
                .ids()
                .collect::<Vec<_>>()
                .into_iter()
                .filter(|&id| store.name(id).starts_with(prefix))
                .any(|id| grad_linf(&store, id) > 0.0);
            assert!(moved, "no action-loss gradient under {prefix}");
        }
    }

    #[test]
    fn stage2_gradients_include_aux_contributions() {
        let (mut store, model) = init_tiny(2);
        let batch = tiny_batch(3);
        let cfg = tiny_train_cfg();
        let action_only = TrainConfig {
            tasks: TaskSet::none(),
            ..cfg
        };
        let probe = store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .find(|&id| store.name(id) == "backbone.final_g")
            .unwrap();

        let mut g = Graph::new();
        let l = supervised_losses(&mut g, &model, &store, &batch, false, true, &action_only, NormPhase::Train)
            .unwrap();
        store.zero_grads();
        g.backward(l.total, &mut store).unwrap();
        let without: Vec<f32> = store.grad(probe).to_vec();

        let mut g = Graph::new();
        let l = supervised_losses(&mut g, &model, &store, &batch, false, true, &cfg, NormPhase::Train)
            .unwrap();
        store.zero_grads();
        g.backward(l.total, &mut store).unwrap();
        let with: Vec<f32> = store.grad(probe).to_vec();

        assert_ne!(with, without, "aux losses did not move the backbone gradient");
    }

    #[test]
    fn stage2_loss_decreases_on_a_fixed_batch() {
        let (mut store, model) = init_tiny(3);
        let batch = tiny_batch(4);
        let cfg = tiny_train_cfg();
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let mut g = Graph::new();
            let losses =
                supervised_losses(&mut g, &model, &store, &batch, false, true, &cfg, NormPhase::Train)
                    .unwrap();
            last = g.value(losses.total).data()[0];
            first.get_or_insert(last);
            store.zero_grads();
            g.backward(losses.total, &mut store).unwrap();
            opt.step(&mut store);
        }
        let first = first.unwrap();
        assert!(
            last < first,
            "loss went from {first} to {last} over 200 steps"
        );
    }

    #[test]
    fn disabling_a_task_removes_its_term_exactly() {
        let (store, model) = init_tiny(4);
        let batch = tiny_batch(3);
        let cfg = tiny_train_cfg();
        let without_seg = TrainConfig {
            tasks: TaskSet {
                seg: false,
                ..TaskSet::all()
            },
            ..cfg
        };
        let mut g = Graph::new();
        let full =
            supervised_losses(&mut g, &model, &store, &batch, false, true, &cfg, NormPhase::Train)
                .unwrap();
        let full_total = g.value(full.total).data()[0];
        let seg_term = g.value(full.aux.seg.unwrap()).data()[0];

        let mut g = Graph::new();
        let partial = supervised_losses(
            &mut g,
            &model,
            &store,
            &batch,
            false,
            true,
            &without_seg,
            NormPhase::Train,
        )
        .unwrap();
        assert!(partial.aux.seg.is_none());
        let partial_total = g.value(partial.total).data()[0];
        let recomposed = partial_total + cfg.weights.seg * seg_term;
        assert!(
            (full_total - recomposed).abs() <= 1e-6,
            "{full_total} vs {recomposed}"
        );
    }

    #[test]
    fn stage3_freezes_the_trunk_and_halves_the_fm_loss() {
        let (mut store, model) = init_tiny(5);
        let batch = tiny_batch(4);
        store.freeze_where(|name| !name.starts_with("expert."));
        let before = store.snapshot();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut draw = rng_from_seed(21);
        let mut first = None;
        let mut tail = Vec::new();
        for step in 0..500 {
            let t = draw.random_range(0.0..=1.0f32);
            let noise: Vec<ActionChunk> =
                batch.iter().map(|_| ActionChunk::noise(&mut draw)).collect();
            let mut g = Graph::new();
            let losses = expert_losses(&mut g, &model, &store, &batch, t, &noise).unwrap();
            let v = g.value(losses.total).data()[0];
            first.get_or_insert(v);
            if step >= 480 {
                tail.push(v);
            }
            store.zero_grads();
            g.backward(losses.total, &mut store).unwrap();
            opt.step(&mut store);
        }
        let first = first.unwrap();
        let tail_mean = tail.iter().sum::<f32>() / tail.len() as f32;
        assert!(
            tail_mean <= 0.5 * first,
            "fm loss only moved from {first} to {tail_mean}"
        );

        let after = store.snapshot();
        let mut expert_moved = false;
        for ((name, _, a), (_, _, b)) in before.iter().zip(&after) {
            if name.starts_with("expert.") {
                expert_moved |= a != b;
            } else {
                let bits_equal = a
                    .iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(bits_equal, "frozen parameter {name} changed");
            }
        }
        assert!(expert_moved, "expert parameters never changed");
    }

    #[test]
    fn train_full_is_deterministic_and_logs_every_epoch() {
        let schedule = StageSchedule {
            stage1: 1,
            stage2: 1,
            stage3: 1,
        };
        let eps = [tiny_episode(31, 5), tiny_episode(32, 5)];
        let mc = tiny_model_cfg();
        let cfg = tiny_train_cfg();
        let a = train_full(&schedule, &mc, &cfg, &eps).unwrap();
        let b = train_full(&schedule, &mc, &cfg, &eps).unwrap();

        assert_eq!(a.log.len(), schedule.total());
        let stages: Vec<u8> = a.log.iter().map(|l| l.stage).collect();
        assert_eq!(stages, [1, 2, 3]);
        let epochs: Vec<usize> = a.log.iter().map(|l| l.epoch).collect();
        assert_eq!(epochs, [0, 1, 2]);
        assert!(a.log[0].action.is_some() && a.log[0].fm.is_none());
        assert!(a.log[2].action.is_none() && a.log[2].fm.is_some());

        let (sa, sb) = (a.store.snapshot(), b.store.snapshot());
        for ((name, da, va), (_, db, vb)) in sa.iter().zip(&sb) {
            assert_eq!(da, db);
            let bits_equal = va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "{name} differs between identical runs");
        }
    }

    #[test]
    fn naive_schedule_is_stage_two_only() {
        let naive = StageSchedule {
            stage1: 0,
            stage2: 2,
            stage3: 0,
        };
        let eps = [tiny_episode(40, 5)];
        let out = train_full(&naive, &tiny_model_cfg(), &tiny_train_cfg(), &eps).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|l| l.stage == 2));
        // The arms differ only in their schedules; the training config is
        // shared verbatim.
        assert_eq!(tiny_train_cfg(), tiny_train_cfg());
    }

    #[test]
    fn empty_datasets_are_rejected() {
        let schedule = StageSchedule {
            stage1: 1,
            stage2: 0,
            stage3: 0,
        };
        let err = train_full(&schedule, &tiny_model_cfg(), &tiny_train_cfg(), &[]);
        assert!(matches!(err, Err(TrainError::EmptyDataset)));
        let hollow = [EpisodeRecord {
            subtask: Subtask::Pick,
            steps: vec![],
            seed: 0,
        }];
        let err = train_full(&schedule, &tiny_model_cfg(), &tiny_train_cfg(), &hollow);
        assert!(matches!(err, Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn paper_scale_preset_keeps_the_reference_hyperparameters() {
        let cfg = TrainConfig::paper_scale();
        assert_eq!(cfg.lr, 2e-5);
        assert_eq!(cfg.batch_size, 512);
    }

    #[test]
    fn checkpoints_round_trip_and_reproduce_forward_passes() {
        let dir = std::env::temp_dir().join("sgvla_ckpt_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.sgvc");

        let (mut store_a, model_a) = init_tiny(50);
        let eps = [tiny_episode(51, 5)];
        let cfg = tiny_train_cfg();
        let mut log = Vec::new();
        run_stage2(&model_a, &mut store_a, &eps, &cfg, 1, 0, &mut log).unwrap();
        save_checkpoint(&path, &store_a, &model_a.decoders.bn_state(), 2, 0xFEED, None).unwrap();

        let blob = load_checkpoint(&path).unwrap();
        assert_eq!(blob.stage, 2);
        assert_eq!(blob.config_hash, 0xFEED);
        assert!(blob.moments.is_none());
        for ((na, da, va), (nb, db, vb)) in store_a.snapshot().iter().zip(&blob.params) {
            assert_eq!((na, da), (nb, db));
            assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // A differently seeded model must become bit-identical after apply.
        let (mut store_b, model_b) = init_tiny(99);
        blob.apply(&mut store_b, &model_b.decoders).unwrap();
        let batch = tiny_batch(2);
        let mut ga = Graph::new();
        let (la, logits_a) = model_a.encode_batch(&mut ga, &store_a, &batch).unwrap();
        let mask_a = model_a
            .decoders
            .decode_mask(&mut ga, &store_a, la.latents, NormPhase::Infer)
            .unwrap();
        let mut gb = Graph::new();
        let (lb, logits_b) = model_b.encode_batch(&mut gb, &store_b, &batch).unwrap();
        let mask_b = model_b
            .decoders
            .decode_mask(&mut gb, &store_b, lb.latents, NormPhase::Infer)
            .unwrap();
        assert_eq!(ga.value(la.latents).data(), gb.value(lb.latents).data());
        assert_eq!(ga.value(mask_a).data(), gb.value(mask_b).data());
        for (a, b) in logits_a.iter().zip(&logits_b) {
            assert_eq!(ga.value(*a).data(), gb.value(*b).data());
        }

        // Optimizer moments survive the trip too.
        let opt = Adam::new(AdamConfig::default(), &store_a);
        let state = opt.export_state();
        save_checkpoint(&path, &store_a, &model_a.decoders.bn_state(), 2, 1, Some(&state)).unwrap();
        let blob = load_checkpoint(&path).unwrap();
        assert_eq!(blob.moments.unwrap().len(), store_a.len());
    }

    #[test]
    fn checkpoints_refuse_other_versions_and_report_corrupt_offsets() {
        let dir = std::env::temp_dir().join("sgvla_ckpt_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.sgvc");
        let (store, model) = init_tiny(60);
        save_checkpoint(&path, &store, &model.decoders.bn_state(), 1, 7, None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut wrong_version = good.clone();
        wrong_version[4] = 9;
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Version { got: 9, .. })
        ));

        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Format { offset: 0, .. })
        ));

        let truncated = &good[..good.len() / 2];
        std::fs::write(&path, truncated).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Format { offset, .. }) => {
                assert!(offset <= truncated.len());
            }
            other => panic!("expected a format error, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.extend_from_slice(b"junk");
        std::fs::write(&path, &trailing).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Format { offset, what }) => {
                assert_eq!(offset, good.len());
                assert!(what.contains("trailing"));
            }
            other => panic!("expected a trailing-bytes error, got {other:?}"),
        }
    }
}
