//! Auxiliary decoders over backbone latents and the multi-task objective.
//!
//! Five heads read the latent sequence: global position, grasp state, and
//! object pose pool over the sequence and pass through a small MLP; joint
//! configuration uses learned query tokens cross-attending to the latents;
//! the segmentation head upsamples a pooled seed through transpose convs.
//! Their losses combine into one weighted scalar.

use std::sync::RwLock;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{
    Activation, Graph, NodeId, NormPhase, ParamId, ParamStore, Tensor, TensorError,
};

/// Query tokens in the joint-configuration decoder, one per joint value.
pub const QPOS_TOKENS: usize = 12;
/// Upsampling stages in the mask decoder; each doubles the side length,
/// so the seed grid is always 1/16 of the output resolution.
pub const MASK_STAGES: usize = 4;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("bad decoder config: {0}")]
    BadConfig(String),
    #[error("ground-truth quaternion in row {row} has norm {norm}, expected unit length")]
    NonUnitQuat { row: usize, norm: f32 },
    #[error("negative weight {value} for {name} loss")]
    NegativeWeight { name: &'static str, value: f32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-task coefficients of the combined auxiliary objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pos: f32,
    pub grasp: f32,
    pub qpos: f32,
    pub obj: f32,
    pub seg: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pos: 1.0,
            grasp: 5.0,
            qpos: 1.0,
            obj: 1.0,
            seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let named = [
            ("pos", self.pos),
            ("grasp", self.grasp),
            ("qpos", self.qpos),
            ("obj", self.obj),
            ("seg", self.seg),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(DecoderError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_model: usize,
    /// Width after the shared input projection of the MLP decoders.
    pub proj_dim: usize,
    /// Segmentation output resolution; the seed grid is `mask_res / 16`.
    pub mask_res: usize,
    pub heads: usize,
    /// Fixed sine-cos encodings added to the joint-decoder query tokens.
    pub qpos_pe: bool,
}

/// Input projection width that keeps the 896 -> 512 ratio at other widths.
pub fn default_proj_dim(d_model: usize) -> usize {
    ((d_model * 512) as f64 / 896.0).round() as usize
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            proj_dim: default_proj_dim(64),
            mask_res: 32,
            heads: 4,
            qpos_pe: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(DecoderError::BadConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(DecoderError::BadConfig(format!(
                "d_model {} must be even for sine-cos encodings",
                self.d_model
            )));
        }
        if self.proj_dim < 2 {
            return Err(DecoderError::BadConfig(format!(
                "proj_dim {} leaves no room for the hidden layers",
                self.proj_dim
            )));
        }
        if !matches!(self.mask_res, 32 | 64 | 128) {
            return Err(DecoderError::BadConfig(format!(
                "mask_res {} unsupported, expected 32, 64, or 128",
                self.mask_res
            )));
        }
        let seed = self.mask_res / 16;
        if self.d_model % (seed * seed) != 0 {
            return Err(DecoderError::BadConfig(format!(
                "d_model {} does not split into a {seed}x{seed} seed grid",
                self.d_model
            )));
        }
        Ok(())
    }

    fn seed_side(&self) -> usize {
        self.mask_res / 16
    }

    fn seed_channels(&self) -> usize {
        self.d_model / (self.seed_side() * self.seed_side())
    }
}

/// Fixed sine-cos embedding table: row p holds sin(p * w_i) in even
/// columns and cos(p * w_i) in odd ones, w_i = 10000^(-2i/d).
pub fn sincos_embedding(positions: &[f32], d: usize) -> Tensor {
    assert!(d % 2 == 0, "sincos embedding needs an even width, got {d}");
    let mut data = vec![0.0f32; positions.len() * d];
    for (p, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
            let angle = f64::from(pos) * freq;
            data[p * d + 2 * i] = angle.sin() as f32;
            data[p * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("sincos shape")
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / din as f32).sqrt();
        Self {
            w: store.register(format!("{name}_w"), Tensor::randn(&[din, dout], std, rng)),
            b: store.register(format!("{name}_b"), Tensor::zeros(&[dout])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Pooled-latent head: mean over the sequence, input projection, then a
/// three-layer MLP narrowing to half the projection width.
struct MlpDecoder {
    proj: Linear,
    m1: Linear,
    m2: Linear,
    m3: Linear,
}

impl MlpDecoder {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, proj: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Linear::init(store, &format!("{prefix}.proj"), d, proj, rng),
            m1: Linear::init(store, &format!("{prefix}.m1"), proj, proj, rng),
            m2: Linear::init(store, &format!("{prefix}.m2"), proj, proj / 2, rng),
            m3: Linear::init(store, &format!("{prefix}.m3"), proj / 2, out, rng),
        }
    }

    /// latents [b, L, d] -> [b, out].
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
    ) -> Result<NodeId, TensorError> {
        let pooled = g.mean_axis(latents, 1);
        let x = self.proj.apply(g, store, pooled)?;
        let x = g.activation(x, Activation::Gelu);
        let x = self.m1.apply(g, store, x)?;
        let x = g.activation(x, Activation::Gelu);
        let x = self.m2.apply(g, store, x)?;
        let x = g.activation(x, Activation::Gelu);
        self.m3.apply(g, store, x)
    }
}

struct CrossBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl CrossBlock {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d as f32).sqrt();
        let mut mat = |store: &mut ParamStore, name: &str| {
            store.register(format!("{prefix}.{name}"), Tensor::randn(&[d, d], std, rng))
        };
        Self {
            wq: mat(store, "wq"),
            wk: mat(store, "wk"),
            wv: mat(store, "wv"),
            wo: mat(store, "wo"),
            bo: store.register(format!("{prefix}.bo"), Tensor::zeros(&[d])),
            ln1_g: store.register(format!("{prefix}.ln1_g"), Tensor::ones(&[d])),
            ln1_b: store.register(format!("{prefix}.ln1_b"), Tensor::zeros(&[d])),
            ln2_g: store.register(format!("{prefix}.ln2_g"), Tensor::ones(&[d])),
            ln2_b: store.register(format!("{prefix}.ln2_b"), Tensor::zeros(&[d])),
            w1: store.register(format!("{prefix}.ffn_w1"), Tensor::randn(&[d, d], std, rng)),
            b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(&[d])),
            w2: store.register(format!("{prefix}.ffn_w2"), Tensor::randn(&[d, d], std, rng)),
            b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(&[d])),
        }
    }

    /// Queries come from `x` [b, q, d]; keys and values from `kv` [b, L, d].
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        kv: NodeId,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let g1 = g.param(store, self.ln1_g);
        let b1 = g.param(store, self.ln1_b);
        let normed = g.layer_norm(x, g1, b1, 1e-5)?;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(normed, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let att = g.attention(q, k, v, heads, false)?;
        let wo = g.param(store, self.wo);
        let bo = g.param(store, self.bo);
        let att = g.matmul(att, wo)?;
        let att = g.add_bias(att, bo)?;
        let x = g.add(x, att)?;

        let g2 = g.param(store, self.ln2_g);
        let b2n = g.param(store, self.ln2_b);
        let normed = g.layer_norm(x, g2, b2n, 1e-5)?;
        let w1 = g.param(store, self.w1);
        let b1f = g.param(store, self.b1);
        let h = g.matmul(normed, w1)?;
        let h = g.add_bias(h, b1f)?;
        let h = g.activation(h, Activation::Gelu);
        let w2 = g.param(store, self.w2);
        let b2f = g.param(store, self.b2);
        let h = g.matmul(h, w2)?;
        let h = g.add_bias(h, b2f)?;
        g.add(x, h)
    }
}

/// Joint-configuration head: twelve learned query tokens cross-attend to
/// the latents, one scalar per token at the end.
struct QposDecoder {
    tokens: ParamId,
    pe: Tensor,
    blocks: Vec<CrossBlock>,
    head: Linear,
}

impl QposDecoder {
    fn init(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        let positions: Vec<f32> = (0..QPOS_TOKENS).map(|p| p as f32).collect();
        // Token rows meet a layer norm immediately; std 0.1 keeps the
        // per-row scale (and the norm's 1/sigma Jacobian) well conditioned.
        Self {
            tokens: store.register(
                "dec.qpos.tokens",
                Tensor::randn(&[QPOS_TOKENS, d], 0.1, rng),
            ),
            pe: sincos_embedding(&positions, d),
            blocks: (0..2)
                .map(|l| CrossBlock::init(store, &format!("dec.qpos.block{l}"), d, rng))
                .collect(),
            head: Linear::init(store, "dec.qpos.head", d, 1, rng),
        }
    }

    /// latents [b, L, d] -> [b, 12].
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
        heads: usize,
        use_pe: bool,
    ) -> Result<NodeId, TensorError> {
        let batch = g.value(latents).shape()[0];
        let d = g.value(latents).shape()[2];
        let tokens = g.param(store, self.tokens);
        let tokens = if use_pe {
            let pe = g.input(self.pe.clone());
            g.add(tokens, pe)?
        } else {
            tokens
        };
        let row = g.reshape(tokens, &[1, QPOS_TOKENS, d])?;
        let x = if batch == 1 {
            row
        } else {
            g.concat(0, &vec![row; batch])?
        };
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(g, store, x, latents, heads)?;
        }
        let y = self.head.apply(g, store, x)?;
        g.reshape(y, &[batch, QPOS_TOKENS])
    }
}

/// Running batch-norm statistics for one upsampling stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

struct MaskStage {
    conv: ParamId,
    bn_g: ParamId,
    bn_b: ParamId,
}

/// Segmentation head: the pooled latent reshapes into a small channel
/// grid, four (transpose conv, batch norm, GELU) stages double the side
/// each time, and a final per-pixel linear emits one logit channel.
struct MaskDecoder {
    stages: Vec<MaskStage>,
    out_w: ParamId,
    out_b: ParamId,
    /// Running statistics live outside the parameter store: they are
    /// updated by forward passes, not by the optimizer.
    bn: RwLock<Vec<BnStats>>,
}

/// Output channels per upsampling stage.
const MASK_STAGE_CHANNELS: [usize; MASK_STAGES] = [32, 16, 8, 4];

impl MaskDecoder {
    fn init(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut Rng) -> Self {
        let mut cin = cfg.seed_channels();
        let mut stages = Vec::with_capacity(MASK_STAGES);
        let mut bn = Vec::with_capacity(MASK_STAGES);
        for (i, &cout) in MASK_STAGE_CHANNELS.iter().enumerate() {
            let std = (1.0 / (cin * 16) as f32).sqrt();
            stages.push(MaskStage {
                conv: store.register(
                    format!("dec.mask.stage{i}_conv"),
                    Tensor::randn(&[cin, cout, 4, 4], std, rng),
                ),
                bn_g: store.register(format!("dec.mask.stage{i}_bn_g"), Tensor::ones(&[cout])),
                bn_b: store.register(format!("dec.mask.stage{i}_bn_b"), Tensor::zeros(&[cout])),
            });
            bn.push(BnStats {
                mean: vec![0.0; cout],
                var: vec![1.0; cout],
            });
            cin = cout;
        }
        let last = *MASK_STAGE_CHANNELS.last().unwrap();
        let std = (1.0 / last as f32).sqrt();
        Self {
            stages,
            out_w: store.register("dec.mask.out_w", Tensor::randn(&[last, 1], std, rng)),
            out_b: store.register("dec.mask.out_b", Tensor::zeros(&[1])),
            bn: RwLock::new(bn),
        }
    }

    /// latents [b, L, d] -> logits [b, 1, R, R].
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
        cfg: &DecoderConfig,
        phase: NormPhase,
    ) -> Result<NodeId, TensorError> {
        let batch = g.value(latents).shape()[0];
        let side = cfg.seed_side();
        let pooled = g.mean_axis(latents, 1);
        let mut x = g.reshape(pooled, &[batch, cfg.seed_channels(), side, side])?;
        let mut bn = self.bn.write().expect("bn stats lock poisoned");
        for (stage, stats) in self.stages.iter().zip(bn.iter_mut()) {
            let w = g.param(store, stage.conv);
            x = g.conv_transpose2d(x, w)?;
            let gamma = g.param(store, stage.bn_g);
            let beta = g.param(store, stage.bn_b);
            x = g.batch_norm(
                x,
                gamma,
                beta,
                1e-5,
                phase,
                &mut stats.mean,
                &mut stats.var,
                0.1,
            )?;
            x = g.activation(x, Activation::Gelu);
        }
        let w = g.param(store, self.out_w);
        let b = g.param(store, self.out_b);
        g.channel_linear(x, w, b)
    }
}

/// Object-pose decoder output: translation, unit quaternion, and how many
/// raw quaternions were too small to normalize (those rows fall back to
/// the identity rotation and should be surfaced as a training diagnostic).
pub struct ObjPose {
    /// [b, 3].
    pub t: NodeId,
    /// [b, 4], unit rows.
    pub q: NodeId,
    pub degenerate: usize,
}

/// All five heads over one shared latent sequence.
pub struct AuxDecoders {
    pub cfg: DecoderConfig,
    pos: MlpDecoder,
    grasp: MlpDecoder,
    obj: MlpDecoder,
    qpos: QposDecoder,
    mask: MaskDecoder,
}

impl AuxDecoders {
    pub fn init(
        store: &mut ParamStore,
        cfg: DecoderConfig,
        rng: &mut Rng,
    ) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let (d, p) = (cfg.d_model, cfg.proj_dim);
        let obj = MlpDecoder::init(store, "dec.obj", d, p, 7, rng);
        // Start the raw quaternion at the identity rotation: normalization
        // has a 1/norm Jacobian, so a near-zero start is badly conditioned.
        store.value_mut(obj.m3.b).data_mut()[3] = 1.0;
        Ok(Self {
            pos: MlpDecoder::init(store, "dec.pos", d, p, 2, rng),
            grasp: MlpDecoder::init(store, "dec.grasp", d, p, 1, rng),
            obj,
            qpos: QposDecoder::init(store, d, rng),
            mask: MaskDecoder::init(store, &cfg, rng),
            cfg,
        })
    }

    /// latents [b, L, d] -> planar position estimates [b, 2].
    pub fn decode_global_pos(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.pos.forward(g, store, latents)
    }

    /// latents [b, L, d] -> grasp logits [b, 1].
    pub fn decode_grasp(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.grasp.forward(g, store, latents)
    }

    /// latents [b, L, d] -> translation [b, 3] and unit quaternion [b, 4].
    pub fn decode_object_pose(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
    ) -> Result<ObjPose, TensorError> {
        let raw = self.obj.forward(g, store, latents)?;
        let t = g.slice(raw, 1, 0, 3)?;
        let qraw = g.slice(raw, 1, 3, 4)?;
        let degenerate = g
            .value(qraw)
            .data()
            .chunks(4)
            .filter(|row| row.iter().map(|&v| v * v).sum::<f32>().sqrt() < 1e-8)
            .count();
        let q = g.normalize_rows(qraw);
        Ok(ObjPose { t, q, degenerate })
    }

    /// latents [b, L, d] -> joint values [b, 12].
    pub fn decode_qpos(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.qpos
            .forward(g, store, latents, self.cfg.heads, self.cfg.qpos_pe)
    }

    /// latents [b, L, d] -> mask logits [b, 1, R, R].
    pub fn decode_mask(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latents: NodeId,
        phase: NormPhase,
    ) -> Result<NodeId, TensorError> {
        self.mask.forward(g, store, latents, &self.cfg, phase)
    }

    /// Mask-decoder running statistics, for checkpointing.
    pub fn bn_state(&self) -> Vec<BnStats> {
        self.mask.bn.read().expect("bn stats lock poisoned").clone()
    }

    pub fn set_bn_state(&self, state: Vec<BnStats>) -> Result<(), DecoderError> {
        let mut bn = self.mask.bn.write().expect("bn stats lock poisoned");
        if state.len() != bn.len()
            || state
                .iter()
                .zip(bn.iter())
                .any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(DecoderError::BadConfig(
                "batch-norm state does not match the decoder layout".into(),
            ));
        }
        *bn = state;
        Ok(())
    }
}

/// Mean squared error of planar position estimates, [b, 2] against [b, 2].
pub fn loss_pos(g: &mut Graph, pred: NodeId, target: Tensor) -> Result<NodeId, TensorError> {
    g.mse(pred, target)
}

/// Binary cross-entropy of grasp logits against {0, 1} labels.
pub fn loss_grasp(g: &mut Graph, logits: NodeId, target: Tensor) -> Result<NodeId, TensorError> {
    g.bce_with_logits(logits, target)
}

/// Mean squared error over the 12 joint values.
pub fn loss_qpos(g: &mut Graph, pred: NodeId, target: Tensor) -> Result<NodeId, TensorError> {
    g.mse(pred, target)
}

/// Mean per-pixel binary cross-entropy of mask logits.
pub fn loss_seg(g: &mut Graph, logits: NodeId, target: Tensor) -> Result<NodeId, TensorError> {
    g.bce_with_logits(logits, target)
}

/// Pose loss: squared translation error plus a quaternion term that is
/// invariant to sign because both q and -q name the same rotation. Ground
/// truth rows must be unit quaternions. Batched inputs average per-sample
/// losses.
pub fn loss_obj(
    g: &mut Graph,
    t_hat: NodeId,
    q_hat: NodeId,
    t: Tensor,
    q: Tensor,
) -> Result<NodeId, DecoderError> {
    for (row, chunk) in q.data().chunks(4).enumerate() {
        let norm = chunk.iter().map(|&v| v * v).sum::<f32>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(DecoderError::NonUnitQuat { row, norm });
        }
    }
    let batch = g.value(t_hat).shape()[0];
    let tn = g.input(t);
    let qn = g.input(q);
    let diff = g.sub(t_hat, tn)?;
    let sq = g.mul(diff, diff)?;
    let pos_sq = g.sum_axis(sq, 1);
    let prod = g.mul(q_hat, qn)?;
    let dots = g.sum_axis(prod, 1);
    let dots = g.abs(dots);
    let ones = g.input(Tensor::ones(&[batch]));
    let quat_term = g.sub(ones, dots)?;
    let per_sample = g.add(pos_sq, quat_term)?;
    Ok(g.mean_all(per_sample))
}

/// Component losses feeding the combined objective; absent heads simply
/// contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuxLossTerms {
    pub pos: Option<NodeId>,
    pub grasp: Option<NodeId>,
    pub qpos: Option<NodeId>,
    pub obj: Option<NodeId>,
    pub seg: Option<NodeId>,
}

/// Weighted sum of the auxiliary losses.
pub fn aux_total(
    g: &mut Graph,
    terms: &AuxLossTerms,
    weights: &LossWeights,
) -> Result<NodeId, DecoderError> {
    weights.validate()?;
    let parts = [
        (terms.pos, weights.pos),
        (terms.grasp, weights.grasp),
        (terms.qpos, weights.qpos),
        (terms.obj, weights.obj),
        (terms.seg, weights.seg),
    ];
    let mut acc: Option<NodeId> = None;
    for (term, w) in parts {
        let Some(term) = term else { continue };
        let scaled = g.scale(term, w);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn latents(batch: usize, len: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[batch, len, d], 0.5, &mut rng_from_seed(seed))
    }

    fn build(cfg: DecoderConfig, seed: u64) -> (ParamStore, AuxDecoders) {
        let mut store = ParamStore::new();
        let dec = AuxDecoders::init(&mut store, cfg, &mut rng_from_seed(seed)).unwrap();
        (store, dec)
    }

    #[test]
    fn output_shapes_cover_all_resolutions() {
        for res in [32usize, 64, 128] {
            let cfg = DecoderConfig {
                mask_res: res,
                ..DecoderConfig::default()
            };
            let (store, dec) = build(cfg, 1);
            let mut g = Graph::new();
            let x = g.input(latents(2, 5, cfg.d_model, 2));
            let pos = dec.decode_global_pos(&mut g, &store, x).unwrap();
            assert_eq!(g.value(pos).shape(), [2, 2]);
            let grasp = dec.decode_grasp(&mut g, &store, x).unwrap();
            assert_eq!(g.value(grasp).shape(), [2, 1]);
            let pose = dec.decode_object_pose(&mut g, &store, x).unwrap();
            assert_eq!(g.value(pose.t).shape(), [2, 3]);
            assert_eq!(g.value(pose.q).shape(), [2, 4]);
            let qpos = dec.decode_qpos(&mut g, &store, x).unwrap();
            assert_eq!(g.value(qpos).shape(), [2, QPOS_TOKENS]);
            let mask = dec
                .decode_mask(&mut g, &store, x, NormPhase::Train)
                .unwrap();
            assert_eq!(g.value(mask).shape(), [2, 1, res, res]);
        }
    }

    #[test]
    fn unsupported_mask_resolution_is_rejected() {
        let cfg = DecoderConfig {
            mask_res: 48,
            ..DecoderConfig::default()
        };
        let err = AuxDecoders::init(&mut ParamStore::new(), cfg, &mut rng_from_seed(0))
            .err()
            .expect("48 is not a supported resolution");
        assert!(err.to_string().contains("48"), "{err}");
    }

    #[test]
    fn zero_final_weight_pins_output_to_bias() {
        let (mut store, dec) = build(DecoderConfig::default(), 3);
        let wid = store.ids().find(|&id| store.name(id) == "dec.pos.m3_w").unwrap();
        let bid = store.ids().find(|&id| store.name(id) == "dec.pos.m3_b").unwrap();
        store.value_mut(wid).data_mut().fill(0.0);
        store
            .value_mut(bid)
            .data_mut()
            .copy_from_slice(&[0.25, -0.5]);
        let mut g = Graph::new();
        let x = g.input(latents(3, 4, 64, 4));
        let out = dec.decode_global_pos(&mut g, &store, x).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert_eq!(row, [0.25, -0.5]);
        }
    }

    #[test]
    fn degenerate_quaternion_falls_back_to_identity() {
        let (mut store, dec) = build(DecoderConfig::default(), 5);
        let wid = store.ids().find(|&id| store.name(id) == "dec.obj.m3_w").unwrap();
        let bid = store.ids().find(|&id| store.name(id) == "dec.obj.m3_b").unwrap();
        store.value_mut(wid).data_mut().fill(0.0);
        // Raw quaternion (2, 0, 0, 0) halves to the unit (1, 0, 0, 0).
        store
            .value_mut(bid)
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, 2.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let x = g.input(latents(2, 4, 64, 6));
        let pose = dec.decode_object_pose(&mut g, &store, x).unwrap();
        assert_eq!(pose.degenerate, 0);
        for row in g.value(pose.q).data().chunks(4) {
            assert_eq!(row, [1.0, 0.0, 0.0, 0.0]);
        }
        for row in g.value(pose.t).data().chunks(3) {
            assert_eq!(row, [0.1, 0.2, 0.3]);
        }

        // An all-zero raw quaternion cannot be normalized: identity plus
        // a diagnostic count.
        store.value_mut(bid).data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.input(latents(2, 4, 64, 7));
        let pose = dec.decode_object_pose(&mut g, &store, x).unwrap();
        assert_eq!(pose.degenerate, 2);
        for row in g.value(pose.q).data().chunks(4) {
            assert_eq!(row, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn decoded_quaternions_are_unit_norm() {
        let (store, dec) = build(DecoderConfig::default(), 8);
        let mut g = Graph::new();
        let x = g.input(latents(8, 6, 64, 9));
        let pose = dec.decode_object_pose(&mut g, &store, x).unwrap();
        for row in g.value(pose.q).data().chunks(4) {
            let norm = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn grasp_probabilities_are_complementary() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::new(vec![3], vec![0.7, -2.5, 4.0]).unwrap());
        let p = g.activation(logits, Activation::Sigmoid);
        let neg = g.scale(logits, -1.0);
        let pn = g.activation(neg, Activation::Sigmoid);
        for (&a, &b) in g.value(p).data().iter().zip(g.value(pn).data()) {
            assert!(a > 0.0 && a < 1.0);
            assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn qpos_is_invariant_to_latent_order_without_pe() {
        let cfg = DecoderConfig {
            qpos_pe: false,
            ..DecoderConfig::default()
        };
        let (store, dec) = build(cfg, 10);
        let base = latents(1, 9, 64, 11);
        let mut permuted = vec![0.0f32; base.numel()];
        let order = [4usize, 7, 0, 8, 2, 6, 1, 5, 3];
        for (dst, &src) in order.iter().enumerate() {
            permuted[dst * 64..(dst + 1) * 64]
                .copy_from_slice(&base.data()[src * 64..(src + 1) * 64]);
        }
        let permuted = Tensor::new(vec![1, 9, 64], permuted).unwrap();

        let mut g = Graph::new();
        let x = g.input(base);
        let a = dec.decode_qpos(&mut g, &store, x).unwrap();
        let a = g.value(a).data().to_vec();
        let mut g = Graph::new();
        let x = g.input(permuted);
        let b = dec.decode_qpos(&mut g, &store, x).unwrap();
        let b = g.value(b).data().to_vec();
        // Attention weights over a permuted key set are identical; only
        // f32 summation order differs.
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 2e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn losses_match_analytic_values() {
        let mut g = Graph::new();
        let pred = g.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let l = loss_pos(&mut g, pred, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(l).data()[0], 12.5);

        let logit = g.input(Tensor::zeros(&[1, 1]));
        for label in [0.0f32, 1.0] {
            let l = loss_grasp(&mut g, logit, Tensor::new(vec![1, 1], vec![label]).unwrap())
                .unwrap();
            assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
        }

        let pred = g.input(Tensor::ones(&[1, 12]));
        let l = loss_qpos(&mut g, pred, Tensor::ones(&[1, 12])).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let t_hat = g.input(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let q_id = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let q_hat = g.input(q_id.clone());
        let t = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let l = loss_obj(&mut g, t_hat, q_hat, t.clone(), q_id.clone()).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // The negated quaternion names the same rotation.
        let q_neg = g.input(Tensor::new(vec![1, 4], vec![-1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = loss_obj(&mut g, t_hat, q_neg, t.clone(), q_id.clone()).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // Orthogonal quaternions leave exactly the constant term.
        let q_orth = g.input(Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = loss_obj(&mut g, t_hat, q_orth, t, q_id).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);
    }

    #[test]
    fn quaternion_sign_invariance_is_bit_exact() {
        let mut rng = rng_from_seed(12);
        for _ in 0..1000 {
            let raw = Tensor::randn(&[1, 4], 1.0, &mut rng);
            let norm = raw.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            let q: Vec<f32> = raw.data().iter().map(|&v| (f64::from(v) / norm) as f32).collect();
            let q_pos = Tensor::new(vec![1, 4], q.clone()).unwrap();
            let q_neg = Tensor::new(vec![1, 4], q.iter().map(|&v| -v).collect()).unwrap();
            let q_hat = Tensor::randn(&[1, 4], 1.0, &mut rng);

            let mut g = Graph::new();
            let t_hat = g.input(Tensor::zeros(&[1, 3]));
            let q_hat = g.input(q_hat);
            let qh = g.normalize_rows(q_hat);
            let a = loss_obj(&mut g, t_hat, qh, Tensor::zeros(&[1, 3]), q_pos.clone()).unwrap();
            let b = loss_obj(&mut g, t_hat, qh, Tensor::zeros(&[1, 3]), q_neg).unwrap();
            assert_eq!(g.value(a).data()[0], g.value(b).data()[0]);

            // Perfect prediction: only f32 rounding of the unit dot is left.
            let qp = g.input(q_pos.clone());
            let l = loss_obj(&mut g, t_hat, qp, Tensor::zeros(&[1, 3]), q_pos).unwrap();
            assert!(g.value(l).data()[0].abs() < 5e-6);
        }
    }

    #[test]
    fn non_unit_ground_truth_quat_is_rejected() {
        let mut g = Graph::new();
        let t_hat = g.input(Tensor::zeros(&[1, 3]));
        let q_hat = g.input(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let bad = Tensor::new(vec![1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let err = loss_obj(&mut g, t_hat, q_hat, Tensor::zeros(&[1, 3]), bad).unwrap_err();
        assert!(matches!(err, DecoderError::NonUnitQuat { row: 0, .. }), "{err}");
    }

    #[test]
    fn seg_loss_matches_bce_oracle() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let l = loss_seg(&mut g, logits, Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);

        let z = [1.25f32, -0.5, 0.0, 3.0];
        let y = [1.0f32, 0.0, 1.0, 0.0];
        let logits = g.input(Tensor::new(vec![1, 1, 2, 2], z.to_vec()).unwrap());
        let l = loss_seg(&mut g, logits, Tensor::new(vec![1, 1, 2, 2], y.to_vec()).unwrap())
            .unwrap();
        let oracle: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let (z, y) = (f64::from(z), f64::from(y));
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((f64::from(g.value(l).data()[0]) - oracle).abs() < 1e-6);
    }

    #[test]
    fn aux_total_combines_weights() {
        let mut g = Graph::new();
        let one = g.constant(1.0);
        let all = AuxLossTerms {
            pos: Some(one),
            grasp: Some(one),
            qpos: Some(one),
            obj: Some(one),
            seg: Some(one),
        };
        let total = aux_total(&mut g, &all, &LossWeights::default()).unwrap();
        assert_eq!(g.value(total).data()[0], 9.0);

        let zero = LossWeights {
            pos: 0.0,
            grasp: 0.0,
            qpos: 0.0,
            obj: 0.0,
            seg: 0.0,
        };
        let total = aux_total(&mut g, &all, &zero).unwrap();
        assert_eq!(g.value(total).data()[0], 0.0);

        let half = g.constant(0.5);
        let grasp_only = AuxLossTerms {
            grasp: Some(half),
            ..AuxLossTerms::default()
        };
        let total = aux_total(&mut g, &grasp_only, &LossWeights::default()).unwrap();
        assert_eq!(g.value(total).data()[0], 2.5);

        let none = aux_total(&mut g, &AuxLossTerms::default(), &LossWeights::default()).unwrap();
        assert_eq!(g.value(none).data()[0], 0.0);

        let bad = LossWeights {
            grasp: -1.0,
            ..LossWeights::default()
        };
        let err = aux_total(&mut g, &all, &bad).unwrap_err();
        assert!(matches!(err, DecoderError::NegativeWeight { name: "grasp", .. }), "{err}");
    }

    #[test]
    fn aux_total_is_linear_in_each_component() {
        let mut rng = rng_from_seed(13);
        let w = LossWeights {
            pos: 0.3,
            grasp: 1.7,
            qpos: 0.9,
            obj: 2.1,
            seg: 0.4,
        };
        let vals = Tensor::rand_uniform(&[5], 0.0, 2.0, &mut rng);
        let v = vals.data().to_vec();
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = v.iter().map(|&x| g.constant(x)).collect();
        let terms = AuxLossTerms {
            pos: Some(nodes[0]),
            grasp: Some(nodes[1]),
            qpos: Some(nodes[2]),
            obj: Some(nodes[3]),
            seg: Some(nodes[4]),
        };
        let total = aux_total(&mut g, &terms, &w).unwrap();
        let expect = w.pos * v[0] + w.grasp * v[1] + w.qpos * v[2] + w.obj * v[3] + w.seg * v[4];
        assert!((g.value(total).data()[0] - expect).abs() < 1e-6);

        // Doubling one component moves the total by exactly its weighted
        // contribution.
        let doubled = AuxLossTerms {
            obj: Some(g.scale(nodes[3], 2.0)),
            ..terms
        };
        let total2 = aux_total(&mut g, &doubled, &w).unwrap();
        let delta = g.value(total2).data()[0] - g.value(total).data()[0];
        assert!((delta - w.obj * v[3]).abs() < 1e-6);
    }

    #[test]
    fn decoders_are_deterministic() {
        let (store, dec) = build(DecoderConfig::default(), 14);
        let x = latents(2, 5, 64, 15);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let n = g.input(x.clone());
            let pos = dec.decode_global_pos(&mut g, &store, n).unwrap();
            let qpos = dec.decode_qpos(&mut g, &store, n).unwrap();
            let mask = dec.decode_mask(&mut g, &store, n, NormPhase::Train).unwrap();
            (
                g.value(pos).data().to_vec(),
                g.value(qpos).data().to_vec(),
                g.value(mask).data().to_vec(),
            )
        };
        assert_eq!(run(&x), run(&x));
    }

    fn check_path(
        seed: u64,
        objective: impl Fn(&mut Graph, &ParamStore, &AuxDecoders, NodeId) -> Result<NodeId, TensorError>,
    ) {
        let (mut store, dec) = build(DecoderConfig::default(), seed);
        let x = latents(2, 5, 64, seed + 100);
        let report = grad_check(
            &mut store,
            |g, s| {
                let n = g.input(x.clone());
                objective(g, s, &dec, n)
            },
            &GradCheckConfig {
                h: 3e-3,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn pos_path_passes_grad_check() {
        let target = Tensor::randn(&[2, 2], 1.0, &mut rng_from_seed(20));
        check_path(21, move |g, s, dec, x| {
            let pred = dec.decode_global_pos(g, s, x)?;
            loss_pos(g, pred, target.clone())
        });
    }

    #[test]
    fn grasp_path_passes_grad_check() {
        let target = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        check_path(22, move |g, s, dec, x| {
            let pred = dec.decode_grasp(g, s, x)?;
            loss_grasp(g, pred, target.clone())
        });
    }

    #[test]
    fn obj_path_passes_grad_check() {
        let t = Tensor::randn(&[2, 3], 0.5, &mut rng_from_seed(23));
        let q = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        check_path(24, move |g, s, dec, x| {
            let pose = dec.decode_object_pose(g, s, x)?;
            loss_obj(g, pose.t, pose.q, t.clone(), q.clone())
                .map_err(|e| TensorError::Contract(e.to_string()))
        });
    }

    #[test]
    fn qpos_path_passes_grad_check() {
        let target = Tensor::randn(&[2, 12], 0.5, &mut rng_from_seed(25));
        check_path(26, move |g, s, dec, x| {
            let pred = dec.decode_qpos(g, s, x)?;
            loss_qpos(g, pred, target.clone())
        });
    }

    #[test]
    fn mask_path_passes_grad_check() {
        let mut mask = vec![0.0f32; 2 * 32 * 32];
        for (i, v) in mask.iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = 1.0;
            }
        }
        let target = Tensor::new(vec![2, 1, 32, 32], mask).unwrap();
        check_path(27, move |g, s, dec, x| {
            let pred = dec.decode_mask(g, s, x, NormPhase::Train)?;
            loss_seg(g, pred, target.clone())
        });
    }
}
