//! The causal token transformer at the center of the model.
//!
//! Projected vision tokens, embedded instruction words, and 13 learned
//! action-query positions form one sequence; a small pre-norm causal
//! transformer produces latent features, and per-dimension linear heads
//! on the query positions emit discrete action-token logits. The action
//! discretizer (uniform bins over per-dimension physical limits) and its
//! cross-entropy loss live here too.

use std::ops::Range;

use thiserror::Error;

use crate::perception::{TokenSequence, TokenSource};
use crate::rng::Rng;
use crate::tensor::{Activation, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::world::Action13;

/// Words the tokenizer knows: padding and unknown sentinels first, then
/// the task-template grammar (verbs, articles, objects, fixtures, spatial
/// words). 64 entries.
pub const VOCAB: [&str; 64] = [
    "<pad>", "<unk>", "pick", "up", "the", "cube", "place", "on", "goal", "open", "fridge",
    "drawer", "close", "a", "an", "and", "then", "put", "grab", "take", "lift", "move", "push",
    "pull", "drop", "release", "block", "ball", "bottle", "cup", "plate", "box", "apple", "can",
    "table", "shelf", "counter", "sink", "cabinet", "door", "handle", "to", "in", "into", "from",
    "at", "near", "onto", "over", "under", "left", "right", "front", "back", "top", "bottom",
    "red", "green", "blue", "yellow", "white", "black", "small", "large",
];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Instruction slots per sequence; templates are at most 6 words and
/// shorter ones are padded so every sample shares one layout.
pub const INSTR_LEN: usize = 6;
/// Trailing action-query positions, one per action dimension.
pub const ACTION_QUERIES: usize = 13;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("sequence too long: {got} tokens with max {max} (vision {vision}, instruction {instr}, queries {queries})")]
    Overlong {
        got: usize,
        max: usize,
        vision: usize,
        instr: usize,
        queries: usize,
    },
    #[error("instruction has {0} words, limit {INSTR_LEN}")]
    InstructionTooLong(usize),
    #[error("bad discretizer config: {0}")]
    BadDiscretizer(String),
    #[error("action token id {id} out of range for {bins} bins")]
    TokenOutOfRange { id: usize, bins: usize },
    #[error("non-finite action component {0}")]
    NonFiniteAction(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTokens {
    pub ids: Vec<usize>,
}

/// Whitespace word lookup against the fixed vocabulary; unknown words map
/// to the UNK sentinel.
pub fn tokenize_instruction(text: &str) -> InstructionTokens {
    let ids = text
        .split_whitespace()
        .map(|w| VOCAB.iter().position(|&v| v == w).unwrap_or(UNK_ID))
        .collect();
    InstructionTokens { ids }
}

/// Uniform action discretization over per-dimension physical limits.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizerConfig {
    pub bins: usize,
    pub limits: [f32; 13],
}

impl Default for DiscretizerConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            limits: Action13::LIMITS,
        }
    }
}

impl DiscretizerConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.bins < 2 {
            return Err(BackboneError::BadDiscretizer(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        if let Some(i) = self.limits.iter().position(|&l| !(l > 0.0)) {
            return Err(BackboneError::BadDiscretizer(format!(
                "limit for dim {i} must be strictly positive, got {}",
                self.limits[i]
            )));
        }
        Ok(())
    }
}

/// Normalizes each dimension to [-1, 1] by its limit and maps it to a
/// uniform bin index floor((v+1)/2 * bins), clamped to bins-1.
pub fn discretize_action(
    a: &Action13,
    cfg: &DiscretizerConfig,
) -> Result<[usize; 13], BackboneError> {
    cfg.validate()?;
    let mut out = [0usize; 13];
    for (i, (&v, &lim)) in a.0.iter().zip(&cfg.limits).enumerate() {
        if !v.is_finite() {
            return Err(BackboneError::NonFiniteAction(i));
        }
        // f64 keeps the bin boundary exact; one f32 rounding of the scaled
        // value is enough to push edge inputs across a boundary.
        let norm = (f64::from(v) / f64::from(lim)).clamp(-1.0, 1.0);
        let idx = ((norm + 1.0) / 2.0 * cfg.bins as f64).floor() as usize;
        out[i] = idx.min(cfg.bins - 1);
    }
    Ok(out)
}

/// Maps token ids back to the physical bin centers.
pub fn undiscretize_action(
    tokens: &[usize; 13],
    cfg: &DiscretizerConfig,
) -> Result<Action13, BackboneError> {
    cfg.validate()?;
    let mut out = [0.0f32; 13];
    for (i, (&id, &lim)) in tokens.iter().zip(&cfg.limits).enumerate() {
        if id >= cfg.bins {
            return Err(BackboneError::TokenOutOfRange { id, bins: cfg.bins });
        }
        let center = (id as f64 + 0.5) / cfg.bins as f64 * 2.0 - 1.0;
        out[i] = (center * f64::from(lim)) as f32;
    }
    Ok(Action13(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            max_seq: 1024,
        }
    }
}

/// The backbone's final-layer sequence plus enough layout information for
/// decoders to address subranges without recomputing offsets.
pub struct LatentFeatures {
    /// [batch, L, d_model].
    pub latents: NodeId,
    pub sources: Vec<TokenSource>,
    pub batch: usize,
    pub vision_len: usize,
}

impl LatentFeatures {
    pub fn seq_len(&self) -> usize {
        self.sources.len()
    }

    pub fn action_range(&self) -> Range<usize> {
        self.seq_len() - ACTION_QUERIES..self.seq_len()
    }

    /// The trailing action-query block, [batch, 13, d_model].
    pub fn action_block(&self, g: &mut Graph) -> Result<NodeId, TensorError> {
        g.slice(self.latents, 1, self.seq_len() - ACTION_QUERIES, ACTION_QUERIES)
    }
}

struct Block {
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

impl Block {
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
            w1: store.register(
                format!("{prefix}.ffn_w1"),
                Tensor::randn(&[d, d], std, rng),
            ),
            b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(&[d])),
            w2: store.register(
                format!("{prefix}.ffn_w2"),
                Tensor::randn(&[d, d], std, rng),
            ),
            b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(&[d])),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId, TensorError> {
        let g1 = g.param(store, self.ln1_g);
        let b1 = g.param(store, self.ln1_b);
        let normed = g.layer_norm(x, g1, b1, 1e-5)?;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(normed, wq)?;
        let k = g.matmul(normed, wk)?;
        let v = g.matmul(normed, wv)?;
        let att = g.attention(q, k, v, heads, causal)?;
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

/// Parameters of the backbone transformer, its embeddings, and the 13
/// per-dimension action-token heads.
pub struct BackboneModel {
    pub cfg: BackboneConfig,
    pub disc: DiscretizerConfig,
    tok_embed: ParamId,
    pos_embed: ParamId,
    action_query: ParamId,
    blocks: Vec<Block>,
    final_g: ParamId,
    final_b: ParamId,
    heads_w: Vec<ParamId>,
    heads_b: Vec<ParamId>,
}

impl BackboneModel {
    pub fn init(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        disc: DiscretizerConfig,
        rng: &mut Rng,
    ) -> Result<Self, BackboneError> {
        disc.validate()?;
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|l| Block::init(store, &format!("backbone.block{l}"), d, rng))
            .collect();
        let mut heads_w = Vec::with_capacity(ACTION_QUERIES);
        let mut heads_b = Vec::with_capacity(ACTION_QUERIES);
        let std = (1.0 / d as f32).sqrt();
        for i in 0..ACTION_QUERIES {
            heads_w.push(store.register(
                format!("backbone.head{i}_w"),
                Tensor::randn(&[d, disc.bins], std, rng),
            ));
            heads_b.push(store.register(format!("backbone.head{i}_b"), Tensor::zeros(&[disc.bins])));
        }
        // Embedding rows meet a layer norm immediately; std 0.1 keeps the
        // per-row scale (and the norm's 1/sigma Jacobian) well conditioned.
        Ok(Self {
            cfg,
            disc,
            tok_embed: store.register(
                "backbone.tok_embed",
                Tensor::randn(&[VOCAB.len(), d], 0.1, rng),
            ),
            pos_embed: store.register(
                "backbone.pos_embed",
                Tensor::randn(&[cfg.max_seq, d], 0.1, rng),
            ),
            action_query: store.register(
                "backbone.action_query",
                Tensor::randn(&[ACTION_QUERIES, d], 0.1, rng),
            ),
            blocks,
            final_g: store.register("backbone.final_g", Tensor::ones(&[d])),
            final_b: store.register("backbone.final_b", Tensor::zeros(&[d])),
            heads_w,
            heads_b,
        })
    }

    fn padded_ids(&self, instr: &InstructionTokens) -> Result<Vec<usize>, BackboneError> {
        if instr.ids.len() > INSTR_LEN {
            return Err(BackboneError::InstructionTooLong(instr.ids.len()));
        }
        let mut ids = instr.ids.clone();
        ids.resize(INSTR_LEN, PAD_ID);
        Ok(ids)
    }

    /// Runs the transformer over a batch that shares one token layout:
    /// `vision` holds the per-sample projected tokens (identical source
    /// tags), `instrs` one instruction per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vision: &[TokenSequence],
        instrs: &[InstructionTokens],
    ) -> Result<(LatentFeatures, Vec<NodeId>), BackboneError> {
        assert_eq!(vision.len(), instrs.len(), "one instruction per sample");
        assert!(!vision.is_empty(), "empty batch");
        let b = vision.len();
        let d = self.cfg.d_model;
        let t = g.value(vision[0].tokens).shape()[0];
        let seq_len = t + INSTR_LEN + ACTION_QUERIES;
        if seq_len > self.cfg.max_seq {
            return Err(BackboneError::Overlong {
                got: seq_len,
                max: self.cfg.max_seq,
                vision: t,
                instr: INSTR_LEN,
                queries: ACTION_QUERIES,
            });
        }

        // Per-sample rows: [vision tokens][instruction][action queries].
        let tok_embed = g.param(store, self.tok_embed);
        let queries = g.param(store, self.action_query);
        let mut rows = Vec::with_capacity(b);
        for (seq, instr) in vision.iter().zip(instrs) {
            let ids = self.padded_ids(instr)?;
            let emb = g.gather(tok_embed, &ids)?;
            let sample = g.concat(0, &[seq.tokens, emb, queries])?;
            rows.push(g.reshape(sample, &[1, seq_len, d])?);
        }
        let x = g.concat(0, &rows)?;

        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..seq_len).collect();
        let pos_embed = g.param(store, self.pos_embed);
        let pos = g.gather(pos_embed, &pos_ids)?;
        let pos = g.reshape(pos, &[b, seq_len, d])?;
        let mut x = g.add(x, pos)?;

        for block in &self.blocks {
            x = block.forward(g, store, x, self.cfg.heads, true)?;
        }
        let fg = g.param(store, self.final_g);
        let fb = g.param(store, self.final_b);
        let x = g.layer_norm(x, fg, fb, 1e-5)?;

        let mut sources = vision[0].sources.clone();
        sources.extend((0..INSTR_LEN).map(|word| TokenSource::Instruction { word }));
        sources.extend((0..ACTION_QUERIES).map(|dim| TokenSource::ActionQuery { dim }));
        let latents = LatentFeatures {
            latents: x,
            sources,
            batch: b,
            vision_len: t,
        };

        // Per-dimension bin logits from the query positions.
        let block = latents.action_block(g)?;
        let mut logits = Vec::with_capacity(ACTION_QUERIES);
        for i in 0..ACTION_QUERIES {
            let q = g.slice(block, 1, i, 1)?;
            let q = g.reshape(q, &[b, d])?;
            let w = g.param(store, self.heads_w[i]);
            let bias = g.param(store, self.heads_b[i]);
            let l = g.matmul(q, w)?;
            logits.push(g.add_bias(l, bias)?);
        }
        Ok((latents, logits))
    }
}

/// Mean cross-entropy over the 13 action dimensions; `targets[s][i]` is
/// the bin id of sample s, dimension i.
pub fn action_token_loss(
    g: &mut Graph,
    logits: &[NodeId],
    targets: &[[usize; 13]],
) -> Result<NodeId, BackboneError> {
    assert_eq!(logits.len(), ACTION_QUERIES);
    let mut total = None;
    for (i, &l) in logits.iter().enumerate() {
        let ids: Vec<usize> = targets.iter().map(|t| t[i]).collect();
        let ce = g.softmax_cross_entropy(l, &ids)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    Ok(g.scale(total.expect("13 dims"), 1.0 / ACTION_QUERIES as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::{grad_check, spray, GradCheckConfig};

    fn toy_vision(g: &mut Graph, t: usize, d: usize, seed: u64) -> TokenSequence {
        let mut rng = rng_from_seed(seed);
        let tokens = g.input(Tensor::randn(&[t, d], 1.0, &mut rng));
        TokenSequence {
            tokens,
            sources: (0..t)
                .map(|_| TokenSource::View {
                    plane: crate::perception::ViewPlane::HeadRgb,
                    steps_back: 0,
                })
                .collect(),
        }
    }

    fn small_model(store: &mut ParamStore, seed: u64) -> BackboneModel {
        let cfg = BackboneConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            max_seq: 64,
        };
        let disc = DiscretizerConfig {
            bins: 16,
            ..DiscretizerConfig::default()
        };
        BackboneModel::init(store, cfg, disc, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn tokenizer_is_deterministic_and_total() {
        let a = tokenize_instruction("open the fridge");
        assert_eq!(a.ids.len(), 3);
        assert!(a.ids.iter().all(|&id| id != UNK_ID && id < VOCAB.len()));
        assert_eq!(a, tokenize_instruction("open the fridge"));
        let b = tokenize_instruction("defenestrate the fridge");
        assert_eq!(b.ids[0], UNK_ID);
        assert_eq!(b.ids[1..], a.ids[1..]);
    }

    #[test]
    fn every_subtask_instruction_tokenizes_without_unk() {
        for task in crate::world::Subtask::ALL {
            let toks = tokenize_instruction(task.instruction());
            assert!(toks.ids.len() <= INSTR_LEN);
            assert!(toks.ids.iter().all(|&id| id != UNK_ID), "{}", task.name());
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store, 1);
        let instr = tokenize_instruction("pick up the cube");
        let run = || {
            let mut g = Graph::new();
            let v = toy_vision(&mut g, 8, 16, 7);
            let (lat, logits) = model
                .forward(&mut g, &store, &[v], std::slice::from_ref(&instr))
                .unwrap();
            let latents = g.value(lat.latents).data().to_vec();
            let shape = g.value(lat.latents).shape().to_vec();
            let l0 = g.value(logits[0]).data().to_vec();
            (latents, shape, l0, lat.sources.len(), logits.len())
        };
        let (lat_a, shape, l0a, n_src, n_heads) = run();
        let (lat_b, _, l0b, _, _) = run();
        assert_eq!(shape, vec![1, 8 + INSTR_LEN + ACTION_QUERIES, 16]);
        assert_eq!(n_src, 8 + INSTR_LEN + ACTION_QUERIES);
        assert_eq!(n_heads, 13);
        assert_eq!(lat_a, lat_b);
        assert_eq!(l0a, l0b);
        assert!(lat_a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store, 2);
        let instr = tokenize_instruction("open the drawer");
        let t = 8;
        let d = 16;
        let base = Tensor::randn(&[t, d], 1.0, &mut rng_from_seed(3));
        let perturb_at = 5usize;
        let mut bumped = base.clone();
        bumped.data_mut()[perturb_at * d] += 1.0;

        let latents_for = |input: &Tensor| {
            let mut g = Graph::new();
            let tokens = g.input(input.clone());
            let seq = TokenSequence {
                tokens,
                sources: vec![
                    TokenSource::View {
                        plane: crate::perception::ViewPlane::HeadRgb,
                        steps_back: 0,
                    };
                    t
                ],
            };
            let (lat, _) = model
                .forward(&mut g, &store, &[seq], std::slice::from_ref(&instr))
                .unwrap();
            g.value(lat.latents).data().to_vec()
        };
        let a = latents_for(&base);
        let b = latents_for(&bumped);
        // Positions strictly before the perturbed token are bit-identical;
        // the perturbed position itself must change.
        assert_eq!(a[..perturb_at * d], b[..perturb_at * d]);
        assert_ne!(a[perturb_at * d..(perturb_at + 1) * d], b[perturb_at * d..(perturb_at + 1) * d]);
    }

    #[test]
    fn overlong_sequence_reports_lengths() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store, 4);
        let instr = tokenize_instruction("open the fridge");
        let mut g = Graph::new();
        let v = toy_vision(&mut g, 60, 16, 5);
        match model.forward(&mut g, &store, &[v], &[instr]) {
            Err(BackboneError::Overlong { got, max, vision, .. }) => {
                assert_eq!(got, 60 + INSTR_LEN + ACTION_QUERIES);
                assert_eq!(max, 64);
                assert_eq!(vision, 60);
            }
            other => panic!("expected overlong error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn discretizer_edges_and_midpoint() {
        let cfg = DiscretizerConfig::default();
        let lo = Action13(cfg.limits.map(|l| -l));
        assert_eq!(discretize_action(&lo, &cfg).unwrap(), [0; 13]);
        let mid = Action13([0.0; 13]);
        assert_eq!(discretize_action(&mid, &cfg).unwrap(), [128; 13]);
        let hi = Action13(cfg.limits);
        assert_eq!(discretize_action(&hi, &cfg).unwrap(), [255; 13]);
    }

    #[test]
    fn discretizer_round_trip_bound() {
        let cfg = DiscretizerConfig::default();
        let mut rng = rng_from_seed(6);
        let mut max_norm_err = 0.0f64;
        for _ in 0..10_000 {
            let mut a = [0.0f32; 13];
            for (v, &lim) in a.iter_mut().zip(&cfg.limits) {
                *v = Tensor::rand_uniform(&[1], -lim, lim, &mut rng).data()[0];
            }
            let a = Action13(a);
            let tokens = discretize_action(&a, &cfg).unwrap();
            let back = undiscretize_action(&tokens, &cfg).unwrap();
            for i in 0..13 {
                let err =
                    ((f64::from(back.0[i]) - f64::from(a.0[i])) / f64::from(cfg.limits[i])).abs();
                max_norm_err = max_norm_err.max(err);
            }
        }
        // Half a bin width, plus one f32 rounding of the stored center.
        let bound = 1.0 / 256.0 + f64::from(f32::EPSILON);
        assert!(max_norm_err <= bound, "max err {max_norm_err}");
    }

    #[test]
    fn bin_centers_are_fixed_points() {
        let cfg = DiscretizerConfig {
            bins: 16,
            ..DiscretizerConfig::default()
        };
        for id in 0..16 {
            let tokens = [id; 13];
            let a = undiscretize_action(&tokens, &cfg).unwrap();
            assert_eq!(discretize_action(&a, &cfg).unwrap(), tokens);
        }
        assert!(matches!(
            undiscretize_action(&[16; 13], &cfg),
            Err(BackboneError::TokenOutOfRange { id: 16, bins: 16 })
        ));
    }

    #[test]
    fn action_loss_analytic_values() {
        let bins = 256;
        // One-hot-correct logits: +20 on the target, -20 elsewhere.
        let mut g = Graph::new();
        let targets = [[3usize; 13]; 1];
        let logits: Vec<NodeId> = (0..13)
            .map(|_| {
                let mut row = vec![-20.0f32; bins];
                row[3] = 20.0;
                g.input(Tensor::new(vec![1, bins], row).unwrap())
            })
            .collect();
        let loss = action_token_loss(&mut g, &logits, &targets).unwrap();
        assert!(g.value(loss).item() < 1e-6);

        // Uniform logits: exactly ln(bins).
        let mut g = Graph::new();
        let logits: Vec<NodeId> = (0..13)
            .map(|_| g.input(Tensor::zeros(&[1, bins])))
            .collect();
        let loss = action_token_loss(&mut g, &logits, &targets).unwrap();
        let expect = (bins as f64).ln();
        assert!((g.value(loss).item() as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn action_loss_matches_log_softmax_oracle() {
        let bins = 16;
        let batch = 3;
        let mut rng = rng_from_seed(8);
        let raw: Vec<Tensor> = (0..13)
            .map(|_| Tensor::randn(&[batch, bins], 1.5, &mut rng))
            .collect();
        let targets: Vec<[usize; 13]> = (0..batch)
            .map(|s| {
                let mut t = [0usize; 13];
                for (i, ti) in t.iter_mut().enumerate() {
                    *ti = (s * 7 + i * 3) % bins;
                }
                t
            })
            .collect();

        let mut oracle = 0.0f64;
        for (i, t) in raw.iter().enumerate() {
            for s in 0..batch {
                let row = &t.data()[s * bins..(s + 1) * bins];
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
                let z: f64 = row.iter().map(|&v| ((v as f64) - m).exp()).sum();
                oracle -= (raw[i].data()[s * bins + targets[s][i]] as f64 - m) - z.ln();
            }
        }
        oracle /= (13 * batch) as f64;

        let mut g = Graph::new();
        let logits: Vec<NodeId> = raw.iter().map(|t| g.input(t.clone())).collect();
        let loss = action_token_loss(&mut g, &logits, &targets).unwrap();
        assert!((g.value(loss).item() as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn backbone_passes_grad_check() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store, 9);
        let instr = tokenize_instruction("close the fridge");
        let input = Tensor::randn(&[4, 16], 0.5, &mut rng_from_seed(10));
        // The scaled sum keeps the scalar loss O(1): with a ~30-magnitude
        // loss, f32 forward rounding alone exceeds the tolerance.
        let report = grad_check(
            &mut store,
            |g, s| {
                let tokens = g.input(input.clone());
                let seq = TokenSequence {
                    tokens,
                    sources: vec![
                        TokenSource::View {
                            plane: crate::perception::ViewPlane::HeadRgb,
                            steps_back: 0,
                        };
                        4
                    ],
                };
                let (lat, logits) = model
                    .forward(g, s, &[seq], std::slice::from_ref(&instr))
                    .map_err(|e| TensorError::Contract(e.to_string()))?;
                let a = spray(g, lat.latents, 11);
                let b = spray(g, logits[0], 12);
                let c = spray(g, logits[12], 13);
                let ab = g.add(a, b)?;
                let total = g.add(ab, c)?;
                Ok(g.scale(total, 0.1))
            },
            &GradCheckConfig {
                h: 3e-3,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "max_err={} worst={:?}",
            report.max_err,
            report.worst
        );
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store, 14);
        let instr_a = tokenize_instruction("pick up the cube");
        let instr_b = tokenize_instruction("close the drawer");
        let ta = Tensor::randn(&[5, 16], 1.0, &mut rng_from_seed(15));
        let tb = Tensor::randn(&[5, 16], 1.0, &mut rng_from_seed(16));
        let srcs = |n: usize| {
            vec![
                TokenSource::View {
                    plane: crate::perception::ViewPlane::HeadRgb,
                    steps_back: 0,
                };
                n
            ]
        };

        let single = |t: &Tensor, instr: &InstructionTokens| {
            let mut g = Graph::new();
            let tokens = g.input(t.clone());
            let seq = TokenSequence {
                tokens,
                sources: srcs(5),
            };
            let (lat, _) = model
                .forward(&mut g, &store, &[seq], std::slice::from_ref(instr))
                .unwrap();
            g.value(lat.latents).data().to_vec()
        };
        let a = single(&ta, &instr_a);
        let b = single(&tb, &instr_b);

        let mut g = Graph::new();
        let sa = TokenSequence {
            tokens: g.input(ta.clone()),
            sources: srcs(5),
        };
        let sb = TokenSequence {
            tokens: g.input(tb.clone()),
            sources: srcs(5),
        };
        let (lat, _) = model
            .forward(&mut g, &store, &[sa, sb], &[instr_a, instr_b])
            .unwrap();
        let both = g.value(lat.latents).data();
        let half = both.len() / 2;
        assert_eq!(&both[..half], a.as_slice());
        assert_eq!(&both[half..], b.as_slice());
    }
}
