//! Flow-matching action expert.
//!
//! A small transformer reads a noisy 8-step action chunk (one token per
//! step, cross-attending to backbone latents) and predicts the velocity
//! of a linear noise-to-action path. Sampling integrates that field with
//! fixed-step Euler from seeded Gaussian noise; the first two rows of the
//! result are executed.

use thiserror::Error;

use crate::decoders::sincos_embedding;
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{Activation, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::world::Action13;

/// Steps per predicted chunk.
pub const HORIZON: usize = 8;
/// Leading steps of each chunk that actually run on the robot.
pub const EXECUTE: usize = 2;
/// Action dimensions per step.
pub const ACTION_DIM: usize = 13;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("interpolation time {0} outside [0, 1]")]
    BadTime(f32),
    #[error("bad denoise config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One action chunk in normalized [-1, 1] coordinates, row per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChunk(pub [[f32; ACTION_DIM]; HORIZON]);

impl ActionChunk {
    pub fn zero() -> Self {
        Self([[0.0; ACTION_DIM]; HORIZON])
    }

    /// Standard-normal chunk, the starting point of the denoising path.
    pub fn noise(rng: &mut Rng) -> Self {
        let t = Tensor::randn(&[HORIZON, ACTION_DIM], 1.0, rng);
        Self::from_slice(t.data())
    }

    pub fn from_slice(data: &[f32]) -> Self {
        assert_eq!(data.len(), HORIZON * ACTION_DIM);
        let mut out = Self::zero();
        for (r, row) in out.0.iter_mut().enumerate() {
            row.copy_from_slice(&data[r * ACTION_DIM..(r + 1) * ACTION_DIM]);
        }
        out
    }

    pub fn flat(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }

    /// Normalizes a window of physical actions into chunk coordinates.
    pub fn from_actions(actions: &[Action13; HORIZON]) -> Self {
        let mut out = Self::zero();
        for (row, a) in out.0.iter_mut().zip(actions) {
            *row = a.normalized();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiseConfig {
    pub steps: usize,
    pub horizon: usize,
    pub execute: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            horizon: HORIZON,
            execute: EXECUTE,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::BadConfig("steps must be at least 1".into()));
        }
        if self.horizon != HORIZON || self.execute != EXECUTE {
            return Err(FlowError::BadConfig(format!(
                "horizon/execute {}/{} unsupported, expected {HORIZON}/{EXECUTE}",
                self.horizon, self.execute
            )));
        }
        Ok(())
    }
}

/// Linear path between noise and target: x_t and its constant velocity.
pub fn make_training_pair(
    target: &ActionChunk,
    noise: &ActionChunk,
    t: f32,
) -> Result<(ActionChunk, ActionChunk), FlowError> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(FlowError::BadTime(t));
    }
    let mut x_t = ActionChunk::zero();
    let mut v = ActionChunk::zero();
    for r in 0..HORIZON {
        for c in 0..ACTION_DIM {
            x_t.0[r][c] = t * target.0[r][c] + (1.0 - t) * noise.0[r][c];
            v.0[r][c] = target.0[r][c] - noise.0[r][c];
        }
    }
    Ok((x_t, v))
}

/// Mean squared error between the predicted velocity field ([b, 8, 13])
/// and the path velocity.
pub fn fm_loss(g: &mut Graph, pred: NodeId, v_star: Tensor) -> Result<NodeId, TensorError> {
    g.mse(pred, v_star)
}

/// De-normalizes the executed prefix of a chunk into physical actions.
pub fn select_executed(chunk: &ActionChunk) -> [Action13; EXECUTE] {
    [
        Action13::from_normalized(&chunk.0[0]),
        Action13::from_normalized(&chunk.0[1]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
        }
    }
}

struct FlowBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    cq: ParamId,
    ck: ParamId,
    cv: ParamId,
    co: ParamId,
    cbo: ParamId,
    ln3_g: ParamId,
    ln3_b: ParamId,
    /// Scale-shift modulation of the FFN input from the time embedding.
    /// The velocity of a linear path scales with 1/(1-t) in x, so time
    /// must be able to act multiplicatively, not just as an added bias.
    film_w: ParamId,
    film_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FlowBlock {
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
            cq: mat(store, "cq"),
            ck: mat(store, "ck"),
            cv: mat(store, "cv"),
            co: mat(store, "co"),
            bo: store.register(format!("{prefix}.bo"), Tensor::zeros(&[d])),
            cbo: store.register(format!("{prefix}.cbo"), Tensor::zeros(&[d])),
            ln1_g: store.register(format!("{prefix}.ln1_g"), Tensor::ones(&[d])),
            ln1_b: store.register(format!("{prefix}.ln1_b"), Tensor::zeros(&[d])),
            ln2_g: store.register(format!("{prefix}.ln2_g"), Tensor::ones(&[d])),
            ln2_b: store.register(format!("{prefix}.ln2_b"), Tensor::zeros(&[d])),
            ln3_g: store.register(format!("{prefix}.ln3_g"), Tensor::ones(&[d])),
            ln3_b: store.register(format!("{prefix}.ln3_b"), Tensor::zeros(&[d])),
            // Zero init makes the modulation start as the identity.
            film_w: store.register(format!("{prefix}.film_w"), Tensor::zeros(&[d, 2 * d])),
            film_b: store.register(format!("{prefix}.film_b"), Tensor::zeros(&[2 * d])),
            w1: store.register(format!("{prefix}.ffn_w1"), Tensor::randn(&[d, d], std, rng)),
            b1: store.register(format!("{prefix}.ffn_b1"), Tensor::zeros(&[d])),
            w2: store.register(format!("{prefix}.ffn_w2"), Tensor::randn(&[d, d], std, rng)),
            b2: store.register(format!("{prefix}.ffn_b2"), Tensor::zeros(&[d])),
        }
    }

    /// Self-attention over chunk tokens, cross-attention to latents, then
    /// an FFN whose input is scale-shifted by the time embedding.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        latents: NodeId,
        time_emb: NodeId,
        heads: usize,
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
        let att = g.attention(q, k, v, heads, false)?;
        let wo = g.param(store, self.wo);
        let bo = g.param(store, self.bo);
        let att = g.matmul(att, wo)?;
        let att = g.add_bias(att, bo)?;
        let x = g.add(x, att)?;

        let g2 = g.param(store, self.ln2_g);
        let b2n = g.param(store, self.ln2_b);
        let normed = g.layer_norm(x, g2, b2n, 1e-5)?;
        let cq = g.param(store, self.cq);
        let ck = g.param(store, self.ck);
        let cv = g.param(store, self.cv);
        let q = g.matmul(normed, cq)?;
        let k = g.matmul(latents, ck)?;
        let v = g.matmul(latents, cv)?;
        let att = g.attention(q, k, v, heads, false)?;
        let co = g.param(store, self.co);
        let cbo = g.param(store, self.cbo);
        let att = g.matmul(att, co)?;
        let att = g.add_bias(att, cbo)?;
        let x = g.add(x, att)?;

        let g3 = g.param(store, self.ln3_g);
        let b3 = g.param(store, self.ln3_b);
        let normed = g.layer_norm(x, g3, b3, 1e-5)?;
        let shape = g.value(normed).shape().to_vec();
        let (batch, rows, d) = (shape[0], shape[1], shape[2]);
        let fw = g.param(store, self.film_w);
        let fb = g.param(store, self.film_b);
        let film = g.matmul(time_emb, fw)?;
        let film = g.add_bias(film, fb)?;
        let gamma = g.slice(film, 1, 0, d)?;
        let beta = g.slice(film, 1, d, d)?;
        let one = g.input(Tensor::ones(&[1, d]));
        let gamma = g.add(gamma, one)?;
        // Broadcast the [1, d] modulation over every token with a gather.
        let ids = vec![0usize; batch * rows];
        let gamma = g.gather(gamma, &ids)?;
        let gamma = g.reshape(gamma, &shape)?;
        let beta = g.gather(beta, &ids)?;
        let beta = g.reshape(beta, &shape)?;
        let normed = g.mul(normed, gamma)?;
        let normed = g.add(normed, beta)?;
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

/// The velocity network. All parameters live under the `expert.` prefix,
/// which is what the final training stage leaves unfrozen.
pub struct FlowExpert {
    pub cfg: FlowConfig,
    in_w: ParamId,
    in_b: ParamId,
    /// Fixed sine-cos row encodings; the time embedding is added on top.
    pe: Tensor,
    blocks: Vec<FlowBlock>,
    final_g: ParamId,
    final_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    /// Per-dimension time-dependent gain on the noisy chunk itself. The
    /// final layer norm erases the scale of the residual stream, so
    /// without this path the field cannot stay linear in x far from the
    /// data, and outlier noise draws stall mid-integration.
    skip_fw: ParamId,
    skip_fb: ParamId,
}

impl FlowExpert {
    pub fn init(store: &mut ParamStore, cfg: FlowConfig, rng: &mut Rng) -> Result<Self, FlowError> {
        if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(FlowError::BadConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        if cfg.d_model % 2 != 0 {
            return Err(FlowError::BadConfig(format!(
                "d_model {} must be even for sine-cos encodings",
                cfg.d_model
            )));
        }
        let d = cfg.d_model;
        let positions: Vec<f32> = (0..HORIZON).map(|p| p as f32).collect();
        let std = (1.0 / ACTION_DIM as f32).sqrt();
        Ok(Self {
            in_w: store.register("expert.in_w", Tensor::randn(&[ACTION_DIM, d], std, rng)),
            in_b: store.register("expert.in_b", Tensor::zeros(&[d])),
            pe: sincos_embedding(&positions, d),
            blocks: (0..cfg.layers)
                .map(|l| FlowBlock::init(store, &format!("expert.block{l}"), d, rng))
                .collect(),
            final_g: store.register("expert.final_g", Tensor::ones(&[d])),
            final_b: store.register("expert.final_b", Tensor::zeros(&[d])),
            out_w: store.register(
                "expert.out_w",
                Tensor::randn(&[d, ACTION_DIM], (1.0 / d as f32).sqrt(), rng),
            ),
            out_b: store.register("expert.out_b", Tensor::zeros(&[ACTION_DIM])),
            skip_fw: store.register("expert.skip_film_w", Tensor::zeros(&[d, ACTION_DIM])),
            skip_fb: store.register("expert.skip_film_b", Tensor::zeros(&[ACTION_DIM])),
            cfg,
        })
    }

    /// Predicted velocity for noisy chunks `x` [b, 8, 13] at time `t`,
    /// conditioned on latents [b, L, d]. The caller decides whether the
    /// latents are detached.
    pub fn velocity(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        t: f32,
        latents: NodeId,
    ) -> Result<NodeId, FlowError> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(FlowError::BadTime(t));
        }
        let batch = g.value(x).shape()[0];
        let d = self.cfg.d_model;
        let w = g.param(store, self.in_w);
        let b = g.param(store, self.in_b);
        let rows = g.matmul(x, w)?;
        let rows = g.add_bias(rows, b)?;
        // Row and time encodings are fixed, so they fold into one table
        // broadcast over the batch with a gather. The unit interval is
        // stretched across the embedding's frequency ladder; raw t in
        // [0,1] would leave every feature in its near-linear regime and
        // the time conditioning could not express sharp schedules.
        let time = sincos_embedding(&[t * 1000.0], d);
        let mut table = self.pe.clone();
        for r in 0..HORIZON {
            for c in 0..d {
                table.data_mut()[r * d + c] += time.data()[c];
            }
        }
        let table = g.input(table);
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..HORIZON).collect();
        let enc = g.gather(table, &ids)?;
        let enc = g.reshape(enc, &[batch, HORIZON, d])?;
        let mut h = g.add(rows, enc)?;
        let time_emb = g.input(time);
        for block in &self.blocks {
            h = block.forward(g, store, h, latents, time_emb, self.cfg.heads)?;
        }
        let fg = g.param(store, self.final_g);
        let fb = g.param(store, self.final_b);
        let h = g.layer_norm(h, fg, fb, 1e-5)?;
        let ow = g.param(store, self.out_w);
        let ob = g.param(store, self.out_b);
        let out = g.matmul(h, ow)?;
        let out = g.add_bias(out, ob)?;

        let sfw = g.param(store, self.skip_fw);
        let sfb = g.param(store, self.skip_fb);
        let sf = g.matmul(time_emb, sfw)?;
        let sf = g.add_bias(sf, sfb)?;
        let broadcast = vec![0usize; batch * HORIZON];
        let sf = g.gather(sf, &broadcast)?;
        let sf = g.reshape(sf, &[batch, HORIZON, ACTION_DIM])?;
        let skip = g.mul(x, sf)?;
        Ok(g.add(out, skip)?)
    }

    /// Integrates the learned field from seeded noise with fixed-step
    /// Euler and clamps the result into the normalized action box.
    pub fn sample_chunk(
        &self,
        store: &ParamStore,
        latents: &Tensor,
        cfg: &DenoiseConfig,
        seed: u64,
    ) -> Result<ActionChunk, FlowError> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut x = ActionChunk::noise(&mut rng);
        let dt = 1.0 / cfg.steps as f32;
        for step in 0..cfg.steps {
            let t = step as f32 * dt;
            let mut g = Graph::new();
            let ln = g.input(latents.clone());
            let xn = g.input(Tensor::new(vec![1, HORIZON, ACTION_DIM], x.flat()).expect("chunk"));
            let v = self.velocity(&mut g, store, xn, t, ln)?;
            let v = g.value(v).data();
            for r in 0..HORIZON {
                for c in 0..ACTION_DIM {
                    x.0[r][c] += dt * v[r * ACTION_DIM + c];
                }
            }
        }
        for row in &mut x.0 {
            for v in row.iter_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
        }
        Ok(x)
    }
}
