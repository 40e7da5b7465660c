//! Modality assembly and encoding.
//!
//! Raw camera frames become backbone tokens in three steps: depth planes
//! are normalized to (0,1], enabled views (plus optional 4-step history)
//! are stacked in a fixed order, and each 8x8 patch is encoded by two
//! branches - a fixed gradient-statistics branch (geometry proxy) and a
//! learned linear patch embedding (semantic proxy) - whose concatenation
//! a trainable projector maps into model space. One token per patch per
//! view plane per timestep.

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::world::Frame;

/// Width of the fixed gradient-statistics branch.
pub const DIM_A: usize = 8;
/// Width of the learned patch-embedding branch.
pub const DIM_B: usize = 24;
/// Per-patch feature width fed to the projector.
pub const FEATURE_DIM: usize = DIM_A + DIM_B;

#[derive(Debug, Error)]
pub enum PerceptError {
    #[error("negative depth {value} at index {index}")]
    NegativeDepth { index: usize, value: f32 },
    #[error("required view missing: {0}")]
    MissingView(&'static str),
    #[error("bad modality config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which modalities feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityConfig {
    pub use_hand_view: bool,
    pub use_depth: bool,
    /// 0 (current frame only) or 4 (past four timesteps prepended).
    pub history_len: usize,
    pub frame_size: usize,
    pub patch_size: usize,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self {
            use_hand_view: true,
            use_depth: true,
            history_len: 0,
            frame_size: 48,
            patch_size: 8,
        }
    }
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<(), PerceptError> {
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return Err(PerceptError::BadConfig(format!(
                "frame_size {} not divisible by patch_size {}",
                self.frame_size, self.patch_size
            )));
        }
        if self.history_len != 0 && self.history_len != 4 {
            return Err(PerceptError::BadConfig(format!(
                "history_len must be 0 or 4, got {}",
                self.history_len
            )));
        }
        Ok(())
    }

    /// Enabled planes for one timestep, in stacking order.
    pub fn planes(&self) -> Vec<ViewPlane> {
        let mut v = vec![ViewPlane::HeadRgb];
        if self.use_depth {
            v.push(ViewPlane::HeadDepth);
        }
        if self.use_hand_view {
            v.push(ViewPlane::HandRgb);
            if self.use_depth {
                v.push(ViewPlane::HandDepth);
            }
        }
        v
    }

    pub fn patches_per_plane(&self) -> usize {
        let p = self.frame_size / self.patch_size;
        p * p
    }

    /// Closed form for the vision token count:
    /// (frame/patch)^2 x enabled planes x (1 + history_len).
    pub fn token_count(&self) -> usize {
        self.patches_per_plane() * self.planes().len() * (1 + self.history_len)
    }
}

/// The four camera/channel planes a timestep can contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewPlane {
    HeadRgb,
    HeadDepth,
    HandRgb,
    HandDepth,
}

impl ViewPlane {
    pub fn index(self) -> usize {
        match self {
            ViewPlane::HeadRgb => 0,
            ViewPlane::HeadDepth => 1,
            ViewPlane::HandRgb => 2,
            ViewPlane::HandDepth => 3,
        }
    }

    pub fn is_depth(self) -> bool {
        matches!(self, ViewPlane::HeadDepth | ViewPlane::HandDepth)
    }
}

/// Where a token came from; lets downstream code address subsequences
/// without re-deriving the stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    View { plane: ViewPlane, steps_back: usize },
    Instruction { word: usize },
    ActionQuery { dim: usize },
}

/// Both cameras at one timestep. `hand` may be absent when the config
/// does not request it.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub head: Frame,
    pub hand: Option<Frame>,
}

/// Everything the encoder consumes for one decision: current views, the
/// history ring (oldest first, exactly `history_len` entries after
/// assembly), and the instruction text.
#[derive(Debug, Clone)]
pub struct ObservationBundle {
    pub current: ViewSet,
    pub history: Vec<ViewSet>,
    pub instruction: String,
}

/// Depth channel normalization: 1 - tanh(d/1000) maps millimeters into
/// (0,1], strictly decreasing, so near surfaces read close to 1.
///
/// Evaluated in f64 before narrowing: in f32, tanh saturates to exactly 1
/// past ~8.5 m and the result would collapse to 0, breaking both the open
/// lower bound and strict monotonicity well inside the sensor range.
pub fn normalize_depth(depth_mm: &[f32]) -> Result<Vec<f32>, PerceptError> {
    if let Some((index, &value)) = depth_mm.iter().enumerate().find(|(_, &d)| d < 0.0) {
        return Err(PerceptError::NegativeDepth { index, value });
    }
    Ok(depth_mm
        .iter()
        .map(|&d| (1.0 - (d as f64 / 1000.0).tanh()) as f32)
        .collect())
}

fn check_view(set: &ViewSet, cfg: &ModalityConfig) -> Result<(), PerceptError> {
    let n = cfg.frame_size * cfg.frame_size;
    let ok = |f: &Frame| f.rgb.len() == 3 * n && f.depth_mm.len() == n;
    if !ok(&set.head) {
        return Err(PerceptError::BadConfig(format!(
            "head frame does not match frame_size {}",
            cfg.frame_size
        )));
    }
    match &set.hand {
        Some(h) if !ok(h) => Err(PerceptError::BadConfig(format!(
            "hand frame does not match frame_size {}",
            cfg.frame_size
        ))),
        None if cfg.use_hand_view => Err(PerceptError::MissingView("hand")),
        _ => Ok(()),
    }
}

/// Stacks the current views with the available past into a bundle. `past`
/// is ordered oldest to newest and may be shorter than `history_len`; the
/// gap is padded by repeating the earliest available view set.
pub fn assemble_observation(
    current: ViewSet,
    past: &[ViewSet],
    instruction: &str,
    cfg: &ModalityConfig,
) -> Result<ObservationBundle, PerceptError> {
    cfg.validate()?;
    check_view(&current, cfg)?;
    for set in past {
        check_view(set, cfg)?;
    }
    let tail = if past.len() > cfg.history_len {
        &past[past.len() - cfg.history_len..]
    } else {
        past
    };
    let earliest = tail.first().unwrap_or(&current);
    let mut history = Vec::with_capacity(cfg.history_len);
    for _ in 0..cfg.history_len - tail.len() {
        history.push(earliest.clone());
    }
    history.extend_from_slice(tail);
    Ok(ObservationBundle {
        current,
        history,
        instruction: instruction.to_string(),
    })
}

/// Fixed per-patch gradient statistics: means, absolute means, maxima and
/// energies of forward differences. All zero on a constant patch.
fn grad_features(gray: &[f32], size: usize, r0: usize, c0: usize, p: usize) -> [f32; DIM_A] {
    let mut sum_dx = 0.0f32;
    let mut sum_dy = 0.0f32;
    let mut abs_dx = 0.0f32;
    let mut abs_dy = 0.0f32;
    let mut max_dx = 0.0f32;
    let mut max_dy = 0.0f32;
    let mut e_dx = 0.0f32;
    let mut e_dy = 0.0f32;
    let nx = (p * (p - 1)).max(1) as f32;
    for r in 0..p {
        for c in 0..p.saturating_sub(1) {
            let i = (r0 + r) * size + c0 + c;
            let dx = gray[i + 1] - gray[i];
            sum_dx += dx;
            abs_dx += dx.abs();
            max_dx = max_dx.max(dx.abs());
            e_dx += dx * dx;
        }
    }
    for r in 0..p.saturating_sub(1) {
        for c in 0..p {
            let i = (r0 + r) * size + c0 + c;
            let dy = gray[i + size] - gray[i];
            sum_dy += dy;
            abs_dy += dy.abs();
            max_dy = max_dy.max(dy.abs());
            e_dy += dy * dy;
        }
    }
    [
        sum_dx / nx,
        sum_dy / nx,
        abs_dx / nx,
        abs_dy / nx,
        max_dx,
        max_dy,
        e_dx / nx,
        e_dy / nx,
    ]
}

/// One plane's encoded patches, pre-projection.
pub struct PlaneFeatures {
    pub plane: ViewPlane,
    /// How many steps in the past this plane was captured (0 = current).
    pub steps_back: usize,
    /// [patches, FEATURE_DIM].
    pub feats: NodeId,
}

/// Vision tokens ready for the backbone: [T, d_model] with one source tag
/// per row.
pub struct TokenSequence {
    pub tokens: NodeId,
    pub sources: Vec<TokenSource>,
}

/// Parameters of the dual-branch encoder and the projector. RGB and depth
/// patches get separate branch-B embeddings (their flattened widths
/// differ); plane and timestep embeddings disambiguate token origin.
pub struct PerceptionModel {
    pub cfg: ModalityConfig,
    pub d_model: usize,
    rgb_embed: ParamId,
    rgb_bias: ParamId,
    depth_embed: ParamId,
    depth_bias: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    plane_embed: ParamId,
    time_embed: ParamId,
}

impl PerceptionModel {
    pub fn init(
        store: &mut ParamStore,
        cfg: ModalityConfig,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<Self, PerceptError> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let rgb_in = 3 * p * p;
        let depth_in = p * p;
        let std_rgb = (1.0 / rgb_in as f32).sqrt();
        let std_depth = (1.0 / depth_in as f32).sqrt();
        let std_proj = (1.0 / FEATURE_DIM as f32).sqrt();
        Ok(Self {
            cfg,
            d_model,
            rgb_embed: store.register(
                "percept.rgb_embed",
                Tensor::randn(&[rgb_in, DIM_B], std_rgb, rng),
            ),
            rgb_bias: store.register("percept.rgb_bias", Tensor::zeros(&[DIM_B])),
            depth_embed: store.register(
                "percept.depth_embed",
                Tensor::randn(&[depth_in, DIM_B], std_depth, rng),
            ),
            depth_bias: store.register("percept.depth_bias", Tensor::zeros(&[DIM_B])),
            proj_w: store.register(
                "percept.proj_w",
                Tensor::randn(&[FEATURE_DIM, d_model], std_proj, rng),
            ),
            proj_b: store.register("percept.proj_b", Tensor::zeros(&[d_model])),
            plane_embed: store.register("percept.plane_embed", Tensor::randn(&[4, d_model], 0.02, rng)),
            time_embed: store.register(
                "percept.time_embed",
                Tensor::randn(&[5, d_model], 0.02, rng),
            ),
        })
    }

    /// Same parameters under a different modality selection (ablation arms
    /// share encoder shapes; only the plane set changes).
    pub fn with_config(&self, cfg: ModalityConfig) -> Result<Self, PerceptError> {
        cfg.validate()?;
        if cfg.patch_size != self.cfg.patch_size {
            return Err(PerceptError::BadConfig(
                "patch_size change would invalidate embedding shapes".into(),
            ));
        }
        Ok(Self { cfg, ..*self })
    }

    fn plane_data(&self, set: &ViewSet, plane: ViewPlane) -> Result<Vec<f32>, PerceptError> {
        let frame = match plane {
            ViewPlane::HeadRgb | ViewPlane::HeadDepth => &set.head,
            ViewPlane::HandRgb | ViewPlane::HandDepth => {
                set.hand.as_ref().ok_or(PerceptError::MissingView("hand"))?
            }
        };
        if plane.is_depth() {
            normalize_depth(&frame.depth_mm)
        } else {
            Ok(frame.rgb.clone())
        }
    }

    /// Encodes one plane: fixed gradient statistics (entering the graph as
    /// constants) concatenated with the learned patch embedding.
    fn encode_plane(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        data: &[f32],
        plane: ViewPlane,
        steps_back: usize,
    ) -> Result<PlaneFeatures, PerceptError> {
        let s = self.cfg.frame_size;
        let p = self.cfg.patch_size;
        let grid = s / p;
        let n_patches = grid * grid;
        let channels = if plane.is_depth() { 1 } else { 3 };
        let plane_px = s * s;

        let mut fixed = Vec::with_capacity(n_patches * DIM_A);
        let mut flat = Vec::with_capacity(n_patches * channels * p * p);
        // Branch A runs on the channel-mean image so RGB and depth planes
        // share one feature definition.
        let gray: Vec<f32> = if channels == 1 {
            data.to_vec()
        } else {
            (0..plane_px)
                .map(|i| (data[i] + data[plane_px + i] + data[2 * plane_px + i]) / 3.0)
                .collect()
        };
        for pr in 0..grid {
            for pc in 0..grid {
                fixed.extend_from_slice(&grad_features(&gray, s, pr * p, pc * p, p));
                for ch in 0..channels {
                    for r in 0..p {
                        let row = (pr * p + r) * s + pc * p;
                        flat.extend_from_slice(&data[ch * plane_px + row..][..p]);
                    }
                }
            }
        }

        let a = g.input(Tensor::new(vec![n_patches, DIM_A], fixed)?);
        let patches = g.input(Tensor::new(vec![n_patches, channels * p * p], flat)?);
        let (embed, bias) = if plane.is_depth() {
            (self.depth_embed, self.depth_bias)
        } else {
            (self.rgb_embed, self.rgb_bias)
        };
        let w = g.param(store, embed);
        let b = g.param(store, bias);
        let learned = g.matmul(patches, w)?;
        let learned = g.add_bias(learned, b)?;
        let feats = g.concat(1, &[a, learned])?;
        Ok(PlaneFeatures {
            plane,
            steps_back,
            feats,
        })
    }

    /// Encodes every enabled plane of every timestep, current first, then
    /// history oldest first.
    pub fn encode_views(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundle: &ObservationBundle,
    ) -> Result<Vec<PlaneFeatures>, PerceptError> {
        if bundle.history.len() != self.cfg.history_len {
            return Err(PerceptError::BadConfig(format!(
                "bundle history has {} entries, config wants {}",
                bundle.history.len(),
                self.cfg.history_len
            )));
        }
        let planes = self.cfg.planes();
        let mut out = Vec::new();
        for plane in &planes {
            let data = self.plane_data(&bundle.current, *plane)?;
            out.push(self.encode_plane(g, store, &data, *plane, 0)?);
        }
        for (h, set) in bundle.history.iter().enumerate() {
            let steps_back = self.cfg.history_len - h;
            for plane in &planes {
                let data = self.plane_data(set, *plane)?;
                out.push(self.encode_plane(g, store, &data, *plane, steps_back)?);
            }
        }
        Ok(out)
    }

    /// Projects patch features into model space and adds plane/timestep
    /// embeddings. Each token depends only on its own patch, so disabling
    /// a modality never changes the remaining tokens.
    pub fn project_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &[PlaneFeatures],
    ) -> Result<TokenSequence, PerceptError> {
        let parts: Vec<NodeId> = feats.iter().map(|f| f.feats).collect();
        let all = g.concat(0, &parts)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let tokens = g.matmul(all, w)?;
        let tokens = g.add_bias(tokens, b)?;

        let per_plane = self.cfg.patches_per_plane();
        let mut plane_ids = Vec::with_capacity(feats.len() * per_plane);
        let mut time_ids = Vec::with_capacity(feats.len() * per_plane);
        let mut sources = Vec::with_capacity(feats.len() * per_plane);
        for f in feats {
            for _ in 0..per_plane {
                plane_ids.push(f.plane.index());
                time_ids.push(f.steps_back);
                sources.push(TokenSource::View {
                    plane: f.plane,
                    steps_back: f.steps_back,
                });
            }
        }
        let pe = g.param(store, self.plane_embed);
        let te = g.param(store, self.time_embed);
        let pemb = g.gather(pe, &plane_ids)?;
        let temb = g.gather(te, &time_ids)?;
        let tokens = g.add(tokens, pemb)?;
        let tokens = g.add(tokens, temb)?;
        Ok(TokenSequence { tokens, sources })
    }

    /// encode_views followed by project_tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bundle: &ObservationBundle,
    ) -> Result<TokenSequence, PerceptError> {
        let feats = self.encode_views(g, store, bundle)?;
        self.project_tokens(g, store, feats.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::{grad_check, spray, GradCheckConfig};
    use crate::world::{render, reset, Camera, Subtask, WorldConfig};

    fn small_world() -> WorldConfig {
        WorldConfig {
            frame_size: 16,
            ..WorldConfig::default()
        }
    }

    fn small_cfg() -> ModalityConfig {
        ModalityConfig {
            frame_size: 16,
            ..ModalityConfig::default()
        }
    }

    fn view_set(seed: u64) -> ViewSet {
        let wc = small_world();
        let state = reset(Subtask::Pick, seed, &wc);
        ViewSet {
            head: render(&state, Camera::Head, &wc),
            hand: Some(render(&state, Camera::Hand, &wc)),
        }
    }

    #[test]
    fn depth_normalization_endpoints() {
        let out = normalize_depth(&[0.0, 1000.0, 10000.0]).unwrap();
        assert_eq!(out[0], 1.0);
        let oracle = 1.0 - (1.0f64).tanh();
        assert!((out[1] as f64 - oracle).abs() < 1e-6);
        assert!(out[2] > 0.0 && out[2] < 1e-8);
    }

    #[test]
    fn depth_normalization_is_monotone_decreasing() {
        let grid: Vec<f32> = (0..10_000).map(|i| i as f32).collect();
        let out = normalize_depth(&grid).unwrap();
        assert!(out.windows(2).all(|w| w[1] < w[0]));
        assert!(out.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn negative_depth_rejected_with_location() {
        match normalize_depth(&[1.0, -2.0]) {
            Err(PerceptError::NegativeDepth { index: 1, value }) => assert_eq!(value, -2.0),
            other => panic!("expected negative-depth error, got {other:?}"),
        }
    }

    #[test]
    fn plane_order_follows_config() {
        use ViewPlane::*;
        let mut cfg = small_cfg();
        assert_eq!(cfg.planes(), vec![HeadRgb, HeadDepth, HandRgb, HandDepth]);
        cfg.use_depth = false;
        assert_eq!(cfg.planes(), vec![HeadRgb, HandRgb]);
        cfg.use_hand_view = false;
        assert_eq!(cfg.planes(), vec![HeadRgb]);
    }

    #[test]
    fn token_count_closed_form_over_all_configs() {
        for hand in [false, true] {
            for depth in [false, true] {
                for hist in [0usize, 4] {
                    let cfg = ModalityConfig {
                        use_hand_view: hand,
                        use_depth: depth,
                        history_len: hist,
                        frame_size: 16,
                        patch_size: 8,
                    };
                    let planes = (1 + depth as usize) * (1 + hand as usize);
                    assert_eq!(cfg.token_count(), 4 * planes * (1 + hist));

                    let mut store = ParamStore::new();
                    let mut rng = rng_from_seed(1);
                    let model = PerceptionModel::init(&mut store, cfg, 64, &mut rng).unwrap();
                    let bundle = assemble_observation(
                        view_set(2),
                        &[view_set(3)],
                        "pick the object",
                        &cfg,
                    )
                    .unwrap();
                    let mut g = Graph::new();
                    let seq = model.forward(&mut g, &store, &bundle).unwrap();
                    assert_eq!(g.value(seq.tokens).shape(), [cfg.token_count(), 64]);
                    assert_eq!(seq.sources.len(), cfg.token_count());
                }
            }
        }
    }

    #[test]
    fn missing_hand_view_is_named() {
        let cfg = small_cfg();
        let mut set = view_set(4);
        set.hand = None;
        match assemble_observation(set, &[], "x", &cfg) {
            Err(PerceptError::MissingView("hand")) => {}
            other => panic!("expected missing-view error, got {other:?}"),
        }
    }

    #[test]
    fn short_history_pads_with_earliest() {
        let cfg = ModalityConfig {
            history_len: 4,
            ..small_cfg()
        };
        let oldest = view_set(5);
        let bundle =
            assemble_observation(view_set(6), std::slice::from_ref(&oldest), "x", &cfg).unwrap();
        assert_eq!(bundle.history.len(), 4);
        for padded in &bundle.history[..3] {
            assert_eq!(padded.head.rgb, oldest.head.rgb);
        }
        assert_eq!(bundle.history[3].head.rgb, oldest.head.rgb);
    }

    #[test]
    fn constant_image_zeroes_fixed_branch() {
        let cfg = ModalityConfig {
            use_hand_view: false,
            use_depth: false,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let model = PerceptionModel::init(&mut store, cfg, 64, &mut rng).unwrap();
        let n = cfg.frame_size * cfg.frame_size;
        let set = ViewSet {
            head: Frame {
                rgb: vec![0.37; 3 * n],
                depth_mm: vec![500.0; n],
                seg: crate::world::SegMask::zeros(cfg.frame_size),
            },
            hand: None,
        };
        let bundle = assemble_observation(set, &[], "x", &cfg).unwrap();
        let mut g = Graph::new();
        let feats = model.encode_views(&mut g, &store, &bundle).unwrap();
        for f in &feats {
            let t = g.value(f.feats);
            assert_eq!(t.shape()[1], FEATURE_DIM);
            for row in t.data().chunks(FEATURE_DIM) {
                assert!(row[..DIM_A].iter().all(|&v| v == 0.0));
                assert!(row[DIM_A..].iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn disabling_a_modality_preserves_remaining_tokens() {
        let full = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let model = PerceptionModel::init(&mut store, full, 64, &mut rng).unwrap();
        let set = view_set(7);
        let bundle_full = assemble_observation(set.clone(), &[], "x", &full).unwrap();
        let mut g1 = Graph::new();
        let seq_full = model.forward(&mut g1, &store, &bundle_full).unwrap();

        let head_only = ModalityConfig {
            use_hand_view: false,
            use_depth: false,
            ..full
        };
        let reduced = model.with_config(head_only).unwrap();
        let bundle_small = assemble_observation(set, &[], "x", &head_only).unwrap();
        let mut g2 = Graph::new();
        let seq_small = reduced.forward(&mut g2, &store, &bundle_small).unwrap();

        let t_full = g1.value(seq_full.tokens);
        let t_small = g2.value(seq_small.tokens);
        assert!(t_small.shape()[0] < t_full.shape()[0]);
        // Head-RGB tokens sit first in both layouts and must be identical.
        let n = t_small.numel();
        assert_eq!(&t_full.data()[..n], t_small.data());
    }

    #[test]
    fn encoder_and_projector_pass_grad_check() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let model = PerceptionModel::init(&mut store, cfg, 16, &mut rng).unwrap();
        let bundle = assemble_observation(view_set(8), &[], "x", &cfg).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let seq = model
                    .forward(g, s, &bundle)
                    .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
                Ok(spray(g, seq.tokens, 11))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.passed(),
            "max_err={} worst={:?}",
            report.max_err,
            report.worst
        );
    }
}
