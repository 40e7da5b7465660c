//! Central-difference gradient verification.
//!
//! For every checked coordinate the analytic gradient `a` (from backward)
//! is compared against the numeric estimate `n = (f(x+h) - f(x-h)) / 2h`
//! with the error metric `|a - n| / (1 + max(|a|, |n|))`, which behaves
//! like a relative error for large gradients and an absolute one near zero.

use rand::seq::index::sample;
use rand::SeedableRng;

use super::optim::ParamStore;
use super::{Graph, NodeId, Tensor, TensorError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Base step; the actual step is `h * max(1, |x|)` per coordinate.
    pub h: f32,
    pub tol: f32,
    /// Per-parameter cap on checked coordinates (sampled without
    /// replacement when a parameter is larger).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-2,
            tol: 1e-3,
            max_coords: 24,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub coord: usize,
    pub analytic: f32,
    pub numeric: f32,
    pub err: f32,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_err: f32,
    pub checked: usize,
    pub worst: Option<WorstCoord>,
    pub tol: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

/// Elementwise-weights the node with a fixed pseudorandom tensor and
/// sums, so every output coordinate influences the scalar loss. The
/// standard way to scalarize a vector-valued head for [`grad_check`].
pub fn spray(g: &mut Graph, node: NodeId, seed: u64) -> NodeId {
    let shape = g.value(node).shape().to_vec();
    let mut rng = Rng::seed_from_u64(seed);
    let w = g.input(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = g.mul(node, w).expect("same shape");
    g.sum_all(prod)
}

/// Checks the gradients of every parameter in `store` against numeric
/// differentiation of the scalar loss that `build` constructs.
///
/// `build` must be a pure function of the store values: it is re-invoked
/// many times with perturbed parameters.
pub fn grad_check(
    store: &mut ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let eval = |store: &ParamStore| -> Result<f32, TensorError> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    store.zero_grads();
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f32>> = store.ids().map(|id| store.grad(id).to_vec()).collect();

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_err: 0.0,
        checked: 0,
        worst: None,
        tol: cfg.tol,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.value(*id).numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords).into_vec()
        };
        for c in coords {
            let x0 = store.value(*id).data()[c];
            let h = cfg.h * x0.abs().max(1.0);
            store.value_mut(*id).data_mut()[c] = x0 + h;
            let lp = eval(store)?;
            store.value_mut(*id).data_mut()[c] = x0 - h;
            let lm = eval(store)?;
            store.value_mut(*id).data_mut()[c] = x0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pi][c];
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            report.checked += 1;
            if err > report.max_err {
                report.max_err = err;
                report.worst = Some(WorstCoord {
                    param: store.name(*id).to_string(),
                    coord: c,
                    analytic: a,
                    numeric,
                    err,
                });
            }
        }
    }
    Ok(report)
}
