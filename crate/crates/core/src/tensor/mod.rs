//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The design is a classic Wengert tape: [`Graph`] records ops during the
//! forward pass and replays them in exact reverse order for gradients.
//! Values are 32-bit floats in row-major order. Gradient accumulation
//! order is fixed by the reverse topological walk, so backward is
//! bit-deterministic for a given graph.

mod gradcheck;
mod graph;
mod kernels;
mod optim;

pub use gradcheck::{grad_check, spray, GradCheckConfig, GradCheckReport, WorstCoord};
pub use graph::{Activation, Graph, NodeId, NormPhase, Reduction};
pub use optim::{Adam, AdamConfig, Param, ParamId, ParamStore};

use thiserror::Error;

/// tanh-approximation constant for GELU: sqrt(2/pi).
pub const GELU_C: f32 = 0.797_884_56;
/// Cubic coefficient in the GELU tanh approximation.
pub const GELU_C3: f32 = 0.044_715;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: model dim {dim} not divisible by {heads} heads")]
    HeadSplit { op: &'static str, dim: usize, heads: usize },
    #[error("{0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Samples i.i.d. N(0, std^2) entries.
    pub fn randn(shape: &[usize], std: f32, rng: &mut crate::rng::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples i.i.d. U(lo, hi) entries.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut crate::rng::Rng) -> Self {
        use rand::Rng as _;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeData {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}
