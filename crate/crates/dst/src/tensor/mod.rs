//! Dense tensors and a reverse-mode autodiff graph.
//!
//! Values are stored row-major with no strided views; every op materializes
//! its output. The graph is a Wengert list: ops append nodes, parents always
//! precede children, and `backward` walks the list in reverse. Two precisions
//! are supported through [`Real`]: `f64` for gradient checking and tests,
//! `f32` for training (matching the checkpoint format).

mod conv;
mod gradcheck;
mod graph;
mod ops;
mod params;

pub use conv::{Conv2dGeo, Deconv2dGeo, Padding};
pub use gradcheck::{grad_check, standard_op_checks, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use params::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, ParamEntry, ParamId, ParamStore,
};

use std::fmt;

/// Numeric scalar for tensor data: `f64` in test mode, `f32` in train mode.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

/// Row-major dense tensor. `data.len()` always equals the shape product.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Geometry {
                op: "tensor",
                msg: format!(
                    "shape {} implies {} elements, data has {}",
                    fmt_shape(&shape),
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    dims.join("x")
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("geometry error in {op}: {msg}")]
    Geometry { op: &'static str, msg: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("gradient check refused: {0}")]
    Nondeterministic(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_disagreement() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(t, Err(TensorError::Geometry { .. })));
    }

    #[test]
    fn tensor_shape_product_matches_len() {
        let t = Tensor::<f64>::zeros(vec![4, 5, 6]);
        assert_eq!(t.numel(), 120);
        assert_eq!(t.shape(), &[4, 5, 6]);
    }

    #[test]
    fn shape_formatting() {
        assert_eq!(fmt_shape(&[150, 96, 2]), "150x96x2");
        assert_eq!(fmt_shape(&[1]), "1");
    }
}
