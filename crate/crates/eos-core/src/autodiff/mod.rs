//! Reverse-mode automatic differentiation over small dense tensor programs.
//!
//! The tape is eager: building an op computes its value immediately and
//! records enough structure to emit vector-Jacobian products later. The
//! backward pass *builds new tape nodes* instead of accumulating raw
//! buffers, which makes gradients themselves differentiable; exact
//! Hessian-vector products fall out by differentiating the scalar g(θ)ᵀv a
//! second time.

pub mod kernels;
mod tape;

#[cfg(test)]
mod tests;

pub use tape::{LossGraph, NodeId, Tape};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("`{op}` expects a scalar output, got shape {shape:?}")]
    NonScalarOutput { op: &'static str, shape: Vec<usize> },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

/// Dense row-major tensor of 32-bit reals. Immutable after construction, so
/// clones are cheap and values can be shared across threads and tape nodes.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} data elements",
            shape,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; n]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same underlying buffer under a new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named parameter segment inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed ordering of parameter segments; shared by every [`ParamVector`]
/// belonging to the same network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new(named_shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut segments = Vec::with_capacity(named_shapes.len());
        let mut offset = 0;
        for (name, shape) in named_shapes {
            let len: usize = shape.iter().product();
            segments.push(Segment { name: name.to_string(), offset, shape: shape.clone() });
            offset += len;
        }
        Layout { segments, total: offset }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total
    }
}

/// Flat view of all network parameters θ: the coordinate system shared by
/// gradients, HVPs and eigenvector estimates.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f32>) -> Result<Self, AdError> {
        if values.len() != layout.total_len() {
            return Err(AdError::LayoutMismatch(format!(
                "expected {} values, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        ParamVector { layout, values: vec![0.0; n] }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    /// Per-segment tensors; `flatten`/`unflatten` round-trip bit-exactly
    /// because segments are contiguous, ordered slices of the flat array.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .segments()
            .iter()
            .map(|seg| {
                Tensor::new(seg.shape.clone(), self.values[seg.offset..seg.offset + seg.len()].to_vec())
            })
            .collect()
    }

    pub fn from_tensors(layout: Arc<Layout>, tensors: &[Tensor]) -> Result<Self, AdError> {
        if tensors.len() != layout.segments().len() {
            return Err(AdError::LayoutMismatch(format!(
                "expected {} segments, got {}",
                layout.segments().len(),
                tensors.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total_len());
        for (seg, t) in layout.segments().iter().zip(tensors) {
            if t.numel() != seg.len() {
                return Err(AdError::LayoutMismatch(format!(
                    "segment `{}` expects {} values, got {}",
                    seg.name,
                    seg.len(),
                    t.numel()
                )));
            }
            values.extend_from_slice(t.data());
        }
        ParamVector::new(layout, values)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn axpy(&mut self, alpha: f32, other: &ParamVector) {
        for (v, &o) in self.values.iter_mut().zip(&other.values) {
            *v += alpha * o;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod param_tests {
    use super::*;

    fn demo_layout() -> Arc<Layout> {
        Arc::new(Layout::new(&[("w", vec![2, 3]), ("b", vec![3])]))
    }

    #[test]
    fn layout_offsets_and_total() {
        let l = demo_layout();
        assert_eq!(l.total_len(), 9);
        assert_eq!(l.segments()[1].offset, 6);
    }

    #[test]
    fn unflatten_flatten_roundtrip() {
        let l = demo_layout();
        let p = ParamVector::new(l.clone(), (0..9).map(|i| i as f32 * 0.5).collect()).unwrap();
        let tensors = p.unflatten();
        let back = ParamVector::from_tensors(l, &tensors).unwrap();
        assert_eq!(back.values(), p.values());
    }

    #[test]
    fn layout_mismatch_rejected() {
        let l = demo_layout();
        assert!(ParamVector::new(l, vec![0.0; 4]).is_err());
    }
}
