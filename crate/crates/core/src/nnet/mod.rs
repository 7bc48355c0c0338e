//! Toy convolutional classifiers with hand-written backpropagation.
//!
//! Two model kinds share one trunk of `conv -> ReLU -> max-pool` blocks:
//!
//! * the patch classifier: trunk, global average pooling, fully connected
//!   head with five outputs (NM, BM, BC, MM, MC);
//! * the whole-image classifier: the patch trunk, one convolutional residual
//!   block, global average pooling and a fresh binary head.
//!
//! Parameters live in a flat [`ParamVector`] so that federated aggregation
//! is plain vector arithmetic.

mod checkpoint;
mod model;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{forward, loss_and_grad, predict_proba, probabilities};

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    PatchClassifier,
    WholeImageClassifier,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::PatchClassifier => "patch_classifier",
            ModelKind::WholeImageClassifier => "whole_image_classifier",
        })
    }
}

/// `channels` output maps, `kernel`x`kernel` same-padded convolution, then
/// ReLU and non-overlapping `pool`x`pool` max-pooling (1 disables pooling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub conv_blocks: Vec<ConvBlock>,
    /// Width of the residual block (whole-image model only).
    pub residual_channels: Option<usize>,
    pub head_hidden: Vec<usize>,
    pub output_size: usize,
    /// Number of leading tensors excluded from training.
    pub frozen_prefix: usize,
}

pub const PATCH_CLASSES: usize = 5;
const RESIDUAL_KERNEL: usize = 3;

impl ModelSpec {
    /// Two conv blocks (8 then 16 channels, 3x3, 2x2 pool) and a linear head.
    pub fn patch_classifier() -> Self {
        ModelSpec {
            kind: ModelKind::PatchClassifier,
            conv_blocks: vec![
                ConvBlock { channels: 8, kernel: 3, pool: 2 },
                ConvBlock { channels: 16, kernel: 3, pool: 2 },
            ],
            residual_channels: None,
            head_hidden: Vec::new(),
            output_size: PATCH_CLASSES,
            frozen_prefix: 0,
        }
    }

    pub fn input_channels(&self) -> usize {
        1
    }

    pub fn trunk_channels(&self) -> usize {
        self.conv_blocks.last().map_or(self.input_channels(), |b| b.channels)
    }

    pub fn layer_count(&self) -> usize {
        self.conv_blocks.len()
            + if self.residual_channels.is_some() { 2 } else { 0 }
            + self.head_hidden.len()
            + 1
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layer_count()
    }

    /// Names and shapes of every tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels();
        for (i, b) in self.conv_blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![b.channels, cin, b.kernel, b.kernel]));
            out.push((format!("conv{i}.bias"), vec![b.channels]));
            cin = b.channels;
        }
        if let Some(c) = self.residual_channels {
            for part in ["a", "b"] {
                out.push((format!("res.conv_{part}.weight"), vec![c, c, RESIDUAL_KERNEL, RESIDUAL_KERNEL]));
                out.push((format!("res.conv_{part}.bias"), vec![c]));
            }
        }
        let mut fan_in = cin;
        for (j, &h) in self.head_hidden.iter().enumerate() {
            out.push((format!("head.fc{j}.weight"), vec![h, fan_in]));
            out.push((format!("head.fc{j}.bias"), vec![h]));
            fan_in = h;
        }
        out.push(("head.out.weight".into(), vec![self.output_size, fan_in]));
        out.push(("head.out.bias".into(), vec![self.output_size]));
        out
    }

    pub fn layout(&self) -> Layout {
        Layout::from_shapes(self.tensor_shapes())
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidSpec(m));
        match self.kind {
            ModelKind::PatchClassifier => {
                if self.output_size != PATCH_CLASSES {
                    return bad(format!("patch classifier needs {PATCH_CLASSES} outputs, got {}", self.output_size));
                }
                if self.residual_channels.is_some() {
                    return bad("patch classifier has no residual block".into());
                }
            }
            ModelKind::WholeImageClassifier => {
                if self.output_size != 1 {
                    return bad(format!("whole-image classifier needs 1 output, got {}", self.output_size));
                }
                match self.residual_channels {
                    Some(c) if c == self.trunk_channels() => {}
                    Some(c) => {
                        return bad(format!(
                            "residual width {c} must equal trunk width {}",
                            self.trunk_channels()
                        ))
                    }
                    None => return bad("whole-image classifier needs a residual block".into()),
                }
            }
        }
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        for b in &self.conv_blocks {
            if b.channels == 0 || b.kernel % 2 == 0 || b.pool == 0 {
                return bad(format!("conv block {b:?}: channels > 0, odd kernel, pool >= 1 required"));
            }
        }
        if self.head_hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.frozen_prefix >= self.tensor_count() {
            return bad(format!(
                "frozen_prefix {} must be below tensor count {}",
                self.frozen_prefix,
                self.tensor_count()
            ));
        }
        Ok(())
    }

    /// Spatial downsampling factor of the trunk.
    pub fn stride(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.pool).product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub slots: Vec<TensorSlot>,
}

impl Layout {
    pub fn from_shapes(shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let slots = shapes
            .into_iter()
            .map(|(name, shape)| {
                let slot = TensorSlot { name, shape, offset };
                offset += slot.len();
                slot
            })
            .collect();
        Layout { slots }
    }

    pub fn total_len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    /// Offsets are contiguous, non-overlapping and cover the whole array.
    pub fn is_consistent(&self) -> bool {
        let mut expected = 0;
        for s in &self.slots {
            if s.offset != expected {
                return false;
            }
            expected += s.len();
        }
        true
    }

    pub fn slot(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Index of the first element that is not in the first `n` tensors.
    pub fn prefix_len(&self, n: usize) -> usize {
        self.slots.get(n).map_or(self.total_len(), |s| s.offset)
    }
}

/// Flat model parameters with their tensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self, NnError> {
        if !layout.is_consistent() || layout.total_len() != values.len() {
            return Err(NnError::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total_len()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> Result<(), NnError> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(NnError::LayoutMismatch(format!(
                "layouts differ ({} vs {} values)",
                self.len(),
                other.len()
            )))
        }
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> Result<(), NnError> {
        let expected = spec.tensor_shapes();
        let ok = expected.len() == self.layout.slots.len()
            && expected
                .iter()
                .zip(&self.layout.slots)
                .all(|((n, s), slot)| *n == slot.name && *s == slot.shape);
        if ok {
            Ok(())
        } else {
            Err(NnError::LayoutMismatch(format!("parameters do not fit a {} spec", spec.kind)))
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<(), NnError> {
        self.same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, NnError> {
        self.same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Inputs (N x H x W, row-major) and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub height: usize,
    pub width: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(height: usize, width: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        if labels.is_empty() {
            return Err(NnError::InvalidBatch("batch is empty".into()));
        }
        if inputs.len() != labels.len() * height * width {
            return Err(NnError::InvalidBatch(format!(
                "{} input values for {} samples of {height}x{width}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            height,
            width,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Copies the listed samples, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Batch {
            height: self.height,
            width: self.width,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates batches with equal sample shape.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Batch>) -> Result<Batch, NnError> {
        let mut it = parts.into_iter();
        let first = it
            .next()
            .ok_or_else(|| NnError::InvalidBatch("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for b in it {
            if (b.height, b.width) != (out.height, out.width) {
                return Err(NnError::InvalidBatch("sample shapes differ".into()));
            }
            out.inputs.extend_from_slice(&b.inputs);
            out.labels.extend_from_slice(&b.labels);
        }
        Ok(out)
    }

    pub(crate) fn check_for(&self, spec: &ModelSpec) -> Result<(), NnError> {
        if self.is_empty() {
            return Err(NnError::InvalidBatch("batch is empty".into()));
        }
        let classes = spec.output_size.max(2);
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::InvalidBatch(format!("label {bad} outside 0..{classes}")));
        }
        let stride = spec.stride();
        if self.height < stride || self.width < stride {
            return Err(NnError::InvalidBatch(format!(
                "{}x{} inputs are smaller than the trunk stride {stride}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization with zero biases; deterministic per
/// `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector, NnError> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let mut params = ParamVector::zeros(layout.clone());
    for (t, slot) in layout.slots.iter().enumerate() {
        if slot.shape.len() == 1 {
            continue;
        }
        let fan_in: usize = slot.shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(&[seed, rng::label_key("init"), t as u64]);
        for v in &mut params.values[slot.range()] {
            *v = r.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Width options for the whole-image head.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageHeadConfig {
    pub residual_channels: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ImageHeadConfig {
    fn default() -> Self {
        ImageHeadConfig {
            residual_channels: 16,
            head_hidden: vec![16],
        }
    }
}

/// Builds the whole-image model from a trained patch model.
///
/// Trunk tensors are copied verbatim; the residual block and binary head are
/// freshly initialized from `seed`. Every trunk tensor except the final conv
/// block is frozen.
pub fn derive_image_model(
    patch_spec: &ModelSpec,
    patch_params: &ParamVector,
    head: &ImageHeadConfig,
    seed: u64,
) -> Result<(ModelSpec, ParamVector), NnError> {
    if patch_spec.kind != ModelKind::PatchClassifier {
        return Err(NnError::InvalidSpec("source model must be a patch classifier".into()));
    }
    patch_spec.validate()?;
    patch_params.matches_spec(patch_spec)?;
    let image_spec = ModelSpec {
        kind: ModelKind::WholeImageClassifier,
        conv_blocks: patch_spec.conv_blocks.clone(),
        residual_channels: Some(head.residual_channels),
        head_hidden: head.head_hidden.clone(),
        output_size: 1,
        frozen_prefix: 2 * (patch_spec.conv_blocks.len() - 1),
    };
    image_spec.validate()?;
    let mut params = init_params(&image_spec, seed)?;
    let trunk_tensors = 2 * patch_spec.conv_blocks.len();
    let trunk_len = params.layout.prefix_len(trunk_tensors);
    debug_assert_eq!(trunk_len, patch_params.layout.prefix_len(trunk_tensors));
    params.values[..trunk_len].copy_from_slice(&patch_params.values[..trunk_len]);
    Ok((image_spec, params))
}

/// `params - lr * grad`
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector, NnError> {
    let mut out = params.clone();
    out.axpy(-lr, grad)?;
    Ok(out)
}
