//! Hard-parameter-sharing models: a shared encoder producing a
//! representation `Z` of shape `B×C×H'×W'`, plus one small head and one loss
//! per task.
//!
//! Convolution is implemented as patch extraction (`im2col` gather) followed
//! by a matrix product, so the whole forward pass stays inside the tape's
//! operation set and is differentiable to second order. Models are immutable
//! during forward; training steps build updated copies.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layout::IndexMap;
use crate::scalar::Real;
use crate::tape::{NodeId, TapeBase};
use crate::tensor::{fmt_shape, TensorBase};

/// One encoder layer. Convolutions are fixed at 3x3 stride 1; pooling is
/// 2x2 stride 2 average.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderLayer {
    Conv3x3 { out_channels: usize, pad: usize },
    Relu,
    AvgPool2,
    Flatten,
    Linear { out: usize },
}

/// Task head: an optional hidden linear+ReLU layer, then a linear output
/// layer with `out` units, applied to the flattened representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub hidden: Option<usize>,
    pub out: usize,
}

/// Per-task loss function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error over batch and output elements.
    SquaredError,
    /// Softmax cross-entropy against integer class targets.
    CrossEntropy,
    /// Mean absolute error over batch and output elements.
    AbsoluteError,
}

/// Loss kind plus the optional `log(L + 1e-8)` loss transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDescriptor {
    pub loss: LossKind,
    pub log_transform: bool,
}

pub const LOG_TRANSFORM_EPSILON: f64 = 1e-8;

/// Architecture description a model is initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Input shape per sample: channels, height, width.
    pub input: (usize, usize, usize),
    pub encoder: Vec<EncoderLayer>,
    pub heads: Vec<HeadSpec>,
    pub tasks: Vec<TaskDescriptor>,
}

impl ModelSpec {
    /// Desk-scale default: two 3x3 conv layers with ReLU and one 2x2 average
    /// pool, mapping a 1x8x8 input to an 8x4x4 representation.
    pub fn default_conv(heads: Vec<HeadSpec>, tasks: Vec<TaskDescriptor>) -> Self {
        ModelSpec {
            input: (1, 8, 8),
            encoder: vec![
                EncoderLayer::Conv3x3 { out_channels: 8, pad: 1 },
                EncoderLayer::Relu,
                EncoderLayer::AvgPool2,
                EncoderLayer::Conv3x3 { out_channels: 8, pad: 1 },
                EncoderLayer::Relu,
            ],
            heads,
            tasks,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<F> {
    pub name: String,
    pub value: TensorBase<F>,
}

/// Hard-parameter-sharing model instance: spec plus concrete parameters.
#[derive(Debug, Clone)]
pub struct ModelBase<F> {
    pub spec: ModelSpec,
    /// Encoder parameters, in encoder layer order.
    pub shared: Vec<NamedParam<F>>,
    /// Per-task head parameters, in head layer order.
    pub per_task: Vec<Vec<NamedParam<F>>>,
    /// Representation shape per sample (C, H', W').
    pub rep_shape: (usize, usize, usize),
}

/// A minibatch: inputs, one target tensor per task, and stable sample ids
/// (used by the alignment regularizer's per-sample anchors and by shuffling).
#[derive(Debug, Clone)]
pub struct BatchBase<F> {
    pub inputs: TensorBase<F>,
    pub targets: Vec<TensorBase<F>>,
    pub sample_ids: Vec<usize>,
}

impl<F: Real> BatchBase<F> {
    pub fn new(
        inputs: TensorBase<F>,
        targets: Vec<TensorBase<F>>,
        sample_ids: Vec<usize>,
    ) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::shape(
                "batch::new",
                format!("inputs must be B x C x H x W, got {}", fmt_shape(inputs.shape())),
            ));
        }
        let b = inputs.shape()[0];
        if b == 0 {
            return Err(Error::invalid("batch::new", "empty batch"));
        }
        for (t, target) in targets.iter().enumerate() {
            if target.shape().first().copied() != Some(b) {
                return Err(Error::shape(
                    "batch::new",
                    format!(
                        "task {} target {} does not share leading dimension {}",
                        t,
                        fmt_shape(target.shape()),
                        b
                    ),
                ));
            }
        }
        if sample_ids.len() != b {
            return Err(Error::invalid(
                "batch::new",
                format!("{} sample ids for batch of {}", sample_ids.len(), b),
            ));
        }
        Ok(BatchBase {
            inputs,
            targets,
            sample_ids,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Everything a forward pass leaves on the tape, with parameter nodes
/// aligned to the model's parameter lists so gradients can be mapped back
/// by name.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: NodeId,
    /// Encoder output `Z`, shape B x C x H' x W'.
    pub representation: NodeId,
    /// Per-task prediction nodes, shape B x out_t.
    pub predictions: Vec<NodeId>,
    pub shared_nodes: Vec<NodeId>,
    pub task_nodes: Vec<Vec<NodeId>>,
}

enum Activation {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

fn xavier_uniform<F: Real>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> TensorBase<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64_lit((2.0 * rng.random::<f64>() - 1.0) * a))
        .collect();
    TensorBase::new(shape, data).expect("finite init")
}

impl<F: Real> ModelBase<F> {
    /// Initializes parameters with seeded uniform draws in `[-a, a]`,
    /// `a = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.heads.len() != spec.tasks.len() {
            return Err(Error::invalid(
                "model::init",
                format!("{} heads for {} tasks", spec.heads.len(), spec.tasks.len()),
            ));
        }
        if spec.heads.is_empty() {
            return Err(Error::invalid("model::init", "at least one task required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shared = Vec::new();
        let (c_in, h_in, w_in) = spec.input;
        if c_in == 0 || h_in == 0 || w_in == 0 {
            return Err(Error::invalid("model::init", "zero input dimension"));
        }
        let mut state = Activation::Spatial { c: c_in, h: h_in, w: w_in };
        for (i, layer) in spec.encoder.iter().enumerate() {
            match layer {
                EncoderLayer::Conv3x3 { out_channels, pad } => {
                    let Activation::Spatial { c, h, w } = state else {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: conv requires a spatial input", i),
                        ));
                    };
                    if h + 2 * pad < 3 || w + 2 * pad < 3 {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: input too small for a 3x3 window", i),
                        ));
                    }
                    let fan_in = c * 9;
                    let fan_out = out_channels * 9;
                    shared.push(NamedParam {
                        name: format!("shared.conv{}.weight", i),
                        value: xavier_uniform(vec![c * 9, *out_channels], fan_in, fan_out, &mut rng),
                    });
                    shared.push(NamedParam {
                        name: format!("shared.conv{}.bias", i),
                        value: TensorBase::zeros(vec![*out_channels]),
                    });
                    state = Activation::Spatial {
                        c: *out_channels,
                        h: h + 2 * pad - 2,
                        w: w + 2 * pad - 2,
                    };
                }
                EncoderLayer::Relu => {}
                EncoderLayer::AvgPool2 => {
                    let Activation::Spatial { c, h, w } = state else {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: pooling requires a spatial input", i),
                        ));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: 2x2 pool needs even dims, got {}x{}", i, h, w),
                        ));
                    }
                    state = Activation::Spatial { c, h: h / 2, w: w / 2 };
                }
                EncoderLayer::Flatten => {
                    let Activation::Spatial { c, h, w } = state else {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: flatten requires a spatial input", i),
                        ));
                    };
                    state = Activation::Flat { d: c * h * w };
                }
                EncoderLayer::Linear { out } => {
                    let Activation::Flat { d } = state else {
                        return Err(Error::invalid(
                            "model::init",
                            format!("encoder layer {}: linear requires a flattened input", i),
                        ));
                    };
                    shared.push(NamedParam {
                        name: format!("shared.linear{}.weight", i),
                        value: xavier_uniform(vec![d, *out], d, *out, &mut rng),
                    });
                    shared.push(NamedParam {
                        name: format!("shared.linear{}.bias", i),
                        value: TensorBase::zeros(vec![*out]),
                    });
                    state = Activation::Flat { d: *out };
                }
            }
        }
        let rep_shape = match state {
            Activation::Spatial { c, h, w } => (c, h, w),
            Activation::Flat { d } => (d, 1, 1),
        };
        let rep_dim = rep_shape.0 * rep_shape.1 * rep_shape.2;
        let mut per_task = Vec::with_capacity(spec.heads.len());
        for (t, head) in spec.heads.iter().enumerate() {
            if head.out == 0 {
                return Err(Error::invalid("model::init", format!("task {}: zero outputs", t)));
            }
            let mut params = Vec::new();
            let mut d = rep_dim;
            if let Some(hidden) = head.hidden {
                if hidden == 0 {
                    return Err(Error::invalid(
                        "model::init",
                        format!("task {}: zero hidden units", t),
                    ));
                }
                params.push(NamedParam {
                    name: format!("task{}.linear0.weight", t),
                    value: xavier_uniform(vec![d, hidden], d, hidden, &mut rng),
                });
                params.push(NamedParam {
                    name: format!("task{}.linear0.bias", t),
                    value: TensorBase::zeros(vec![hidden]),
                });
                d = hidden;
            }
            params.push(NamedParam {
                name: format!("task{}.linear1.weight", t),
                value: xavier_uniform(vec![d, head.out], d, head.out, &mut rng),
            });
            params.push(NamedParam {
                name: format!("task{}.linear1.bias", t),
                value: TensorBase::zeros(vec![head.out]),
            });
            per_task.push(params);
        }
        Ok(ModelBase {
            spec,
            shared,
            per_task,
            rep_shape,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    /// All parameters in canonical order: encoder first, then task heads.
    pub fn named_params(&self) -> Vec<&NamedParam<F>> {
        let mut out: Vec<&NamedParam<F>> = self.shared.iter().collect();
        for params in &self.per_task {
            out.extend(params.iter());
        }
        out
    }

    /// Runs the encoder and all heads, leaving the graph on `tape`.
    pub fn forward(&self, batch: &BatchBase<F>, tape: &mut TapeBase<F>) -> Result<ForwardPass> {
        let (c_in, h_in, w_in) = self.spec.input;
        let expect = [batch.batch_size(), c_in, h_in, w_in];
        if batch.inputs.shape() != expect {
            return Err(Error::shape(
                "model::forward",
                format!(
                    "batch inputs {} do not match encoder input {}",
                    fmt_shape(batch.inputs.shape()),
                    fmt_shape(&expect)
                ),
            ));
        }
        let b = batch.batch_size();
        let input = tape.leaf(batch.inputs.clone())?;
        let mut shared_nodes = Vec::with_capacity(self.shared.len());
        let mut x = input;
        let mut state = Activation::Spatial { c: c_in, h: h_in, w: w_in };
        let mut param_iter = self.shared.iter();
        let mut next_param = |tape: &mut TapeBase<F>, nodes: &mut Vec<NodeId>| -> Result<NodeId> {
            let param = param_iter.next().expect("parameter list matches spec walk");
            let node = tape.leaf(param.value.clone())?;
            nodes.push(node);
            Ok(node)
        };
        for layer in &self.spec.encoder {
            match layer {
                EncoderLayer::Conv3x3 { out_channels, pad } => {
                    let Activation::Spatial { c, h, w } = state else {
                        unreachable!("validated at init");
                    };
                    let weight = next_param(tape, &mut shared_nodes)?;
                    let bias = next_param(tape, &mut shared_nodes)?;
                    let patches_map = Arc::new(IndexMap::im2col(b, c, h, w, *pad)?);
                    let (oh, ow) = (h + 2 * pad - 2, w + 2 * pad - 2);
                    let patches = tape.gather(x, patches_map)?;
                    let cols = tape.matmul(patches, weight)?;
                    let bias_map = Arc::new(IndexMap::row_broadcast(b * oh * ow, *out_channels)?);
                    let bias_rows = tape.gather(bias, bias_map)?;
                    let biased = tape.add(cols, bias_rows)?;
                    let to_nchw = Arc::new(IndexMap::rows_to_nchw(b, *out_channels, oh, ow)?);
                    x = tape.gather(biased, to_nchw)?;
                    state = Activation::Spatial { c: *out_channels, h: oh, w: ow };
                }
                EncoderLayer::Relu => {
                    x = tape.relu(x)?;
                }
                EncoderLayer::AvgPool2 => {
                    let Activation::Spatial { c, h, w } = state else {
                        unreachable!("validated at init");
                    };
                    let mut acc: Option<NodeId> = None;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let tap = Arc::new(IndexMap::pool_tap(b, c, h, w, dy, dx)?);
                        let tapped = tape.gather(x, tap)?;
                        acc = Some(match acc {
                            Some(prev) => tape.add(prev, tapped)?,
                            None => tapped,
                        });
                    }
                    x = tape.mul_scalar(acc.expect("four taps"), F::from_f64_lit(0.25))?;
                    state = Activation::Spatial { c, h: h / 2, w: w / 2 };
                }
                EncoderLayer::Flatten => {
                    let Activation::Spatial { c, h, w } = state else {
                        unreachable!("validated at init");
                    };
                    x = tape.reshape(x, vec![b, c * h * w])?;
                    state = Activation::Flat { d: c * h * w };
                }
                EncoderLayer::Linear { out } => {
                    let weight = next_param(tape, &mut shared_nodes)?;
                    let bias = next_param(tape, &mut shared_nodes)?;
                    let prod = tape.matmul(x, weight)?;
                    let bias_map = Arc::new(IndexMap::row_broadcast(b, *out)?);
                    let bias_rows = tape.gather(bias, bias_map)?;
                    x = tape.add(prod, bias_rows)?;
                    state = Activation::Flat { d: *out };
                }
            }
        }
        let representation = match state {
            Activation::Spatial { .. } => x,
            Activation::Flat { d } => tape.reshape(x, vec![b, d, 1, 1])?,
        };
        let (rc, rh, rw) = self.rep_shape;
        let rep_flat = tape.reshape(representation, vec![b, rc * rh * rw])?;
        let mut predictions = Vec::with_capacity(self.per_task.len());
        let mut task_nodes = Vec::with_capacity(self.per_task.len());
        for (head, params) in self.spec.heads.iter().zip(&self.per_task) {
            let mut nodes = Vec::with_capacity(params.len());
            let mut h = rep_flat;
            let mut iter = params.iter();
            let mut take = |tape: &mut TapeBase<F>, nodes: &mut Vec<NodeId>| -> Result<NodeId> {
                let param = iter.next().expect("head parameter list matches spec");
                let node = tape.leaf(param.value.clone())?;
                nodes.push(node);
                Ok(node)
            };
            if head.hidden.is_some() {
                let weight = take(tape, &mut nodes)?;
                let bias = take(tape, &mut nodes)?;
                let prod = tape.matmul(h, weight)?;
                let cols = tape.shape(prod)[1];
                let bias_map = Arc::new(IndexMap::row_broadcast(b, cols)?);
                let bias_rows = tape.gather(bias, bias_map)?;
                let pre = tape.add(prod, bias_rows)?;
                h = tape.relu(pre)?;
            }
            let weight = take(tape, &mut nodes)?;
            let bias = take(tape, &mut nodes)?;
            let prod = tape.matmul(h, weight)?;
            let bias_map = Arc::new(IndexMap::row_broadcast(b, head.out)?);
            let bias_rows = tape.gather(bias, bias_map)?;
            let pred = tape.add(prod, bias_rows)?;
            predictions.push(pred);
            task_nodes.push(nodes);
        }
        Ok(ForwardPass {
            input,
            representation,
            predictions,
            shared_nodes,
            task_nodes,
        })
    }
}

/// Log-softmax over the rows of a 2-D logits node, with a detached
/// per-row max shift for numerical stability (the shift's true Jacobian
/// contribution is identically zero).
pub fn log_softmax<F: Real>(tape: &mut TapeBase<F>, logits: NodeId) -> Result<NodeId> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "log_softmax",
            format!("expected B x K logits, got {}", fmt_shape(&shape)),
        ));
    }
    let (b, k) = (shape[0], shape[1]);
    let shift = tape.row_max_detached(logits)?;
    let centered = tape.sub(logits, shift)?;
    let exps = tape.exp(centered)?;
    let ones = tape.leaf(TensorBase::ones(vec![k, 1]))?;
    let row_sums = tape.matmul(exps, ones)?;
    let log_sums = tape.log(row_sums)?;
    let broadcast = Arc::new(IndexMap::col_broadcast(b, k)?);
    let log_sums_wide = tape.gather(log_sums, broadcast)?;
    tape.sub(centered, log_sums_wide)
}

/// Validates and extracts integer class indices from a `[B]` or `[B, 1]`
/// target tensor with `classes` classes.
pub fn class_indices<F: Real>(target: &TensorBase<F>, classes: usize) -> Result<Vec<usize>> {
    let ok_shape = target.rank() == 1 || (target.rank() == 2 && target.shape()[1] == 1);
    if !ok_shape {
        return Err(Error::shape(
            "class_indices",
            format!("targets must be B or B x 1, got {}", fmt_shape(target.shape())),
        ));
    }
    let mut picks = Vec::with_capacity(target.numel());
    for &v in target.data() {
        let as_f64 = v.to_f64_lossy();
        if as_f64.fract() != 0.0 || as_f64 < 0.0 {
            return Err(Error::invalid(
                "class_indices",
                format!("class target {} is not a non-negative integer", as_f64),
            ));
        }
        let idx = as_f64 as usize;
        if idx >= classes {
            return Err(Error::invalid(
                "class_indices",
                format!("class target {} out of range for {} classes", idx, classes),
            ));
        }
        picks.push(idx);
    }
    Ok(picks)
}

/// Builds one mean-reduced scalar loss node per task.
pub fn task_losses<F: Real>(
    tape: &mut TapeBase<F>,
    predictions: &[NodeId],
    batch: &BatchBase<F>,
    descriptors: &[TaskDescriptor],
) -> Result<Vec<NodeId>> {
    if predictions.len() != descriptors.len() || batch.targets.len() != descriptors.len() {
        return Err(Error::invalid(
            "task_losses",
            format!(
                "{} predictions, {} targets, {} descriptors",
                predictions.len(),
                batch.targets.len(),
                descriptors.len()
            ),
        ));
    }
    let mut losses = Vec::with_capacity(descriptors.len());
    for (t, descriptor) in descriptors.iter().enumerate() {
        let pred = predictions[t];
        let target = &batch.targets[t];
        let loss = match descriptor.loss {
            LossKind::SquaredError | LossKind::AbsoluteError => {
                let pred_shape = tape.shape(pred).to_vec();
                let target2d = if target.rank() == 1 {
                    target.reshape(vec![target.numel(), 1])?
                } else {
                    target.clone()
                };
                if target2d.shape() != pred_shape {
                    return Err(Error::shape(
                        "task_losses",
                        format!(
                            "task {}: prediction {} vs target {}",
                            t,
                            fmt_shape(&pred_shape),
                            fmt_shape(target2d.shape())
                        ),
                    ));
                }
                let y = tape.leaf(target2d)?;
                let diff = tape.sub(pred, y)?;
                let per_elem = match descriptor.loss {
                    LossKind::SquaredError => tape.mul(diff, diff)?,
                    _ => tape.abs(diff)?,
                };
                tape.mean(per_elem)?
            }
            LossKind::CrossEntropy => {
                let pred_shape = tape.shape(pred).to_vec();
                let (b, k) = (pred_shape[0], pred_shape[1]);
                if k < 2 {
                    return Err(Error::invalid(
                        "task_losses",
                        format!("task {}: cross-entropy needs at least 2 classes", t),
                    ));
                }
                let picks = class_indices(target, k)?;
                let logp = log_softmax(tape, pred)?;
                let pick_map = Arc::new(IndexMap::column_pick(b, k, &picks)?);
                let picked = tape.gather(logp, pick_map)?;
                let mean = tape.mean(picked)?;
                tape.neg(mean)?
            }
        };
        let loss = if descriptor.log_transform {
            let shifted = tape.add_scalar(loss, F::from_f64_lit(LOG_TRANSFORM_EPSILON))?;
            tape.log(shifted)?
        } else {
            loss
        };
        losses.push(loss);
    }
    Ok(losses)
}
