//! Layer graphs for the two backbones and their execution.
//!
//! A [`LayerGraph`] is a topologically ordered list of nodes with two
//! designated outputs: the scale head (`S` channels) and the landmark head
//! (`K` channels), both at stride 2. Convolutions are stored in inference
//! form, with batch-norm already folded in.

mod drnet;
mod hourglass;
mod registry;
pub mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use drnet::{build_drnet, DrNet};
pub use hourglass::{build_hourglass_light, HourglassLight};
pub use registry::{Backbone, BackboneRegistry, DEFAULT_BACKBONE};

use crate::error::{Error, Result};
use crate::scale::NUM_SCALES;
use crate::tensor::{self, BnParams, ConvParams, Tensor};

pub const INPUT_CHANNELS: usize = 3;
/// Input sides must be multiples of this.
pub const INPUT_ALIGN: usize = 8;
pub const TOTAL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_scales: usize,
    pub num_keypoints: usize,
    pub input_long_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_scales: NUM_SCALES,
            num_keypoints: 5,
            input_long_side: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::InvalidArgument("num_scales must be >= 1".into()));
        }
        if self.num_keypoints != 5 && self.num_keypoints != 19 {
            return Err(Error::InvalidArgument(format!(
                "num_keypoints must be 5 or 19, got {}",
                self.num_keypoints
            )));
        }
        if self.input_long_side == 0 || !self.input_long_side.is_multiple_of(INPUT_ALIGN) {
            return Err(Error::InvalidArgument(format!(
                "input_long_side must be a positive multiple of {INPUT_ALIGN}, got {}",
                self.input_long_side
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv {
        name: String,
        params: ConvParams,
        /// Whether a batch-norm layer was folded into this conv.
        normalized: bool,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Upsample2,
    /// Nearest upsampling of `inputs[0]` to the spatial size of `inputs[1]`.
    UpsampleLike,
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    name: String,
    config: ModelConfig,
    nodes: Vec<Node>,
    scale_head: usize,
    landmark_head: usize,
    total_stride: usize,
}

impl LayerGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn heads(&self) -> (usize, usize) {
        (self.scale_head, self.landmark_head)
    }

    pub fn total_stride(&self) -> usize {
        self.total_stride
    }

    /// Named convolutions in graph order.
    pub fn convs(&self) -> impl Iterator<Item = (&str, &ConvParams)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Conv { name, params, .. } => Some((name.as_str(), params)),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = (&str, &mut ConvParams, bool)> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.op {
            Op::Conv {
                name,
                params,
                normalized,
            } => Some((name.as_str(), params, *normalized)),
            _ => None,
        })
    }

    /// Convolutions outside the two heads.
    pub fn backbone_layer_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Conv { .. }))
            .filter(|n| n.id != self.scale_head && n.id != self.landmark_head)
            .count()
    }

    /// Fills every convolution with He-uniform weights; batch-normalized
    /// layers draw random statistics and fold them in. Head weights are
    /// drawn from ±0.01 and the scale head bias starts at a 1% face prior,
    /// so an untrained network proposes almost nothing.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scale_head, landmark_head) = (self.scale_head, self.landmark_head);
        for node in &mut self.nodes {
            let id = node.id;
            let Op::Conv {
                params, normalized, ..
            } = &mut node.op
            else {
                continue;
            };
            let (kh, kw) = params.kernel();
            let bound = if id == scale_head || id == landmark_head {
                0.01
            } else {
                (6.0 / (params.in_channels() * kh * kw) as f32).sqrt()
            };
            let weight: Vec<f32> = (0..params.weight().len())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let out = params.out_channels();
            let raw = ConvParams::new(
                out,
                params.in_channels(),
                (kh, kw),
                params.stride(),
                params.padding(),
                weight,
                None,
            )
            .expect("shape taken from an existing conv");
            *params = if *normalized {
                let bn = BnParams {
                    gamma: (0..out).map(|_| rng.gen_range(0.5..1.5)).collect(),
                    beta: (0..out).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                    running_mean: (0..out).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                    running_var: (0..out).map(|_| rng.gen_range(0.5..1.5)).collect(),
                    epsilon: 1e-5,
                };
                tensor::bn_fold(&raw, &bn).expect("bn sized to the conv")
            } else if params.bias().is_some() {
                let prior = if id == scale_head { (0.01f32 / 0.99).ln() } else { 0.0 };
                let bias = (0..out).map(|_| prior + rng.gen_range(-0.01..0.01)).collect();
                ConvParams::new(out, raw.in_channels(), (kh, kw), raw.stride(), raw.padding(), raw.weight().to_vec(), Some(bias))
                    .expect("shape taken from an existing conv")
            } else {
                raw
            };
        }
    }

    pub fn randomized(mut self, seed: u64) -> Self {
        self.randomize(seed);
        self
    }
}

/// Sum of all weight and bias elements.
pub fn count_params(graph: &LayerGraph) -> usize {
    graph.convs().map(|(_, p)| p.param_count()).sum()
}

/// Reusable per-call buffers.
#[derive(Debug, Default)]
pub struct Workspace {
    im2col: Vec<f32>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Runs the graph; returns `(scale_logits, landmark_logits)`.
pub fn forward(graph: &LayerGraph, image: &Tensor) -> Result<(Tensor, Tensor)> {
    forward_with(graph, image, &mut Workspace::new())
}

pub fn forward_with(
    graph: &LayerGraph,
    image: &Tensor,
    ws: &mut Workspace,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = image.dims();
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
    }
    if h % INPUT_ALIGN != 0 || w % INPUT_ALIGN != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not a multiple of {INPUT_ALIGN} on both sides"
        )));
    }

    let n = graph.nodes.len();
    // index of the last node that reads each output; heads are kept to the end
    let mut last_use = vec![0usize; n];
    for node in &graph.nodes {
        for &i in &node.inputs {
            last_use[i] = last_use[i].max(node.id);
        }
    }
    last_use[graph.scale_head] = usize::MAX;
    last_use[graph.landmark_head] = usize::MAX;

    let mut values: Vec<Option<Tensor>> = vec![None; n];
    for node in &graph.nodes {
        // takes the input by value when this node is its last reader
        let take = |values: &mut [Option<Tensor>], i: usize| -> Result<Tensor> {
            if last_use[i] == node.id {
                values[i]
                    .take()
                    .ok_or_else(|| Error::Shape(format!("node {i} consumed twice")))
            } else {
                get(values, i).cloned()
            }
        };
        let out = match &node.op {
            Op::Input => image.clone(),
            Op::Conv { params, .. } => {
                tensor::conv2d_with_scratch(get(&values, node.inputs[0])?, params, &mut ws.im2col)?
            }
            Op::Relu => {
                let mut t = take(&mut values, node.inputs[0])?;
                tensor::relu_in_place(&mut t);
                t
            }
            Op::MaxPool { size, stride } => {
                tensor::maxpool2d(get(&values, node.inputs[0])?, *size, *stride)?
            }
            Op::Upsample2 => tensor::upsample_nearest2(get(&values, node.inputs[0])?),
            Op::UpsampleLike => {
                let like = get(&values, node.inputs[1])?;
                let (lh, lw) = (like.height(), like.width());
                let src = get(&values, node.inputs[0])?;
                if src.height() * 2 + 1 < lh || src.width() * 2 + 1 < lw {
                    return Err(Error::Shape(format!(
                        "cannot upsample {:?} to {lh}x{lw}",
                        src.dims()
                    )));
                }
                tensor::upsample_nearest_to(src, lh, lw)
            }
            Op::Add => {
                let mut a = take(&mut values, node.inputs[0])?;
                tensor::add_in_place(&mut a, get(&values, node.inputs[1])?)?;
                a
            }
            Op::Concat => {
                tensor::concat_channels(get(&values, node.inputs[0])?, get(&values, node.inputs[1])?)?
            }
        };
        values[node.id] = Some(out);
        for &i in &node.inputs {
            if last_use[i] == node.id {
                values[i] = None;
            }
        }
    }
    let scale = values[graph.scale_head].take().expect("scale head computed");
    let landmarks = values[graph.landmark_head].take().expect("landmark head computed");
    Ok((scale, landmarks))
}

fn get(values: &[Option<Tensor>], i: usize) -> Result<&Tensor> {
    values[i]
        .as_ref()
        .ok_or_else(|| Error::Shape(format!("node {i} read before it was computed")))
}

/// Incremental graph construction with channel bookkeeping.
pub(crate) struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
}

impl GraphBuilder {
    pub fn new() -> (Self, usize) {
        let b = Self {
            nodes: vec![Node {
                id: 0,
                op: Op::Input,
                inputs: vec![],
            }],
            channels: vec![INPUT_CHANNELS],
        };
        (b, 0)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, channels: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { id, op, inputs });
        self.channels.push(channels);
        id
    }

    pub fn channels(&self, id: usize) -> usize {
        self.channels[id]
    }

    /// `k × k` convolution with "same" padding.
    pub fn conv(&mut self, name: &str, x: usize, out: usize, k: usize, stride: usize, normalized: bool, bias: bool) -> usize {
        let params = ConvParams::zeros(out, self.channels[x], k, stride, normalized || bias)
            .expect("builder uses supported kernel sizes");
        self.push(
            Op::Conv {
                name: name.to_string(),
                params,
                normalized,
            },
            vec![x],
            out,
        )
    }

    /// Conv + folded batch-norm + ReLU.
    pub fn conv_bn_relu(&mut self, name: &str, x: usize, out: usize, k: usize, stride: usize) -> usize {
        let c = self.conv(name, x, out, k, stride, true, false);
        self.relu(c)
    }

    pub fn relu(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::Relu, vec![x], c)
    }

    pub fn maxpool(&mut self, x: usize, size: usize, stride: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::MaxPool { size, stride }, vec![x], c)
    }

    pub fn upsample2(&mut self, x: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::Upsample2, vec![x], c)
    }

    pub fn upsample_like(&mut self, x: usize, like: usize) -> usize {
        let c = self.channels[x];
        self.push(Op::UpsampleLike, vec![x, like], c)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.channels[a], self.channels[b], "sum skip with mismatched channels");
        let c = self.channels[a];
        self.push(Op::Add, vec![a, b], c)
    }

    pub fn concat(&mut self, a: usize, b: usize) -> usize {
        let c = self.channels[a] + self.channels[b];
        self.push(Op::Concat, vec![a, b], c)
    }

    /// Attaches the two 3×3 heads to `features`.
    pub fn finish(mut self, name: &str, config: ModelConfig, features: usize) -> LayerGraph {
        let scale_head = self.conv("head.scale", features, config.num_scales, 3, 1, false, true);
        let landmark_head = self.conv("head.landmark", features, config.num_keypoints, 3, 1, false, true);
        LayerGraph {
            name: name.to_string(),
            config,
            nodes: self.nodes,
            scale_head,
            landmark_head,
            total_stride: TOTAL_STRIDE,
        }
    }
}
