//! The shared classifier: a small multi-stage CNN backbone with optional
//! context-enhancement branches, global average pooling and a linear head.
//!
//! Each stage is `conv3×3 → group norm → relu`, followed by the stage's
//! enhancement branch when enabled. Stages after the first downsample with a
//! stride-2 convolution. The post-relu, pre-enhancement activations of every
//! stage are captured for divergence measurement.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ace::{self, AceContextMatrix, AceStageParams, Mode};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub ace_enabled: bool,
    pub ace_dim: usize,
    /// Rows of the context matrix; the mix kernel's input width depends on it.
    pub num_clients: usize,
    pub gn_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            image_size: 16,
            stage_channels: vec![8, 16],
            num_classes: 8,
            ace_enabled: true,
            ace_dim: 8,
            num_clients: 5,
            gn_groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages == 0 {
            return Err(Error::invalid("model", "at least one stage is required"));
        }
        let factor = 1usize << (stages - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::invalid(
                "model",
                format!("image size {} not divisible by 2^{}", self.image_size, stages - 1),
            ));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % self.gn_groups != 0) {
            return Err(Error::invalid("model", format!("{c} channels not divisible into {} groups", self.gn_groups)));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model", "need at least two classes"));
        }
        if self.ace_enabled && (self.ace_dim == 0 || self.num_clients == 0) {
            return Err(Error::invalid("model", "context enhancement needs ace_dim ≥ 1 and ≥ 1 client"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    /// Total scalar parameter count, from the layer shapes.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input_channels;
        for &c in &self.stage_channels {
            total += c * c_in * 9 + 2 * c;
            if self.ace_enabled {
                let d = self.ace_dim;
                total += d * c + 2 * (d * d + d) + self.num_clients * d * 9 + 2 + d;
            }
            c_in = c;
        }
        total + self.num_classes * self.feature_dim() + self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams<T = Tensor> {
    /// `C_out×C_in×3×3`
    pub kernel: T,
    pub gn_gamma: T,
    pub gn_beta: T,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Convolutions, norms and the shared parts of the enhancement branches.
    Backbone,
    Head,
    /// A client's own context embedding; never averaged.
    Embedding,
}

/// Parameters of the whole model. `T = Var` gives the graph-bound view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor> {
    pub stages: Vec<StageParams<T>>,
    /// One branch per stage, empty when enhancement is disabled.
    pub ace: Vec<AceStageParams<T>>,
    /// `J×D_feat`
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> ModelParams<T> {
    /// Every parameter in flattening order, with its group.
    pub fn entries(&self) -> Vec<(ParamGroup, &T)> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([(Backbone, &s.kernel), (Backbone, &s.gn_gamma), (Backbone, &s.gn_beta)]);
        }
        for a in &self.ace {
            out.extend([
                (Backbone, &a.pointwise),
                (Backbone, &a.mlp_w1),
                (Backbone, &a.mlp_b1),
                (Backbone, &a.mlp_w2),
                (Backbone, &a.mlp_b2),
                (Backbone, &a.mix_kernel),
                (Backbone, &a.mix_gamma),
                (Backbone, &a.mix_beta),
                (Embedding, &a.context_embedding),
            ]);
        }
        out.extend([(Head, &self.head_weight), (Head, &self.head_bias)]);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamGroup, &mut T)> {
        use ParamGroup::*;
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend([(Backbone, &mut s.kernel), (Backbone, &mut s.gn_gamma), (Backbone, &mut s.gn_beta)]);
        }
        for a in &mut self.ace {
            out.extend([
                (Backbone, &mut a.pointwise),
                (Backbone, &mut a.mlp_w1),
                (Backbone, &mut a.mlp_b1),
                (Backbone, &mut a.mlp_w2),
                (Backbone, &mut a.mlp_b2),
                (Backbone, &mut a.mix_kernel),
                (Backbone, &mut a.mix_gamma),
                (Backbone, &mut a.mix_beta),
                (Embedding, &mut a.context_embedding),
            ]);
        }
        out.extend([(Head, &mut self.head_weight), (Head, &mut self.head_bias)]);
        out
    }

    /// Structure-preserving map, visiting parameters in [`entries`](Self::entries) order.
    pub fn map<U>(&self, mut f: impl FnMut(ParamGroup, &T) -> U) -> ModelParams<U> {
        use ParamGroup::*;
        let stages = self
            .stages
            .iter()
            .map(|s| StageParams {
                kernel: f(Backbone, &s.kernel),
                gn_gamma: f(Backbone, &s.gn_gamma),
                gn_beta: f(Backbone, &s.gn_beta),
            })
            .collect();
        let ace = self
            .ace
            .iter()
            .map(|a| AceStageParams {
                pointwise: f(Backbone, &a.pointwise),
                mlp_w1: f(Backbone, &a.mlp_w1),
                mlp_b1: f(Backbone, &a.mlp_b1),
                mlp_w2: f(Backbone, &a.mlp_w2),
                mlp_b2: f(Backbone, &a.mlp_b2),
                mix_kernel: f(Backbone, &a.mix_kernel),
                mix_gamma: f(Backbone, &a.mix_gamma),
                mix_beta: f(Backbone, &a.mix_beta),
                context_embedding: f(Embedding, &a.context_embedding),
            })
            .collect();
        let head_weight = f(Head, &self.head_weight);
        let head_bias = f(Head, &self.head_bias);
        ModelParams { stages, ace, head_weight, head_bias }
    }
}

impl ModelParams<Tensor> {
    /// He-initialised convolutions, unit/zero norms, small random head.
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let normal = |shape: Vec<usize>, std: f64, rng: &mut StreamRng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let mut stages = Vec::new();
        let mut c_in = cfg.input_channels;
        for &c in &cfg.stage_channels {
            stages.push(StageParams {
                kernel: normal(vec![c, c_in, 3, 3], (2.0 / (c_in * 9) as f64).sqrt(), rng),
                gn_gamma: Tensor::full([c], 1.0),
                gn_beta: Tensor::zeros([c]),
            });
            c_in = c;
        }
        let d = cfg.feature_dim();
        let head_weight = normal(vec![cfg.num_classes, d], (1.0 / d as f64).sqrt(), rng);
        let ace = if cfg.ace_enabled {
            cfg.stage_channels
                .iter()
                .map(|&c| AceStageParams::init(c, cfg.ace_dim, cfg.num_clients, rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(ModelParams { stages, ace, head_weight, head_bias: Tensor::zeros([cfg.num_classes]) })
    }

    /// All-zero parameters with the configured shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = crate::rng::stream(0, &[]);
        let p = Self::init(cfg, &mut rng)?;
        Ok(p.map(|_, t| Tensor::zeros(t.shape().to_vec())))
    }

    pub fn param_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenates every parameter into a `1×P` row in a fixed order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.entries().iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new([1, n], data).expect("shape")
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the shape template.
    pub fn unflatten(&self, flat: &Tensor) -> Result<Self> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::shape("unflatten", format!("expected {total} values, got {}", flat.len())));
        }
        let mut offset = 0;
        Ok(self.map(|_, t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat.data()[offset..offset + n].to_vec()).expect("shape");
            offset += n;
            out
        }))
    }

    /// Registers every parameter in `g`, tracked or constant.
    pub fn bind(&self, g: &mut Graph, tracked: bool) -> ModelParams<Var> {
        self.map(|_, t| if tracked { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    /// Own context embeddings, one per stage.
    pub fn embeddings(&self) -> Vec<&Tensor> {
        self.ace.iter().map(|a| &a.context_embedding).collect()
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        let (a, b) = (self.entries(), other.entries());
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.shape() == y.shape())
    }
}

/// Post-relu, pre-enhancement activations of every stage, each reshaped to
/// `(N·H·W)×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub stages: Vec<Tensor>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Pooled features feeding the head, `N×D_feat`.
    pub features: Var,
    pub capture: ActivationCapture,
}

fn to_rows(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4("capture")?;
    let hw = h * w;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(s * hw + p) * c + ch] = src[(s * c + ch) * hw + p];
            }
        }
    }
    Tensor::new([n * hw, c], out)
}

/// Forward pass over graph-bound parameters.
///
/// With enhancement enabled, `context` must be present. When its `owner` is
/// set, that row is taken from `params`' own embedding and stays tracked;
/// all other rows are fixed.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    input: Var,
    context: Option<&AceContextMatrix>,
    tau: f64,
    mode: &mut Mode<'_>,
) -> Result<ForwardOutput> {
    let (_, c, h, w) = g.value(input).dims4("forward")?;
    if c != cfg.input_channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::shape(
            "forward",
            format!(
                "batch {:?} does not match {}×{}×{} input",
                g.value(input).shape(),
                cfg.input_channels,
                cfg.image_size,
                cfg.image_size
            ),
        ));
    }
    let context = match (cfg.ace_enabled, context) {
        (true, None) => return Err(Error::invalid("forward", "context matrix required when enhancement is enabled")),
        (true, Some(ctx)) => {
            if ctx.stages.len() != params.stages.len() {
                return Err(Error::shape("forward", "context matrix stage count mismatch"));
            }
            Some(ctx)
        }
        (false, _) => None,
    };

    let mut x = input;
    let mut capture = Vec::with_capacity(params.stages.len());
    for (s, stage) in params.stages.iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let y = g.conv2d(x, stage.kernel, stride, 1)?;
        let y = g.group_norm(y, cfg.gn_groups, stage.gn_gamma, stage.gn_beta)?;
        let y = g.relu(y)?;
        capture.push(to_rows(g.value(y))?);
        x = match context {
            Some(ctx) => {
                let branch = &params.ace[s];
                let node = ace::context_node(g, &ctx.stages[s], ctx.owner, branch.context_embedding)?;
                ace::ace_forward(g, y, branch, node, tau, mode)?.output
            }
            None => y,
        };
    }
    let features = g.global_avg_pool(x)?;
    let wt = g.transpose(params.head_weight)?;
    let z = g.matmul(features, wt)?;
    let logits = g.add_row(z, params.head_bias)?;
    Ok(ForwardOutput { logits, features, capture: ActivationCapture { stages: capture } })
}

/// Untracked forward pass returning logits and the activation capture.
pub fn forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &Tensor,
    context: Option<&AceContextMatrix>,
    tau: f64,
    mode: &mut Mode<'_>,
) -> Result<(Tensor, ActivationCapture)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let input = g.constant(batch.clone());
    let out = forward_graph(&mut g, cfg, &bound, input, context, tau, mode)?;
    Ok((g.value(out.logits).clone(), out.capture))
}

/// Argmax class per row of `logits`.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let j = logits.shape()[1];
    logits
        .data()
        .chunks(j)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
