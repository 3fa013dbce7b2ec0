//! Adaptive context enhancement.
//!
//! Every client owns a trainable context embedding per backbone stage. The
//! server stacks all clients' embeddings into a `K×D` context matrix. At each
//! stage the features are projected to `D` channels, every pixel attends over
//! the `K` transformed embeddings, and the `K` attention-weighted maps are
//! concatenated and refined by a 3×3 conv + group norm into a one-channel
//! logit map `X_c`. A binary mask sampled from `X_c` then gates a self-gated
//! amplification of the stage features:
//!
//! ```text
//! X_L = (1 + X_m · sigmoid(X_m')) ⊙ X_L'
//! ```
//!
//! Masked-off pixels pass through unchanged and the per-pixel gain stays in
//! `[1, 2)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Parameters of one stage's enhancement branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceStageParams<T = Tensor> {
    /// `D×C×1×1`
    pub pointwise: T,
    /// Two `D→D` layers applied to the context matrix, relu between.
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
    /// `1×(K·D)×3×3`
    pub mix_kernel: T,
    pub mix_gamma: T,
    pub mix_beta: T,
    /// This client's row of the context matrix, `D` entries.
    pub context_embedding: T,
}

impl AceStageParams<Tensor> {
    pub fn init(channels: usize, dim: usize, clients: usize, rng: &mut StreamRng) -> Self {
        let mut normal = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        AceStageParams {
            pointwise: normal(vec![dim, channels, 1, 1], (1.0 / channels as f64).sqrt()),
            mlp_w1: normal(vec![dim, dim], (2.0 / dim as f64).sqrt()),
            mlp_b1: Tensor::zeros([dim]),
            mlp_w2: normal(vec![dim, dim], (1.0 / dim as f64).sqrt()),
            mlp_b2: Tensor::zeros([dim]),
            mix_kernel: normal(vec![1, clients * dim, 3, 3], (1.0 / (clients * dim * 9) as f64).sqrt()),
            mix_gamma: Tensor::full([1], 1.0),
            mix_beta: Tensor::zeros([1]),
            context_embedding: normal(vec![dim], 1.0),
        }
    }
}

/// The server's stacked embeddings, one `K×D` matrix per stage.
///
/// `owner` names the row that is gradient-active during a client's local
/// training; `None` for cloud-side evaluation where every row is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceContextMatrix {
    pub stages: Vec<Tensor>,
    pub owner: Option<usize>,
}

impl AceContextMatrix {
    pub fn clients(&self) -> usize {
        self.stages.first().map_or(0, |t| t.shape()[0])
    }

    pub fn with_owner(&self, owner: Option<usize>) -> Self {
        AceContextMatrix { stages: self.stages.clone(), owner }
    }

    /// Overwrites row `client` of every stage.
    pub fn set_row(&mut self, client: usize, rows: &[&Tensor]) -> Result<()> {
        if rows.len() != self.stages.len() {
            return Err(Error::shape("context_matrix", "stage count mismatch"));
        }
        for (stage, row) in self.stages.iter_mut().zip(rows) {
            let (k, d) = stage.dims2("context_matrix")?;
            if client >= k || row.len() != d {
                return Err(Error::shape("context_matrix", format!("row {client} of length {} into {k}×{d}", row.len())));
            }
            stage.data_mut()[client * d..(client + 1) * d].copy_from_slice(row.data());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { tau_start: 1.0, tau_end: 0.1 }
    }
}

/// Cosine interpolation from `tau_start` (round 0) to `tau_end` (last round).
pub fn anneal_tau(round: usize, total_rounds: usize, cfg: &GumbelConfig) -> f64 {
    if total_rounds == 0 {
        return cfg.tau_start;
    }
    let t = (round.min(total_rounds)) as f64 / total_rounds as f64;
    cfg.tau_end + (cfg.tau_start - cfg.tau_end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Whether sampling paths are active.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut StreamRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Training(_))
    }
}

/// Standard logistic noise `ln u − ln(1 − u)`.
pub fn logistic_noise(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
            u.ln() - (1.0 - u).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Binary mask `X_m` and its soft relaxation `X_m'`.
pub struct Mask {
    pub hard: Var,
    pub soft: Var,
}

/// Samples the foreground mask from logits `x_c`.
///
/// Training: `X_m' = sigmoid((X_c + ε)/τ)` with logistic `ε`, and
/// `X_m = [X_m' ≥ ½]` carrying `X_m'`'s gradient (straight-through).
/// Inference: `X_m = [X_c ≥ 0]`, `X_m' = sigmoid(X_c)`, no randomness.
pub fn gumbel_mask(g: &mut Graph, x_c: Var, tau: f64, mode: &mut Mode<'_>) -> Result<Mask> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel_mask", format!("tau must be > 0, got {tau}")));
    }
    match mode {
        Mode::Training(rng) => {
            let noise = logistic_noise(g.value(x_c).shape(), rng);
            gumbel_mask_with_noise(g, x_c, tau, noise)
        }
        Mode::Inference => {
            let hard = g.value(x_c).map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
            let hard = g.constant(hard);
            let soft = g.sigmoid(x_c)?;
            Ok(Mask { hard, soft })
        }
    }
}

/// Training-mode mask with caller-supplied noise.
pub fn gumbel_mask_with_noise(g: &mut Graph, x_c: Var, tau: f64, noise: Tensor) -> Result<Mask> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel_mask", format!("tau must be > 0, got {tau}")));
    }
    let eps = g.constant(noise);
    let shifted = g.add(x_c, eps)?;
    let scaled = g.scale(shifted, 1.0 / tau)?;
    let soft = g.sigmoid(scaled)?;
    let hard = g.value(soft).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let hard = g.straight_through(hard, soft)?;
    Ok(Mask { hard, soft })
}

/// `(1 + X_m · sigmoid(X_m')) ⊙ features`, broadcast over channels.
pub fn self_gate(g: &mut Graph, features: Var, mask: &Mask) -> Result<Var> {
    let s = g.sigmoid(mask.soft)?;
    let m = g.mul(mask.hard, s)?;
    let gain = g.add_scalar(m, 1.0)?;
    g.gate_channels(features, gain)
}

/// Stacks `rows` into a `K×D` matrix in which only row `owner` keeps its
/// gradient path.
pub fn detach_foreign_rows(g: &mut Graph, rows: &[Var], owner: usize) -> Result<Var> {
    if owner >= rows.len() {
        return Err(Error::invalid("detach_foreign_rows", format!("owner {owner} out of range for {} rows", rows.len())));
    }
    let rows: Vec<Var> =
        rows.iter().enumerate().map(|(i, &r)| if i == owner { r } else { g.detach(r) }).collect();
    g.stack_rows(&rows)
}

/// Builds the stage's context matrix node: matrix rows as constants, with the
/// owner's row (if any) replaced by the tracked embedding.
pub fn context_node(
    g: &mut Graph,
    matrix: &Tensor,
    owner: Option<usize>,
    own_embedding: Var,
) -> Result<Var> {
    let (k, d) = matrix.dims2("context_matrix")?;
    match owner {
        None => Ok(g.constant(matrix.clone())),
        Some(o) => {
            if g.value(own_embedding).len() != d {
                return Err(Error::shape("ace_forward", format!("embedding dim {} vs context dim {d}", g.value(own_embedding).len())));
            }
            let rows: Vec<Var> = (0..k)
                .map(|i| {
                    if i == o {
                        own_embedding
                    } else {
                        g.constant(Tensor::new([d], matrix.row(i).to_vec()).expect("row"))
                    }
                })
                .collect();
            detach_foreign_rows(g, &rows, o)
        }
    }
}

/// Intermediate values of one enhancement pass, exposed for diagnostics.
pub struct AceOutput {
    pub output: Var,
    pub attention: Var,
    pub logits: Var,
    pub mask: Mask,
}

/// One stage of context enhancement on `features[N×C×H×W]`.
pub fn ace_forward(
    g: &mut Graph,
    features: Var,
    params: &AceStageParams<Var>,
    context: Var,
    tau: f64,
    mode: &mut Mode<'_>,
) -> Result<AceOutput> {
    let (n, _, h, w) = g.value(features).dims4("ace_forward")?;
    let (k, d) = g.value(context).dims2("ace_forward")?;
    let dim = g.value(params.pointwise).shape()[0];
    if dim != d {
        return Err(Error::shape("ace_forward", format!("context dim {d} vs branch dim {dim}")));
    }
    let mix_in = g.value(params.mix_kernel).shape()[1];
    if mix_in != k * d {
        return Err(Error::shape("ace_forward", format!("mix kernel expects {mix_in} channels, context gives {}", k * d)));
    }

    let fb = g.conv2d(features, params.pointwise, 1, 0)?;
    let fb_rows = g.nchw_to_rows(fb)?;

    let h1 = g.matmul(context, params.mlp_w1)?;
    let h1 = g.add_row(h1, params.mlp_b1)?;
    let h1 = g.relu(h1)?;
    let q = g.matmul(h1, params.mlp_w2)?;
    let q = g.add_row(q, params.mlp_b2)?;

    let qt = g.transpose(q)?;
    let scores = g.matmul(fb_rows, qt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attention = g.softmax(scores)?;
    let per_client = g.attend_values(attention, q)?;
    let stacked = g.rows_to_nchw(per_client, n, h, w)?;

    let mixed = g.conv2d(stacked, params.mix_kernel, 1, 1)?;
    let logits = g.group_norm(mixed, 1, params.mix_gamma, params.mix_beta)?;

    let mask = gumbel_mask(g, logits, tau, mode)?;
    let output = self_gate(g, features, &mask)?;
    Ok(AceOutput { output, attention, logits, mask })
}

/// Inference-mode mask values for a plain tensor, `[X_c ≥ 0]`.
pub fn inference_mask(x_c: &Tensor) -> Tensor {
    x_c.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

/// Per-pixel gain `1 + m · sigmoid(s)` for plain values.
pub fn gain(mask: f64, soft: f64) -> f64 {
    1.0 + mask * sigmoid(soft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        let cfg = GumbelConfig::default();
        assert_eq!(anneal_tau(0, 40, &cfg), 1.0);
        assert!((anneal_tau(40, 40, &cfg) - 0.1).abs() < 1e-15);
        assert!((anneal_tau(20, 40, &cfg) - 0.55).abs() < 1e-12);
        for r in 0..40 {
            assert!(anneal_tau(r + 1, 40, &cfg) <= anneal_tau(r, 40, &cfg));
        }
    }

    #[test]
    fn inference_mask_thresholds_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let m = gumbel_mask(&mut g, x, 0.5, &mut Mode::Inference).unwrap();
        assert_eq!(g.value(m.hard).data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_noise_training_mask_matches_sign_for_any_tau() {
        let xs = vec![-2.0, -1e-9, 0.0, 1e-9, 0.3, 5.0];
        for tau in [1.0, 0.3, 0.01] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([1, 1, 1, 6], xs.clone()).unwrap());
            let m = gumbel_mask_with_noise(&mut g, x, tau, Tensor::zeros([1, 1, 1, 6])).unwrap();
            let expect: Vec<f64> = xs.iter().map(|v| if *v >= 0.0 { 1.0 } else { 0.0 }).collect();
            assert_eq!(g.value(m.hard).data(), expect.as_slice());
        }
    }

    #[test]
    fn non_positive_tau_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(gumbel_mask(&mut g, x, 0.0, &mut Mode::Inference).is_err());
        let mut r = rng::stream(1, &[]);
        assert!(gumbel_mask(&mut g, x, -1.0, &mut Mode::Training(&mut r)).is_err());
    }

    #[test]
    fn masked_off_pixels_are_untouched() {
        let mut g = Graph::new();
        let feats = g.constant(Tensor::new([1, 2, 1, 2], vec![0.3, -1.7, 2.5, 0.125]).unwrap());
        let hard = g.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let soft = g.constant(Tensor::new([1, 1, 1, 2], vec![0.4, 0.9]).unwrap());
        let out = self_gate(&mut g, feats, &Mask { hard, soft }).unwrap();
        let o = g.value(out).data();
        assert_eq!(o[0], 0.3);
        assert_eq!(o[2], 2.5);
        assert!((o[1] - (1.0 + sigmoid(0.9)) * -1.7).abs() < 1e-15);
    }

    #[test]
    fn saturated_gain_approaches_two() {
        assert!((gain(1.0, 40.0) - 2.0).abs() < 1e-15);
        assert_eq!(gain(0.0, 40.0), 1.0);
    }

    #[test]
    fn single_client_detachment_is_identity() {
        let mut g = Graph::new();
        let r = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = detach_foreign_rows(&mut g, &[r], 0).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(r).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(detach_foreign_rows(&mut g, &[r], 1).is_err());
    }
}
