//! Class rectification: per-class head-gradient measurement on the
//! monitoring set and the resulting loss re-weighting.

use serde::{Deserialize, Serialize};

use crate::ace::{AceContextMatrix, Mode};
use crate::autodiff::{Graph, Var};
use crate::data::SesSet;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CroConfig {
    pub beta: f64,
}

impl Default for CroConfig {
    fn default() -> Self {
        CroConfig { beta: 1.0 }
    }
}

/// `J×J` matrix; entry `(p, q)` is the L1 norm of head row `q`'s gradient
/// from the class-`p` monitoring samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix {
    pub values: Tensor,
}

impl GradMatrix {
    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values.data()[p * self.classes() + q]
    }
}

/// Per-class head gradients on the monitoring set.
///
/// The whole set goes through the model once in inference mode; then, for
/// every class `p`, the mean cross-entropy of the class-`p` samples is
/// differentiated with respect to the head weight alone. `params` is not
/// modified.
pub fn measure_class_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    ses: &SesSet,
    context: Option<&AceContextMatrix>,
    tau: f64,
) -> Result<GradMatrix> {
    let j = cfg.num_classes;
    let hist = ses.dataset.histogram();
    if hist.len() != j {
        return Err(Error::Data(format!("monitoring set has {} classes, model has {j}", hist.len())));
    }
    if let Some(p) = hist.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("monitoring set has no sample of class {p}")));
    }
    let features = {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let input = g.constant(ses.dataset.images.clone());
        let ctx = context.map(|c| c.with_owner(None));
        let out = model::forward_graph(&mut g, cfg, &bound, input, ctx.as_ref(), tau, &mut Mode::Inference)?;
        g.value(out.features).clone()
    };
    let d = features.shape()[1];
    let mut values = vec![0.0; j * j];
    for p in 0..j {
        let idx = ses.dataset.class_indices(p);
        let mut rows = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            rows.extend_from_slice(features.row(i));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([idx.len(), d], rows)?);
        let w = g.param(params.head_weight.clone());
        let b = g.constant(params.head_bias.clone());
        let probs = head_probs(&mut g, x, w, b)?;
        let loss = g.cross_entropy(probs, &vec![p; idx.len()])?;
        let grads = g.backward(loss)?;
        let gw = grads.get(w).expect("tracked head");
        for q in 0..j {
            values[p * j + q] = gw.row(q).iter().map(|v| v.abs()).sum();
        }
    }
    Ok(GradMatrix { values: Tensor::new([j, j], values)? })
}

fn head_probs(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let z = g.matmul(x, wt)?;
    let z = g.add_row(z, b)?;
    g.softmax(z)
}

/// `CR_p = g[p][p] / Σ_{i≠p} g[i][p]`: how much of head row `p`'s gradient
/// comes from its own class.
pub fn compute_cr(g: &GradMatrix) -> Result<Vec<f64>> {
    let j = g.classes();
    (0..j)
        .map(|p| {
            let off: f64 = (0..j).filter(|&i| i != p).map(|i| g.get(i, p)).sum();
            if off > 0.0 && off.is_finite() {
                Ok(g.get(p, p) / off)
            } else {
                Err(Error::Degenerate(format!("no off-class gradient reaches head row {p}")))
            }
        })
        .collect()
}

/// Min-max normalisation to `[0, 1]`; a constant vector maps to zeros.
pub fn normalize_cr(cr: &[f64]) -> Vec<f64> {
    let min = cr.iter().copied().fold(f64::INFINITY, f64::min);
    let max = cr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; cr.len()];
    }
    cr.iter().map(|v| (v - min) / span).collect()
}

/// Per-class loss weights `ε⁺·β·C̃R_j + 1`.
pub fn class_weights(cr_tilde: &[f64], beta: f64, eps_plus: f64) -> Vec<f64> {
    cr_tilde.iter().map(|c| eps_plus * beta * c + 1.0).collect()
}

/// Cross-entropy in which every sample's true-class term is scaled by
/// `ε⁺·β·C̃R_y + 1`.
pub fn cr_weighted_loss(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    cr_tilde: &[f64],
    beta: f64,
    eps_plus: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&eps_plus) {
        return Err(Error::invalid("cr_weighted_loss", format!("eps_plus {eps_plus} outside [0, 1]")));
    }
    g.weighted_nll(probs, labels, &class_weights(cr_tilde, beta, eps_plus))
}
