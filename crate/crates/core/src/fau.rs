//! Divergence-aware backbone blending.
//!
//! Divergence is linear centred kernel alignment between the global and the
//! client model's stage activations on the monitoring set, averaged over
//! stages. The blend keeps a client share of `½(1 − ε⁻)(1 − D)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCapture, ModelParams, ParamGroup};
use crate::tensor::Tensor;

const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_stage: Vec<f64>,
    pub mean: f64,
}

fn centered_columns(a: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, d) = a.dims2("linear_cka")?;
    let mut out = a.data().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| out[r * d + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            out[r * d + c] -= mean;
        }
    }
    Ok((n, d, out))
}

// ‖XᵀY‖²_F for row-major X (n×dx), Y (n×dy).
fn cross_frobenius_sq(n: usize, x: &[f64], dx: usize, y: &[f64], dy: usize) -> f64 {
    let mut m = vec![0.0; dx * dy];
    for r in 0..n {
        let xr = &x[r * dx..(r + 1) * dx];
        let yr = &y[r * dy..(r + 1) * dy];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &mut m[i * dy..(i + 1) * dy];
            for (acc, &yv) in row.iter_mut().zip(yr) {
                *acc += xv * yv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA of two activation matrices over the same `n` samples:
/// `‖BᵀA‖²_F / (‖AᵀA‖_F · ‖BᵀB‖_F)` after centring every column.
pub fn linear_cka(a_global: &Tensor, a_client: &Tensor) -> Result<f64> {
    let (n, da, a) = centered_columns(a_global)?;
    let (nb, db, b) = centered_columns(a_client)?;
    if n != nb {
        return Err(Error::shape("linear_cka", format!("{n} vs {nb} samples")));
    }
    if n < 2 {
        return Err(Error::invalid("linear_cka", "need at least 2 samples"));
    }
    let aa = cross_frobenius_sq(n, &a, da, &a, da).sqrt();
    let bb = cross_frobenius_sq(n, &b, db, &b, db).sqrt();
    if !(aa > 0.0) || !(bb > 0.0) {
        return Err(Error::Degenerate("similarity undefined for constant activations".into()));
    }
    let ab = cross_frobenius_sq(n, &a, da, &b, db);
    let v = ab / (aa * bb);
    if !v.is_finite() || !(-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&v) {
        return Err(Error::NonFinite { op: "linear_cka" });
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Per-stage similarity and its equal-weight mean.
pub fn multi_scale_divergence(cap_global: &ActivationCapture, cap_client: &ActivationCapture) -> Result<DivergenceReport> {
    if cap_global.stages.len() != cap_client.stages.len() || cap_global.stages.is_empty() {
        return Err(Error::shape(
            "multi_scale_divergence",
            format!("{} vs {} stages", cap_global.stages.len(), cap_client.stages.len()),
        ));
    }
    let per_stage = cap_global
        .stages
        .iter()
        .zip(&cap_client.stages)
        .map(|(g, c)| linear_cka(g, c))
        .collect::<Result<Vec<_>>>()?;
    let mean = (per_stage.iter().sum::<f64>() / per_stage.len() as f64).clamp(0.0, 1.0);
    Ok(DivergenceReport { per_stage, mean })
}

/// `(client, global)` blend coefficients for divergence `d` and adoption
/// strength `eps_minus`.
pub fn fau_coefficients(d_cka: f64, eps_minus: f64) -> Result<(f64, f64)> {
    for (name, v) in [("d_cka", d_cka), ("eps_minus", eps_minus)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid("fau_update", format!("{name} = {v} outside [0, 1]")));
        }
    }
    let client = 0.5 * (1.0 - eps_minus) * (1.0 - d_cka);
    let global = 1.0 - client;
    debug_assert!((0.0..=0.5).contains(&client) && (0.5..=1.0).contains(&global));
    Ok((client, global))
}

/// Blends `client`'s backbone towards `global`'s. The head is taken from
/// `global`; the client's own context embeddings are kept.
pub fn fau_update(client: &ModelParams, global: &ModelParams, d_cka: f64, eps_minus: f64) -> Result<ModelParams> {
    if !client.same_shapes(global) {
        return Err(Error::shape("fau_update", "client and global parameter shapes differ"));
    }
    let (wc, wg) = fau_coefficients(d_cka, eps_minus)?;
    let mut out = client.clone();
    for ((group, dst), (_, g)) in out.entries_mut().into_iter().zip(global.entries()) {
        match group {
            ParamGroup::Backbone => {
                for (x, &y) in dst.data_mut().iter_mut().zip(g.data()) {
                    *x = if wc == 0.0 { y } else { wc * *x + wg * y };
                }
            }
            ParamGroup::Head => *dst = g.clone(),
            ParamGroup::Embedding => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn self_similarity_is_one() {
        let a = t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]);
        assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_centred_columns_give_zero() {
        let a = t(&[&[1.0], &[-1.0], &[1.0], &[-1.0]]);
        let b = t(&[&[1.0], &[1.0], &[-1.0], &[-1.0]]);
        assert!(linear_cka(&a, &b).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cka_errors() {
        let a = t(&[&[1.0], &[2.0]]);
        assert!(linear_cka(&a, &t(&[&[1.0], &[2.0], &[3.0]])).is_err());
        assert!(matches!(linear_cka(&a, &t(&[&[4.0], &[4.0]])), Err(Error::Degenerate(_))));
        assert!(linear_cka(&t(&[&[1.0]]), &t(&[&[2.0]])).is_err());
    }

    #[test]
    fn coefficient_cases() {
        assert_eq!(fau_coefficients(0.3, 1.0).unwrap(), (0.0, 1.0));
        assert_eq!(fau_coefficients(1.0, 0.0).unwrap(), (0.0, 1.0));
        assert_eq!(fau_coefficients(0.0, 0.0).unwrap(), (0.5, 0.5));
        assert!(fau_coefficients(1.2, 0.0).is_err());
    }

    #[test]
    fn update_keeps_embedding_and_takes_global_head() {
        let cfg = ModelConfig { num_clients: 2, ..ModelConfig::default() };
        let a = ModelParams::init(&cfg, &mut rng::stream(1, &[])).unwrap();
        let b = ModelParams::init(&cfg, &mut rng::stream(2, &[])).unwrap();
        let out = fau_update(&a, &b, 0.0, 0.0).unwrap();
        assert_eq!(out.head_weight, b.head_weight);
        assert_eq!(out.embeddings(), a.embeddings());
        let k = &out.stages[0].kernel;
        for ((o, x), y) in k.data().iter().zip(a.stages[0].kernel.data()).zip(b.stages[0].kernel.data()) {
            assert!((o - 0.5 * (x + y)).abs() < 1e-15);
        }
        let adopt = fau_update(&a, &b, 0.4, 1.0).unwrap();
        assert_eq!(adopt.stages, b.stages);
    }
}
