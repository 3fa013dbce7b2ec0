use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adaptive-moment optimiser over every parameter of a model.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One bias-corrected step; `grads` follows the parameters' entry order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[&Tensor], lr: f64) -> Result<()> {
        let mut entries = params.entries_mut();
        if grads.len() != entries.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), entries.len())));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, ((_, p), g)) in entries.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let cfg = ModelConfig { ace_enabled: false, ..ModelConfig::default() };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        let grads: Vec<Tensor> = p.entries().iter().map(|(_, t)| Tensor::full(t.shape().to_vec(), -3.0)).collect();
        let refs: Vec<&Tensor> = grads.iter().collect();
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &refs, 0.01).unwrap();
        for (_, t) in p.entries() {
            assert!(t.data().iter().all(|v| (v - 0.01).abs() < 1e-9));
        }
    }
}
