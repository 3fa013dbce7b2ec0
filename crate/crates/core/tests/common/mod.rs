//! Helpers shared by the gradient checks and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use safe_fl::ace::{AceContextMatrix, Mode};
use safe_fl::autodiff::Graph;
use safe_fl::cro;
use safe_fl::model::{self, ModelConfig, ModelParams};
use safe_fl::rng::StreamRng;
use safe_fl::Tensor;

pub const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn positive(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub struct Setup {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub ctx: AceContextMatrix,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub cr: Vec<f64>,
}

pub fn setup(seed: u64) -> Setup {
    let cfg = ModelConfig {
        image_size: 8,
        stage_channels: vec![4, 8],
        num_classes: 3,
        ace_dim: 4,
        num_clients: 3,
        ..ModelConfig::default()
    };
    let mut r = StreamRng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut r).unwrap();
    // Non-trivial norm affine terms so every path carries gradient.
    for s in &mut params.stages {
        s.gn_gamma = positive(s.gn_gamma.shape(), &mut r);
        s.gn_beta = random(s.gn_beta.shape(), &mut r).map(|v| 0.3 * v);
    }
    for a in &mut params.ace {
        a.mix_gamma = positive(&[1], &mut r);
        a.mix_beta = random(&[1], &mut r).map(|v| 0.3 * v);
    }
    let ctx = AceContextMatrix {
        stages: (0..2).map(|_| random(&[3, 4], &mut r)).collect(),
        owner: Some(1),
    };
    Setup {
        batch: random(&[4, 1, 8, 8], &mut r),
        labels: vec![0, 2, 1, 2],
        cr: vec![0.0, 1.0, 0.4],
        cfg,
        params,
        ctx,
    }
}

pub fn full_loss(s: &Setup, params: &ModelParams, grads: bool) -> (f64, Option<Vec<Tensor>>) {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(s.batch.clone());
    let out = model::forward_graph(&mut g, &s.cfg, &bound, x, Some(&s.ctx), 0.5, &mut Mode::Inference).unwrap();
    let probs = g.softmax(out.logits).unwrap();
    let loss = cro::cr_weighted_loss(&mut g, probs, &s.labels, &s.cr, 1.0, 0.8).unwrap();
    let value = g.value(loss).item();
    if !grads {
        return (value, None);
    }
    let gm = g.backward(loss).unwrap();
    let gs = bound.entries().iter().map(|(_, v)| gm.get(**v).unwrap().clone()).collect();
    (value, Some(gs))
}


/// Central-difference check of the full model on `per_seed` random
/// coordinates for each seed; returns (coordinates checked, worst error).
pub fn check_full_model(seeds: std::ops::Range<u64>, per_seed: usize, tol: f64) -> Result<(usize, f64), String> {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let s = setup(seed);
        let (_, grads) = full_loss(&s, &s.params, true);
        let flat_grad: Vec<f64> = grads.unwrap().iter().flat_map(|t| t.data().to_vec()).collect();
        let flat = s.params.flatten();
        let mut r = StreamRng::seed_from_u64(seed + 1000);
        let mut picks: Vec<usize> = (0..flat.len()).collect();
        rand::seq::SliceRandom::shuffle(picks.as_mut_slice(), &mut r);
        for &i in picks.iter().take(per_seed) {
            let mut p = flat.clone();
            p.data_mut()[i] += STEP;
            let up = full_loss(&s, &s.params.unflatten(&p).unwrap(), false).0;
            p.data_mut()[i] -= 2.0 * STEP;
            let down = full_loss(&s, &s.params.unflatten(&p).unwrap(), false).0;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(flat_grad[i], numeric);
            worst = worst.max(e);
            if e >= tol {
                return Err(format!("seed {seed} param {i}: analytic {} numeric {numeric}", flat_grad[i]));
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}
