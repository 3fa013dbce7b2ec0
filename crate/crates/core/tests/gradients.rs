//! Autodiff gradients against central finite differences.

mod common;

use common::{check_full_model, positive, random, rel_err, STEP};
use rand::SeedableRng;
use safe_fl::autodiff::{Graph, Var};
use safe_fl::rng::StreamRng;
use safe_fl::Tensor;

/// Checks every input of `f` (a scalar-valued graph builder) elementwise.
fn check_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v).unwrap();
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            assert!(rel_err(a, numeric) < 1e-5, "{name}: input {k}[{i}] analytic {a} numeric {numeric}");
        }
    }
}

// Weighted random projection turns any output into a scalar with a generic gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = StreamRng::seed_from_u64(seed ^ 0xFACE);
    let w = random(g.value(x).shape(), &mut rng);
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

#[test]
fn elementwise_and_matrix_ops() {
    for seed in 0..20u64 {
        let mut r = StreamRng::seed_from_u64(seed);
        let a = random(&[3, 4], &mut r);
        let b = random(&[3, 4], &mut r);
        let m = random(&[4, 2], &mut r);
        let row = random(&[4], &mut r);
        check_op("add", vec![a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check_op("sub", vec![a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check_op("mul", vec![a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check_op("matmul", vec![a.clone(), m.clone()], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check_op("transpose", vec![a.clone()], |g, v| {
            let y = g.transpose(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("add_row", vec![a.clone(), row.clone()], |g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check_op("sigmoid", vec![a.clone()], |g, v| {
            let y = g.sigmoid(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("relu", vec![a.map(|x| if x.abs() < 1e-3 { 0.5 } else { x })], |g, v| {
            let y = g.relu(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("log", vec![positive(&[3, 4], &mut r)], |g, v| {
            let y = g.log(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("scale_add_scalar_mean", vec![a.clone()], |g, v| {
            let y = g.scale(v[0], -1.7).unwrap();
            let y = g.add_scalar(y, 0.3).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y).unwrap()
        });
        check_op("reshape", vec![a.clone()], |g, v| {
            let y = g.reshape(v[0], [2, 6]).unwrap();
            project(g, y, seed)
        });
        check_op("stack_rows", vec![row.clone(), random(&[4], &mut r)], |g, v| {
            let y = g.stack_rows(v).unwrap();
            project(g, y, seed)
        });
        check_op("softmax", vec![a.clone()], |g, v| {
            let y = g.softmax(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("attend_values", vec![a.clone(), random(&[4, 3], &mut r)], |g, v| {
            let y = g.attend_values(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        let labels = [0usize, 3, 1];
        check_op("weighted_nll", vec![a.clone()], |g, v| {
            let p = g.softmax(v[0]).unwrap();
            g.weighted_nll(p, &labels, &[1.0, 1.5, 0.7, 2.0]).unwrap()
        });
    }
}

#[test]
fn spatial_ops() {
    for seed in 0..20u64 {
        let mut r = StreamRng::seed_from_u64(100 + seed);
        let x = random(&[2, 4, 5, 5], &mut r);
        let k = random(&[3, 4, 3, 3], &mut r);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            check_op("conv2d", vec![x.clone(), k.clone()], |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
                project(g, y, seed)
            });
        }
        let gamma = positive(&[4], &mut r);
        let beta = random(&[4], &mut r);
        for groups in [1, 2, 4] {
            check_op("group_norm", vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
                let y = g.group_norm(v[0], groups, v[1], v[2]).unwrap();
                project(g, y, seed)
            });
        }
        check_op("global_avg_pool", vec![x.clone()], |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, seed)
        });
        check_op("concat_channels", vec![x.clone(), random(&[2, 2, 5, 5], &mut r)], |g, v| {
            let y = g.concat_channels(v).unwrap();
            project(g, y, seed)
        });
        check_op("nchw_rows_round_trip", vec![x.clone()], |g, v| {
            let rows = g.nchw_to_rows(v[0]).unwrap();
            let back = g.rows_to_nchw(rows, 2, 5, 5).unwrap();
            project(g, back, seed)
        });
        check_op("gate_channels", vec![x.clone(), random(&[2, 1, 5, 5], &mut r)], |g, v| {
            let y = g.gate_channels(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
    }
}

/// Every stage, branch and head parameter of the enhanced model under the
/// rectified loss: at least 200 sampled coordinates per seed, 5 seeds.
#[test]
fn full_model_matches_finite_differences() {
    let (checked, worst) = check_full_model(0..5, 220, 1e-4).unwrap_or_else(|e| panic!("{e}"));
    assert!(checked >= 1000);
    println!("checked {checked} coordinates, worst relative error {worst:.2e}");
}
