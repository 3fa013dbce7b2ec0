//! Classification and attention ops.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

impl Graph {
    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let t = self.value(z);
        let width = *t.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if width == 0 {
            return Err(Error::shape("softmax", "last dimension is empty"));
        }
        let shape = t.shape().to_vec();
        let out = Tensor::new(shape.clone(), softmax_rows(t.data(), width))?;
        let probs = out.clone();
        self.push(
            "softmax",
            out,
            &[z],
            Box::new(move |g, _, _| {
                let mut d = Vec::with_capacity(g.len());
                for (gr, pr) in g.data().chunks(width).zip(probs.data().chunks(width)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(pr).map(|(gv, pv)| pv * (gv - dot)));
                }
                vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
            }),
        )
    }

    /// Mean of `−ln probs[i, labels[i]]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let j = self.value(probs).dims2("cross_entropy")?.1;
        self.weighted_nll(probs, labels, &vec![1.0; j])
    }

    /// Mean of `−w[y] · ln probs[i, y]` with `y = labels[i]`.
    pub fn weighted_nll(&mut self, probs: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let (n, j) = self.value(probs).dims2("weighted_nll")?;
        if labels.len() != n {
            return Err(Error::shape("weighted_nll", format!("{} labels for {n} rows", labels.len())));
        }
        if class_weights.len() != j {
            return Err(Error::shape("weighted_nll", format!("{} weights for {j} classes", class_weights.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= j) {
            return Err(Error::invalid("weighted_nll", format!("label {bad} out of range for {j} classes")));
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -class_weights[y] * p[i * j + y].ln())
            .sum();
        let out = Tensor::scalar(total / n as f64);
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        self.push(
            "weighted_nll",
            out,
            &[probs],
            Box::new(move |g, pv, _| {
                let p = pv[0].data();
                let scale = g.item() / n as f64;
                let mut d = vec![0.0; n * j];
                for (i, &y) in labels.iter().enumerate() {
                    d[i * j + y] = -scale * weights[y] / p[i * j + y];
                }
                vec![Some(Tensor::new([n, j], d).expect("shape"))]
            }),
        )
    }

    /// Per-row attention readout: `out[p, k·D + d] = alpha[p, k] · values[k, d]`.
    ///
    /// Produces the `K` per-embedding maps laid side by side, so a row holds
    /// all `K·D` channels for one spatial position.
    pub fn attend_values(&mut self, alpha: Var, values: Var) -> Result<Var> {
        let (rows, k) = self.value(alpha).dims2("attend_values")?;
        let (k2, d) = self.value(values).dims2("attend_values")?;
        if k != k2 {
            return Err(Error::shape("attend_values", format!("{k} scores vs {k2} value rows")));
        }
        let a = self.value(alpha).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; rows * k * d];
        for p in 0..rows {
            for kk in 0..k {
                let w = a[p * k + kk];
                let dst = &mut out[(p * k + kk) * d..(p * k + kk + 1) * d];
                for (o, vv) in dst.iter_mut().zip(&v[kk * d..(kk + 1) * d]) {
                    *o = w * vv;
                }
            }
        }
        let out = Tensor::new([rows, k * d], out)?;
        self.push(
            "attend_values",
            out,
            &[alpha, values],
            Box::new(move |g, pv, needs| {
                let (a, v, gd) = (pv[0].data(), pv[1].data(), g.data());
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; rows * k];
                    for p in 0..rows {
                        for kk in 0..k {
                            let gs = &gd[(p * k + kk) * d..(p * k + kk + 1) * d];
                            da[p * k + kk] = gs.iter().zip(&v[kk * d..(kk + 1) * d]).map(|(x, y)| x * y).sum();
                        }
                    }
                    Tensor::new([rows, k], da).expect("shape")
                });
                let dv = needs[1].then(|| {
                    let mut dv = vec![0.0; k * d];
                    for p in 0..rows {
                        for kk in 0..k {
                            let w = a[p * k + kk];
                            let gs = &gd[(p * k + kk) * d..(p * k + kk + 1) * d];
                            for (o, gv) in dv[kk * d..(kk + 1) * d].iter_mut().zip(gs) {
                                *o += w * gv;
                            }
                        }
                    }
                    Tensor::new([k, d], dv).expect("shape")
                });
                vec![da, dv]
            }),
        )
    }
}
