use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

struct GroupStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn group_stats(x: &[f64], n: usize, groups: usize, span: usize) -> GroupStats {
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    for chunk in x.chunks(span).take(n * groups) {
        let m = chunk.iter().sum::<f64>() / span as f64;
        let var = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / span as f64;
        mean.push(m);
        inv_std.push(1.0 / (var + GROUP_NORM_EPS).sqrt());
    }
    GroupStats { mean, inv_std }
}

impl Graph {
    /// Group normalisation with per-channel affine `gamma`, `beta`.
    ///
    /// Each sample's channels are split into `groups` contiguous groups; each
    /// group is standardised with its biased variance plus `1e-5`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("group_norm", format!("affine parameters must have {c} entries")));
        }
        let hw = h * w;
        let cpg = c / groups;
        let span = cpg * hw;
        let xd = self.value(x).data();
        let stats = group_stats(xd, n, groups, span);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let gi = s * groups + ch / cpg;
                let (m, is) = (stats.mean[gi], stats.inv_std[gi]);
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = (xd[base + p] - m) * is * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let (gshape, bshape) =
            (self.value(gamma).shape().to_vec(), self.value(beta).shape().to_vec());

        self.push(
            "group_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, needs| {
                let xd = p[0].data();
                let gam = p[1].data();
                let gd = g.data();
                let stats = group_stats(xd, n, groups, span);
                let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; span];
                let mut xhat = vec![0.0; span];
                for s in 0..n {
                    for grp in 0..groups {
                        let gi = s * groups + grp;
                        let (m, is) = (stats.mean[gi], stats.inv_std[gi]);
                        let base = (s * c + grp * cpg) * hw;
                        for j in 0..span {
                            let ch = grp * cpg + j / hw;
                            xhat[j] = (xd[base + j] - m) * is;
                            dxhat[j] = gd[base + j] * gam[ch];
                            dgamma[ch] += gd[base + j] * xhat[j];
                            dbeta[ch] += gd[base + j];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                            let m_f = span as f64;
                            for j in 0..span {
                                dx[base + j] =
                                    is / m_f * (m_f * dxhat[j] - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new([n, c, h, w], d).expect("shape")),
                    needs[1].then(|| Tensor::new(gshape.clone(), dgamma).expect("shape")),
                    needs[2].then(|| Tensor::new(bshape.clone(), dbeta).expect("shape")),
                ]
            }),
        )
    }
}
