//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: each op computes its output
//! value immediately and appends a node holding the value, its parents and a
//! backward closure. Nodes are only ever appended, so creation order is a
//! topological order and [`Graph::backward`] simply walks the node list in
//! reverse.
//!
//! ```
//! use safe_fl::autodiff::Graph;
//! use safe_fl::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
//! let y = g.sum(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.

mod conv;
mod nn;
mod norm;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes parent gradients from the output gradient and parent values.
/// Entries for parents that do not need a gradient may be `None`.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>> + Send>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    is_param: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every tracked parameter.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn is_scalar_like(t: &Tensor) -> bool {
    t.len() == 1
}

/// Sums `grad` down to `target` shape for the scalar-broadcast case.
fn reduce_to(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.sum()]).expect("scalar shape")
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// An untracked leaf (inputs, labels-derived constants, detached values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            op: if tracked { "param" } else { "constant" },
            value,
            requires_grad: tracked,
            is_param: tracked,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Clears the "already differentiated" flag so `backward` may run again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// The returned map holds one entry per tracked parameter, zero-filled
    /// for parameters the loss does not depend on.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice without reset".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Graph("loss is detached from every tracked parameter".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(back) = &node.backward else {
                grads[i] = Some(g_out);
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = back(&g_out, &parent_vals, &needs);
            for ((&p, need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                check_finite(node.op, &pg)?;
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                map.insert(Var(i), g);
            }
        }
        Ok(GradientMap { grads: map })
    }

    // ---- structural ops ------------------------------------------------

    /// Copies `v` into an untracked node; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, v: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let x = self.value(v);
        let orig = x.shape().to_vec();
        let out = x.reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[v],
            Box::new(move |g, _, _| vec![Some(g.reshape(orig.clone()).expect("same numel"))]),
        )
    }

    /// Stacks equal-length vectors into a `K×D` matrix, row `i` from `rows[i]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let d = rows
            .first()
            .map(|r| self.value(*r).len())
            .ok_or_else(|| Error::invalid("stack_rows", "no rows"))?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let t = self.value(*r);
            if t.len() != d {
                return Err(Error::shape("stack_rows", format!("row length {} vs {}", t.len(), d)));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new([rows.len(), d], data)?;
        let shapes: Vec<Vec<usize>> = rows.iter().map(|r| self.value(*r).shape().to_vec()).collect();
        self.push(
            "stack_rows",
            out,
            rows,
            Box::new(move |g, _, needs| {
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        needs[i].then(|| {
                            Tensor::new(s.clone(), g.data()[i * d..(i + 1) * d].to_vec())
                                .expect("row shape")
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", "hard/soft shapes differ"));
        }
        self.push("straight_through", hard, &[soft], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2("matmul")?;
        let n = self.value(b).shape()[1];
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(move |g, p, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), p[1].data(), &mut d);
                    Tensor::new([m, k], d).expect("shape")
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn(k, m, n, p[0].data(), g.data(), &mut d);
                    Tensor::new([k, n], d).expect("shape")
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        self.push(
            "transpose",
            out,
            &[x],
            Box::new(|g, _, _| vec![Some(g.transpose2().expect("matrix"))]),
        )
    }

    /// `x[R×C] + bias[C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_row")?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", format!("bias length {} vs {c} columns", self.value(bias).len())));
        }
        let bshape = self.value(bias).shape().to_vec();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(
            "add_row",
            out,
            &[x, bias],
            Box::new(move |g, _, needs| {
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::new(bshape.clone(), d).expect("shape")
                });
                vec![Some(g.clone()), db]
            }),
        )
    }

    // ---- elementwise ---------------------------------------------------

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || is_scalar_like(tb) {
            Ok(ta.shape().to_vec())
        } else if is_scalar_like(ta) {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))
        }
    }

    fn binary_values(&self, a: Var, b: Var, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let get = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(get(ta, i), get(tb, i))).collect();
        Tensor::new(shape.to_vec(), data).expect("broadcast shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("add", a, b)?;
        let out = self.binary_values(a, b, &shape, |x, y| x + y);
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|g, p, needs| {
                vec![
                    needs[0].then(|| reduce_to(g.clone(), p[0])),
                    needs[1].then(|| reduce_to(g.clone(), p[1])),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("sub", a, b)?;
        let out = self.binary_values(a, b, &shape, |x, y| x - y);
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|g, p, needs| {
                vec![
                    needs[0].then(|| reduce_to(g.clone(), p[0])),
                    needs[1].then(|| reduce_to(g.map(|v| -v), p[1])),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let out = self.binary_values(a, b, &shape, |x, y| x * y);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|g, p, needs| {
                let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                let grad_for = |other: &Tensor, target: &Tensor| {
                    let d: Vec<f64> =
                        g.data().iter().enumerate().map(|(i, gv)| gv * at(other, i)).collect();
                    reduce_to(Tensor::new(g.shape().to_vec(), d).expect("shape"), target)
                };
                vec![
                    needs[0].then(|| grad_for(p[1], p[0])),
                    needs[1].then(|| grad_for(p[0], p[1])),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, &[x], Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, &[x], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(
            "relu",
            out,
            &[x],
            Box::new(|g, p, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d).expect("shape"))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let y = out.clone();
        self.push(
            "sigmoid",
            out,
            &[x],
            Box::new(move |g, _, _| {
                let d = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d).expect("shape"))]
            }),
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(
            "log",
            out,
            &[x],
            Box::new(|g, p, _| {
                let d = g.data().iter().zip(p[0].data()).map(|(gv, xv)| gv / xv).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d).expect("shape"))]
            }),
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.push(
            "sum",
            out,
            &[x],
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
