//! Spatial ops on `N×C×H×W` tensors.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    // A 1×1 kernel with unit stride and no padding sees the image itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    // Output positions `o` along one axis whose input `o·stride + k − pad`
    // falls inside `0..size`.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.pad > k { (size + self.pad - k - 1) / self.stride + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    // col[(c,ki,kj) × (oy,ox)] for one sample.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x0, x1) = self.valid_range(kj, self.w, self.ow);
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    for oy in y0..y1 {
                        let y = oy * self.stride + ki - self.pad;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let src = &plane[y * self.w..(y + 1) * self.w];
                        if self.stride == 1 {
                            let xs = x0 + kj - self.pad;
                            out[x0..x1].copy_from_slice(&src[xs..xs + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                out[ox] = src[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y0, y1) = self.valid_range(ki, self.h, self.oh);
                for kj in 0..self.kw {
                    let (x0, x1) = self.valid_range(kj, self.w, self.ow);
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in y0..y1 {
                        let y = oy * self.stride + ki - self.pad;
                        let inp = &src[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        for ox in x0..x1 {
                            dst[ox * self.stride + kj - self.pad] += inp[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output spatial size of a convolution, `(size + 2·pad − k) / stride + 1`
/// with floor division.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be ≥ 1"));
    }
    let padded = size + 2 * pad;
    if k > padded {
        return Err(Error::shape("conv2d", format!("kernel {k} exceeds padded size {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

impl Graph {
    /// Cross-correlation of `input[N×C×H×W]` with `kernel[O×C×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("conv2d")?;
        let (o, kc, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape("conv2d", format!("kernel has {kc} input channels, input has {c}")));
        }
        let oh = conv_output_size(h, kh, stride, padding)?;
        let ow = conv_output_size(w, kw, stride, padding)?;
        let geom = ConvGeom { c, h, w, kh, kw, stride, pad: padding, oh, ow };
        let (cols, pix) = (geom.cols(), geom.pixels());

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; n * o * pix];
        let pointwise = geom.is_pointwise();
        let mut col = vec![0.0; if pointwise { 0 } else { cols * pix }];
        for s in 0..n {
            let img = &x[s * c * h * w..(s + 1) * c * h * w];
            let dst = &mut out[s * o * pix..(s + 1) * o * pix];
            if pointwise {
                gemm_nn(o, cols, pix, k, img, dst);
            } else {
                geom.im2col(img, &mut col);
                gemm_nn(o, cols, pix, k, &col, dst);
            }
        }
        let out = Tensor::new([n, o, oh, ow], out)?;

        self.push(
            "conv2d",
            out,
            &[input, kernel],
            Box::new(move |g, p, needs| {
                let x = p[0].data();
                let k = p[1].data();
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![0.0; n * c * h * w]);
                let mut dk = needs[1].then(|| vec![0.0; o * cols]);
                let pointwise = geom.is_pointwise();
                let buf = if pointwise { 0 } else { cols * pix };
                let mut col = vec![0.0; buf];
                let mut dcol = vec![0.0; buf];
                for s in 0..n {
                    let gs = &gd[s * o * pix..(s + 1) * o * pix];
                    let img = &x[s * c * h * w..(s + 1) * c * h * w];
                    if let Some(dk) = dk.as_mut() {
                        if pointwise {
                            gemm_nt(o, pix, cols, gs, img, dk);
                        } else {
                            geom.im2col(img, &mut col);
                            gemm_nt(o, pix, cols, gs, &col, dk);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[s * c * h * w..(s + 1) * c * h * w];
                        if pointwise {
                            gemm_tn(cols, o, pix, k, gs, dimg);
                        } else {
                            dcol.fill(0.0);
                            gemm_tn(cols, o, pix, k, gs, &mut dcol);
                            geom.col2im(&dcol, dimg);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new([n, c, h, w], d).expect("shape")),
                    dk.map(|d| Tensor::new([o, c, kh, kw], d).expect("shape")),
                ]
            }),
        )
    }

    /// Spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new([n, c], out)?;
        self.push(
            "global_avg_pool",
            out,
            &[x],
            Box::new(move |g, _, _| {
                let inv = 1.0 / hw as f64;
                let d = g.data().iter().flat_map(|gv| std::iter::repeat_n(gv * inv, hw)).collect();
                vec![Some(Tensor::new([n, c, h, w], d).expect("shape"))]
            }),
        )
    }

    /// Channel-wise concatenation preserving input order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(*first).dims4("concat_channels")?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("expected N,H,W = {n},{h},{w}, got {pn},{ph},{pw}"),
                ));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (p, &pc) in parts.iter().zip(&chans) {
                let d = self.value(*p).data();
                out.extend_from_slice(&d[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let out = Tensor::new([n, total, h, w], out)?;
        self.push(
            "concat_channels",
            out,
            parts,
            Box::new(move |g, _, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(chans.len());
                for (i, &pc) in chans.iter().enumerate() {
                    if needs[i] {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * total + offset) * hw;
                            d.extend_from_slice(&gd[base..base + pc * hw]);
                        }
                        res.push(Some(Tensor::new([n, pc, h, w], d).expect("shape")));
                    } else {
                        res.push(None);
                    }
                    offset += pc;
                }
                res
            }),
        )
    }

    /// `N×C×H×W → (N·H·W)×C`: one row per spatial position.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("nchw_to_rows")?;
        let out = Tensor::new([n * h * w, c], nchw_to_nhwc(self.value(x).data(), n, c, h * w))?;
        self.push(
            "nchw_to_rows",
            out,
            &[x],
            Box::new(move |g, _, _| {
                vec![Some(Tensor::new([n, c, h, w], nhwc_to_nchw(g.data(), n, c, h * w)).expect("shape"))]
            }),
        )
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2("rows_to_nchw")?;
        if rows != n * h * w {
            return Err(Error::shape("rows_to_nchw", format!("{rows} rows vs N·H·W = {}", n * h * w)));
        }
        let out = Tensor::new([n, c, h, w], nhwc_to_nchw(self.value(x).data(), n, c, h * w))?;
        self.push(
            "rows_to_nchw",
            out,
            &[x],
            Box::new(move |g, _, _| {
                vec![Some(Tensor::new([rows, c], nchw_to_nhwc(g.data(), n, c, h * w)).expect("shape"))]
            }),
        )
    }

    /// `x[N×C×H×W] ⊙ gate[N×1×H×W]`, the gate broadcast over channels.
    pub fn gate_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("gate_channels")?;
        let (gn, gc, gh, gw) = self.value(gate).dims4("gate_channels")?;
        if (gn, gc, gh, gw) != (n, 1, h, w) {
            return Err(Error::shape(
                "gate_channels",
                format!("gate shape {:?} for input {:?}", self.value(gate).shape(), self.value(x).shape()),
            ));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let gd = self.value(gate).data();
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            let gs = &gd[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = xd[base + p] * gs[p];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        self.push(
            "gate_channels",
            out,
            &[x, gate],
            Box::new(move |g, p, needs| {
                let (xd, gtd, gd) = (p[0].data(), p[1].data(), g.data());
                let dx = needs[0].then(|| {
                    let mut d = vec![0.0; xd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for q in 0..hw {
                                d[base + q] = gd[base + q] * gtd[s * hw + q];
                            }
                        }
                    }
                    Tensor::new([n, c, h, w], d).expect("shape")
                });
                let dg = needs[1].then(|| {
                    let mut d = vec![0.0; n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for q in 0..hw {
                                d[s * hw + q] += gd[base + q] * xd[base + q];
                            }
                        }
                    }
                    Tensor::new([n, 1, h, w], d).expect("shape")
                });
                vec![dx, dg]
            }),
        )
    }
}

fn nchw_to_nhwc(src: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(s * hw + p) * c + ch] = src[(s * c + ch) * hw + p];
            }
        }
    }
    out
}

fn nhwc_to_nchw(src: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(s * c + ch) * hw + p] = src[(s * hw + p) * c + ch];
            }
        }
    }
    out
}
