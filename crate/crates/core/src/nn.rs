//! Small reverse-mode autodiff over dense f64 tensors, with the layers the
//! networks need, Adam, finite-difference gradient checks and checkpoints.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{fft_plan, read_f64, write_f64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (C, H, W) of a rank-3 tensor.
    pub fn chw(&self, layer: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(layer, format!("expected [C,H,W], got {:?}", self.shape))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// A tape: every op appends its value and a closure mapping the output
/// gradient to gradients of its parents.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.g[v.0].clone().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn push(&mut self, value: Tensor, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { parents: parents.into_iter().map(|p| p.0).collect(), back });
        Var(self.values.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.values[loss.0].shape)));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let pg = back(&gi);
                for (&p, gp) in self.nodes[i].parents.iter().zip(pg) {
                    match &mut g[p] {
                        Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gp),
                    }
                }
            }
            g[i] = Some(gi);
        }
        Ok(Grads { g, lens: self.values.iter().map(|t| t.len()).collect() })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.values[a.0].shape, self.values[b.0].shape)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect() };
        Ok(self.push(out, vec![a, b], Some(Box::new(|g| vec![g.to_vec(), g.to_vec()]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect() };
        Ok(self.push(out, vec![a, b], Some(Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (xa, xb) = (self.values[a.0].data.clone(), self.values[b.0].data.clone());
        let out = Tensor { shape: self.values[a.0].shape.clone(), data: xa.iter().zip(&xb).map(|(x, y)| x * y).collect() };
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.iter().zip(&xb).map(|(g, y)| g * y).collect(), g.iter().zip(&xa).map(|(g, x)| g * x).collect()]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = &self.values[a.0];
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x * s).collect() };
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.iter().map(|v| v * s).collect()])))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let va = &self.values[a.0];
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x + s).collect() };
        self.push(out, vec![a], Some(Box::new(|g| vec![g.to_vec()])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.values[a.0].data.iter().sum();
        self.push(Tensor::scalar(s), vec![a], Some(Box::new(move |g| vec![vec![g[0]; n]])))
    }

    /// Σ a ⊙ c for a constant c.
    pub fn dot_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.values[a.0].len() {
            return Err(Error::shape("dot_const", "length mismatch"));
        }
        let s = self.values[a.0].data.iter().zip(&c).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), vec![a], Some(Box::new(move |g| vec![c.iter().map(|v| v * g[0]).collect()]))))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.values[a.0].data.clone())?;
        Ok(self.push(t, vec![a], Some(Box::new(|g| vec![g.to_vec()]))))
    }

    /// Concatenate rank-3 tensors along channels.
    pub fn cat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.values[parts[0].0].chw("cat")?;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        let mut c = 0;
        for p in parts {
            let (pc, ph, pw) = self.values[p.0].chw("cat")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("cat", format!("spatial {}x{} vs {}x{}", ph, pw, h, w)));
            }
            data.extend_from_slice(&self.values[p.0].data);
            sizes.push(pc * h * w);
            c += pc;
        }
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data },
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let mut o = 0;
                for s in &sizes {
                    out.push(g[o..o + s].to_vec());
                    o += s;
                }
                out
            })),
        ))
    }

    /// Channels [c0, c0 + n) of a rank-3 tensor.
    pub fn narrow(&mut self, a: Var, c0: usize, n: usize) -> Result<Var> {
        let (c, h, w) = self.values[a.0].chw("narrow")?;
        if c0 + n > c {
            return Err(Error::shape("narrow", format!("channels {}..{} of {}", c0, c0 + n, c)));
        }
        let hw = h * w;
        let data = self.values[a.0].data[c0 * hw..(c0 + n) * hw].to_vec();
        let total = c * hw;
        Ok(self.push(
            Tensor { shape: vec![n, h, w], data },
            vec![a],
            Some(Box::new(move |g| {
                let mut out = vec![0.0; total];
                out[c0 * hw..(c0 + n) * hw].copy_from_slice(g);
                vec![out]
            })),
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let x = self.values[a.0].data.clone();
        let out = Tensor { shape: self.values[a.0].shape.clone(), data: x.iter().map(|&v| f(v)).collect() };
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.iter().zip(&x).map(|(g, &v)| g * df(v)).collect()])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn lgamma(&mut self, a: Var) -> Var {
        self.unary(a, crate::bayes::lgamma, crate::bayes::digamma_raw)
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, crate::bayes::digamma_raw, crate::bayes::trigamma)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x| 1.0 / x)
    }

    /// 3×3 convolution with reflect padding, or 1×1; weights [Cout,Cin,k,k].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, h, wd) = self.values[x.0].chw("conv2d")?;
        let ws = self.values[w.0].shape.clone();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight shape {:?}", ws)));
        };
        if wcin != cin || k != k2 || !(k == 1 || k == 3) || self.values[b.0].shape != [cout] {
            return Err(Error::shape("conv2d", format!("input {} channels, weight {:?}, bias {:?}", cin, ws, self.values[b.0].shape)));
        }
        if k == 3 && (h < 2 || wd < 2) {
            return Err(Error::shape("conv2d", format!("reflect padding needs at least 2x2, got {}x{}", h, wd)));
        }
        let xv = self.values[x.0].data.clone();
        let wv = self.values[w.0].data.clone();
        let out = conv_forward(&xv, &wv, &self.values[b.0].data, cin, cout, h, wd, k);
        Ok(self.push(
            Tensor { shape: vec![cout, h, wd], data: out },
            vec![x, w, b],
            Some(Box::new(move |g| {
                let gx = conv_transpose(g, &wv, cin, cout, h, wd, k);
                let gw = conv_weight_grad(g, &xv, cin, cout, h, wd, k);
                let gb = (0..cout).map(|o| g[o * h * wd..(o + 1) * h * wd].iter().sum()).collect();
                vec![gx, gw, gb]
            })),
        ))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.values[x.0].chw("avgpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avgpool2", format!("spatial size {}x{} not even", h, w)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.values[x.0].data;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let b = ch * h * w;
                    out[(ch * ho + i) * wo + j] = 0.25
                        * (xv[b + 2 * i * w + 2 * j]
                            + xv[b + 2 * i * w + 2 * j + 1]
                            + xv[b + (2 * i + 1) * w + 2 * j]
                            + xv[b + (2 * i + 1) * w + 2 * j + 1]);
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![c, ho, wo], data: out },
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(ch * h + i) * w + j] = 0.25 * g[(ch * ho + i / 2) * wo + j / 2];
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Bilinear ×2 upsampling with half-pixel centres.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.values[x.0].chw("upsample2")?;
        let (ty, tx) = (upsample_table(h), upsample_table(w));
        let (ho, wo) = (2 * h, 2 * w);
        let xv = &self.values[x.0].data;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for (i, &(y0, y1, sy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, sx)) in tx.iter().enumerate() {
                    let b = ch * h * w;
                    out[(ch * ho + i) * wo + j] = (1.0 - sy) * ((1.0 - sx) * xv[b + y0 * w + x0] + sx * xv[b + y0 * w + x1])
                        + sy * ((1.0 - sx) * xv[b + y1 * w + x0] + sx * xv[b + y1 * w + x1]);
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![c, ho, wo], data: out },
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (i, &(y0, y1, sy)) in ty.iter().enumerate() {
                        for (j, &(x0, x1, sx)) in tx.iter().enumerate() {
                            let gv = g[(ch * ho + i) * wo + j];
                            let b = ch * h * w;
                            gx[b + y0 * w + x0] += gv * (1.0 - sy) * (1.0 - sx);
                            gx[b + y0 * w + x1] += gv * (1.0 - sy) * sx;
                            gx[b + y1 * w + x0] += gv * sy * (1.0 - sx);
                            gx[b + y1 * w + x1] += gv * sy * sx;
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// y = W·vec(x) + b with W [out, in].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = self.values[x.0].len();
        let ws = self.values[w.0].shape.clone();
        let [n_out, wi] = ws[..] else {
            return Err(Error::shape("linear", format!("weight shape {:?}", ws)));
        };
        if wi != n_in || self.values[b.0].shape != [n_out] {
            return Err(Error::shape("linear", format!("input {} vs weight {:?}", n_in, ws)));
        }
        let xv = self.values[x.0].data.clone();
        let wv = self.values[w.0].data.clone();
        let bv = &self.values[b.0].data;
        let out: Vec<f64> = (0..n_out).map(|o| bv[o] + wv[o * n_in..(o + 1) * n_in].iter().zip(&xv).map(|(a, b)| a * b).sum::<f64>()).collect();
        Ok(self.push(
            Tensor { shape: vec![n_out], data: out },
            vec![x, w, b],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n_in];
                let mut gw = vec![0.0; n_out * n_in];
                for o in 0..n_out {
                    for i in 0..n_in {
                        gx[i] += wv[o * n_in + i] * g[o];
                        gw[o * n_in + i] = g[o] * xv[i];
                    }
                }
                vec![gx, gw, g.to_vec()]
            })),
        ))
    }

    /// [C,H,W] → [C,2,H,W/2+1] (real part, imaginary part).
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.values[x.0].chw("rfft2")?;
        let wf = w / 2 + 1;
        let xv = &self.values[x.0].data;
        let mut out = vec![0.0; c * 2 * h * wf];
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for ch in 0..c {
            for (b, v) in buf.iter_mut().zip(&xv[ch * h * w..(ch + 1) * h * w]) {
                *b = Complex64::new(*v, 0.0);
            }
            fft2(&mut buf, h, w, false);
            for k in 0..h {
                for l in 0..wf {
                    out[((ch * 2) * h + k) * wf + l] = buf[k * w + l].re;
                    out[((ch * 2 + 1) * h + k) * wf + l] = buf[k * w + l].im;
                }
            }
        }
        Ok(self.push(
            Tensor { shape: vec![c, 2, h, wf], data: out },
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
                for ch in 0..c {
                    buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                    for k in 0..h {
                        for l in 0..wf {
                            buf[k * w + l] = Complex64::new(g[((ch * 2) * h + k) * wf + l], g[((ch * 2 + 1) * h + k) * wf + l]);
                        }
                    }
                    fft2(&mut buf, h, w, true);
                    for (o, b) in gx[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&buf) {
                        *o = b.re;
                    }
                }
                vec![gx]
            })),
        ))
    }

    /// Inverse of `rfft2` for width `w`: x = Re Σ c_l Y_kl e^{iθ} / (HW),
    /// c_l = 1 on the zero (and Nyquist) column and 2 otherwise.
    pub fn irfft2(&mut self, y: Var, w: usize) -> Result<Var> {
        let s = self.values[y.0].shape.clone();
        let [c, two, h, wf] = s[..] else {
            return Err(Error::shape("irfft2", format!("expected [C,2,H,Wf], got {:?}", s)));
        };
        if two != 2 || wf != w / 2 + 1 {
            return Err(Error::shape("irfft2", format!("spectrum {:?} does not match width {}", s, w)));
        }
        let cl: Vec<f64> = (0..wf).map(|l| if l == 0 || (w % 2 == 0 && l == w / 2) { 1.0 } else { 2.0 }).collect();
        let norm = 1.0 / (h * w) as f64;
        let yv = &self.values[y.0].data;
        let mut out = vec![0.0; c * h * w];
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for ch in 0..c {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for k in 0..h {
                for l in 0..wf {
                    buf[k * w + l] = cl[l] * Complex64::new(yv[((ch * 2) * h + k) * wf + l], yv[((ch * 2 + 1) * h + k) * wf + l]);
                }
            }
            fft2(&mut buf, h, w, true);
            for (o, b) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&buf) {
                *o = b.re * norm;
            }
        }
        Ok(self.push(
            Tensor { shape: vec![c, h, w], data: out },
            vec![y],
            Some(Box::new(move |g| {
                let mut gy = vec![0.0; c * 2 * h * wf];
                let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
                for ch in 0..c {
                    for (b, v) in buf.iter_mut().zip(&g[ch * h * w..(ch + 1) * h * w]) {
                        *b = Complex64::new(*v, 0.0);
                    }
                    fft2(&mut buf, h, w, false);
                    for k in 0..h {
                        for l in 0..wf {
                            let z = buf[k * w + l] * (cl[l] * norm);
                            gy[((ch * 2) * h + k) * wf + l] = z.re;
                            gy[((ch * 2 + 1) * h + k) * wf + l] = z.im;
                        }
                    }
                }
                vec![gy]
            })),
        ))
    }

    /// Complex channel mixing on the lowest `m` modes per axis (rows 0..m and
    /// H−m..H, columns 0..m); weights [Cin,Cout,2,2m,m]; other modes zeroed.
    pub fn spectral_mul(&mut self, x: Var, wt: Var) -> Result<Var> {
        let s = self.values[x.0].shape.clone();
        let [cin, two, h, wf] = s[..] else {
            return Err(Error::shape("spectral_mul", format!("expected [C,2,H,Wf], got {:?}", s)));
        };
        let ws = self.values[wt.0].shape.clone();
        let [wcin, cout, wtwo, m2, m] = ws[..] else {
            return Err(Error::shape("spectral_mul", format!("weight shape {:?}", ws)));
        };
        if two != 2 || wtwo != 2 || wcin != cin || m2 != 2 * m || h < 2 * m || wf < m {
            return Err(Error::shape("spectral_mul", format!("input {:?} incompatible with weight {:?}", s, ws)));
        }
        let rows: Vec<(usize, usize)> = (0..m).map(|k| (k, k)).chain((0..m).map(|k| (h - m + k, m + k))).collect();
        let xv = self.values[x.0].data.clone();
        let wv = self.values[wt.0].data.clone();
        let xi = move |c: usize, p: usize, k: usize, l: usize| ((c * 2 + p) * h + k) * wf + l;
        let wi = move |i: usize, o: usize, p: usize, r: usize, l: usize| (((i * cout + o) * 2 + p) * m2 + r) * m + l;
        let mut out = vec![0.0; cout * 2 * h * wf];
        for &(k, r) in &rows {
            for l in 0..m {
                for o in 0..cout {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..cin {
                        let a = Complex64::new(xv[xi(i, 0, k, l)], xv[xi(i, 1, k, l)]);
                        let b = Complex64::new(wv[wi(i, o, 0, r, l)], wv[wi(i, o, 1, r, l)]);
                        acc += a * b;
                    }
                    out[xi(o, 0, k, l)] = acc.re;
                    out[xi(o, 1, k, l)] = acc.im;
                }
            }
        }
        let xo = move |c: usize, p: usize, k: usize, l: usize| ((c * 2 + p) * h + k) * wf + l;
        Ok(self.push(
            Tensor { shape: vec![cout, 2, h, wf], data: out },
            vec![x, wt],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; cin * 2 * h * wf];
                let mut gw = vec![0.0; wv.len()];
                for &(k, r) in &rows {
                    for l in 0..m {
                        for o in 0..cout {
                            let go = Complex64::new(g[xo(o, 0, k, l)], g[xo(o, 1, k, l)]);
                            for i in 0..cin {
                                let a = Complex64::new(xv[xo(i, 0, k, l)], xv[xo(i, 1, k, l)]);
                                let b = Complex64::new(wv[wi(i, o, 0, r, l)], wv[wi(i, o, 1, r, l)]);
                                let ga = go * b.conj();
                                let gb = go * a.conj();
                                gx[xo(i, 0, k, l)] += ga.re;
                                gx[xo(i, 1, k, l)] += ga.im;
                                gw[wi(i, o, 0, r, l)] += gb.re;
                                gw[wi(i, o, 1, r, l)] += gb.im;
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
        ))
    }

    /// A fixed linear map given by its action and transpose action.
    pub fn linear_map(
        &mut self,
        x: Var,
        out_shape: Vec<usize>,
        apply: Arc<dyn Fn(&[f64]) -> Vec<f64>>,
        transpose: Arc<dyn Fn(&[f64]) -> Vec<f64>>,
    ) -> Result<Var> {
        let y = apply(&self.values[x.0].data);
        let t = Tensor::new(out_shape, y)?;
        Ok(self.push(t, vec![x], Some(Box::new(move |g| vec![transpose(g)]))))
    }

    /// Op with a hand-written value and backward.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, back: BackFn) -> Var {
        self.push(value, inputs.to_vec(), Some(back))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// Reflect-padded copy of every channel, [cin, h + 2r, w + 2r].
fn pad_reflect(x: &[f64], cin: usize, h: usize, wd: usize, r: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let mut out = vec![0.0; cin * hp * wp];
    for i in 0..cin {
        for yp in 0..hp {
            let sy = reflect(yp as isize - r as isize, h);
            let src = &x[(i * h + sy) * wd..(i * h + sy + 1) * wd];
            let dst = &mut out[(i * hp + yp) * wp..(i * hp + yp + 1) * wp];
            for (xp, d) in dst.iter_mut().enumerate() {
                *d = src[reflect(xp as isize - r as isize, wd)];
            }
        }
    }
    out
}

/// Adjoint of `pad_reflect`.
fn fold_reflect(p: &[f64], cin: usize, h: usize, wd: usize, r: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let mut out = vec![0.0; cin * h * wd];
    for i in 0..cin {
        for yp in 0..hp {
            let sy = reflect(yp as isize - r as isize, h);
            for xp in 0..wp {
                out[(i * h + sy) * wd + reflect(xp as isize - r as isize, wd)] += p[(i * hp + yp) * wp + xp];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let hw = h * wd;
    let r = k / 2;
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let xp = pad_reflect(x, cin, h, wd, r);
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cin + i) * k + ky) * k + kx];
                    for y in 0..h {
                        let s0 = (i * hp + y + ky) * wp + kx;
                        let src = &xp[s0..s0 + wd];
                        let dst = &mut out[o * hw + y * wd..o * hw + (y + 1) * wd];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the bias-free convolution with respect to its input.
pub fn conv_transpose(g: &[f64], w: &[f64], cin: usize, cout: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let hw = h * wd;
    let r = k / 2;
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let mut gp = vec![0.0; cin * hp * wp];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cin + i) * k + ky) * k + kx];
                    for y in 0..h {
                        let s0 = (i * hp + y + ky) * wp + kx;
                        let src = &g[o * hw + y * wd..o * hw + (y + 1) * wd];
                        for (d, s) in gp[s0..s0 + wd].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    if r == 0 {
        gp
    } else {
        fold_reflect(&gp, cin, h, wd, r)
    }
}

fn conv_weight_grad(g: &[f64], x: &[f64], cin: usize, cout: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let hw = h * wd;
    let r = k / 2;
    let (hp, wp) = (h + 2 * r, wd + 2 * r);
    let xp = pad_reflect(x, cin, h, wd, r);
    let mut gw = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let s0 = (i * hp + y + ky) * wp + kx;
                        acc += g[o * hw + y * wd..o * hw + (y + 1) * wd].iter().zip(&xp[s0..s0 + wd]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((o * cin + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}

fn upsample_table(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// In-place 2-D DFT of a row-major [h, w] buffer; `inverse` uses e^{+iθ}
/// without normalization.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    if inverse {
        buf.iter_mut().for_each(|v| *v = v.conj());
    }
    let pw = fft_plan(w);
    for row in buf.chunks_exact_mut(w) {
        pw.process(row);
    }
    let ph = fft_plan(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for l in 0..w {
        for k in 0..h {
            col[k] = buf[k * w + l];
        }
        ph.process(&mut col);
        for k in 0..h {
            buf[k * w + l] = col[k];
        }
    }
    if inverse {
        buf.iter_mut().for_each(|v| *v = v.conj());
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

/// Parameters of a store placed on a graph as leaves.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    params: Vec<ParamEntry>,
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect() }
    }

    pub fn grads(&self, bound: &Bound, grads: &Grads) -> Vec<Vec<f64>> {
        bound.vars.iter().map(|&v| grads.get(v)).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// `<stem>.json` manifest plus `<stem>.bin` little-endian values.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut offset = 0;
        let mut params = Vec::new();
        let mut flat = Vec::with_capacity(self.num_params());
        for (n, t) in self.names.iter().zip(&self.tensors) {
            params.push(ParamEntry { name: n.clone(), shape: t.shape.clone(), offset });
            offset += t.len();
            flat.extend_from_slice(&t.data);
        }
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&ParamManifest { params, total: offset })?)?;
        write_f64(&stem.with_extension("bin"), &flat)
    }

    /// Load values into a store with the same layout.
    pub fn load_into(&mut self, stem: &Path) -> Result<()> {
        let m: ParamManifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let flat = read_f64(&stem.with_extension("bin"))?;
        if flat.len() != m.total || m.params.len() != self.tensors.len() {
            return Err(Error::Config(format!("checkpoint {} does not match the model layout", stem.display())));
        }
        for (e, (n, t)) in m.params.iter().zip(self.names.iter().zip(self.tensors.iter_mut())) {
            if &e.name != n || e.shape != t.shape {
                return Err(Error::Config(format!("checkpoint parameter {} {:?} vs model {} {:?}", e.name, e.shape, n, t.shape)));
            }
            let n = t.len();
            t.data.copy_from_slice(&flat[e.offset..e.offset + n]);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { cin: usize, cout: usize, k: usize },
    Relu,
    Softplus,
    Sigmoid,
    Linear { n_in: usize, n_out: usize },
    AvgPool2,
    Upsample2,
    Rfft2,
    Irfft2 { width: usize },
    SpectralMul { cin: usize, cout: usize, modes: usize },
}

impl LayerSpec {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { cin, cout, k } => vec![vec![cout, cin, k, k], vec![cout]],
            LayerSpec::Linear { n_in, n_out } => vec![vec![n_out, n_in], vec![n_out]],
            LayerSpec::SpectralMul { cin, cout, modes } => vec![vec![cin, cout, 2, 2 * modes, modes]],
            _ => vec![],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Softplus => "softplus",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::AvgPool2 => "avgpool2",
            LayerSpec::Upsample2 => "upsample2",
            LayerSpec::Rfft2 => "rfft2",
            LayerSpec::Irfft2 { .. } => "irfft2",
            LayerSpec::SpectralMul { .. } => "spectral_mul",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<usize>,
}

impl Layer {
    /// Registers parameters (He-normal weights, zero biases) in `store`.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let shapes = spec.param_shapes();
        let fan_in = match spec {
            LayerSpec::Conv2d { cin, k, .. } => cin * k * k,
            LayerSpec::Linear { n_in, .. } => n_in,
            LayerSpec::SpectralMul { cin, .. } => cin,
            _ => 1,
        };
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("{prefix}.{}.{i}", spec.name());
                let t = if i == 0 {
                    let std = match spec {
                        LayerSpec::SpectralMul { cin, cout, .. } => 1.0 / (cin * cout) as f64,
                        _ => (2.0 / fan_in as f64).sqrt(),
                    };
                    Tensor::randn(s, std, rng)
                } else {
                    Tensor::zeros(s)
                };
                store.add(name, t)
            })
            .collect();
        Layer { spec, params }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        match self.spec {
            LayerSpec::Conv2d { .. } => g.conv2d(x, b.var(self.params[0]), b.var(self.params[1])),
            LayerSpec::Relu => Ok(g.relu(x)),
            LayerSpec::Softplus => Ok(g.softplus(x)),
            LayerSpec::Sigmoid => Ok(g.sigmoid(x)),
            LayerSpec::Linear { .. } => g.linear(x, b.var(self.params[0]), b.var(self.params[1])),
            LayerSpec::AvgPool2 => g.avgpool2(x),
            LayerSpec::Upsample2 => g.upsample2(x),
            LayerSpec::Rfft2 => g.rfft2(x),
            LayerSpec::Irfft2 { width } => g.irfft2(x, width),
            LayerSpec::SpectralMul { .. } => g.spectral_mul(x, b.var(self.params[0])),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn build<R: Rng + ?Sized>(specs: Vec<LayerSpec>, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let layers = specs.into_iter().enumerate().map(|(i, s)| Layer::new(s, store, &format!("{prefix}.{i}"), rng)).collect();
        Sequential { layers }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(g, b, x)?;
        }
        Ok(x)
    }

    /// Zero the parameters of the last parameterized layer.
    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.iter().rev().find(|l| !l.params.is_empty()) {
            for &p in &l.params {
                store.tensors[p].data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Evaluate without recording anything beyond one throwaway tape.
pub fn forward_eval(net: &Sequential, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let x = g.leaf(input.clone());
    let y = net.forward(&mut g, &b, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState { m: store.zero_grads(), v: store.zero_grads(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.tensors.len() {
            return Err(Error::shape("adam", "gradient list does not match parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, t) in store.tensors.iter_mut().enumerate() {
            for i in 0..t.len() {
                let gi = grads[k][i];
                self.m[k][i] = self.beta1 * self.m[k][i] + (1.0 - self.beta1) * gi;
                self.v[k][i] = self.beta2 * self.v[k][i] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k][i] / c1;
                let vh = self.v[k][i] / c2;
                t.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel: f64,
    pub passed: bool,
}

/// Central differences against autodiff for every parameter tensor (up to
/// `max_elems` evenly spaced entries each). The error of an entry is
/// |a − f| / max(|a|, |f|, 1e-3·max|f|).
pub fn grad_check(
    store: &ParamStore,
    loss: &dyn Fn(&mut Graph, &Bound) -> Result<Var>,
    step: f64,
    tol: f64,
    max_elems: Option<usize>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let l = loss(&mut g, &b)?;
    let grads = store.grads(&b, &g.backward(l)?);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let l = loss(&mut g, &b)?;
        Ok(g.value(l).data[0])
    };
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut max_rel: f64 = 0.0;
    for k in 0..store.tensors.len() {
        let n = store.tensors[k].len();
        let idx: Vec<usize> = match max_elems {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let x0 = work.tensors[k].data[i];
            work.tensors[k].data[i] = x0 + step;
            let fp = eval(&work)?;
            work.tensors[k].data[i] = x0 - step;
            let fm = eval(&work)?;
            work.tensors[k].data[i] = x0;
            fd.push((fp - fm) / (2.0 * step));
        }
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut worst: f64 = 0.0;
        for (j, &i) in idx.iter().enumerate() {
            let a = grads[k][i];
            let denom = a.abs().max(fd[j].abs()).max(1e-3 * scale).max(1e-300);
            worst = worst.max((a - fd[j]).abs() / denom);
        }
        max_rel = max_rel.max(worst);
        per_param.push((store.names[k].clone(), worst));
    }
    Ok(GradCheckReport { per_param, max_rel, passed: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Loss Σ c ⊙ f(x) with a fixed random c, for gradient checks.
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let n = g.value(y).len();
        let mut r = rng(seed);
        let c: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        g.dot_const(y, c)
    }

    fn check_layer(spec: LayerSpec, input: &[usize], tol: f64) {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let layer = Layer::new(spec.clone(), &mut store, "t", &mut r);
        // biases are zero-initialized; perturb so that their gradients are exercised
        for t in store.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
        let x = store.add("input", Tensor::randn(input, 1.0, &mut r));
        let rep = grad_check(
            &store,
            &|g, b| {
                let y = layer.forward(g, b, b.var(x))?;
                weighted(g, y, 7)
            },
            1e-5,
            tol,
            None,
        )
        .unwrap();
        assert!(rep.passed, "{:?}: {:?}", spec, rep.per_param);
    }

    #[test]
    fn layers_pass_gradient_check() {
        check_layer(LayerSpec::Conv2d { cin: 2, cout: 3, k: 3 }, &[2, 5, 4], 1e-6);
        check_layer(LayerSpec::Conv2d { cin: 3, cout: 2, k: 1 }, &[3, 4, 4], 1e-6);
        check_layer(LayerSpec::Linear { n_in: 12, n_out: 5 }, &[3, 2, 2], 1e-8);
        check_layer(LayerSpec::Relu, &[2, 3, 3], 1e-4);
        check_layer(LayerSpec::Softplus, &[2, 3, 3], 1e-4);
        check_layer(LayerSpec::Sigmoid, &[2, 3, 3], 1e-4);
        check_layer(LayerSpec::AvgPool2, &[2, 4, 6], 1e-6);
        check_layer(LayerSpec::Upsample2, &[2, 3, 5], 1e-6);
        check_layer(LayerSpec::Rfft2, &[2, 6, 8], 1e-6);
        check_layer(LayerSpec::Irfft2 { width: 8 }, &[2, 2, 6, 5], 1e-6);
        check_layer(LayerSpec::Irfft2 { width: 7 }, &[1, 2, 6, 4], 1e-6);
        check_layer(LayerSpec::SpectralMul { cin: 2, cout: 3, modes: 2 }, &[2, 2, 6, 5], 1e-6);
    }

    #[test]
    fn special_ops_and_fan_out_pass_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let x = store.add("x", Tensor::new(vec![5], (0..5).map(|_| r.gen_range(1.2..6.0)).collect()).unwrap());
        let rep = grad_check(
            &store,
            &|g, b| {
                let a = g.lgamma(b.var(x));
                let d = g.digamma(b.var(x));
                let l = g.ln(b.var(x));
                let p = g.mul(a, d)?;
                let q = g.add(p, l)?;
                // x used several times: gradients must accumulate over paths
                let s = g.mul(q, b.var(x))?;
                weighted(g, s, 3)
            },
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.per_param);
    }

    #[test]
    fn composite_ops_pass_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let a = store.add("a", Tensor::randn(&[2, 4, 4], 1.0, &mut r));
        let c = store.add("c", Tensor::randn(&[1, 4, 4], 1.0, &mut r));
        let rep = grad_check(
            &store,
            &|g, b| {
                let cat = g.cat(&[b.var(a), b.var(c)])?;
                let n = g.narrow(cat, 1, 2)?;
                let s = g.scale(n, 1.7);
                let t = g.add_scalar(s, 0.3);
                let u = g.sub(t, n)?;
                let v = g.mul(u, u)?;
                let r = g.reshape(v, vec![32])?;
                let s = g.sum(r);
                let w = weighted(g, n, 4)?;
                g.add(s, w)
            },
            1e-5,
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.per_param);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![4], vec![30.0, 50.0, -40.0, 2.0]).unwrap());
        let rep = grad_check(
            &store,
            &|g, b| {
                let y = g.softplus(b.var(x));
                Ok(g.sum(y))
            },
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.per_param);
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut g = Graph::new();
        let x = vec![0.5, -2.0, 3.0];
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = g.dot_const(w, x.clone()).unwrap();
        assert_eq!(g.backward(l).unwrap().get(w), x);
    }

    #[test]
    fn empty_network_is_identity_and_identity_kernel_reproduces() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
        assert_eq!(forward_eval(&Sequential::default(), &ParamStore::new(), &x).unwrap(), x);
        let mut store = ParamStore::new();
        let net = Sequential::build(vec![LayerSpec::Conv2d { cin: 2, cout: 2, k: 3 }], &mut store, "c", &mut r);
        let w = &mut store.tensors[net.layers[0].params[0]].data;
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..2 {
            w[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = forward_eval(&net, &store, &x).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fft_round_trip() {
        let mut r = rng(5);
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut r);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let f = g.rfft2(v).unwrap();
        assert_eq!(g.value(f).shape, vec![1, 2, 16, 9]);
        let back = g.irfft2(f, 16).unwrap();
        for (a, b) in g.value(back).data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // odd width
        let x = Tensor::randn(&[2, 6, 7], 1.0, &mut r);
        let v = g.leaf(x.clone());
        let f = g.rfft2(v).unwrap();
        let back = g.irfft2(f, 7).unwrap();
        for (a, b) in g.value(back).data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        let mut r = rng(6);
        let (cin, cout, h, w) = (3, 2, 6, 5);
        for k in [1usize, 3] {
            let wt = Tensor::randn(&[cout, cin, k, k], 1.0, &mut r);
            let x = Tensor::randn(&[cin, h, w], 1.0, &mut r);
            let y = Tensor::randn(&[cout, h, w], 1.0, &mut r);
            let cx = conv_forward(&x.data, &wt.data, &vec![0.0; cout], cin, cout, h, w, k);
            let cty = conv_transpose(&y.data, &wt.data, cin, cout, h, w, k);
            let lhs: f64 = cx.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&cty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_preserves_constants_and_pool_averages() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3, 3], vec![2.0; 9]).unwrap());
        let u = g.upsample2(x).unwrap();
        assert!(g.value(u).data.iter().all(|v| (v - 2.0).abs() < 1e-15));
        let p = g.avgpool2(u).unwrap();
        assert_eq!(g.value(p).shape, vec![1, 3, 3]);
        let odd = g.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.avgpool2(odd), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[3, 5, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[3]));
        match g.conv2d(x, w, b) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, "conv2d"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn untouched_parameters_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::zeros(&[3]));
        let l = g.mul(a, a).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(a), vec![4.0]);
        assert_eq!(gr.get(unused), vec![0.0; 3]);
    }

    #[test]
    fn adam_behaviour() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
        let mut st = AdamState::new(&store);
        st.step(&mut store, &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(store.tensors[0].data, vec![1.0, -3.0]);
        assert_eq!(st.t, 1);
        // f(w) = ½w², gradient w
        let mut s1 = ParamStore::new();
        s1.add("w", Tensor::scalar(1.0));
        let mut a1 = AdamState::new(&s1);
        a1.step(&mut s1, &[vec![1.0]], 0.1).unwrap();
        assert!(s1.tensors[0].data[0] < 1.0);
        // anisotropic 2-D quadratic
        let f = |w: &[f64]| 0.5 * (w[0] * w[0] + 10.0 * w[1] * w[1]);
        let start = f(&store.tensors[0].data);
        let mut st = AdamState::new(&store);
        for _ in 0..200 {
            let w = store.tensors[0].data.clone();
            st.step(&mut store, &[vec![w[0], 10.0 * w[1]]], 0.05).unwrap();
        }
        assert!(f(&store.tensors[0].data) < 1e-6 * start, "{}", f(&store.tensors[0].data));
    }

    #[test]
    fn deterministic_forward_and_gradients() {
        let run = || {
            let mut r = rng(9);
            let mut store = ParamStore::new();
            let net = Sequential::build(
                vec![LayerSpec::Conv2d { cin: 1, cout: 4, k: 3 }, LayerSpec::Relu, LayerSpec::Conv2d { cin: 4, cout: 1, k: 3 }],
                &mut store,
                "n",
                &mut r,
            );
            let x = Tensor::randn(&[1, 6, 6], 1.0, &mut r);
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let xv = g.leaf(x);
            let y = net.forward(&mut g, &b, xv).unwrap();
            let l = g.sum(y);
            (g.value(y).clone(), store.grads(&b, &g.backward(l).unwrap()))
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("vinet-nn-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut r = rng(10);
        let mut store = ParamStore::new();
        Sequential::build(vec![LayerSpec::Conv2d { cin: 2, cout: 3, k: 3 }, LayerSpec::Linear { n_in: 4, n_out: 2 }], &mut store, "m", &mut r);
        store.save(&dir.join("ckpt")).unwrap();
        let mut other = store.clone();
        other.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        other.load_into(&dir.join("ckpt")).unwrap();
        assert_eq!(other, store);
        let mut wrong = ParamStore::new();
        wrong.add("m.0.conv2d.0", Tensor::zeros(&[1]));
        assert!(wrong.load_into(&dir.join("ckpt")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
