//! Banded factorizations and Krylov solvers shared by the priors, forward
//! models, and the ELBO.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Symmetric band matrix, lower band stored row-wise: entry (i, j), j ≤ i,
/// lives at `data[i * (bw + 1) + (i - j)]`.
#[derive(Clone, Debug)]
pub struct SymBand {
    pub n: usize,
    pub bw: usize,
    pub data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBand { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[i * (self.bw + 1) + (i - j)]
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bw);
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for d in 1..=self.bw.min(i) {
                let j = i - d;
                y[i] += row[d] * x[j];
                y[j] += row[d] * x[i];
            }
        }
        y
    }

    /// B·diag(s)·B for symmetric band B; bandwidth doubles.
    pub fn sandwich(&self, s: &[f64]) -> SymBand {
        let bw2 = (2 * self.bw).min(self.n.saturating_sub(1));
        let mut out = SymBand::zeros(self.n, bw2);
        for i in 0..self.n {
            let lo = i.saturating_sub(bw2);
            for j in lo..=i {
                let klo = i.saturating_sub(self.bw).max(j.saturating_sub(self.bw));
                let khi = (j + self.bw).min(self.n - 1).min(i + self.bw);
                let mut acc = 0.0;
                for k in klo..=khi {
                    acc += self.get(i, k) * s[k] * self.get(k, j);
                }
                out.data[i * (bw2 + 1) + (i - j)] = acc;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                m[i * self.n + j] = self.get(i, j);
            }
        }
        m
    }
}

/// LDLᵀ factorization of a symmetric positive definite band matrix.
#[derive(Clone, Debug)]
pub struct BandLdl {
    pub n: usize,
    pub bw: usize,
    // unit-lower L in the same layout as SymBand; slot 0 holds D
    l: Vec<f64>,
}

impl BandLdl {
    pub fn factor(a: &SymBand) -> Result<Self> {
        let (n, bw) = (a.n, a.bw);
        let s = bw + 1;
        let mut l = a.data.clone();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            // off-diagonal entries of row i
            for j in lo..i {
                let mut v = l[i * s + (i - j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    v -= l[i * s + (i - k)] * l[j * s + (j - k)] * l[k * s];
                }
                l[i * s + (i - j)] = v / l[j * s];
            }
            let mut d = l[i * s];
            for k in lo..i {
                let lik = l[i * s + (i - k)];
                d -= lik * lik * l[k * s];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::solver(format!("band matrix not positive definite at row {i}"), d));
            }
            l[i * s] = d;
        }
        Ok(BandLdl { n, bw, l })
    }

    #[inline]
    fn lij(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (i - j)]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.l[i * (self.bw + 1)]
    }

    pub fn logdet(&self) -> f64 {
        (0..self.n).map(|i| self.diag(i).ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut v = x[i];
            for k in i.saturating_sub(bw)..i {
                v -= self.lij(i, k) * x[k];
            }
            x[i] = v;
        }
        for i in 0..n {
            x[i] /= self.diag(i);
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                v -= self.lij(k, i) * x[k];
            }
            x[i] = v;
        }
        x
    }

    /// Entries of A⁻¹ inside the band (Takahashi recurrences); returns the
    /// band in SymBand layout.
    pub fn selected_inverse(&self) -> SymBand {
        let (n, bw) = (self.n, self.bw);
        let mut z = SymBand::zeros(n, bw);
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            for j in (i + 1..=hi).rev() {
                let mut v = 0.0;
                for k in i + 1..=hi {
                    v -= self.lij(k, i) * z.get(k, j);
                }
                z.data[j * (bw + 1) + (j - i)] = v;
            }
            let mut v = 1.0 / self.diag(i);
            for k in i + 1..=hi {
                v -= self.lij(k, i) * z.get(k, i);
            }
            z.data[i * (bw + 1)] = v;
        }
        z
    }

    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let z = self.selected_inverse();
        (0..self.n).map(|i| z.data[i * (self.bw + 1)]).collect()
    }
}

/// General complex band matrix with kl = ku = bw, LU with partial pivoting.
/// Row i stores columns [i − bw, i + 2·bw] (room for pivoting fill).
#[derive(Clone, Debug)]
pub struct ComplexBand {
    pub n: usize,
    pub bw: usize,
    data: Vec<Complex64>,
}

impl ComplexBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        ComplexBand { n, bw, data: vec![Complex64::new(0.0, 0.0); n * (3 * bw + 1)] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.bw >= i && j <= i + 2 * self.bw);
        i * (3 * self.bw + 1) + (j + self.bw - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if j + self.bw < i || j > i + 2 * self.bw {
            return Complex64::new(0.0, 0.0);
        }
        self.data[self.slot(i, j)]
    }

    /// A·x using the original (unfactored) entries.
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let hi = (i + self.bw).min(self.n - 1);
            let mut acc = Complex64::new(0.0, 0.0);
            for j in lo..=hi {
                acc += self.data[self.slot(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn factor(mut self) -> Result<ComplexBandLu> {
        let (n, bw) = (self.n, self.bw);
        let mut piv = vec![0usize; n];
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        for k in 0..n {
            let last = (k + bw).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].norm();
            for i in k + 1..=last {
                let v = self.data[self.slot(i, k)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::solver(format!("singular band system at column {k}"), best));
            }
            piv[k] = p;
            let ucols = (k + 2 * bw).min(n - 1);
            if p != k {
                for j in k..=ucols {
                    let (a, b) = (self.slot(k, j), self.slot(p, j));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.slot(k, k)];
            for i in k + 1..=last {
                let s = self.slot(i, k);
                let m = self.data[s] / pivot;
                self.data[s] = m;
                if m != Complex64::new(0.0, 0.0) {
                    for j in k + 1..=ucols {
                        let kj = self.data[self.slot(k, j)];
                        let ij = self.slot(i, j);
                        self.data[ij] -= m * kj;
                    }
                }
            }
        }
        Ok(ComplexBandLu { a: self, piv })
    }
}

#[derive(Clone, Debug)]
pub struct ComplexBandLu {
    a: ComplexBand,
    piv: Vec<usize>,
}

impl ComplexBandLu {
    pub fn n(&self) -> usize {
        self.a.n
    }

    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let (n, bw) = (self.a.n, self.a.bw);
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            for i in k + 1..=(k + bw).min(n - 1) {
                x[i] -= self.a.data[self.a.slot(i, k)] * xk;
            }
        }
        for k in (0..n).rev() {
            let mut v = x[k];
            for j in k + 1..=(k + 2 * bw).min(n - 1) {
                v -= self.a.data[self.a.slot(k, j)] * x[j];
            }
            x[k] = v / self.a.data[self.a.slot(k, k)];
        }
        x
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { rel_tol: 1e-10, max_iter: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Preconditioned CG for an operator self-adjoint under the inner product
/// `dot`; `precond` must be self-adjoint positive definite in that product.
pub fn pcg(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    precond: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    dot: &dyn Fn(&[f64], &[f64]) -> f64,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: CgConfig,
) -> Result<CgOutcome> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(CgOutcome { x: vec![0.0; n], iterations: 0, rel_residual: 0.0 });
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut r = if x0.is_some() {
        let ax = apply(&x)?;
        b.iter().zip(&ax).map(|(b, a)| b - a).collect()
    } else {
        b.to_vec()
    };
    let mut rn = dot(&r, &r).sqrt() / bnorm;
    if rn <= cfg.rel_tol {
        return Ok(CgOutcome { x, iterations: 0, rel_residual: rn });
    }
    let mut z = precond(&r)?;
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=cfg.max_iter {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::solver("operator not positive definite in CG", rn));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rn = dot(&r, &r).sqrt() / bnorm;
        if rn <= cfg.rel_tol {
            return Ok(CgOutcome { x, iterations: it, rel_residual: rn });
        }
        z = precond(&r)?;
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::solver(format!("CG did not converge in {} iterations", cfg.max_iter), rn))
}
