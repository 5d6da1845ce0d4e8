//! Regular node grids on rectangles, trapezoid-weighted L2 geometry, the
//! cosine transform that diagonalizes the Neumann Laplacian, and bilinear
//! rescaling between resolutions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Domain {
    pub const UNIT: Domain = Domain { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Node-based grid: node (i, j) sits at (x0 + i·hx, y0 + j·hy).
/// Values are stored row-major over the shape (nx, ny), i.e. index i·ny + j.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, domain: Domain) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!("grid needs at least 2 nodes per axis, got {nx}x{ny}")));
        }
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(Error::Config("degenerate grid domain".into()));
        }
        Ok(Grid { nx, ny, domain })
    }

    /// n×n nodes on [0,1]².
    pub fn unit(n: usize) -> Self {
        Grid::new(n, n, Domain::UNIT).expect("unit grid needs n >= 2")
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hx(&self) -> f64 {
        self.domain.width() / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        self.domain.height() / (self.ny - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.domain.x0 + i as f64 * self.hx()
    }

    pub fn y(&self, j: usize) -> f64 {
        self.domain.y0 + j as f64 * self.hy()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn wx(&self) -> Vec<f64> {
        trapezoid(self.nx, self.hx())
    }

    pub fn wy(&self) -> Vec<f64> {
        trapezoid(self.ny, self.hy())
    }

    /// Trapezoid quadrature weights w_ij = wx_i·wy_j.
    pub fn weights(&self) -> Vec<f64> {
        let (wx, wy) = (self.wx(), self.wy());
        let mut w = Vec::with_capacity(self.len());
        for a in &wx {
            for b in &wy {
                w.push(a * b);
            }
        }
        w
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{}x{} {:?} vs {}x{} {:?}",
                self.nx, self.ny, self.domain, other.nx, other.ny, other.domain
            )));
        }
        Ok(())
    }
}

fn trapezoid(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape("GridFunction", format!("{} values for {} nodes", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite grid values".into()));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        GridFunction { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        GridFunction { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        GridFunction { grid, values }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridFunction { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn zip(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(GridFunction { grid: self.grid, values })
    }

    /// Bilinear evaluation; points outside the domain are clamped onto it.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let g = &self.grid;
        let (i, tx) = locate(x, g.domain.x0, g.hx(), g.nx);
        let (j, ty) = locate(y, g.domain.y0, g.hy(), g.ny);
        let v = |a, b| self.values[g.idx(a, b)];
        (1.0 - tx) * ((1.0 - ty) * v(i, j) + ty * v(i, j + 1)) + tx * ((1.0 - ty) * v(i + 1, j) + ty * v(i + 1, j + 1))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Little-endian f64 blob plus a JSON sidecar describing the grid.
    pub fn save(&self, base: &Path) -> Result<()> {
        if let Some(dir) = base.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        write_f64(&base.with_extension("f64"), &self.values)?;
        let side = serde_json::json!({ "nx": self.grid.nx, "ny": self.grid.ny, "domain": self.grid.domain });
        fs::write(base.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Side {
            nx: usize,
            ny: usize,
            domain: Domain,
        }
        let side: Side = serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
        let grid = Grid::new(side.nx, side.ny, side.domain)?;
        GridFunction::new(grid, read_f64(&base.with_extension("f64"))?)
    }
}

pub fn write_f64(path: &Path, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * v.len());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 {
        return Err(Error::Domain(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

// cell index and local coordinate; snaps to nodes so nested grids read exactly
fn locate(x: f64, x0: f64, h: f64, n: usize) -> (usize, f64) {
    let mut s = (x - x0) / h;
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        s = r;
    }
    let s = s.clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    (i, s - i as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumField {
    pub grid: Grid,
    pub coeffs: Vec<f64>,
}

impl SpectrumField {
    pub fn zeros(grid: Grid) -> Self {
        SpectrumField { grid, coeffs: vec![0.0; grid.len()] }
    }

    pub fn at(&self, k: usize, l: usize) -> f64 {
        self.coeffs[self.grid.idx(k, l)]
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

pub(crate) fn fft_plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache.entry(len).or_insert_with(|| planner.plan_fft_forward(len)).clone()
    })
}

/// Σ_{k=0}^{n} x_k cos(π i k / n) for all i, via an FFT of the even extension.
fn cos_sum(x: &[f64], out: &mut [f64], buf: &mut Vec<Complex64>) {
    let n = x.len() - 1;
    let m = 2 * n;
    buf.clear();
    buf.extend(x.iter().map(|&v| Complex64::new(v, 0.0)));
    buf.extend(x[1..n].iter().rev().map(|&v| Complex64::new(v, 0.0)));
    fft_plan(m).process(buf);
    for (i, o) in out.iter_mut().enumerate() {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        *o = 0.5 * (buf[i].re + x[0] + sign * x[n]);
    }
}

/// Normalization c_k so that c_k cos(kπ(x−x0)/L) has unit trapezoid norm.
pub fn cos_norm(k: usize, n: usize, length: f64) -> f64 {
    if k == 0 || k == n - 1 {
        (1.0 / length).sqrt()
    } else {
        (2.0 / length).sqrt()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Dir {
    Forward,
    Inverse,
}

fn transform_1d(x: &mut [f64], length: f64, dir: Dir, tmp: &mut [f64], buf: &mut Vec<Complex64>) {
    let n = x.len();
    let h = length / (n - 1) as f64;
    match dir {
        Dir::Forward => {
            // Σ_i w_i x_i cos = h·(x0/2 + Σ_mid x_i cos + x_n(−1)^k/2) = h·(S_k − x0/2 − ±x_n/2)
            cos_sum(x, tmp, buf);
            let (first, last) = (x[0], x[n - 1]);
            for k in 0..n {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let s = tmp[k] - 0.5 * first - 0.5 * sign * last;
                x[k] = cos_norm(k, n, length) * h * s;
            }
        }
        Dir::Inverse => {
            for k in 0..n {
                x[k] *= cos_norm(k, n, length);
            }
            cos_sum(x, tmp, buf);
            x.copy_from_slice(&tmp[..n]);
        }
    }
}

fn separable(grid: &Grid, v: &mut [f64], dir: Dir) {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut buf = Vec::new();
    let mut tmp = vec![0.0; nx.max(ny)];
    for row in v.chunks_exact_mut(ny) {
        transform_1d(row, grid.domain.height(), dir, &mut tmp, &mut buf);
    }
    let mut col = vec![0.0; nx];
    for j in 0..ny {
        for i in 0..nx {
            col[i] = v[i * ny + j];
        }
        transform_1d(&mut col, grid.domain.width(), dir, &mut tmp, &mut buf);
        for i in 0..nx {
            v[i * ny + j] = col[i];
        }
    }
}

/// Coordinates of f in the trapezoid-orthonormal cosine basis.
pub fn dct2(f: &GridFunction) -> SpectrumField {
    let mut c = f.values.clone();
    separable(&f.grid, &mut c, Dir::Forward);
    SpectrumField { grid: f.grid, coeffs: c }
}

pub fn idct2(s: &SpectrumField) -> GridFunction {
    let mut v = s.coeffs.clone();
    separable(&s.grid, &mut v, Dir::Inverse);
    GridFunction { grid: s.grid, values: v }
}

/// Value of the basis function φ_kl at node (i, j).
pub fn basis_value(grid: &Grid, k: usize, l: usize, i: usize, j: usize) -> f64 {
    let (nx, ny) = (grid.nx, grid.ny);
    let cx = cos_norm(k, nx, grid.domain.width()) * (std::f64::consts::PI * (i * k) as f64 / (nx - 1) as f64).cos();
    let cy = cos_norm(l, ny, grid.domain.height()) * (std::f64::consts::PI * (j * l) as f64 / (ny - 1) as f64).cos();
    cx * cy
}

pub fn inner_l2(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    Ok(weighted_dot(&f.grid, &f.values, &g.values))
}

pub fn norm_l2(f: &GridFunction) -> f64 {
    weighted_dot(&f.grid, &f.values, &f.values).sqrt()
}

pub(crate) fn weighted_dot(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    let (wx, wy) = (grid.wx(), grid.wy());
    let mut s = 0.0;
    for i in 0..grid.nx {
        let mut r = 0.0;
        for j in 0..grid.ny {
            let k = i * grid.ny + j;
            r += wy[j] * a[k] * b[k];
        }
        s += wx[i] * r;
    }
    s
}

/// 1-D linear interpolation from a source axis onto target coordinates.
#[derive(Clone, Debug)]
pub struct Interp1 {
    pub n_src: usize,
    pub idx: Vec<usize>,
    pub t: Vec<f64>,
}

impl Interp1 {
    pub fn new(src_x0: f64, src_h: f64, n_src: usize, targets: impl Iterator<Item = f64>) -> Self {
        let (mut idx, mut t) = (Vec::new(), Vec::new());
        for x in targets {
            let (i, s) = locate(x, src_x0, src_h, n_src);
            idx.push(i);
            t.push(s);
        }
        Interp1 { n_src, idx, t }
    }

    pub fn n_out(&self) -> usize {
        self.idx.len()
    }

    /// Dense (n_out × n_src) form, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_out() * self.n_src];
        for (r, (&i, &t)) in self.idx.iter().zip(&self.t).enumerate() {
            m[r * self.n_src + i] += 1.0 - t;
            m[r * self.n_src + i + 1] += t;
        }
        m
    }
}

/// Separable bilinear map between two grids: out = Rx · F · Ryᵀ.
#[derive(Clone, Debug)]
pub struct Rescaler {
    pub src: Grid,
    pub dst: Grid,
    rx: Interp1,
    ry: Interp1,
}

impl Rescaler {
    pub fn new(src: Grid, dst: Grid) -> Self {
        let rx = Interp1::new(src.domain.x0, src.hx(), src.nx, (0..dst.nx).map(|i| dst.x(i)));
        let ry = Interp1::new(src.domain.y0, src.hy(), src.ny, (0..dst.ny).map(|j| dst.y(j)));
        Rescaler { src, dst, rx, ry }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply_raw(&self, v: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return v.to_vec();
        }
        let (sny, dny) = (self.src.ny, self.dst.ny);
        // along y first: src.nx × dst.ny
        let mut tmp = vec![0.0; self.src.nx * dny];
        for i in 0..self.src.nx {
            for (j, (&k, &t)) in self.ry.idx.iter().zip(&self.ry.t).enumerate() {
                tmp[i * dny + j] = (1.0 - t) * v[i * sny + k] + t * v[i * sny + k + 1];
            }
        }
        let mut out = vec![0.0; self.dst.len()];
        for (i, (&k, &t)) in self.rx.idx.iter().zip(&self.rx.t).enumerate() {
            for j in 0..dny {
                out[i * dny + j] = (1.0 - t) * tmp[k * dny + j] + t * tmp[(k + 1) * dny + j];
            }
        }
        out
    }

    /// Euclidean transpose of `apply_raw`.
    pub fn transpose_raw(&self, g: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return g.to_vec();
        }
        let (sny, dny) = (self.src.ny, self.dst.ny);
        let mut tmp = vec![0.0; self.src.nx * dny];
        for (i, (&k, &t)) in self.rx.idx.iter().zip(&self.rx.t).enumerate() {
            for j in 0..dny {
                tmp[k * dny + j] += (1.0 - t) * g[i * dny + j];
                tmp[(k + 1) * dny + j] += t * g[i * dny + j];
            }
        }
        let mut out = vec![0.0; self.src.len()];
        for i in 0..self.src.nx {
            for (j, (&k, &t)) in self.ry.idx.iter().zip(&self.ry.t).enumerate() {
                out[i * sny + k] += (1.0 - t) * tmp[i * dny + j];
                out[i * sny + k + 1] += t * tmp[i * dny + j];
            }
        }
        out
    }
}

/// Bilinear interpolation of f at the nodes of `target`.
pub fn rescale(f: &GridFunction, target: &Grid) -> GridFunction {
    if f.grid == *target {
        return f.clone();
    }
    let r = Rescaler::new(f.grid, *target);
    GridFunction { grid: *target, values: r.apply_raw(&f.values) }
}
