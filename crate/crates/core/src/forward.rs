//! Linear forward maps u ↦ d and their exact discrete adjoints: the
//! spectral elliptic smoothing model and multi-frequency Helmholtz with PML.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dct2, idct2, Grid, GridFunction};
use crate::linalg::{ComplexBand, ComplexBandLu};

/// A linear map from grid functions to real data vectors; `adjoint` is
/// taken w.r.t. the trapezoid L2 product on the grid and the Euclidean
/// product on data.
pub trait LinearForward: Send + Sync {
    fn grid(&self) -> Grid;
    fn n_data(&self) -> usize;
    fn apply(&self, u: &GridFunction) -> Result<Vec<f64>>;
    fn adjoint(&self, v: &[f64]) -> Result<GridFunction>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    pub points: Vec<(f64, f64)>,
}

impl SensorSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        for &(x, y) in &points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Config(format!("sensor ({x}, {y}) outside the closed unit square")));
            }
        }
        Ok(SensorSet { points })
    }

    /// {(k/m, l/m) : k, l = 1..m}, x-major (matches an m×m data array).
    pub fn lattice(m: usize) -> Self {
        let mut p = Vec::with_capacity(m * m);
        for k in 1..=m {
            for l in 1..=m {
                p.push((k as f64 / m as f64, l as f64 / m as f64));
            }
        }
        SensorSet { points: p }
    }

    /// 4m equally spaced points on ∂[0,1]², counter-clockwise from the origin.
    pub fn boundary(m: usize) -> Self {
        let mut p = Vec::with_capacity(4 * m);
        let s = |i: usize| i as f64 / m as f64;
        for i in 0..m {
            p.push((s(i), 0.0));
        }
        for i in 0..m {
            p.push((1.0, s(i)));
        }
        for i in 0..m {
            p.push((1.0 - s(i), 1.0));
        }
        for i in 0..m {
            p.push((0.0, 1.0 - s(i)));
        }
        SensorSet { points: p }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bilinear point evaluation as a sparse (N_d × N) operator.
#[derive(Clone, Debug)]
pub struct PointSampler {
    pub n_nodes: usize,
    rows: Vec<[(usize, f64); 4]>,
}

impl PointSampler {
    pub fn new(grid: &Grid, sensors: &SensorSet) -> Self {
        let rows = sensors
            .points
            .iter()
            .map(|&(x, y)| {
                let (i, tx) = locate(x, grid.domain.x0, grid.hx(), grid.nx);
                let (j, ty) = locate(y, grid.domain.y0, grid.hy(), grid.ny);
                [
                    (grid.idx(i, j), (1.0 - tx) * (1.0 - ty)),
                    (grid.idx(i, j + 1), (1.0 - tx) * ty),
                    (grid.idx(i + 1, j), tx * (1.0 - ty)),
                    (grid.idx(i + 1, j + 1), tx * ty),
                ]
            })
            .collect();
        PointSampler { n_nodes: grid.len(), rows }
    }

    pub fn n_points(&self) -> usize {
        self.rows.len()
    }

    pub fn apply<T>(&self, v: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        self.rows.iter().map(|r| r.iter().fold(T::default(), |acc, &(k, w)| acc + v[k] * w)).collect()
    }

    pub fn transpose<T>(&self, d: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::AddAssign + std::ops::Mul<f64, Output = T>,
    {
        let mut out = vec![T::default(); self.n_nodes];
        for (r, &di) in self.rows.iter().zip(d) {
            for &(k, w) in r {
                out[k] += di * w;
            }
        }
        out
    }
}

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

/// (−α∇² + I)w = u with Neumann conditions, solved in the cosine basis, then
/// sampled at the sensors.
#[derive(Clone, Debug)]
pub struct EllipticForward {
    pub alpha_pde: f64,
    pub grid: Grid,
    pub sensors: SensorSet,
    gains: Vec<f64>,
    sampler: PointSampler,
}

impl EllipticForward {
    pub fn new(grid: Grid, alpha_pde: f64, sensors: SensorSet) -> Result<Self> {
        if !(alpha_pde > 0.0) {
            return Err(Error::Config("alpha_pde must be positive".into()));
        }
        let lam = crate::prior::laplacian_eigvals(&grid, crate::prior::Spectrum::Continuum);
        let gains = lam.iter().map(|l| 1.0 / (1.0 + alpha_pde * l)).collect();
        let sampler = PointSampler::new(&grid, &sensors);
        Ok(EllipticForward { alpha_pde, grid, sensors, gains, sampler })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// The smoothed field w = F u before sampling.
    pub fn solve(&self, u: &GridFunction) -> Result<GridFunction> {
        self.grid.check_same(&u.grid)?;
        let mut s = dct2(u);
        for (c, g) in s.coeffs.iter_mut().zip(&self.gains) {
            *c *= g;
        }
        Ok(idct2(&s))
    }
}

pub fn elliptic_apply(h: &EllipticForward, u: &GridFunction) -> Result<Vec<f64>> {
    Ok(h.sampler.apply(&h.solve(u)?.values))
}

pub fn elliptic_adjoint(h: &EllipticForward, v: &[f64]) -> Result<GridFunction> {
    if v.len() != h.sensors.len() {
        return Err(Error::shape("elliptic_adjoint", format!("{} data for {} sensors", v.len(), h.sensors.len())));
    }
    let w = h.grid.weights();
    let scattered: Vec<f64> = h.sampler.transpose(v).iter().zip(&w).map(|(a, b)| a / b).collect();
    h.solve(&GridFunction { grid: h.grid, values: scattered })
}

impl LinearForward for EllipticForward {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn n_data(&self) -> usize {
        self.sensors.len()
    }

    fn apply(&self, u: &GridFunction) -> Result<Vec<f64>> {
        elliptic_apply(self, u)
    }

    fn adjoint(&self, v: &[f64]) -> Result<GridFunction> {
        elliptic_adjoint(self, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmlConfig {
    pub thickness: f64,
    pub sigma0: f64,
    pub power: f64,
}

impl Default for PmlConfig {
    fn default() -> Self {
        PmlConfig { thickness: 0.2, sigma0: 20.0, power: 2.0 }
    }
}

/// Factorized 5-point PML system for one wavenumber on the box that
/// surrounds the grid's domain with `ceil(thickness/h)` layers of nodes.
pub struct HelmholtzSystem {
    pub grid: Grid,
    pub kappa: f64,
    pub pml: PmlConfig,
    pub px: usize,
    pub py: usize,
    mx: usize,
    my: usize,
    // 5-point coefficients per unknown: centre, −x, +x, −y, +y
    stencil: Vec<[Complex64; 5]>,
    lu: ComplexBandLu,
}

impl HelmholtzSystem {
    pub fn new(grid: Grid, kappa: f64, pml: PmlConfig) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Config("wavenumber must be positive".into()));
        }
        if !(pml.thickness > 0.0) || !(pml.sigma0 >= 0.0) {
            return Err(Error::Config("PML needs positive thickness and non-negative strength".into()));
        }
        let (hx, hy) = (grid.hx(), grid.hy());
        let px = (pml.thickness / hx - 1e-9).ceil().max(1.0) as usize;
        let py = (pml.thickness / hy - 1e-9).ceil().max(1.0) as usize;
        let (dx, dy) = (px as f64 * hx, py as f64 * hy);
        let dom = grid.domain;
        let sigma = |t: f64, d: f64| if t <= 0.0 { 0.0 } else { pml.sigma0 * (t / d).powf(pml.power) };
        let s1 = |x: f64| Complex64::new(1.0, sigma((dom.x0 - x).max(x - dom.x1), dx));
        let s2 = |y: f64| Complex64::new(1.0, sigma((dom.y0 - y).max(y - dom.y1), dy));
        // unknowns are the interior nodes of the extended box
        let (nxd, nyd) = (grid.nx + 2 * px, grid.ny + 2 * py);
        let (mx, my) = (nxd - 2, nyd - 2);
        let xc = |a: usize| dom.x0 + (a as f64 - px as f64) * hx; // a indexes extended nodes
        let yc = |b: usize| dom.y0 + (b as f64 - py as f64) * hy;
        let n = mx * my;
        let mut band = ComplexBand::zeros(n, my);
        let mut stencil = Vec::with_capacity(n);
        let k2 = kappa * kappa;
        for a in 0..mx {
            for b in 0..my {
                let (ea, eb) = (a + 1, b + 1);
                let (x, y) = (xc(ea), yc(eb));
                let cxm = s2(y) / s1(x - 0.5 * hx) / (hx * hx);
                let cxp = s2(y) / s1(x + 0.5 * hx) / (hx * hx);
                let cym = s1(x) / s2(y - 0.5 * hy) / (hy * hy);
                let cyp = s1(x) / s2(y + 0.5 * hy) / (hy * hy);
                let cc = -(cxm + cxp + cym + cyp) + k2 * s1(x) * s2(y);
                let p = a * my + b;
                band.add(p, p, cc);
                if a > 0 {
                    band.add(p, p - my, cxm);
                }
                if a + 1 < mx {
                    band.add(p, p + my, cxp);
                }
                if b > 0 {
                    band.add(p, p - 1, cym);
                }
                if b + 1 < my {
                    band.add(p, p + 1, cyp);
                }
                stencil.push([cc, cxm, cxp, cym, cyp]);
            }
        }
        let lu = band.factor()?;
        Ok(HelmholtzSystem { grid, kappa, pml, px, py, mx, my, stencil, lu })
    }

    pub fn n_unknowns(&self) -> usize {
        self.mx * self.my
    }

    fn unknown(&self, i: usize, j: usize) -> usize {
        (i + self.px - 1) * self.my + (j + self.py - 1)
    }

    fn matvec(&self, w: &[Complex64]) -> Vec<Complex64> {
        let (mx, my) = (self.mx, self.my);
        let mut out = vec![Complex64::new(0.0, 0.0); w.len()];
        for a in 0..mx {
            for b in 0..my {
                let p = a * my + b;
                let s = &self.stencil[p];
                let mut v = s[0] * w[p];
                if a > 0 {
                    v += s[1] * w[p - my];
                }
                if a + 1 < mx {
                    v += s[2] * w[p + my];
                }
                if b > 0 {
                    v += s[3] * w[p - 1];
                }
                if b + 1 < my {
                    v += s[4] * w[p + 1];
                }
                out[p] = v;
            }
        }
        out
    }

    /// Solve with a right-hand side supported on the grid nodes; returns the
    /// full unknown vector of the extended box.
    pub fn solve_unknowns(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut f = vec![Complex64::new(0.0, 0.0); self.n_unknowns()];
        for i in 0..self.grid.nx {
            for j in 0..self.grid.ny {
                f[self.unknown(i, j)] = rhs[self.grid.idx(i, j)];
            }
        }
        let w = self.lu.solve(&f);
        let fnorm = f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if fnorm > 0.0 {
            let r = self.matvec(&w);
            let res = r.iter().zip(&f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / fnorm;
            if !(res <= 1e-10) {
                return Err(Error::solver(format!("Helmholtz solve inaccurate at kappa = {}", self.kappa), res));
            }
        }
        Ok(w)
    }

    /// Field restricted to the grid nodes.
    pub fn solve_on_grid(&self, rhs: &[Complex64]) -> Result<Vec<Complex64>> {
        let w = self.solve_unknowns(rhs)?;
        Ok(self.restrict(&w))
    }

    pub fn restrict(&self, w: &[Complex64]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.grid.len());
        for i in 0..self.grid.nx {
            for j in 0..self.grid.ny {
                out.push(w[self.unknown(i, j)]);
            }
        }
        out
    }
}

/// Complex field on the PML-extended box (boundary nodes carry the
/// homogeneous Dirichlet value).
#[derive(Clone, Debug)]
pub struct HelmholtzField {
    pub grid: Grid,
    pub px: usize,
    pub py: usize,
    pub box_grid: Grid,
    pub values: Vec<Complex64>,
}

impl HelmholtzField {
    pub fn on_grid(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.grid.len());
        for i in 0..self.grid.nx {
            for j in 0..self.grid.ny {
                out.push(self.values[self.box_grid.idx(i + self.px, j + self.py)]);
            }
        }
        out
    }
}

pub fn helmholtz_solve(u: &GridFunction, kappa: f64, pml: PmlConfig) -> Result<HelmholtzField> {
    let sys = HelmholtzSystem::new(u.grid, kappa, pml)?;
    let rhs: Vec<Complex64> = u.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let w = sys.solve_unknowns(&rhs)?;
    let g = u.grid;
    let (hx, hy) = (g.hx(), g.hy());
    let dom = crate::grid::Domain {
        x0: g.domain.x0 - sys.px as f64 * hx,
        x1: g.domain.x1 + sys.px as f64 * hx,
        y0: g.domain.y0 - sys.py as f64 * hy,
        y1: g.domain.y1 + sys.py as f64 * hy,
    };
    let box_grid = Grid::new(g.nx + 2 * sys.px, g.ny + 2 * sys.py, dom)?;
    let mut values = vec![Complex64::new(0.0, 0.0); box_grid.len()];
    for a in 0..sys.mx {
        for b in 0..sys.my {
            values[box_grid.idx(a + 1, b + 1)] = w[a * sys.my + b];
        }
    }
    Ok(HelmholtzField { grid: g, px: sys.px, py: sys.py, box_grid, values })
}

/// Multi-frequency boundary data; per frequency the block is
/// [Re w(x_1..x_Nb), Im w(x_1..x_Nb)].
pub struct HelmholtzForward {
    pub grid: Grid,
    pub kappas: Vec<f64>,
    pub pml: PmlConfig,
    pub sensors: SensorSet,
    sampler: PointSampler,
    cache_enabled: bool,
    cache: RwLock<HashMap<u64, Arc<HelmholtzSystem>>>,
}

impl HelmholtzForward {
    pub fn new(grid: Grid, kappas: Vec<f64>, pml: PmlConfig, sensors: SensorSet) -> Result<Self> {
        if kappas.is_empty() {
            return Err(Error::Config("need at least one wavenumber".into()));
        }
        let kmax = kappas.iter().cloned().fold(0.0, f64::max);
        let h = grid.hx().max(grid.hy());
        let ppw = 2.0 * std::f64::consts::PI / (kmax * h);
        if ppw < 10.0 {
            return Err(Error::Config(format!(
                "grid {}x{} resolves kappa = {kmax} with only {ppw:.1} points per wavelength (need 10)",
                grid.nx, grid.ny
            )));
        }
        let sampler = PointSampler::new(&grid, &sensors);
        Ok(HelmholtzForward { grid, kappas, pml, sensors, sampler, cache_enabled: true, cache: RwLock::new(HashMap::new()) })
    }

    /// Drop factorizations after use (large grids).
    pub fn without_cache(mut self) -> Self {
        self.cache_enabled = false;
        self
    }

    pub fn n_boundary(&self) -> usize {
        self.sensors.len()
    }

    pub fn system(&self, kappa: f64) -> Result<Arc<HelmholtzSystem>> {
        let key = kappa.to_bits();
        if let Some(s) = self.cache.read().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let sys = Arc::new(HelmholtzSystem::new(self.grid, kappa, self.pml)?);
        if self.cache_enabled {
            self.cache.write().unwrap().entry(key).or_insert_with(|| sys.clone());
        }
        Ok(sys)
    }

    /// Data block [Re; Im] for the wavenumber at position `f` in the schedule.
    pub fn apply_single(&self, f: usize, u: &GridFunction) -> Result<Vec<f64>> {
        self.grid.check_same(&u.grid)?;
        let sys = self.system(self.kappas[f])?;
        let rhs: Vec<Complex64> = u.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let w = sys.solve_on_grid(&rhs)?;
        let s = self.sampler.apply(&w);
        Ok(s.iter().map(|c| c.re).chain(s.iter().map(|c| c.im)).collect())
    }

    pub fn adjoint_single(&self, f: usize, v: &[f64]) -> Result<GridFunction> {
        let nb = self.n_boundary();
        if v.len() != 2 * nb {
            return Err(Error::shape("helmholtz_adjoint", format!("block of {} for {} sensors", v.len(), nb)));
        }
        let sys = self.system(self.kappas[f])?;
        // conj(z) with z = v_re + i·v_im, scattered to the nodes
        let zc: Vec<Complex64> = (0..nb).map(|i| Complex64::new(v[i], -v[nb + i])).collect();
        let rhs = self.sampler.transpose(&zc);
        let y = sys.solve_on_grid(&rhs)?;
        let w = self.grid.weights();
        Ok(GridFunction { grid: self.grid, values: y.iter().zip(&w).map(|(c, wi)| c.re / wi).collect() })
    }
}

pub fn helmholtz_apply(h: &HelmholtzForward, u: &GridFunction) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * h.n_boundary() * h.kappas.len());
    for f in 0..h.kappas.len() {
        out.extend(h.apply_single(f, u)?);
    }
    Ok(out)
}

pub fn helmholtz_adjoint(h: &HelmholtzForward, v: &[f64]) -> Result<GridFunction> {
    let b = 2 * h.n_boundary();
    if v.len() != b * h.kappas.len() {
        return Err(Error::shape("helmholtz_adjoint", format!("{} data for {} entries", v.len(), b * h.kappas.len())));
    }
    let mut acc = GridFunction::zeros(h.grid);
    for f in 0..h.kappas.len() {
        let part = h.adjoint_single(f, &v[f * b..(f + 1) * b])?;
        for (a, p) in acc.values.iter_mut().zip(&part.values) {
            *a += p;
        }
    }
    Ok(acc)
}

impl LinearForward for HelmholtzForward {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn n_data(&self) -> usize {
        2 * self.n_boundary() * self.kappas.len()
    }

    fn apply(&self, u: &GridFunction) -> Result<Vec<f64>> {
        helmholtz_apply(self, u)
    }

    fn adjoint(&self, v: &[f64]) -> Result<GridFunction> {
        helmholtz_adjoint(self, v)
    }
}

/// Explicit (N_d × N) matrix of a forward map, row-major.
#[derive(Clone, Debug)]
pub struct DenseForward {
    pub grid: Grid,
    pub n_data: usize,
    pub matrix: Vec<f64>,
    weights: Vec<f64>,
}

impl DenseForward {
    /// Assembled from adjoint actions on unit data vectors (row i = W·H*e_i).
    pub fn assemble(h: &dyn LinearForward) -> Result<Self> {
        let (nd, grid) = (h.n_data(), h.grid());
        let n = grid.len();
        let w = grid.weights();
        let mut matrix = vec![0.0; nd * n];
        let mut e = vec![0.0; nd];
        for i in 0..nd {
            e[i] = 1.0;
            let col = h.adjoint(&e)?;
            for k in 0..n {
                matrix[i * n + k] = col.values[k] * w[k];
            }
            e[i] = 0.0;
        }
        Ok(DenseForward { grid, n_data: nd, matrix, weights: w })
    }

    pub fn from_matrix(grid: Grid, n_data: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n_data * grid.len() {
            return Err(Error::shape("DenseForward", "matrix size mismatch"));
        }
        Ok(DenseForward { grid, n_data, matrix, weights: grid.weights() })
    }

    pub fn matvec(&self, u: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        self.matrix.chunks_exact(n).map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
    }

    /// Euclidean transpose Mᵀv.
    pub fn tmatvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n];
        for (row, &vi) in self.matrix.chunks_exact(n).zip(v) {
            if vi != 0.0 {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += a * vi;
                }
            }
        }
        out
    }
}

impl LinearForward for DenseForward {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn n_data(&self) -> usize {
        self.n_data
    }

    fn apply(&self, u: &GridFunction) -> Result<Vec<f64>> {
        self.grid.check_same(&u.grid)?;
        Ok(self.matvec(&u.values))
    }

    fn adjoint(&self, v: &[f64]) -> Result<GridFunction> {
        if v.len() != self.n_data {
            return Err(Error::shape("DenseForward::adjoint", "data length mismatch"));
        }
        let t = self.tmatvec(v);
        Ok(GridFunction { grid: self.grid, values: t.iter().zip(&self.weights).map(|(a, w)| a / w).collect() })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Elliptic,
    Helmholtz,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorConfig {
    Lattice { m: usize },
    Boundary { per_side: usize },
}

impl SensorConfig {
    pub fn build(&self) -> SensorSet {
        match *self {
            SensorConfig::Lattice { m } => SensorSet::lattice(m),
            SensorConfig::Boundary { per_side } => SensorSet::boundary(per_side),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ForwardConfig {
    pub model: ModelKind,
    #[serde(default = "default_alpha_pde")]
    pub alpha_pde: f64,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default)]
    pub pml: PmlConfig,
    pub sensors: SensorConfig,
    pub data_grid: usize,
    pub inv_grid: usize,
}

fn default_alpha_pde() -> f64 {
    0.01
}

fn default_kappas() -> Vec<f64> {
    vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0]
}

impl ForwardConfig {
    /// Data must come from a grid with at least twice as many cells per axis.
    pub fn validate(&self) -> Result<()> {
        if self.inv_grid < 2 || self.data_grid - 1 < 2 * (self.inv_grid - 1) {
            return Err(Error::Config(format!(
                "inverse-crime guard: data grid {} must have at least twice the cells of inversion grid {}",
                self.data_grid, self.inv_grid
            )));
        }
        Ok(())
    }

    pub fn build(&self, n: usize) -> Result<Box<dyn LinearForward>> {
        let grid = Grid::unit(n);
        let sensors = self.sensors.build();
        Ok(match self.model {
            ModelKind::Elliptic => Box::new(EllipticForward::new(grid, self.alpha_pde, sensors)?),
            ModelKind::Helmholtz => Box::new(HelmholtzForward::new(grid, self.kappas.clone(), self.pml, sensors)?),
        })
    }
}
