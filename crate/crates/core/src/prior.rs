//! Gaussian measures with covariance (c·I + δA)⁻² where A is the Neumann
//! −Δ, in a spectral form and a spatially varying finite-difference form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cos_norm, dct2, idct2, Grid, GridFunction};
use crate::linalg::{BandLdl, SymBand};

/// Which eigenvalues stand in for the Neumann −Δ on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// π²(k²/Lx² + l²/Ly²), the continuum values.
    #[default]
    Continuum,
    /// Eigenvalues of the 5-point Neumann stencil, (4/h²)sin²(kπ/2(n−1)) per axis.
    FiniteDifference,
}

pub fn laplacian_eigvals(grid: &Grid, spectrum: Spectrum) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let axis = |n: usize, len: f64| -> Vec<f64> {
        (0..n)
            .map(|k| match spectrum {
                Spectrum::Continuum => (pi * k as f64 / len).powi(2),
                Spectrum::FiniteDifference => {
                    let h = len / (n - 1) as f64;
                    (4.0 / (h * h)) * (0.5 * pi * k as f64 / (n - 1) as f64).sin().powi(2)
                }
            })
            .collect()
    };
    let ex = axis(grid.nx, grid.domain.width());
    let ey = axis(grid.ny, grid.domain.height());
    let mut out = Vec::with_capacity(grid.len());
    for a in &ex {
        for b in &ey {
            out.push(a + b);
        }
    }
    out
}

/// Symmetric form K of the Neumann FD operator −∇·(Θ∇): the operator is W⁻¹K.
pub fn neumann_stiffness(grid: &Grid, theta_x: f64, theta_y: f64) -> SymBand {
    let (nx, ny) = (grid.nx, grid.ny);
    let (wx, wy) = (grid.wx(), grid.wy());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut k = SymBand::zeros(grid.len(), ny);
    for i in 0..nx {
        for j in 0..ny {
            let p = grid.idx(i, j);
            if i + 1 < nx {
                let q = grid.idx(i + 1, j);
                let c = theta_x * wy[j] / hx;
                k.add(p, p, c);
                k.add(q, q, c);
                k.add(q, p, -c);
            }
            if j + 1 < ny {
                let q = grid.idx(i, j + 1);
                let c = theta_y * wx[i] / hy;
                k.add(p, p, c);
                k.add(q, q, c);
                k.add(q, p, -c);
            }
        }
    }
    k
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CovConfig {
    pub c: f64,
    pub delta: f64,
    #[serde(default = "two")]
    pub alpha_exp: f64,
    #[serde(default)]
    pub a_min: Option<f64>,
    #[serde(default)]
    pub a_max: Option<f64>,
    #[serde(default)]
    pub spectrum: Spectrum,
}

fn two() -> f64 {
    2.0
}

#[derive(Clone, Debug)]
pub struct SpectralCovariance {
    pub grid: Grid,
    pub c: f64,
    pub delta: f64,
    pub alpha_exp: f64,
    pub spectrum: Spectrum,
    eigvals: Vec<f64>,
}

impl SpectralCovariance {
    pub fn new(grid: Grid, c: f64, delta: f64) -> Result<Self> {
        Self::with_spectrum(grid, c, delta, Spectrum::Continuum)
    }

    pub fn with_spectrum(grid: Grid, c: f64, delta: f64, spectrum: Spectrum) -> Result<Self> {
        if !(c > 0.0) || !(delta >= 0.0) || !c.is_finite() || !delta.is_finite() {
            return Err(Error::Config(format!("covariance needs c > 0, delta >= 0 (got {c}, {delta})")));
        }
        let eigvals = laplacian_eigvals(&grid, spectrum);
        Ok(SpectralCovariance { grid, c, delta, alpha_exp: 2.0, spectrum, eigvals })
    }

    pub fn from_config(grid: Grid, cfg: &CovConfig) -> Result<Self> {
        if cfg.alpha_exp != 2.0 {
            return Err(Error::Config("only alpha_exp = 2 is supported".into()));
        }
        Self::with_spectrum(grid, cfg.c, cfg.delta, cfg.spectrum)
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// Operator eigenvalue (c + δλ)⁻² of mode index m.
    pub fn eigenvalue(&self, m: usize) -> f64 {
        (self.c + self.delta * self.eigvals[m]).powi(-2)
    }

    fn multiply(&self, f: &GridFunction, power: i32) -> Result<GridFunction> {
        self.grid.check_same(&f.grid)?;
        let mut s = dct2(f);
        for (v, lam) in s.coeffs.iter_mut().zip(&self.eigvals) {
            *v *= (self.c + self.delta * lam).powi(power);
        }
        Ok(idct2(&s))
    }

    pub fn trace(&self) -> f64 {
        (0..self.eigvals.len()).map(|m| self.eigenvalue(m)).sum()
    }

    /// log det of the operator (c+δA)⁻².
    pub fn logdet(&self) -> f64 {
        -2.0 * self.eigvals.iter().map(|l| (self.c + self.delta * l).ln()).sum::<f64>()
    }

    /// Pointwise variance Σ_kl μ_kl φ_kl(x)² of a field with this covariance.
    pub fn pointwise_variance(&self) -> GridFunction {
        let g = self.grid;
        let pi = std::f64::consts::PI;
        let table = |n: usize, len: f64| -> Vec<f64> {
            let mut t = vec![0.0; n * n];
            for k in 0..n {
                for i in 0..n {
                    let v = cos_norm(k, n, len) * (pi * (i * k) as f64 / (n - 1) as f64).cos();
                    t[k * n + i] = v * v;
                }
            }
            t
        };
        let (tx, ty) = (table(g.nx, g.domain.width()), table(g.ny, g.domain.height()));
        // tmp[k][j] = Σ_l μ_kl φ_l(y_j)²
        let mut tmp = vec![0.0; g.nx * g.ny];
        for k in 0..g.nx {
            for l in 0..g.ny {
                let mu = self.eigenvalue(g.idx(k, l));
                for j in 0..g.ny {
                    tmp[k * g.ny + j] += mu * ty[l * g.ny + j];
                }
            }
        }
        let mut out = vec![0.0; g.len()];
        for k in 0..g.nx {
            for i in 0..g.nx {
                let a = tx[k * g.nx + i];
                for j in 0..g.ny {
                    out[i * g.ny + j] += a * tmp[k * g.ny + j];
                }
            }
        }
        GridFunction { grid: g, values: out }
    }
}

/// S(a) = W·diag(a) + δK, the symmetric form of diag(a) + δL.
#[derive(Clone, Debug)]
pub struct ShiftedLaplacian {
    pub grid: Grid,
    pub delta: f64,
    pub weights: Vec<f64>,
    pub stiffness: SymBand,
}

impl ShiftedLaplacian {
    pub fn new(grid: Grid, delta: f64) -> Self {
        ShiftedLaplacian { grid, delta, weights: grid.weights(), stiffness: neumann_stiffness(&grid, 1.0, 1.0) }
    }

    pub fn assemble(&self, a: &[f64]) -> SymBand {
        let mut s = self.stiffness.clone();
        for v in s.data.iter_mut() {
            *v *= self.delta;
        }
        for (i, (ai, wi)) in a.iter().zip(&self.weights).enumerate() {
            s.add(i, i, ai * wi);
        }
        s
    }

    pub fn factor(&self, a: &[f64]) -> Result<BandLdl> {
        BandLdl::factor(&self.assemble(a))
    }

    /// (diag(a) + δL)·x
    pub fn apply(&self, a: &[f64], x: &[f64]) -> Vec<f64> {
        let kx = self.stiffness.matvec(x);
        (0..x.len()).map(|i| a[i] * x[i] + self.delta * kx[i] / self.weights[i]).collect()
    }

    /// (diag(a) + δL)⁻¹·x with a prefactored S(a).
    pub fn solve(&self, f: &BandLdl, x: &[f64]) -> Vec<f64> {
        let wx: Vec<f64> = x.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        f.solve(&wx)
    }

    pub fn logdet_weights(&self) -> f64 {
        self.weights.iter().map(|w| w.ln()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct VariableCovariance {
    pub grid: Grid,
    pub a: GridFunction,
    pub delta: f64,
    pub a_min: f64,
    pub a_max: f64,
    op: ShiftedLaplacian,
    factor: BandLdl,
}

impl VariableCovariance {
    pub fn new(a: GridFunction, delta: f64, a_min: f64, a_max: f64) -> Result<Self> {
        if !(a_min > 0.0) || !(a_max >= a_min) {
            return Err(Error::Config(format!("need 0 < a_min <= a_max (got {a_min}, {a_max})")));
        }
        if !(delta >= 0.0) {
            return Err(Error::Config("delta must be non-negative".into()));
        }
        if let Some(bad) = a.values.iter().find(|&&v| !(v >= a_min && v <= a_max)) {
            return Err(Error::Domain(format!("coefficient {bad} outside [{a_min}, {a_max}]")));
        }
        let op = ShiftedLaplacian::new(a.grid, delta);
        let factor = op.factor(&a.values)?;
        Ok(VariableCovariance { grid: a.grid, a, delta, a_min, a_max, op, factor })
    }

    pub fn operator(&self) -> &ShiftedLaplacian {
        &self.op
    }

    pub fn factorization(&self) -> &BandLdl {
        &self.factor
    }

    fn sqrt_raw(&self, v: &[f64]) -> Vec<f64> {
        self.op.solve(&self.factor, v)
    }

    /// log det of the operator diag(a) + δL.
    pub fn logdet_precision_sqrt(&self) -> f64 {
        self.factor.logdet() - self.op.logdet_weights()
    }

    /// Pointwise variance: diagonal of (S W⁻¹ S)⁻¹, the nodal covariance of M⁻¹η.
    pub fn pointwise_variance(&self) -> Result<GridFunction> {
        let s = self.op.assemble(&self.a.values);
        let winv: Vec<f64> = self.op.weights.iter().map(|w| 1.0 / w).collect();
        let p = BandLdl::factor(&s.sandwich(&winv))?;
        Ok(GridFunction { grid: self.grid, values: p.inverse_diagonal() })
    }
}

#[derive(Clone, Debug)]
pub enum Covariance {
    Spectral(SpectralCovariance),
    Variable(VariableCovariance),
}

impl Covariance {
    pub fn grid(&self) -> Grid {
        match self {
            Covariance::Spectral(s) => s.grid,
            Covariance::Variable(v) => v.grid,
        }
    }
}

pub fn cov_apply(c: &Covariance, f: &GridFunction) -> Result<GridFunction> {
    match c {
        Covariance::Spectral(s) => s.multiply(f, -2),
        Covariance::Variable(v) => {
            v.grid.check_same(&f.grid)?;
            let once = v.sqrt_raw(&f.values);
            Ok(GridFunction { grid: v.grid, values: v.sqrt_raw(&once) })
        }
    }
}

pub fn cov_inv_apply(c: &Covariance, f: &GridFunction) -> Result<GridFunction> {
    match c {
        Covariance::Spectral(s) => s.multiply(f, 2),
        Covariance::Variable(v) => {
            v.grid.check_same(&f.grid)?;
            let once = v.op.apply(&v.a.values, &f.values);
            Ok(GridFunction { grid: v.grid, values: v.op.apply(&v.a.values, &once) })
        }
    }
}

pub fn cov_sqrt_apply(c: &Covariance, f: &GridFunction) -> Result<GridFunction> {
    match c {
        Covariance::Spectral(s) => s.multiply(f, -1),
        Covariance::Variable(v) => {
            v.grid.check_same(&f.grid)?;
            Ok(GridFunction { grid: v.grid, values: v.sqrt_raw(&f.values) })
        }
    }
}

/// White noise with i.i.d. standard normal cosine coefficients.
pub fn white_noise<R: Rng + ?Sized>(grid: Grid, rng: &mut R) -> GridFunction {
    let coeffs = (0..grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    idct2(&crate::grid::SpectrumField { grid, coeffs })
}

#[derive(Clone, Debug)]
pub struct GaussianMeasure {
    pub mean: GridFunction,
    pub cov: Covariance,
}

impl GaussianMeasure {
    pub fn new(mean: GridFunction, cov: Covariance) -> Result<Self> {
        mean.grid.check_same(&cov.grid())?;
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn grid(&self) -> Grid {
        self.mean.grid
    }
}

pub fn sample<R: Rng + ?Sized>(m: &GaussianMeasure, rng: &mut R) -> Result<GridFunction> {
    let w = white_noise(m.grid(), rng);
    m.mean.add(&cov_sqrt_apply(&m.cov, &w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::inner_l2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_fn(grid: Grid, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridFunction::from_fn(grid, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rel(a: &GridFunction, b: &GridFunction) -> f64 {
        let d: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / b.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn scalar_operator_cases() {
        let g = Grid::unit(9);
        let c = Covariance::Spectral(SpectralCovariance::new(g, 2.0, 0.0).unwrap());
        let f = random_fn(g, 1);
        assert!(rel(&cov_apply(&c, &f).unwrap(), &f.scaled(0.25)) < 1e-14);
        assert!(rel(&cov_inv_apply(&c, &f).unwrap(), &f.scaled(4.0)) < 1e-14);
        assert!(rel(&cov_sqrt_apply(&c, &f).unwrap(), &f.scaled(0.5)) < 1e-14);
    }

    #[test]
    fn eigenfunction_case() {
        let g = Grid::unit(33);
        let c = Covariance::Spectral(SpectralCovariance::new(g, 1.0, 1.0).unwrap());
        let f = GridFunction::from_fn(g, |x, _| (std::f64::consts::PI * x).cos());
        let k = (1.0 + std::f64::consts::PI.powi(2)).powi(-2);
        assert!(rel(&cov_apply(&c, &f).unwrap(), &f.scaled(k)) < 1e-12);
        let e = rel(&cov_inv_apply(&c, &f).unwrap(), &f.scaled(1.0 / k));
        // inversion amplifies roundoff in the highest modes by (1+2048π²)²
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn variable_with_constant_coefficient_matches_spectral() {
        let g = Grid::unit(17);
        let spec = Covariance::Spectral(SpectralCovariance::with_spectrum(g, 3.0, 0.2, Spectrum::FiniteDifference).unwrap());
        let var = Covariance::Variable(VariableCovariance::new(GridFunction::constant(g, 3.0), 0.2, 0.1, 10.0).unwrap());
        let f = random_fn(g, 2);
        assert!(rel(&cov_apply(&var, &f).unwrap(), &cov_apply(&spec, &f).unwrap()) < 1e-8);
        assert!(rel(&cov_sqrt_apply(&var, &f).unwrap(), &cov_sqrt_apply(&spec, &f).unwrap()) < 1e-8);
    }

    #[test]
    fn round_trips_and_self_adjointness() {
        let g = Grid::unit(17);
        let a = GridFunction::from_fn(g, |x, y| 1.0 + x * y + 0.5 * (3.0 * x).sin());
        for c in [
            Covariance::Spectral(SpectralCovariance::new(g, 1.5, 0.3).unwrap()),
            Covariance::Variable(VariableCovariance::new(a.clone(), 0.3, 0.2, 5.0).unwrap()),
        ] {
            let (f, h) = (random_fn(g, 3), random_fn(g, 4));
            assert!(rel(&cov_inv_apply(&c, &cov_apply(&c, &f).unwrap()).unwrap(), &f) < 1e-9);
            let s2 = cov_sqrt_apply(&c, &cov_sqrt_apply(&c, &f).unwrap()).unwrap();
            assert!(rel(&s2, &cov_apply(&c, &f).unwrap()) < 1e-9);
            let cf = cov_apply(&c, &f).unwrap();
            let ch = cov_apply(&c, &h).unwrap();
            let (l, r) = (inner_l2(&cf, &h).unwrap(), inner_l2(&f, &ch).unwrap());
            assert!((l - r).abs() < 1e-9 * l.abs().max(r.abs()));
            assert!(inner_l2(&cf, &f).unwrap() > 0.0);
        }
    }

    #[test]
    fn variable_rejects_out_of_bounds_coefficient() {
        let g = Grid::unit(5);
        let a = GridFunction::from_fn(g, |x, _| x);
        assert!(VariableCovariance::new(a.clone(), 0.1, 0.01, 2.0).is_err());
        assert!(VariableCovariance::new(a.map(|v| v + 0.5), 0.1, 0.01, 1.2).is_err());
        assert!(VariableCovariance::new(a.map(|v| v + 0.5), 0.1, 0.0, 2.0).is_err());
        assert!(VariableCovariance::new(a.map(|v| v + 0.5), 0.1, 0.01, 2.0).is_ok());
    }

    #[test]
    fn fd_stiffness_eigenvalues_match_cosine_modes() {
        let g = Grid::new(6, 9, crate::grid::Domain { x0: 0.0, x1: 2.0, y0: 0.0, y1: 1.0 }).unwrap();
        let k = neumann_stiffness(&g, 1.0, 1.0);
        let w = g.weights();
        let lam = laplacian_eigvals(&g, Spectrum::FiniteDifference);
        for (kk, ll) in [(0, 0), (1, 0), (2, 3), (5, 8)] {
            let mut s = crate::grid::SpectrumField::zeros(g);
            s.coeffs[g.idx(kk, ll)] = 1.0;
            let phi = idct2(&s);
            let kphi = k.matvec(&phi.values);
            for i in 0..g.len() {
                assert!((kphi[i] / w[i] - lam[g.idx(kk, ll)] * phi.values[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_degenerates_at_large_c() {
        let g = Grid::unit(17);
        let mean = GridFunction::from_fn(g, |x, y| x - y);
        let m = GaussianMeasure::new(mean.clone(), Covariance::Spectral(SpectralCovariance::new(g, 1e8, 0.0).unwrap())).unwrap();
        let s = sample(&m, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(s.values.iter().zip(&mean.values).all(|(a, b)| (a - b).abs() < 1e-3));
        let m2 = GaussianMeasure::new(mean, Covariance::Spectral(SpectralCovariance::new(g, 1.0, 0.1).unwrap())).unwrap();
        let a = sample(&m2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample(&m2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn monte_carlo_mode_variances() {
        let g = Grid::unit(9);
        let cov = SpectralCovariance::new(g, 1.0, 0.05).unwrap();
        let m = GaussianMeasure::new(GridFunction::zeros(g), Covariance::Spectral(cov.clone())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let modes: Vec<usize> = (0..10).collect();
        let mut acc = vec![0.0; modes.len()];
        let mut mean_acc = vec![0.0; modes.len()];
        for _ in 0..n {
            let s = dct2(&sample(&m, &mut rng).unwrap());
            for (t, &md) in modes.iter().enumerate() {
                acc[t] += s.coeffs[md].powi(2);
                mean_acc[t] += s.coeffs[md];
            }
        }
        for (t, &md) in modes.iter().enumerate() {
            let want = cov.eigenvalue(md);
            let var = acc[t] / n as f64;
            assert!((var / want - 1.0).abs() < 0.05, "mode {md}: {var} vs {want}");
            let se = (want / n as f64).sqrt();
            assert!((mean_acc[t] / n as f64).abs() < 3.0 * se + 1e-15);
        }
        // mode (1,1) through cov_sqrt on white noise
        let mut v = 0.0;
        let c = Covariance::Spectral(cov.clone());
        for _ in 0..n {
            let s = dct2(&cov_sqrt_apply(&c, &white_noise(g, &mut rng)).unwrap());
            v += s.coeffs[g.idx(1, 1)].powi(2);
        }
        let want = cov.eigenvalue(g.idx(1, 1));
        assert!((v / n as f64 / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn trace_converges_under_refinement() {
        let t: Vec<f64> =
            [17, 33, 65].iter().map(|&n| SpectralCovariance::new(Grid::unit(n), 1.0, 0.1).unwrap().trace()).collect();
        assert!(t[0] < t[1] && t[1] < t[2]);
        assert!(t[2] - t[1] < t[1] - t[0]);
        assert!(t[2] < 2.0);
    }

    #[test]
    fn pointwise_variances_match_dense_definitions() {
        let g = Grid::unit(7);
        let cov = SpectralCovariance::new(g, 2.0, 0.3).unwrap();
        let pv = cov.pointwise_variance();
        // nodal covariance is C·W⁻¹; compare its diagonal column by column
        let w = g.weights();
        let c = Covariance::Spectral(cov);
        for p in [0, 10, 24, 48] {
            let mut e = GridFunction::zeros(g);
            e.values[p] = 1.0 / w[p];
            let col = cov_apply(&c, &e).unwrap();
            assert!((col.values[p] - pv.values[p]).abs() < 1e-12 * pv.values[p]);
        }
        let a = GridFunction::from_fn(g, |x, y| 1.0 + x + y * y);
        let vc = VariableCovariance::new(a, 0.2, 0.5, 4.0).unwrap();
        let pv = vc.pointwise_variance().unwrap();
        let c = Covariance::Variable(vc);
        for p in [0, 17, 48] {
            let mut e = GridFunction::zeros(g);
            e.values[p] = 1.0 / w[p];
            let col = cov_apply(&c, &e).unwrap();
            assert!((col.values[p] - pv.values[p]).abs() < 1e-10 * pv.values[p]);
        }
    }

    #[test]
    fn config_round_trip() {
        let cfg: CovConfig = serde_json::from_str(r#"{"c": 2.0, "delta": 0.1, "alpha_exp": 2, "a_min": 0.5, "a_max": 20}"#).unwrap();
        assert_eq!(cfg.spectrum, Spectrum::Continuum);
        let s = SpectralCovariance::from_config(Grid::unit(5), &cfg).unwrap();
        assert_eq!(s.c, 2.0);
        let bad = CovConfig { alpha_exp: 1.5, ..cfg };
        assert!(SpectralCovariance::from_config(Grid::unit(5), &bad).is_err());
    }
}
