//! Deterministic baselines: truncated SVD via a randomized double-pass
//! eigensolver, frequency-marched Landweber (RLM), and the dense linear maps
//! these methods reduce to on a fixed grid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{DenseForward, HelmholtzForward, LinearForward};
use crate::grid::{inner_l2, Grid, GridFunction};

/// Leading eigenpairs of a self-adjoint PSD operator, vectors orthonormal in L2.
#[derive(Clone, Debug)]
pub struct EigPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<GridFunction>,
    /// Fewer than the requested number of non-negligible eigenvalues exist.
    pub rank_deficient: bool,
}

impl EigPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub type Action<'a> = dyn FnMut(&GridFunction) -> Result<GridFunction> + 'a;

/// Randomized eigendecomposition with two passes over the operator (range
/// sketch, then projection) plus optional power iterations, carried out in
/// W^½-scaled coordinates where the operator is symmetric.
pub fn randomized_eig<R: Rng + ?Sized>(
    action: &mut Action,
    grid: Grid,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<EigPairs> {
    let n = grid.len();
    let k = rank + oversample;
    if rank == 0 || k > n {
        return Err(Error::Config(format!("rank {rank} + oversampling {oversample} must be in 1..={n}")));
    }
    let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    // Ã x = W^½ A W^{-½} x
    let mut apply_block = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut y = DMatrix::zeros(n, x.ncols());
        for c in 0..x.ncols() {
            let f = GridFunction { grid, values: (0..n).map(|i| x[(i, c)] / sw[i]).collect() };
            let af = action(&f)?;
            for i in 0..n {
                y[(i, c)] = af.values[i] * sw[i];
            }
        }
        Ok(y)
    };
    let omega = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut y = apply_block(&omega)?;
    for _ in 0..power_iters {
        let q = y.qr().q();
        y = apply_block(&q)?;
    }
    let q = y.qr().q();
    let aq = apply_block(&q)?;
    let b = q.transpose() * aq;
    let b = 0.5 * (&b + b.transpose());
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = 1e-10 * top;
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for &o in order.iter().take(rank) {
        let lam = eig.eigenvalues[o];
        if !(lam > floor) {
            break;
        }
        let v = &q * eig.eigenvectors.column(o);
        values.push(lam);
        vectors.push(GridFunction { grid, values: (0..n).map(|i| v[i] / sw[i]).collect() });
    }
    let rank_deficient = values.len() < rank;
    Ok(EigPairs { values, vectors, rank_deficient })
}

/// Eigenpairs of H*H.
pub fn normal_eig<R: Rng + ?Sized>(
    h: &dyn LinearForward,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<EigPairs> {
    let mut act = |f: &GridFunction| h.adjoint(&h.apply(f)?);
    randomized_eig(&mut act, h.grid(), rank, oversample, power_iters, rng)
}

/// Σ_{λ_k ≥ λ_m} λ_k⁻¹⟨H*d, v_k⟩v_k.
pub fn tsvd_invert(d: &[f64], eig: &EigPairs, h: &dyn LinearForward, lambda_m: f64) -> Result<GridFunction> {
    if !(lambda_m > 0.0) {
        return Err(Error::Config("truncation level must be positive".into()));
    }
    let g = h.adjoint(d)?;
    let mut out = GridFunction::zeros(h.grid());
    for (lam, v) in eig.values.iter().zip(&eig.vectors) {
        if *lam >= lambda_m {
            let c = inner_l2(&g, v)? / lam;
            for (o, vi) in out.values.iter_mut().zip(&v.values) {
                *o += c * vi;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsvdConfig {
    /// λ_m / λ₁
    pub lambda_rel: f64,
    pub rank: usize,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    #[serde(default)]
    pub power_iters: usize,
}

fn default_oversample() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RlmConfig {
    /// Ascending wavenumbers, each present in the forward map's schedule.
    pub kappas: Vec<f64>,
    pub inner: usize,
    #[serde(default = "default_step")]
    pub step_fraction: f64,
    #[serde(default = "default_power")]
    pub power_iters: usize,
}

fn default_step() -> f64 {
    0.9
}

fn default_power() -> usize {
    30
}

impl RlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappas.is_empty() || self.kappas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("RLM schedule must be non-empty and strictly ascending".into()));
        }
        if self.inner == 0 || !(self.step_fraction > 0.0) {
            return Err(Error::Config("RLM needs at least one inner iteration and a positive step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrequencyTrace {
    pub kappa: f64,
    pub step: f64,
    /// ‖d_κ − H_κu‖ before the first and after every inner iteration.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RlmResult {
    pub u: GridFunction,
    pub trace: Vec<FrequencyTrace>,
    pub diverged: bool,
}

/// Largest eigenvalue of H_κ*H_κ by power iteration from a fixed start.
pub fn normal_lambda_max(h: &HelmholtzForward, f: usize, iters: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = GridFunction::from_fn(h.grid, |_, _| rng.gen_range(-1.0..1.0));
    let mut lam = 0.0;
    for _ in 0..iters.max(1) {
        let nv = crate::grid::norm_l2(&v);
        v = v.scaled(1.0 / nv);
        let av = h.adjoint_single(f, &h.apply_single(f, &v)?)?;
        lam = inner_l2(&v, &av)?;
        v = av;
    }
    Ok(lam)
}

/// Frequency-marched Landweber: u ← u + τH_κ*(d_κ − H_κu), τ = fraction/λ_max.
pub fn rlm_invert(d: &[f64], h: &HelmholtzForward, cfg: &RlmConfig) -> Result<RlmResult> {
    cfg.validate()?;
    rlm_with_steps(d, h, cfg, None)
}

/// Same as `rlm_invert` with an explicit step per frequency.
pub fn rlm_with_steps(d: &[f64], h: &HelmholtzForward, cfg: &RlmConfig, steps: Option<&[f64]>) -> Result<RlmResult> {
    let block = 2 * h.n_boundary();
    if d.len() != block * h.kappas.len() {
        return Err(Error::shape("rlm_invert", format!("{} data for {} frequencies", d.len(), h.kappas.len())));
    }
    let mut u = GridFunction::zeros(h.grid);
    let mut trace = Vec::new();
    for (s, &kappa) in cfg.kappas.iter().enumerate() {
        let f = h
            .kappas
            .iter()
            .position(|&k| k == kappa)
            .ok_or_else(|| Error::Config(format!("wavenumber {kappa} not in the data schedule")))?;
        let df = &d[f * block..(f + 1) * block];
        let tau = match steps {
            Some(t) => t[s],
            None => cfg.step_fraction / normal_lambda_max(h, f, cfg.power_iters)?,
        };
        let mut r: Vec<f64> = df.iter().zip(h.apply_single(f, &u)?).map(|(a, b)| a - b).collect();
        let r0 = norm(&r);
        let mut residuals = vec![r0];
        for _ in 0..cfg.inner {
            let g = h.adjoint_single(f, &r)?;
            for (ui, gi) in u.values.iter_mut().zip(&g.values) {
                *ui += tau * gi;
            }
            r = df.iter().zip(h.apply_single(f, &u)?).map(|(a, b)| a - b).collect();
            let rn = norm(&r);
            residuals.push(rn);
            if !rn.is_finite() || rn > 1e3 * r0.max(f64::MIN_POSITIVE) {
                trace.push(FrequencyTrace { kappa, step: tau, residuals });
                return Ok(RlmResult { u, trace, diverged: true });
            }
        }
        trace.push(FrequencyTrace { kappa, step: tau, residuals });
    }
    Ok(RlmResult { u, trace, diverged: false })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Thin SVD of M·W^{-½}: the forward matrix in coordinates where the L2
/// product is Euclidean.
pub struct ScaledSvd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v_t: DMatrix<f64>,
    inv_sqrt_w: Vec<f64>,
}

impl ScaledSvd {
    pub fn new(h: &DenseForward) -> Result<Self> {
        let n = h.grid.len();
        let w = h.grid.weights();
        let isw: Vec<f64> = w.iter().map(|x| 1.0 / x.sqrt()).collect();
        let mut m = DMatrix::from_row_slice(h.n_data, n, &h.matrix);
        for (c, s) in isw.iter().enumerate() {
            m.column_mut(c).scale_mut(*s);
        }
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v)) => (u, v),
            _ => return Err(Error::Numerical("SVD did not converge".into())),
        };
        Ok(ScaledSvd { u, sigma: svd.singular_values, v_t, inv_sqrt_w: isw })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.iter().cloned().fold(0.0, f64::max)
    }

    /// Rows scaled back to nodal values: W^{-½}·X.
    fn to_nodal(&self, mut x: DMatrix<f64>) -> DMatrix<f64> {
        for (r, s) in self.inv_sqrt_w.iter().enumerate() {
            x.row_mut(r).scale_mut(*s);
        }
        x
    }
}

/// Nodal (N × N_d) matrix of TSVD with λ_m = lambda_rel·λ₁ (λ = σ²).
pub fn tsvd_matrix(h: &DenseForward, lambda_rel: f64) -> Result<DMatrix<f64>> {
    if !(lambda_rel > 0.0) {
        return Err(Error::Config("truncation level must be positive".into()));
    }
    let svd = ScaledSvd::new(h)?;
    let cut = lambda_rel * svd.sigma_max().powi(2);
    let (n, nd) = (h.grid.len(), h.n_data);
    let mut r = DMatrix::zeros(n, nd);
    for k in 0..svd.sigma.len() {
        let s = svd.sigma[k];
        if s * s >= cut && s > 0.0 {
            r += (svd.v_t.row(k).transpose() / s) * svd.u.column(k).transpose();
        }
    }
    Ok(svd.to_nodal(r))
}

/// Nodal matrix of frequency-marched Landweber starting from zero: per block
/// κ with scaled SVD UΣVᵀ and g = 1 − (1 − τσ²)ⁿ,
/// R ← (I − V g Vᵀ)R + V (g/σ) Uᵀ E_κ. Steps are fraction/σ_max².
pub fn landweber_matrix(blocks: &[DenseForward], inner: usize, step_fraction: f64) -> Result<DMatrix<f64>> {
    let first = blocks.first().ok_or_else(|| Error::Config("no frequency blocks".into()))?;
    let n = first.grid.len();
    let total: usize = blocks.iter().map(|b| b.n_data).sum();
    let mut r = DMatrix::zeros(n, total);
    let mut offset = 0;
    for b in blocks {
        b.grid.check_same(&first.grid)?;
        let svd = ScaledSvd::new(b)?;
        let tau = step_fraction / svd.sigma_max().powi(2);
        let k = svd.sigma.len();
        let g: Vec<f64> = svd.sigma.iter().map(|s| 1.0 - (1.0 - tau * s * s).powi(inner as i32)).collect();
        // in scaled coordinates; R holds W^½-scaled rows until the end
        let v = svd.v_t.transpose();
        let vtr = &svd.v_t * &r;
        for c in 0..k {
            let coef = vtr.row(c) * g[c];
            r -= v.column(c) * coef;
        }
        for c in 0..k {
            if svd.sigma[c] > 0.0 {
                let col = v.column(c) * (g[c] / svd.sigma[c]);
                let mut block = r.columns_mut(offset, b.n_data);
                block += col * svd.u.column(c).transpose();
            }
        }
        offset += b.n_data;
    }
    let isw: Vec<f64> = first.grid.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
    for (row, s) in isw.iter().enumerate() {
        r.row_mut(row).scale_mut(*s);
    }
    Ok(r)
}

/// Apply a nodal reconstruction matrix to data.
pub fn apply_matrix(r: &DMatrix<f64>, grid: Grid, d: &[f64]) -> Result<GridFunction> {
    if r.ncols() != d.len() || r.nrows() != grid.len() {
        return Err(Error::shape("apply_matrix", format!("{}x{} map for {} data", r.nrows(), r.ncols(), d.len())));
    }
    let v = r * DVector::from_column_slice(d);
    Ok(GridFunction { grid, values: v.iter().cloned().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{EllipticForward, PmlConfig, SensorSet};
    use crate::grid::{basis_value, norm_l2};

    fn four() -> SensorSet {
        SensorSet::new(vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.6, 0.6)]).unwrap()
    }

    #[test]
    fn identity_on_subspace() {
        let g = Grid::unit(9);
        let basis: Vec<GridFunction> = [(0, 0), (1, 0), (0, 2), (3, 3), (5, 1)]
            .iter()
            .map(|&(k, l)| GridFunction { grid: g, values: (0..81).map(|p| basis_value(&g, k, l, p / 9, p % 9)).collect() })
            .collect();
        let mut act = |f: &GridFunction| -> Result<GridFunction> {
            let mut out = GridFunction::zeros(g);
            for b in &basis {
                let c = 3.0 * inner_l2(f, b)?;
                for (o, v) in out.values.iter_mut().zip(&b.values) {
                    *o += c * v;
                }
            }
            Ok(out)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = randomized_eig(&mut act, g, 5, 5, 0, &mut rng).unwrap();
        assert_eq!(e.len(), 5);
        assert!(!e.rank_deficient);
        for (lam, v) in e.values.iter().zip(&e.vectors) {
            assert!((lam - 3.0).abs() < 1e-10);
            let r = act(v).unwrap().sub(&v.scaled(*lam)).unwrap();
            assert!(norm_l2(&r) < 1e-10);
        }
        let e = randomized_eig(&mut act, g, 7, 3, 0, &mut rng).unwrap();
        assert!(e.rank_deficient && e.len() == 5);
    }

    #[test]
    fn normal_eig_matches_dense() {
        let h = EllipticForward::new(Grid::unit(9), 0.01, four()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = normal_eig(&h, 4, 10, 0, &mut rng).unwrap();
        let svd = ScaledSvd::new(&DenseForward::assemble(&h).unwrap()).unwrap();
        let mut s2: Vec<f64> = svd.sigma.iter().map(|s| s * s).collect();
        s2.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in 0..4 {
            assert!((e.values[k] - s2[k]).abs() < 1e-8 * s2[0]);
            assert!(e.values[k] >= -1e-12);
            if k > 0 {
                assert!(e.values[k] <= e.values[k - 1]);
            }
            let hv = h.adjoint(&h.apply(&e.vectors[k]).unwrap()).unwrap();
            assert!(norm_l2(&hv.sub(&e.vectors[k].scaled(e.values[k])).unwrap()) < 1e-6 * e.values[0]);
            for j in 0..4 {
                let ip = inner_l2(&e.vectors[k], &e.vectors[j]).unwrap();
                assert!((ip - if j == k { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reseeding_does_not_change_separated_spectrum() {
        let h = EllipticForward::new(Grid::unit(17), 0.01, SensorSet::lattice(3)).unwrap();
        let a = normal_eig(&h, 9, 10, 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = normal_eig(&h, 9, 10, 0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for k in 0..9 {
            assert!((a.values[k] - b.values[k]).abs() < 1e-6 * a.values[0]);
        }
    }

    #[test]
    fn tsvd_limits() {
        let h = EllipticForward::new(Grid::unit(9), 0.01, SensorSet::lattice(20)).unwrap();
        let dense = DenseForward::assemble(&h).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = normal_eig(&h, 81, 0, 2, &mut rng).unwrap();
        let d: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(norm_l2(&tsvd_invert(&d, &e, &h, 2.0 * e.values[0]).unwrap()) == 0.0);
        let u = tsvd_invert(&d, &e, &h, 1e-14 * e.values[0]).unwrap();
        let m = DMatrix::from_row_slice(400, 81, &dense.matrix);
        let pinv = m.clone().pseudo_inverse(1e-14).unwrap() * DVector::from_vec(d.clone());
        let err = (DVector::from_vec(u.values.clone()) - &pinv).norm() / pinv.norm();
        assert!(err < 1e-6, "{err}");
        // dense TSVD map agrees with the eigen route
        let r = tsvd_matrix(&dense, 1e-14).unwrap();
        let um = apply_matrix(&r, h.grid, &d).unwrap();
        assert!((DVector::from_vec(um.values) - &pinv).norm() / pinv.norm() < 1e-6);
    }

    #[test]
    fn tsvd_is_idempotent_on_retained_modes() {
        let h = EllipticForward::new(Grid::unit(17), 0.01, SensorSet::lattice(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = normal_eig(&h, 25, 10, 1, &mut rng).unwrap();
        let d: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lm = 1e-3 * e.values[0];
        let u = tsvd_invert(&d, &e, &h, lm).unwrap();
        let again = tsvd_invert(&h.apply(&u).unwrap(), &e, &h, lm).unwrap();
        assert!(norm_l2(&again.sub(&u).unwrap()) < 1e-8 * norm_l2(&u));
    }

    fn helm(kappas: Vec<f64>) -> HelmholtzForward {
        HelmholtzForward::new(Grid::unit(17), kappas, PmlConfig::default(), SensorSet::boundary(4)).unwrap()
    }

    fn bump(g: Grid) -> GridFunction {
        GridFunction::from_fn(g, |x, y| (-((x - 0.45).powi(2) + (y - 0.55).powi(2)) / 0.02).exp())
    }

    #[test]
    fn landweber_error_decreases_on_consistent_data() {
        let h = helm(vec![4.0]);
        let truth = bump(h.grid);
        let d = h.apply(&truth).unwrap();
        let mut last = f64::INFINITY;
        for inner in [1usize, 5, 20, 80] {
            let cfg = RlmConfig { kappas: vec![4.0], inner, step_fraction: 0.9, power_iters: 30 };
            let r = rlm_invert(&d, &h, &cfg).unwrap();
            let err = norm_l2(&r.u.sub(&truth).unwrap());
            assert!(err < last);
            last = err;
            let res = &r.trace[0].residuals;
            assert!(res.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn oversized_step_is_detected() {
        let h = helm(vec![4.0]);
        let d = h.apply(&bump(h.grid)).unwrap();
        let lmax = normal_lambda_max(&h, 0, 30).unwrap();
        let cfg = RlmConfig { kappas: vec![4.0], inner: 400, step_fraction: 0.9, power_iters: 30 };
        let r = rlm_with_steps(&d, &h, &cfg, Some(&[2.5 / lmax])).unwrap();
        assert!(r.diverged);
        assert!(rlm_invert(&d, &h, &cfg).map(|r| !r.diverged).unwrap());
    }

    #[test]
    fn rlm_is_linear_and_validates_schedule() {
        let h = helm(vec![2.0, 4.0]);
        let d = h.apply(&bump(h.grid)).unwrap();
        let cfg = RlmConfig { kappas: vec![2.0, 4.0], inner: 5, step_fraction: 0.9, power_iters: 30 };
        let a = rlm_invert(&d, &h, &cfg).unwrap().u;
        let d2: Vec<f64> = d.iter().map(|v| 2.0 * v).collect();
        let b = rlm_invert(&d2, &h, &cfg).unwrap().u;
        assert!(norm_l2(&b.sub(&a.scaled(2.0)).unwrap()) < 1e-10 * norm_l2(&b));
        let bad = RlmConfig { kappas: vec![4.0, 2.0], ..cfg.clone() };
        assert!(rlm_invert(&d, &h, &bad).is_err());
        let missing = RlmConfig { kappas: vec![3.0], ..cfg };
        assert!(rlm_invert(&d, &h, &missing).is_err());
    }

    #[test]
    fn landweber_matrix_matches_iteration() {
        let h = helm(vec![2.0, 4.0]);
        let d = h.apply(&bump(h.grid)).unwrap();
        let inner = 7;
        let blocks: Vec<DenseForward> = (0..2)
            .map(|f| {
                let single = HelmholtzForward::new(h.grid, vec![h.kappas[f]], PmlConfig::default(), SensorSet::boundary(4)).unwrap();
                DenseForward::assemble(&single).unwrap()
            })
            .collect();
        let r = landweber_matrix(&blocks, inner, 0.9).unwrap();
        let via_matrix = apply_matrix(&r, h.grid, &d).unwrap();
        let steps: Vec<f64> = blocks.iter().map(|b| 0.9 / ScaledSvd::new(b).unwrap().sigma_max().powi(2)).collect();
        let cfg = RlmConfig { kappas: vec![2.0, 4.0], inner, step_fraction: 0.9, power_iters: 30 };
        let it = rlm_with_steps(&d, &h, &cfg, Some(&steps)).unwrap().u;
        assert!(norm_l2(&via_matrix.sub(&it).unwrap()) < 1e-9 * norm_l2(&it));
    }
}
