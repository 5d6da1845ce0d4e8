//! Mean-field coordinate ascent for ν = ν^u ⊗ ν^σ: Gaussian ν^u, per-sensor
//! inverse-Gamma ν^σ, and posterior diagnostics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{ig_kl, ig_stats, IGParams, NoiseCov};
use crate::error::{Error, Result};
use crate::forward::{DenseForward, LinearForward};
use crate::grid::{Grid, GridFunction};
use crate::linalg::{pcg, CgConfig};
use crate::prior::{cov_apply, cov_inv_apply, Covariance, GaussianMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// One CG solve of the precision per sensor.
    #[default]
    PerSensorCg,
    /// Woodbury identity on the data space, HC_pH* = G(I + SG)⁻¹ with G = HC₀H*.
    DataSpace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MfviConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_kmax")]
    pub k_max: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_iter")]
    pub cg_max_iter: usize,
    #[serde(default)]
    pub residual_mode: ResidualMode,
    /// Record the exact ELBO each iteration when the grid has at most this many nodes.
    #[serde(default = "default_dense_limit")]
    pub dense_elbo_max_nodes: usize,
}

fn default_tol() -> f64 {
    1e-3
}
fn default_kmax() -> usize {
    50
}
fn default_cg_tol() -> f64 {
    1e-10
}
fn default_cg_iter() -> usize {
    2000
}
fn default_dense_limit() -> usize {
    289
}

impl Default for MfviConfig {
    fn default() -> Self {
        MfviConfig {
            tol: default_tol(),
            k_max: default_kmax(),
            cg_tol: default_cg_tol(),
            cg_max_iter: default_cg_iter(),
            residual_mode: ResidualMode::default(),
            dense_elbo_max_nodes: default_dense_limit(),
        }
    }
}

impl MfviConfig {
    pub fn cg(&self) -> CgConfig {
        CgConfig { rel_tol: self.cg_tol, max_iter: self.cg_max_iter }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.k_max == 0 || !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return Err(Error::Config("mfvi needs tol > 0, k_max >= 1 and a positive CG budget".into()));
        }
        Ok(())
    }
}

/// ν^u = N(mean, C_p) with C_p⁻¹ = H*Σ*_inv H + C₀⁻¹, kept matrix-free.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: GridFunction,
    pub prior: GaussianMeasure,
    pub s_inv: Vec<f64>,
    pub cg: CgConfig,
    pub cg_iterations: usize,
}

impl GaussianPosterior {
    pub fn grid(&self) -> Grid {
        self.mean.grid
    }

    /// f ↦ (H*Σ*_inv H + C₀⁻¹)f
    pub fn precision_action(&self, h: &dyn LinearForward, f: &GridFunction) -> Result<GridFunction> {
        let mut hf = h.apply(f)?;
        for (v, s) in hf.iter_mut().zip(&self.s_inv) {
            *v *= s;
        }
        h.adjoint(&hf)?.add(&cov_inv_apply(&self.prior.cov, f)?)
    }

    /// C_p f by CG preconditioned with C₀.
    pub fn cov_action(&self, h: &dyn LinearForward, f: &GridFunction) -> Result<GridFunction> {
        Ok(GridFunction { grid: self.grid(), values: solve_precision(h, &self.prior.cov, &self.s_inv, &f.values, self.cg)?.x })
    }
}

pub(crate) struct Solved {
    pub x: Vec<f64>,
    pub iterations: usize,
}

fn solve_precision(h: &dyn LinearForward, cov: &Covariance, s_inv: &[f64], b: &[f64], cg: CgConfig) -> Result<Solved> {
    let grid = cov.grid();
    let w = grid.weights();
    let gf = |v: &[f64]| GridFunction { grid, values: v.to_vec() };
    let mut apply = |x: &[f64]| -> Result<Vec<f64>> {
        let f = gf(x);
        let mut hf = h.apply(&f)?;
        for (v, s) in hf.iter_mut().zip(s_inv) {
            *v *= s;
        }
        Ok(h.adjoint(&hf)?.add(&cov_inv_apply(cov, &f)?)?.values)
    };
    let mut precond = |r: &[f64]| -> Result<Vec<f64>> { Ok(cov_apply(cov, &gf(r))?.values) };
    let dot = |a: &[f64], b: &[f64]| wdot(a, b, &w);
    let out = pcg(&mut apply, &mut precond, &dot, b, None, cg)?;
    Ok(Solved { x: out.x, iterations: out.iterations })
}

/// Σ*_inv = diag(E[1/σ_i]) = α/β.
pub fn sigma_inv_star(p: &IGParams) -> Vec<f64> {
    ig_stats(p).mean_inv
}

/// Mean ū_p = C_p(H*Σ*_inv d + C₀⁻¹ū₀) by preconditioned CG.
pub fn update_u(h: &dyn LinearForward, d: &[f64], prior: &GaussianMeasure, s_inv: &[f64], cg: CgConfig) -> Result<GaussianPosterior> {
    check_sizes(h, d, s_inv.len())?;
    prior.mean.grid.check_same(&h.grid())?;
    if s_inv.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Domain("expected noise precisions must be non-negative".into()));
    }
    let sd: Vec<f64> = d.iter().zip(s_inv).map(|(a, b)| a * b).collect();
    let rhs = h.adjoint(&sd)?.add(&cov_inv_apply(&prior.cov, &prior.mean)?)?;
    let solved = solve_precision(h, &prior.cov, s_inv, &rhs.values, cg)?;
    Ok(GaussianPosterior {
        mean: GridFunction { grid: h.grid(), values: solved.x },
        prior: prior.clone(),
        s_inv: s_inv.to_vec(),
        cg,
        cg_iterations: solved.iterations,
    })
}

fn wdot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum()
}

fn check_sizes(h: &dyn LinearForward, d: &[f64], n: usize) -> Result<()> {
    if d.len() != h.n_data() || n != h.n_data() {
        return Err(Error::shape("mfvi", format!("{} data / {} weights for a {}-output forward map", d.len(), n, h.n_data())));
    }
    Ok(())
}

/// G = HC₀H* on the data space, assembled column by column.
pub fn data_space_gram(h: &dyn LinearForward, cov: &Covariance) -> Result<DMatrix<f64>> {
    let nd = h.n_data();
    let mut g = DMatrix::zeros(nd, nd);
    let mut e = vec![0.0; nd];
    for j in 0..nd {
        e[j] = 1.0;
        let col = h.apply(&cov_apply(cov, &h.adjoint(&e)?)?)?;
        for i in 0..nd {
            g[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    Ok(0.5 * (&g + g.transpose()))
}

/// diag(HC_pH*) = diag(G(I + SG)⁻¹) via the symmetric form
/// G − G S^½ (I + S^½ G S^½)⁻¹ S^½ G.
pub fn data_space_variances(g: &DMatrix<f64>, s_inv: &[f64]) -> Result<Vec<f64>> {
    let n = g.nrows();
    let sq: Vec<f64> = s_inv.iter().map(|s| s.sqrt()).collect();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] += sq[i] * g[(i, j)] * sq[j];
        }
    }
    let chol = m.cholesky().ok_or_else(|| Error::solver("data-space system not positive definite", f64::NAN))?;
    // B = S^½ G, X = L⁻¹B; diag = G_ii − Σ_k X_ki²
    let mut b = g.clone();
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] *= sq[i];
        }
    }
    let x = chol.l().solve_lower_triangular(&b).ok_or_else(|| Error::solver("triangular solve failed", f64::NAN))?;
    Ok((0..n).map(|i| (g[(i, i)] - x.column(i).norm_squared()).max(0.0)).collect())
}

/// E[(d − Hu)_i²] under ν^u: squared mean residual plus e_iᵀHC_pH*e_i.
pub fn expected_residual(i: usize, post: &GaussianPosterior, h: &dyn LinearForward, d: &[f64]) -> Result<f64> {
    if i >= h.n_data() {
        return Err(Error::shape("expected_residual", format!("sensor {i} of {}", h.n_data())));
    }
    let r = d[i] - h.apply(&post.mean)?[i];
    let mut e = vec![0.0; h.n_data()];
    e[i] = 1.0;
    let cphe = post.cov_action(h, &h.adjoint(&e)?)?;
    Ok(r * r + h.apply(&cphe)?[i].max(0.0))
}

/// All expected residuals at once in the requested mode.
pub fn expected_residuals(
    post: &GaussianPosterior,
    h: &dyn LinearForward,
    d: &[f64],
    mode: ResidualMode,
    gram: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>> {
    let hu = h.apply(&post.mean)?;
    let var = match mode {
        ResidualMode::PerSensorCg => {
            let mut v = Vec::with_capacity(d.len());
            let mut e = vec![0.0; d.len()];
            for i in 0..d.len() {
                e[i] = 1.0;
                let cphe = post.cov_action(h, &h.adjoint(&e)?)?;
                v.push(h.apply(&cphe)?[i].max(0.0));
                e[i] = 0.0;
            }
            v
        }
        ResidualMode::DataSpace => {
            let owned;
            let g = match gram {
                Some(g) => g,
                None => {
                    owned = data_space_gram(h, &post.prior.cov)?;
                    &owned
                }
            };
            data_space_variances(g, &post.s_inv)?
        }
    };
    Ok(d.iter().zip(&hu).zip(&var).map(|((a, b), v)| (a - b).powi(2) + v).collect())
}

/// IG(α⁰ + ½, β⁰ + ½ E[(d−Hu)²]).
pub fn update_sigma(ig0: &IGParams, residuals: &[f64]) -> Result<IGParams> {
    if residuals.len() != ig0.len() {
        return Err(Error::shape("update_sigma", "residual length mismatch"));
    }
    if residuals.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Domain("expected squared residuals must be non-negative".into()));
    }
    Ok(IGParams {
        alpha: ig0.alpha.iter().map(|a| a + 0.5).collect(),
        beta: ig0.beta.iter().zip(residuals).map(|(b, r)| b + 0.5 * r).collect(),
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MfviTrace {
    pub mean_change: Vec<f64>,
    pub sigma_change: Vec<f64>,
    /// ELBO after the u-update of each iteration (dense instances only).
    pub elbo_after_u: Vec<Option<f64>>,
    /// ELBO after the σ-update.
    pub elbo: Vec<Option<f64>>,
    pub seconds: Vec<f64>,
    pub cg_iterations: Vec<usize>,
}

impl MfviTrace {
    pub fn len(&self) -> usize {
        self.mean_change.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_change.is_empty()
    }

    /// ELBO values interleaved (after u, after σ) for monotonicity checks.
    pub fn elbo_sequence(&self) -> Vec<f64> {
        self.elbo_after_u.iter().zip(&self.elbo).flat_map(|(a, b)| [*a, *b]).flatten().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,mean_change,sigma_change,elbo,seconds,cg_iterations\n");
        for k in 0..self.len() {
            let e = self.elbo[k].map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                k + 1,
                self.mean_change[k],
                self.sigma_change[k],
                e,
                self.seconds[k],
                self.cg_iterations[k]
            ));
        }
        s
    }
}

pub struct MfviResult {
    pub posterior: GaussianPosterior,
    pub ig: IGParams,
    pub trace: MfviTrace,
    pub converged: bool,
}

/// Algorithm: σ-moments → u-update → expected residuals → σ-update, until
/// max(‖Δu‖/‖u‖, ‖Δσ‖/‖σ‖) ≤ tol or k_max iterations.
pub fn run_mfvi(h: &dyn LinearForward, d: &[f64], prior: &GaussianMeasure, ig0: &IGParams, cfg: &MfviConfig) -> Result<MfviResult> {
    cfg.validate()?;
    check_sizes(h, d, ig0.len())?;
    let grid = h.grid();
    let w = grid.weights();
    let dense = if grid.len() <= cfg.dense_elbo_max_nodes { Some(DenseElbo::new(h, prior)?) } else { None };
    let gram = match cfg.residual_mode {
        ResidualMode::DataSpace => Some(data_space_gram(h, &prior.cov)?),
        ResidualMode::PerSensorCg => None,
    };
    let mut ig = ig0.clone();
    let mut u_prev = prior.mean.clone();
    let mut sig_prev = ig0.mean_sigma();
    let mut trace = MfviTrace::default();
    let mut converged = false;
    let mut post = None;
    for _ in 0..cfg.k_max {
        let t0 = Instant::now();
        let s_inv = sigma_inv_star(&ig);
        let p = update_u(h, d, prior, &s_inv, cfg.cg())?;
        let elbo_u = match &dense {
            Some(de) => Some(de.elbo(&p.mean.values, &s_inv, d, ig0, &ig)?),
            None => None,
        };
        let res = expected_residuals(&p, h, d, cfg.residual_mode, gram.as_ref())?;
        ig = update_sigma(ig0, &res)?;
        let elbo = match &dense {
            Some(de) => Some(de.elbo(&p.mean.values, &s_inv, d, ig0, &ig)?),
            None => None,
        };
        let sig = ig.mean_sigma();
        let du = rel_change(&p.mean.values, &u_prev.values, Some(&w));
        let ds = rel_change(&sig, &sig_prev, None);
        trace.mean_change.push(du);
        trace.sigma_change.push(ds);
        trace.elbo_after_u.push(elbo_u);
        trace.elbo.push(elbo);
        trace.seconds.push(t0.elapsed().as_secs_f64());
        trace.cg_iterations.push(p.cg_iterations);
        u_prev = p.mean.clone();
        sig_prev = sig;
        post = Some(p);
        if du.max(ds) <= cfg.tol {
            converged = true;
            break;
        }
    }
    let mut posterior = post.expect("k_max >= 1");
    // the returned Gaussian is paired with the final σ-moments
    posterior.s_inv = sigma_inv_star(&ig);
    Ok(MfviResult { posterior: refresh(h, d, posterior, cfg)?, ig, trace, converged })
}

fn refresh(h: &dyn LinearForward, d: &[f64], p: GaussianPosterior, cfg: &MfviConfig) -> Result<GaussianPosterior> {
    update_u(h, d, &p.prior, &p.s_inv, cfg.cg())
}

fn rel_change(a: &[f64], b: &[f64], w: Option<&[f64]>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..a.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        num += wi * (a[i] - b[i]).powi(2);
        den += wi * a[i] * a[i];
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Exact ELBO of the discretized model (nodal values u ∈ ℝᴺ with prior
/// precision W·C₀⁻¹), evaluated with dense matrices.
pub struct DenseElbo {
    prior_prec: DMatrix<f64>,
    prior_logdet: f64,
    prior_mean: DVector<f64>,
    h: DMatrix<f64>,
}

impl DenseElbo {
    pub fn new(h: &dyn LinearForward, prior: &GaussianMeasure) -> Result<Self> {
        let grid = h.grid();
        let n = grid.len();
        let w = grid.weights();
        let mut b = DMatrix::zeros(n, n);
        let mut e = GridFunction::zeros(grid);
        for j in 0..n {
            e.values[j] = 1.0;
            let col = cov_inv_apply(&prior.cov, &e)?;
            for i in 0..n {
                b[(i, j)] = w[i] * col.values[i];
            }
            e.values[j] = 0.0;
        }
        let b = 0.5 * (&b + b.transpose());
        let prior_logdet = logdet_spd(&b)?;
        let hd = DenseForward::assemble(h)?;
        let hm = DMatrix::from_row_slice(hd.n_data, n, &hd.matrix);
        Ok(DenseElbo { prior_prec: b, prior_logdet, prior_mean: DVector::from_vec(prior.mean.values.clone()), h: hm })
    }

    /// Nodal prior precision W·C₀⁻¹.
    pub fn prior_precision(&self) -> &DMatrix<f64> {
        &self.prior_prec
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    /// Dense forward matrix (N_d × N).
    pub fn forward_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Posterior precision (Euclidean, nodal) for given expected noise precisions.
    pub fn posterior_precision(&self, s_inv: &[f64]) -> DMatrix<f64> {
        let mut hs = self.h.clone();
        for (i, s) in s_inv.iter().enumerate() {
            hs.row_mut(i).scale_mut(*s);
        }
        let a = &self.prior_prec + self.h.transpose() * hs;
        0.5 * (&a + a.transpose())
    }

    /// ELBO(ν^u(mean, s_inv), ν^σ = ig) with prior hyperparameters ig0.
    pub fn elbo(&self, mean: &[f64], s_inv: &[f64], d: &[f64], ig0: &IGParams, ig: &IGParams) -> Result<f64> {
        let a = self.posterior_precision(s_inv);
        let n = a.nrows();
        let chol = a.clone().cholesky().ok_or_else(|| Error::Numerical("posterior precision not SPD".into()))?;
        let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ainv = chol.inverse();
        let m = DVector::from_column_slice(mean);
        let diff = &m - &self.prior_mean;
        let kl_u = 0.5
            * ((&self.prior_prec * &ainv).trace() - n as f64 + diff.dot(&(&self.prior_prec * &diff)) - self.prior_logdet
                + logdet_a);
        let st = ig_stats(ig);
        let hm = &self.h * &m;
        let hah = &self.h * &ainv;
        let mut like = -0.5 * d.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..d.len() {
            let var = hah.row(i).dot(&self.h.row(i));
            like -= 0.5 * st.mean_inv[i] * ((d[i] - hm[i]).powi(2) + var) + 0.5 * st.mean_log[i];
        }
        Ok(like - kl_u - ig_kl(ig, ig0))
    }
}

fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = m.clone().cholesky().ok_or_else(|| Error::Numerical("matrix not SPD".into()))?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Pointwise posterior variance (nodal covariance diagonal): dense inverse on
/// grids up to 33², otherwise the exact prior variance minus the rank-N_d
/// reduction C₀H*(Σ*_inv⁻¹ + HC₀H*)⁻¹HC₀.
pub fn posterior_diag_variance(post: &GaussianPosterior, h: &dyn LinearForward) -> Result<GridFunction> {
    if post.grid().len() <= 33 * 33 {
        posterior_diag_variance_dense(post, h)
    } else {
        posterior_diag_variance_lowrank(post, h)
    }
}

/// diag((W·P)⁻¹), the nodal covariance diagonal.
pub fn posterior_diag_variance_dense(post: &GaussianPosterior, h: &dyn LinearForward) -> Result<GridFunction> {
    let de = DenseElbo::new(h, &post.prior)?;
    let a = de.posterior_precision(&post.s_inv);
    let inv = a.cholesky().ok_or_else(|| Error::Numerical("posterior precision not SPD".into()))?.inverse();
    Ok(GridFunction { grid: post.grid(), values: inv.diagonal().iter().cloned().collect() })
}

pub fn prior_pointwise_variance(cov: &Covariance) -> Result<GridFunction> {
    match cov {
        Covariance::Spectral(s) => Ok(s.pointwise_variance()),
        Covariance::Variable(v) => v.pointwise_variance(),
    }
}

pub fn posterior_diag_variance_lowrank(post: &GaussianPosterior, h: &dyn LinearForward) -> Result<GridFunction> {
    let grid = post.grid();
    let (n, nd) = (grid.len(), h.n_data());
    // columns b_j = C₀H*e_j and G = HB
    let mut b = DMatrix::zeros(n, nd);
    let mut g = DMatrix::zeros(nd, nd);
    let mut e = vec![0.0; nd];
    for j in 0..nd {
        e[j] = 1.0;
        let col = cov_apply(&post.prior.cov, &h.adjoint(&e)?)?;
        let hc = h.apply(&col)?;
        for k in 0..n {
            b[(k, j)] = col.values[k];
        }
        for i in 0..nd {
            g[(i, j)] = hc[i];
        }
        e[j] = 0.0;
    }
    let g = 0.5 * (&g + g.transpose());
    let sq: Vec<f64> = post.s_inv.iter().map(|s| s.sqrt()).collect();
    let mut m = DMatrix::identity(nd, nd);
    for i in 0..nd {
        for j in 0..nd {
            m[(i, j)] += sq[i] * g[(i, j)] * sq[j];
        }
        b.column_mut(i).scale_mut(sq[i]);
    }
    let chol = m.cholesky().ok_or_else(|| Error::solver("data-space system not positive definite", f64::NAN))?;
    // Y = B S^½ L⁻ᵀ, reduction_k = ‖Y_k‖²
    let yt = chol.l().solve_lower_triangular(&b.transpose()).ok_or_else(|| Error::solver("triangular solve failed", f64::NAN))?;
    let prior_var = prior_pointwise_variance(&post.prior.cov)?;
    let values = (0..n).map(|k| (prior_var.values[k] - yt.column(k).norm_squared()).max(0.0)).collect();
    Ok(GridFunction { grid, values })
}

/// Monte Carlo estimate from posterior samples C_p(H*Σ*_inv ε + C₀⁻¹ξ),
/// ε ~ N(0, Σ*_inv⁻¹), ξ ~ N(0, C₀); one CG solve per sample.
pub fn posterior_diag_variance_sampled<R: Rng + ?Sized>(
    post: &GaussianPosterior,
    h: &dyn LinearForward,
    samples: usize,
    rng: &mut R,
) -> Result<GridFunction> {
    let grid = post.grid();
    let zero = GaussianMeasure::new(GridFunction::zeros(grid), post.prior.cov.clone())?;
    let mut acc = vec![0.0; grid.len()];
    let samples = samples.max(1);
    for _ in 0..samples {
        let xi = crate::prior::sample(&zero, rng)?;
        let eps: Vec<f64> = post
            .s_inv
            .iter()
            .map(|s| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * s.sqrt()
            })
            .collect();
        let rhs = h.adjoint(&eps)?.add(&cov_inv_apply(&post.prior.cov, &xi)?)?;
        let x = post.cov_action(h, &rhs)?;
        for (a, v) in acc.iter_mut().zip(&x.values) {
            *a += v * v;
        }
    }
    Ok(GridFunction { grid, values: acc.iter().map(|a| a / samples as f64).collect() })
}

/// tr(C_p H*Σ*_inv Σ Σ*_inv H C_p)^½ = (Σ_i s_i² σ_i ‖C_p H*e_i‖²)^½.
pub fn error_bound_trace(post: &GaussianPosterior, h: &dyn LinearForward, s_inv: &[f64], true_sigma: &NoiseCov) -> Result<f64> {
    if s_inv.len() != h.n_data() || true_sigma.len() != h.n_data() {
        return Err(Error::shape("error_bound_trace", "sensor count mismatch"));
    }
    let w = post.grid().weights();
    let mut e = vec![0.0; h.n_data()];
    let mut total = 0.0;
    for i in 0..h.n_data() {
        let c = s_inv[i] * s_inv[i] * true_sigma.sigma[i];
        if c == 0.0 {
            continue;
        }
        e[i] = 1.0;
        let v = post.cov_action(h, &h.adjoint(&e)?)?;
        total += c * wdot(&v.values, &v.values, &w);
        e[i] = 0.0;
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{EllipticForward, SensorSet};
    use crate::prior::SpectralCovariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, sensors: SensorSet) -> (EllipticForward, GaussianMeasure) {
        let g = Grid::unit(n);
        let h = EllipticForward::new(g, 0.01, sensors).unwrap();
        let cov = Covariance::Spectral(SpectralCovariance::new(g, 1.0, 0.05).unwrap());
        let mean = GridFunction::from_fn(g, |x, y| 0.3 * (x - y));
        (h, GaussianMeasure::new(mean, cov).unwrap())
    }

    fn four() -> SensorSet {
        SensorSet::new(vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.6, 0.6)]).unwrap()
    }

    #[test]
    fn sigma_inv_star_examples() {
        assert_eq!(sigma_inv_star(&IGParams::constant(3, 2.0, 4.0).unwrap()), vec![0.5; 3]);
        assert_eq!(sigma_inv_star(&IGParams::new(vec![2.0, 3.0], vec![1.0, 1.0]).unwrap()), vec![2.0, 3.0]);
    }

    #[test]
    fn update_sigma_examples() {
        let ig0 = IGParams::new(vec![2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let p = update_sigma(&ig0, &[2.0, 4.0]).unwrap();
        assert_eq!(p.alpha, vec![2.5, 2.5]);
        assert_eq!(p.beta, vec![2.0, 3.0]);
        assert_eq!(update_sigma(&ig0, &[0.0, 0.0]).unwrap().beta, ig0.beta);
        assert!(update_sigma(&ig0, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn no_data_limit_returns_prior() {
        let (h, prior) = instance(9, four());
        let d = vec![1.0, -1.0, 0.5, 2.0];
        let post = update_u(&h, &d, &prior, &[0.0; 4], CgConfig::default()).unwrap();
        for (a, b) in post.mean.values.iter().zip(&prior.mean.values) {
            assert!((a - b).abs() < 1e-9 * prior.mean.max_abs());
        }
        let f = GridFunction::from_fn(h.grid, |x, y| (3.0 * x).sin() + y * y);
        let p1 = post.precision_action(&h, &f).unwrap();
        let p0 = cov_inv_apply(&prior.cov, &f).unwrap();
        for (a, b) in p1.values.iter().zip(&p0.values) {
            assert!((a - b).abs() <= 1e-12 * p0.max_abs());
        }
    }

    #[test]
    fn mean_matches_dense_conjugate_solve() {
        let (h, prior) = instance(9, four());
        let d = vec![0.3, -0.2, 0.7, 0.1];
        let s_inv = vec![4.0, 10.0, 2.0, 25.0];
        let post = update_u(&h, &d, &prior, &s_inv, CgConfig::default()).unwrap();
        let de = DenseElbo::new(&h, &prior).unwrap();
        let a = de.posterior_precision(&s_inv);
        let sd = DVector::from_iterator(4, d.iter().zip(&s_inv).map(|(a, b)| a * b));
        let rhs = de.h.transpose() * sd + &de.prior_prec * &de.prior_mean;
        let m = a.cholesky().unwrap().solve(&rhs);
        let err = (DVector::from_vec(post.mean.values.clone()) - &m).norm() / m.norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn expected_residuals_match_dense_and_modes_agree() {
        let (h, prior) = instance(9, four());
        let d = vec![0.3, -0.2, 0.7, 0.1];
        let s_inv = vec![4.0, 10.0, 2.0, 25.0];
        let post = update_u(&h, &d, &prior, &s_inv, CgConfig::default()).unwrap();
        let de = DenseElbo::new(&h, &prior).unwrap();
        let ainv = de.posterior_precision(&s_inv).cholesky().unwrap().inverse();
        let hah = &de.h * ainv * de.h.transpose();
        let hm = &de.h * DVector::from_vec(post.mean.values.clone());
        let per = expected_residuals(&post, &h, &d, ResidualMode::PerSensorCg, None).unwrap();
        let ds = expected_residuals(&post, &h, &d, ResidualMode::DataSpace, None).unwrap();
        for i in 0..4 {
            let want = (d[i] - hm[i]).powi(2) + hah[(i, i)];
            assert!((per[i] - want).abs() < 1e-8 * want);
            assert!((ds[i] - want).abs() < 1e-8 * want);
            assert!((expected_residual(i, &post, &h, &d).unwrap() - want).abs() < 1e-8 * want);
            assert!(per[i] >= (d[i] - hm[i]).powi(2));
        }
    }

    #[test]
    fn expected_residual_is_permutation_equivariant() {
        let pts = four().points;
        let (h, prior) = instance(9, four());
        let perm = [2usize, 0, 3, 1];
        let (hp, _) = instance(9, SensorSet::new(perm.iter().map(|&k| pts[k]).collect()).unwrap());
        let d = vec![0.3, -0.2, 0.7, 0.1];
        let s = vec![4.0, 10.0, 2.0, 25.0];
        let dp: Vec<f64> = perm.iter().map(|&k| d[k]).collect();
        let sp: Vec<f64> = perm.iter().map(|&k| s[k]).collect();
        let a = expected_residuals(&update_u(&h, &d, &prior, &s, CgConfig::default()).unwrap(), &h, &d, ResidualMode::PerSensorCg, None)
            .unwrap();
        let b = expected_residuals(&update_u(&hp, &dp, &prior, &sp, CgConfig::default()).unwrap(), &hp, &dp, ResidualMode::PerSensorCg, None)
            .unwrap();
        for (j, &k) in perm.iter().enumerate() {
            assert!((b[j] - a[k]).abs() < 1e-10 * a[k]);
        }
    }

    #[test]
    fn vanishing_prior_covariance_leaves_squared_residual() {
        let g = Grid::unit(9);
        let h = EllipticForward::new(g, 0.01, four()).unwrap();
        let cov = Covariance::Spectral(SpectralCovariance::new(g, 1e4, 0.0).unwrap());
        let prior = GaussianMeasure::new(GridFunction::zeros(g), cov).unwrap();
        let d = vec![1.0, 2.0, -1.0, 0.5];
        let post = update_u(&h, &d, &prior, &[1.0; 4], CgConfig::default()).unwrap();
        let r = expected_residuals(&post, &h, &d, ResidualMode::PerSensorCg, None).unwrap();
        let hm = h.apply(&post.mean).unwrap();
        for i in 0..4 {
            let r2 = (d[i] - hm[i]).powi(2);
            assert!(r[i] - r2 < 1e-6 * r2);
        }
    }

    #[test]
    fn pinned_noise_converges_quickly() {
        let (h, prior) = instance(9, four());
        let truth = GridFunction::from_fn(h.grid, |x, y| (2.0 * x).cos() * y);
        let d = h.apply(&truth).unwrap();
        let ig0 = IGParams::constant(4, 2.0, 1e8).unwrap();
        let res = run_mfvi(&h, &d, &prior, &ig0, &MfviConfig::default()).unwrap();
        assert!(res.converged && res.trace.len() <= 2, "{} iterations", res.trace.len());
        let single = update_u(&h, &d, &prior, &sigma_inv_star(&res.ig), CgConfig::default()).unwrap();
        for (a, b) in res.posterior.mean.values.iter().zip(&single.mean.values) {
            assert!((a - b).abs() < 1e-12 * single.mean.max_abs());
        }
    }

    #[test]
    fn fixed_point_satisfies_both_updates() {
        let (h, prior) = instance(9, four());
        let d = vec![0.4, -0.1, 0.3, 0.2];
        let ig0 = IGParams::constant(4, 2.0, 0.01).unwrap();
        let cfg = MfviConfig { tol: 1e-9, k_max: 500, ..MfviConfig::default() };
        let res = run_mfvi(&h, &d, &prior, &ig0, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.ig.alpha.iter().all(|&a| a == 2.5));
        let u = update_u(&h, &d, &prior, &sigma_inv_star(&res.ig), CgConfig::default()).unwrap();
        let ig = update_sigma(&ig0, &expected_residuals(&u, &h, &d, ResidualMode::PerSensorCg, None).unwrap()).unwrap();
        assert!(rel_change(&u.mean.values, &res.posterior.mean.values, None) < 1e-6);
        assert!(rel_change(&ig.beta, &res.ig.beta, None) < 1e-6);
    }

    #[test]
    fn elbo_is_non_decreasing() {
        let (h, prior) = instance(9, four());
        let d = vec![0.4, -0.1, 0.3, 0.2];
        let ig0 = IGParams::constant(4, 2.0, 0.01).unwrap();
        let cfg = MfviConfig { tol: 1e-12, k_max: 40, ..MfviConfig::default() };
        let res = run_mfvi(&h, &d, &prior, &ig0, &cfg).unwrap();
        let e = res.trace.elbo_sequence();
        assert!(e.len() >= 4);
        for k in 1..e.len() {
            assert!(e[k] - e[k - 1] >= -1e-10, "step {k}: {} -> {}", e[k - 1], e[k]);
        }
    }

    #[test]
    fn dense_variance_matches_explicit_inverse() {
        let (h, prior) = instance(9, four());
        let s = vec![4.0, 10.0, 2.0, 25.0];
        let post = update_u(&h, &[0.0; 4], &prior, &s, CgConfig::default()).unwrap();
        let v = posterior_diag_variance_dense(&post, &h).unwrap();
        // explicit inverse via CG columns: C_p W⁻¹ e_k
        let w = h.grid.weights();
        for k in [0usize, 13, 40, 80] {
            let mut e = GridFunction::zeros(h.grid);
            e.values[k] = 1.0 / w[k];
            let col = post.cov_action(&h, &e).unwrap();
            assert!((col.values[k] - v.values[k]).abs() < 1e-10 * v.values[k]);
        }
        // no data: nodal prior variance
        let p0 = update_u(&h, &[0.0; 4], &prior, &[0.0; 4], CgConfig::default()).unwrap();
        let v0 = posterior_diag_variance_dense(&p0, &h).unwrap();
        let pv = prior_pointwise_variance(&prior.cov).unwrap();
        for (a, b) in v0.values.iter().zip(&pv.values) {
            assert!((a - b).abs() < 1e-10 * b);
        }
    }

    #[test]
    fn lowrank_and_sampled_variance_track_dense() {
        let (h, prior) = instance(17, SensorSet::lattice(6));
        let post = update_u(&h, &vec![0.0; 36], &prior, &vec![50.0; 36], CgConfig::default()).unwrap();
        let dense = posterior_diag_variance_dense(&post, &h).unwrap();
        let low = posterior_diag_variance_lowrank(&post, &h).unwrap();
        for (a, b) in dense.values.iter().zip(&low.values) {
            assert!((a - b).abs() < 1e-8 * a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = posterior_diag_variance_sampled(&post, &h, 200, &mut rng).unwrap();
        let mut rel: Vec<f64> = dense.values.iter().zip(&est.values).map(|(a, b)| (a - b).abs() / a).collect();
        rel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(rel[rel.len() / 2] < 0.10, "median {}", rel[rel.len() / 2]);
    }

    #[test]
    fn error_bound_trace_properties() {
        let (h, prior) = instance(9, four());
        let s = vec![4.0, 10.0, 2.0, 25.0];
        let post = update_u(&h, &[0.0; 4], &prior, &s, CgConfig::default()).unwrap();
        let sig = NoiseCov::new(vec![0.1, 0.2, 0.3, 0.05]).unwrap();
        assert_eq!(error_bound_trace(&post, &h, &[0.0; 4], &sig).unwrap(), 0.0);
        let t = error_bound_trace(&post, &h, &s, &sig).unwrap();
        let sig4 = NoiseCov::new(sig.sigma.iter().map(|v| 4.0 * v).collect()).unwrap();
        assert!((error_bound_trace(&post, &h, &s, &sig4).unwrap() - 2.0 * t).abs() < 1e-12 * t);
        // dense: tr(T W Tᵀ) with T = A⁻¹MᵀSΣ^½ as nodal matrices
        let de = DenseElbo::new(&h, &prior).unwrap();
        let ainv = de.posterior_precision(&s).cholesky().unwrap().inverse();
        let mut sm = DMatrix::zeros(4, 4);
        for i in 0..4 {
            sm[(i, i)] = s[i] * sig.sigma[i].sqrt();
        }
        let tm = &ainv * de.h.transpose() * sm;
        let w = DMatrix::from_diagonal(&DVector::from_vec(h.grid.weights()));
        let want = (tm.transpose() * w * &tm).trace().sqrt();
        assert!((t - want).abs() < 1e-8 * want);
    }

    #[test]
    fn vanishing_noise_drives_prior_term_to_zero() {
        // 400 sensors on a 9×9 grid: H is injective on the discrete space
        let (h, prior) = instance(9, SensorSet::lattice(20));
        let d = vec![0.0; 400];
        let u0n = crate::grid::norm_l2(&prior.mean);
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let beta = 10f64.powi(-k);
            let s_inv = vec![2.5 / beta; 400];
            let post = update_u(&h, &d, &prior, &s_inv, CgConfig::default()).unwrap();
            let v = crate::grid::norm_l2(&post.mean);
            assert!(v < last);
            last = v;
        }
        assert!(last <= 1e-3 * u0n, "{last} vs {u0n}");
    }
}
