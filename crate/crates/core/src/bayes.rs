//! Likelihood potential, inverse-Gamma noise hyperprior, and the special
//! functions needed by the variational objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::LinearForward;
use crate::grid::GridFunction;

/// Diagonal noise covariance; entries are variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCov {
    pub sigma: Vec<f64>,
}

impl NoiseCov {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain("noise variances must be positive and finite".into()));
        }
        Ok(NoiseCov { sigma })
    }

    pub fn constant(n: usize, s: f64) -> Result<Self> {
        Self::new(vec![s; n])
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

/// Per-sensor IG(α_i, β_i) with density ∝ σ^{−α−1} exp(−β/σ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IGParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl IGParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::shape("IGParams", format!("{} shapes vs {} scales", alpha.len(), beta.len())));
        }
        if alpha.iter().any(|a| !(*a > 1.0)) || beta.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Domain("inverse-Gamma parameters need alpha > 1 and beta > 0".into()));
        }
        Ok(IGParams { alpha, beta })
    }

    pub fn constant(n: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha; n], vec![beta; n])
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// E[σ] = β/(α−1).
    pub fn mean_sigma(&self) -> Vec<f64> {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| b / (a - 1.0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(s) => Ok(vec![*s; n]),
            ScalarOrVec::Vector(v) if v.len() == n => Ok(v.clone()),
            ScalarOrVec::Vector(v) => Err(Error::Config(format!("expected {n} hyperprior entries, got {}", v.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperpriorConfig {
    pub alpha0: ScalarOrVec,
    pub beta0: ScalarOrVec,
}

impl HyperpriorConfig {
    pub fn build(&self, n: usize) -> Result<IGParams> {
        IGParams::new(self.alpha0.expand(n)?, self.beta0.expand(n)?).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Φ from the residual d − Hu directly.
pub fn potential_from_residual(residual: &[f64], sigma: &NoiseCov) -> f64 {
    residual.iter().zip(&sigma.sigma).map(|(r, s)| 0.5 * r * r / s + 0.5 * s.ln()).sum()
}

/// Φ(u,σ;d) = ½‖d − Hu‖²_Σ + ½ log det Σ.
pub fn potential_phi(u: &GridFunction, sigma: &NoiseCov, d: &[f64], h: &dyn LinearForward) -> Result<f64> {
    if d.len() != h.n_data() || sigma.len() != h.n_data() {
        return Err(Error::shape("potential_phi", "data, noise and forward sizes disagree"));
    }
    let hu = h.apply(u)?;
    let r: Vec<f64> = d.iter().zip(&hu).map(|(a, b)| a - b).collect();
    Ok(potential_from_residual(&r, sigma))
}

/// log dμ^d/dμ₀ without the normalizing constant, i.e. −Φ.
pub fn log_posterior_ratio(u: &GridFunction, sigma: &NoiseCov, d: &[f64], h: &dyn LinearForward) -> Result<f64> {
    Ok(-potential_phi(u, sigma, d, h)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgStats {
    pub mean_inv: Vec<f64>,
    pub mean_log: Vec<f64>,
}

pub fn ig_stats(p: &IGParams) -> IgStats {
    IgStats {
        mean_inv: p.alpha.iter().zip(&p.beta).map(|(a, b)| a / b).collect(),
        mean_log: p.alpha.iter().zip(&p.beta).map(|(a, b)| b.ln() - digamma_raw(*a)).collect(),
    }
}

/// Joint log density of independent IG components at σ.
pub fn ig_logpdf(p: &IGParams, sigma: &[f64]) -> Result<f64> {
    if sigma.len() != p.len() {
        return Err(Error::shape("ig_logpdf", "length mismatch"));
    }
    let mut s = 0.0;
    for ((a, b), x) in p.alpha.iter().zip(&p.beta).zip(sigma) {
        if !(*x > 0.0) {
            return Err(Error::Domain("IG density evaluated at non-positive variance".into()));
        }
        s += a * b.ln() - lgamma(*a) - (a + 1.0) * x.ln() - b / x;
    }
    Ok(s)
}

/// KL(IG(α,β) ‖ IG(α₀,β₀)) summed over components.
pub fn ig_kl(q: &IGParams, p0: &IGParams) -> f64 {
    let mut s = 0.0;
    for i in 0..q.len() {
        let (a, b, a0, b0) = (q.alpha[i], q.beta[i], p0.alpha[i], p0.beta[i]);
        s += (a - a0) * digamma_raw(a) - lgamma(a) + lgamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Special {
    pub log_gamma: f64,
    pub digamma: f64,
}

pub fn special(x: f64) -> Result<Special> {
    Ok(Special { log_gamma: log_gamma(x)?, digamma: digamma(x)? })
}

pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_gamma needs x > 0, got {x}")));
    }
    Ok(lgamma(x))
}

pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma needs x > 0, got {x}")));
    }
    Ok(digamma_raw(x))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (NaN otherwise).
pub fn lgamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x < 0.5 {
        return lgamma(x + 1.0) - x.ln();
    }
    let z = x - 1.0;
    let mut a = LANCZOS[0];
    let t = z + LANCZOS_G + 0.5;
    for (k, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (z + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// ψ(x) for x > 0 (NaN otherwise).
pub fn digamma_raw(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x
        - x2 * (1.0 / 12.0 - x2 * (1.0 / 120.0 - x2 * (1.0 / 252.0 - x2 * (1.0 / 240.0 - x2 / 132.0))))
}

/// ψ'(x) for x > 0 (NaN otherwise).
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let ix = 1.0 / x;
    let x2 = ix * ix;
    acc + ix + 0.5 * x2 + ix * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0 - x2 * 5.0 / 66.0))))
}
