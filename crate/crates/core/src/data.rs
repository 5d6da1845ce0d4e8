//! Synthetic truths, noise models and on-disk datasets.
//!
//! Seeding: one master seed; item `i` draws from `ChaCha8Rng::seed_from_u64(master)`
//! on stream `i + 1` (truth first, then noise).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardConfig, HelmholtzForward, LinearForward, ModelKind};
use crate::grid::{read_f64, write_f64, Grid, GridFunction};
use crate::linalg::BandLdl;
use crate::prior::{neumann_stiffness, white_noise};

/// Samples mean + M⁻¹ξ, M = alpha_amp·(I − ∇·(Θ∇)) with Neumann FD, ξ white.
#[derive(Clone, Debug)]
pub struct GrfSampler {
    pub grid: Grid,
    pub alpha_amp: f64,
    weights: Vec<f64>,
    factor: BandLdl,
}

impl GrfSampler {
    pub fn new(grid: Grid, theta: (f64, f64), alpha_amp: f64) -> Result<Self> {
        if !(theta.0 > 0.0 && theta.1 > 0.0) || !(alpha_amp > 0.0) {
            return Err(Error::Config(format!("GRF needs positive theta and amplitude (got {theta:?}, {alpha_amp})")));
        }
        let weights = grid.weights();
        let mut s = neumann_stiffness(&grid, theta.0, theta.1);
        for (i, w) in weights.iter().enumerate() {
            s.add(i, i, *w);
        }
        Ok(GrfSampler { grid, alpha_amp, weights, factor: BandLdl::factor(&s)? })
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &GridFunction, rng: &mut R) -> Result<GridFunction> {
        self.grid.check_same(&mean.grid)?;
        let xi = white_noise(self.grid, rng);
        let wx: Vec<f64> = xi.values.iter().zip(&self.weights).map(|(a, w)| a * w).collect();
        let z = self.factor.solve(&wx);
        Ok(GridFunction { grid: self.grid, values: mean.values.iter().zip(&z).map(|(m, v)| m + v / self.alpha_amp).collect() })
    }
}

pub fn sample_grf_aniso<R: Rng + ?Sized>(mean: &GridFunction, theta: (f64, f64), alpha_amp: f64, rng: &mut R) -> Result<GridFunction> {
    GrfSampler::new(mean.grid, theta, alpha_amp)?.sample(mean, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingVariant {
    /// piecewise ring field
    Standard,
    /// ring field plus an independent bump sum everywhere
    Biased,
}

/// Three anisotropic Gaussian bumps: (amplitude, x-rate, x-centre, y-rate, y-centre).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpSum {
    pub bumps: [[f64; 5]; 3],
}

impl BumpSum {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bumps = [[0.0; 5]; 3];
        for b in bumps.iter_mut() {
            *b = [
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(50.0..=60.0),
                rng.gen_range(0.3..=0.7),
                rng.gen_range(50.0..=60.0),
                rng.gen_range(0.3..=0.7),
            ];
        }
        BumpSum { bumps }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.bumps.iter().map(|b| b[0] * (-b[1] * (x - b[2]).powi(2) - b[3] * (y - b[4]).powi(2)).exp()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSource {
    pub inner: BumpSum,
    pub r1: f64,
    pub r2: f64,
    pub extra: Option<BumpSum>,
}

impl RingSource {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, variant: RingVariant) -> Self {
        let inner = BumpSum::sample(rng);
        let r1 = rng.gen_range(0.32..=0.4);
        let r2 = rng.gen_range(0.42..=0.48);
        let extra = match variant {
            RingVariant::Standard => None,
            RingVariant::Biased => Some(BumpSum::sample(rng)),
        };
        RingSource { inner, r1, r2, extra }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
        let base = if r < self.r1 {
            self.inner.eval(x, y)
        } else if r <= self.r2 {
            -0.5
        } else {
            0.0
        };
        base + self.extra.as_ref().map_or(0.0, |e| e.eval(x, y))
    }
}

pub fn sample_ring_source<R: Rng + ?Sized>(grid: Grid, variant: RingVariant, rng: &mut R) -> GridFunction {
    let s = RingSource::sample(rng, variant);
    GridFunction::from_fn(grid, |x, y| s.eval(x, y))
}

/// d = d_c + a(η⊙d_c); returns the noisy data and the true per-sensor variance a²d_c².
pub fn add_multiplicative_noise<R: Rng + ?Sized>(d_clean: &[f64], a_level: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let noisy = d_clean.iter().map(|&d| d + a_level * rng.sample::<f64, _>(StandardNormal) * d).collect();
    let var = d_clean.iter().map(|&d| a_level * a_level * d * d).collect();
    (noisy, var)
}

/// Additive Gaussian noise with per-component std ρ·mean|d_clean|.
pub fn add_gaussian_noise<R: Rng + ?Sized>(d_clean: &[f64], rho: f64, rng: &mut R) -> (Vec<f64>, f64) {
    let scale = if d_clean.is_empty() { 0.0 } else { d_clean.iter().map(|v| v.abs()).sum::<f64>() / d_clean.len() as f64 };
    let std = rho * scale;
    (d_clean.iter().map(|&d| d + std * rng.sample::<f64, _>(StandardNormal)).collect(), std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GrfMean {
    Constant { value: f64 },
    /// 2 + 0.2·sin(2πx)·sin(2πy)
    SineBump,
}

impl GrfMean {
    pub fn on_grid(&self, grid: Grid) -> GridFunction {
        match *self {
            GrfMean::Constant { value } => GridFunction::constant(grid, value),
            GrfMean::SineBump => GridFunction::from_fn(grid, |x, y| {
                2.0 + 0.2 * (2.0 * std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y).sin()
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthConfig {
    Grf { mean: GrfMean, theta: (f64, f64), alpha_amp: f64 },
    Ring { variant: RingVariant },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseConfig {
    /// a ~ U[−a_max, a_max] per item, or `fixed`.
    Multiplicative { a_max: f64, #[serde(default)] fixed: Option<f64> },
    Gaussian { rho: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub forward: ForwardConfig,
    pub truth: TruthConfig,
    pub noise: NoiseConfig,
    pub n_items: usize,
    pub seed: u64,
    /// Grid of the coarse solves used as the clean target (Helmholtz).
    #[serde(default)]
    pub clean_grid: Option<usize>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        if self.forward.model == ModelKind::Helmholtz && !matches!(self.truth, TruthConfig::Ring { .. }) {
            return Err(Error::Config("Helmholtz datasets use ring sources".into()));
        }
        Ok(())
    }

    /// Desk elliptic setup: 20×20 sensor lattice, fine grid 129².
    pub fn elliptic_desk(n_items: usize, seed: u64) -> Self {
        DatasetConfig {
            forward: ForwardConfig {
                model: ModelKind::Elliptic,
                alpha_pde: 0.01,
                kappas: vec![],
                pml: Default::default(),
                sensors: crate::forward::SensorConfig::Lattice { m: 20 },
                data_grid: 129,
                inv_grid: 33,
            },
            truth: TruthConfig::Grf { mean: GrfMean::Constant { value: 2.0 }, theta: (10.0, 1.0), alpha_amp: 2.0 },
            noise: NoiseConfig::Multiplicative { a_max: 0.1, fixed: None },
            n_items,
            seed,
            clean_grid: None,
        }
    }

    /// Desk Helmholtz setup: 8 points per side, κ ∈ {2,4,6,8}, fine grid 97².
    pub fn helmholtz_desk(n_items: usize, seed: u64) -> Self {
        DatasetConfig {
            forward: ForwardConfig {
                model: ModelKind::Helmholtz,
                alpha_pde: 0.01,
                kappas: vec![2.0, 4.0, 6.0, 8.0],
                pml: Default::default(),
                sensors: crate::forward::SensorConfig::Boundary { per_side: 8 },
                data_grid: 97,
                inv_grid: 33,
            },
            truth: TruthConfig::Ring { variant: RingVariant::Standard },
            noise: NoiseConfig::Gaussian { rho: 0.05 },
            n_items,
            seed,
            clean_grid: Some(33),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    /// multiplicative level a, or the Gaussian std
    pub level: f64,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataItem {
    pub u_truth: GridFunction,
    pub d_noisy: Vec<f64>,
    pub d_clean: Vec<f64>,
    pub true_variance: Vec<f64>,
    pub noise: NoiseMeta,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub items: Vec<DataItem>,
}

pub fn item_rng(master: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index as u64 + 1);
    r
}

fn draw_truth<R: Rng + ?Sized>(cfg: &TruthConfig, grf: Option<&GrfSampler>, grid: Grid, rng: &mut R) -> Result<GridFunction> {
    match cfg {
        TruthConfig::Grf { mean, .. } => grf.expect("sampler built for GRF truth").sample(&mean.on_grid(grid), rng),
        TruthConfig::Ring { variant } => Ok(sample_ring_source(grid, *variant, rng)),
    }
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let fine = Grid::unit(cfg.forward.data_grid);
    let grf = match &cfg.truth {
        TruthConfig::Grf { theta, alpha_amp, .. } => Some(GrfSampler::new(fine, *theta, *alpha_amp)?),
        _ => None,
    };
    let mut truths = Vec::with_capacity(cfg.n_items);
    let mut rngs = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let mut r = item_rng(cfg.seed, i);
        truths.push(draw_truth(&cfg.truth, grf.as_ref(), fine, &mut r)?);
        rngs.push(r);
    }
    let fail = |i: usize, e: Error| Error::solver(format!("forward solve failed for item {i}: {e}"), f64::NAN);
    let items = match cfg.forward.model {
        ModelKind::Elliptic => {
            let h = cfg.forward.build(cfg.forward.data_grid)?;
            let mut items = Vec::new();
            for (i, (u, r)) in truths.into_iter().zip(rngs.iter_mut()).enumerate() {
                let d_clean = h.apply(&u).map_err(|e| fail(i, e))?;
                let (level, (d_noisy, var)) = match cfg.noise {
                    NoiseConfig::Multiplicative { a_max, fixed } => {
                        let a = fixed.unwrap_or_else(|| r.gen_range(-a_max..=a_max));
                        (a, add_multiplicative_noise(&d_clean, a, r))
                    }
                    NoiseConfig::Gaussian { rho } => {
                        let (n, s) = add_gaussian_noise(&d_clean, rho, r);
                        (s, (n, vec![s * s; d_clean.len()]))
                    }
                };
                let kind = noise_kind(&cfg.noise);
                items.push(DataItem { u_truth: u, d_noisy, d_clean, true_variance: var, noise: NoiseMeta { level, kind }, stream: i as u64 + 1 });
            }
            items
        }
        ModelKind::Helmholtz => {
            // frequency-major so only one fine factorization is alive at a time
            let sensors = cfg.forward.sensors.build();
            let coarse = Grid::unit(cfg.clean_grid.unwrap_or(cfg.forward.inv_grid));
            let mut fine_d = vec![Vec::new(); truths.len()];
            let mut clean_d = vec![Vec::new(); truths.len()];
            for &k in &cfg.forward.kappas {
                let hf = HelmholtzForward::new(fine, vec![k], cfg.forward.pml, sensors.clone())?;
                let hc = HelmholtzForward::new(coarse, vec![k], cfg.forward.pml, sensors.clone())?;
                for (i, u) in truths.iter().enumerate() {
                    fine_d[i].extend(hf.apply(u).map_err(|e| fail(i, e))?);
                    let uc = crate::grid::rescale(u, &coarse);
                    clean_d[i].extend(hc.apply(&uc).map_err(|e| fail(i, e))?);
                }
            }
            let rho = match cfg.noise {
                NoiseConfig::Gaussian { rho } => rho,
                NoiseConfig::Multiplicative { .. } => return Err(Error::Config("Helmholtz datasets use Gaussian noise".into())),
            };
            let mut items = Vec::new();
            for (i, ((u, r), (df, dc))) in truths.into_iter().zip(rngs.iter_mut()).zip(fine_d.into_iter().zip(clean_d)).enumerate() {
                let (d_noisy, std) = add_gaussian_noise(&df, rho, r);
                items.push(DataItem {
                    u_truth: u,
                    true_variance: vec![std * std; d_noisy.len()],
                    d_noisy,
                    d_clean: dc,
                    noise: NoiseMeta { level: std, kind: "gaussian".into() },
                    stream: i as u64 + 1,
                });
            }
            items
        }
    };
    Ok(Dataset { config: cfg.clone(), items })
}

fn noise_kind(n: &NoiseConfig) -> String {
    match n {
        NoiseConfig::Multiplicative { .. } => "multiplicative".into(),
        NoiseConfig::Gaussian { .. } => "gaussian".into(),
    }
}

#[derive(Serialize, Deserialize)]
struct ItemEntry {
    index: usize,
    stream: u64,
    noise: NoiseMeta,
    n_data: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    seed_scheme: String,
    items: Vec<ItemEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `manifest.json` plus `item_NNNNN_{u,dn,dc,var}` binaries.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, it) in self.items.iter().enumerate() {
            let stem = dir.join(format!("item_{i:05}"));
            it.u_truth.save(&stem.with_extension("u"))?;
            write_f64(&dir.join(format!("item_{i:05}.dn.f64")), &it.d_noisy)?;
            write_f64(&dir.join(format!("item_{i:05}.dc.f64")), &it.d_clean)?;
            write_f64(&dir.join(format!("item_{i:05}.var.f64")), &it.true_variance)?;
            entries.push(ItemEntry { index: i, stream: it.stream, noise: it.noise.clone(), n_data: it.d_noisy.len() });
        }
        let m = Manifest {
            config: self.config.clone(),
            seed_scheme: "ChaCha8(seed_from_u64(seed)), stream = index + 1; truth then noise".into(),
            items: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut items = Vec::new();
        for e in m.items {
            let i = e.index;
            let stem = dir.join(format!("item_{i:05}"));
            let item = DataItem {
                u_truth: GridFunction::load(&stem.with_extension("u"))?,
                d_noisy: read_f64(&dir.join(format!("item_{i:05}.dn.f64")))?,
                d_clean: read_f64(&dir.join(format!("item_{i:05}.dc.f64")))?,
                true_variance: read_f64(&dir.join(format!("item_{i:05}.var.f64")))?,
                noise: e.noise,
                stream: e.stream,
            };
            if item.d_noisy.len() != e.n_data || item.d_clean.len() != e.n_data {
                return Err(Error::Config(format!("dataset item {i} has inconsistent data length")));
            }
            items.push(item);
        }
        Ok(Dataset { config: m.config, items })
    }
}
