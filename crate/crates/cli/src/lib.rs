//! Batch pipelines behind the `vinet` binary: per-method runs over a
//! dataset, sweeps, the desk benchmark, and the report artifacts they write.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use vinet_core::bayes::{HyperpriorConfig, ScalarOrVec};
use vinet_core::classical::{normal_eig, rlm_invert, tsvd_invert, EigPairs, RlmConfig};
use vinet_core::data::{DataItem, Dataset, DatasetConfig, GrfMean, NoiseConfig, TruthConfig};
use vinet_core::forward::{ForwardConfig, HelmholtzForward, LinearForward, ModelKind};
use vinet_core::grid::rescale;
use vinet_core::mfvi::{posterior_diag_variance, run_mfvi, MfviConfig};
use vinet_core::prior::{Covariance, GaussianMeasure, SpectralCovariance};
use vinet_core::report::{config_hash, median, relative_error, table_csv, write_pgm, ItemResult, RunReport};
use vinet_core::vinet::{infer, train, PosteriorSummary, TrainItem, TrainTrace, VinetConfig, VinetModel};
use vinet_core::{Error, Grid, GridFunction, Result};

/// Exit codes of the binary.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) | Error::GridMismatch(_) | Error::Shape { .. } => 2,
        _ => 3,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TsvdRun {
    /// λ_m / λ₁ for single runs
    pub lambda_rel: f64,
    /// sweep levels, multiplied by `scale`
    pub levels: Vec<f64>,
    pub scale: f64,
    /// retained eigenpairs; defaults to min(N_d, N − oversample)
    pub rank: Option<usize>,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for TsvdRun {
    fn default() -> Self {
        TsvdRun { lambda_rel: 0.2, levels: vec![2.0, 1.5, 1.0, 0.5, 0.1], scale: 0.2, rank: None, oversample: 10, power_iters: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MfviRun {
    #[serde(flatten)]
    pub solver: MfviConfig,
    /// Isotropic prior (c + δλ)⁻²; the prior mean comes from the dataset's truth model.
    pub c: f64,
    pub delta: f64,
    pub hyper: HyperpriorConfig,
    pub variance_field: bool,
}

impl Default for MfviRun {
    fn default() -> Self {
        MfviRun {
            solver: MfviConfig::default(),
            c: 2.0,
            delta: 6.0,
            hyper: HyperpriorConfig { alpha0: ScalarOrVec::Scalar(1.5), beta0: ScalarOrVec::Scalar(1e-3) },
            variance_field: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RlmRun {
    /// empty → the dataset's full schedule
    pub kappas: Vec<f64>,
    pub inner: usize,
    pub step_fraction: f64,
    pub power_iters: usize,
}

impl Default for RlmRun {
    fn default() -> Self {
        RlmRun { kappas: vec![], inner: 20, step_fraction: 0.9, power_iters: 30 }
    }
}

/// Everything the desk benchmark needs, with the defaults of the elliptic desk setup.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ModelKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub grids: Vec<usize>,
    /// training seeds for VINet (each trains a separate model)
    pub vinet_seeds: Vec<u64>,
    pub tsvd: TsvdRun,
    pub mfvi: MfviRun,
    pub rlm: RlmRun,
    pub vinet: VinetConfig,
    /// MFVI runs on this many test items (it dominates the runtime)
    pub mfvi_items: usize,
    /// grid used for the MFVI/VINet timing comparison
    pub timing_grid: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelKind::Elliptic,
            n_train: 200,
            n_test: 20,
            seed: 1,
            grids: vec![33, 65],
            vinet_seeds: vec![0],
            tsvd: TsvdRun::default(),
            mfvi: MfviRun::default(),
            rlm: RlmRun::default(),
            vinet: VinetConfig::default(),
            mfvi_items: 5,
            timing_grid: 65,
        }
    }
}

impl BenchConfig {
    /// The Helmholtz desk setup: RLM baseline, one inversion grid, no MFVI.
    pub fn helmholtz_default() -> Self {
        BenchConfig { model: ModelKind::Helmholtz, grids: vec![33], mfvi_items: 0, ..Default::default() }
    }

    /// Train (random noise level) and test (fixed level) dataset configs.
    pub fn datasets(&self) -> (DatasetConfig, DatasetConfig) {
        match self.model {
            ModelKind::Elliptic => {
                let train = DatasetConfig::elliptic_desk(self.n_train, self.seed);
                let mut test = DatasetConfig::elliptic_desk(self.n_test, self.seed.wrapping_add(1_000_003));
                if let NoiseConfig::Multiplicative { a_max, .. } = test.noise {
                    test.noise = NoiseConfig::Multiplicative { a_max, fixed: Some(a_max) };
                }
                (train, test)
            }
            ModelKind::Helmholtz => (
                DatasetConfig::helmholtz_desk(self.n_train, self.seed),
                DatasetConfig::helmholtz_desk(self.n_test, self.seed.wrapping_add(1_000_003)),
            ),
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Prior mean used by classical Bayesian runs: the truth model's mean, or zero.
pub fn prior_mean(cfg: &DatasetConfig, grid: Grid) -> GridFunction {
    match &cfg.truth {
        TruthConfig::Grf { mean, .. } => mean.on_grid(grid),
        TruthConfig::Ring { .. } => GrfMean::Constant { value: 0.0 }.on_grid(grid),
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

/// Per-item results in item order; more than 10% failures aborts the run.
fn collect_items<T: Send>(
    items: &[DataItem],
    parallel: bool,
    run: impl Fn(&DataItem) -> Result<(GridFunction, T)> + Sync,
) -> Result<(Vec<ItemResult>, Vec<Option<T>>)> {
    let one = |(i, it): (usize, &DataItem)| {
        let (r, secs) = timed(|| run(it));
        match r.and_then(|(u, extra)| Ok((relative_error(&u, &it.u_truth)?, extra))) {
            Ok((e, extra)) => (ItemResult { item: i, relerr: Some(e), seconds: secs, error: None }, Some(extra)),
            Err(e) => (ItemResult { item: i, relerr: None, seconds: secs, error: Some(e.to_string()) }, None),
        }
    };
    let out: Vec<(ItemResult, Option<T>)> =
        if parallel { items.par_iter().enumerate().map(one).collect() } else { items.iter().enumerate().map(one).collect() };
    let failures = out.iter().filter(|(r, _)| r.relerr.is_none()).count();
    if failures * 10 > items.len() {
        let first = out.iter().find_map(|(r, _)| r.error.clone()).unwrap_or_default();
        return Err(Error::solver(format!("{failures} of {} items failed (first: {first})", items.len()), f64::NAN));
    }
    Ok(out.into_iter().unzip())
}

pub fn tsvd_eig(fwd: &ForwardConfig, n: usize, cfg: &TsvdRun) -> Result<(Box<dyn LinearForward>, EigPairs)> {
    let h = fwd.build(n)?;
    let nd = h.n_data();
    let rank = cfg.rank.unwrap_or_else(|| nd.min(h.grid().len().saturating_sub(cfg.oversample)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eig = normal_eig(h.as_ref(), rank, cfg.oversample, cfg.power_iters, &mut rng)?;
    Ok((h, eig))
}

/// TSVD on one grid at each of the given λ_m/λ₁; one report per level.
pub fn tsvd_levels(ds: &Dataset, n: usize, rels: &[f64], cfg: &TsvdRun) -> Result<Vec<(RunReport, Vec<Option<GridFunction>>)>> {
    let (h, eig) = tsvd_eig(&ds.config.forward, n, cfg)?;
    let lam1 = eig.values.first().copied().unwrap_or(0.0);
    rels.iter()
        .map(|&rel| {
            let mut c = cfg.clone();
            c.lambda_rel = rel;
            let hash = config_hash(&(&ds.config, "tsvd", &c))?;
            let (items, est) = collect_items(&ds.items, true, |it| {
                let u = tsvd_invert(&it.d_noisy, &eig, h.as_ref(), rel * lam1)?;
                Ok((u.clone(), u))
            })?;
            Ok((RunReport::new("tsvd", n, hash, items), est))
        })
        .collect()
}

/// Mean relative error for every (level, grid); rows are levels.
pub struct SweepTable {
    pub levels: Vec<f64>,
    pub grids: Vec<usize>,
    pub mean_relerr: Vec<Vec<f64>>,
    pub reports: Vec<RunReport>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let cols: Vec<String> = self.grids.iter().map(|n| format!("n{n}")).collect();
        let rows: Vec<(String, Vec<f64>)> = self.levels.iter().zip(&self.mean_relerr).map(|(l, r)| (format!("{l}"), r.clone())).collect();
        table_csv("level", &cols, &rows)
    }

    /// Index of the best level per grid.
    pub fn best(&self) -> Vec<usize> {
        (0..self.grids.len())
            .map(|g| (0..self.levels.len()).min_by(|&a, &b| self.mean_relerr[a][g].total_cmp(&self.mean_relerr[b][g])).unwrap_or(0))
            .collect()
    }
}

pub fn tsvd_sweep(ds: &Dataset, grids: &[usize], cfg: &TsvdRun) -> Result<SweepTable> {
    let rels: Vec<f64> = cfg.levels.iter().map(|l| l * cfg.scale).collect();
    let mut table = vec![vec![0.0; grids.len()]; rels.len()];
    let mut reports = Vec::new();
    for (g, &n) in grids.iter().enumerate() {
        for (l, (r, _)) in tsvd_levels(ds, n, &rels, cfg)?.into_iter().enumerate() {
            table[l][g] = r.mean_relerr;
            reports.push(r);
        }
    }
    Ok(SweepTable { levels: cfg.levels.clone(), grids: grids.to_vec(), mean_relerr: table, reports })
}

pub struct MfviOutput {
    pub mean: GridFunction,
    pub variance: Option<GridFunction>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub noise_variance: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn mfvi_item(h: &dyn LinearForward, prior: &GaussianMeasure, d: &[f64], cfg: &MfviRun) -> Result<MfviOutput> {
    let ig0 = cfg.hyper.build(h.n_data())?;
    let r = run_mfvi(h, d, prior, &ig0, &cfg.solver)?;
    let variance = if cfg.variance_field { Some(posterior_diag_variance(&r.posterior, h)?) } else { None };
    let noise_variance = r.ig.alpha.iter().zip(&r.ig.beta).map(|(a, b)| b / (a - 1.0)).collect();
    Ok(MfviOutput {
        mean: r.posterior.mean.clone(),
        variance,
        alpha: r.ig.alpha,
        beta: r.ig.beta,
        noise_variance,
        iterations: r.trace.len(),
        converged: r.converged,
    })
}

pub fn mfvi_prior(ds_cfg: &DatasetConfig, n: usize, cfg: &MfviRun) -> Result<GaussianMeasure> {
    let grid = Grid::unit(n);
    GaussianMeasure::new(prior_mean(ds_cfg, grid), Covariance::Spectral(SpectralCovariance::new(grid, cfg.c, cfg.delta)?))
}

/// MFVI over the first `limit` items, run sequentially so the per-item times are clean.
pub fn mfvi_run(ds: &Dataset, n: usize, cfg: &MfviRun, limit: usize) -> Result<(RunReport, Vec<Option<MfviOutput>>)> {
    let h = ds.config.forward.build(n)?;
    let prior = mfvi_prior(&ds.config, n, cfg)?;
    let items = &ds.items[..limit.min(ds.items.len())];
    let (res, out) = collect_items(items, false, |it| {
        let o = mfvi_item(h.as_ref(), &prior, &it.d_noisy, cfg)?;
        Ok((o.mean.clone(), o))
    })?;
    Ok((RunReport::new("mfvi", n, config_hash(&(&ds.config, "mfvi", cfg))?, res), out))
}

pub fn helmholtz_on(fwd: &ForwardConfig, n: usize) -> Result<HelmholtzForward> {
    if fwd.model != ModelKind::Helmholtz {
        return Err(Error::Config("RLM needs a Helmholtz dataset".into()));
    }
    HelmholtzForward::new(Grid::unit(n), fwd.kappas.clone(), fwd.pml, fwd.sensors.build())
}

pub fn rlm_run(ds: &Dataset, n: usize, cfg: &RlmRun) -> Result<(RunReport, Vec<Option<GridFunction>>)> {
    let h = helmholtz_on(&ds.config.forward, n)?;
    let rc = RlmConfig {
        kappas: if cfg.kappas.is_empty() { ds.config.forward.kappas.clone() } else { cfg.kappas.clone() },
        inner: cfg.inner,
        step_fraction: cfg.step_fraction,
        power_iters: cfg.power_iters,
    };
    rc.validate()?;
    // warm the factorization cache once, outside the timed region
    for f in 0..h.kappas.len() {
        h.system(h.kappas[f])?;
    }
    let (res, out) = collect_items(&ds.items, true, |it| {
        let r = rlm_invert(&it.d_noisy, &h, &rc)?;
        if r.diverged {
            return Err(Error::solver("RLM diverged", f64::NAN));
        }
        Ok((r.u.clone(), r.u))
    })?;
    Ok((RunReport::new("rlm", n, config_hash(&(&ds.config, "rlm", &rc.kappas, cfg))?, res), out))
}

/// Training items on the VINet training grid; the prior mean is the truth.
pub fn train_items(ds: &Dataset, train_grid: usize) -> Vec<TrainItem> {
    let g = Grid::unit(train_grid);
    ds.items
        .iter()
        .map(|it| TrainItem { d: it.d_noisy.clone(), d_clean: it.d_clean.clone(), u0: rescale(&it.u_truth, &g) })
        .collect()
}

pub fn train_vinet(ds: &Dataset, cfg: &VinetConfig) -> Result<(VinetModel, TrainTrace)> {
    let mut model = VinetModel::new(cfg, &ds.config.forward)?;
    let h = ds.config.forward.build(cfg.train_grid)?;
    let trace = train(&mut model, &train_items(ds, cfg.train_grid), h.as_ref())?;
    Ok((model, trace))
}

pub fn vinet_run(model: &VinetModel, ds: &Dataset, n: usize) -> Result<(RunReport, Vec<Option<PosteriorSummary>>)> {
    let grid = Grid::unit(n);
    let (res, out) = collect_items(&ds.items, true, |it| {
        let p = infer(model, &it.d_noisy, grid)?;
        Ok((p.mean.clone(), p))
    })?;
    let hash = config_hash(&(&ds.config, "vinet", &model.config))?;
    Ok((RunReport::new("vinet", n, hash, res), out))
}

/// Median over (item, sensor) of the squared error of a noise-variance estimate.
pub fn noise_variance_mse(estimates: &[&[f64]], items: &[&DataItem]) -> f64 {
    let e: Vec<f64> = estimates
        .iter()
        .zip(items)
        .flat_map(|(est, it)| est.iter().zip(&it.true_variance).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>())
        .collect();
    median(&e)
}

/// Relative L2 distance between two fields after rescaling `b` onto `a`'s grid.
pub fn field_distance(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    relative_error(&rescale(b, &a.grid), a)
}

/// CSV + JSON for a report, PGM of the first estimate. The main CSV carries no
/// timings so reruns are bitwise identical; those go to `_timing.csv`.
pub fn write_report(dir: &Path, r: &RunReport, first: Option<&GridFunction>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_n{}", r.method, r.grid);
    std::fs::write(dir.join(format!("{stem}.csv")), r.to_csv(false))?;
    std::fs::write(dir.join(format!("{stem}_timing.csv")), r.to_csv(true))?;
    write_json(&dir.join(format!("{stem}.json")), r)?;
    if let Some(u) = first {
        write_pgm(&dir.join(format!("{stem}_item0_mean.pgm")), u)?;
    }
    Ok(())
}

/// Outcome of the desk benchmark; each check is (name, measured, passed).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BenchSummary {
    pub sweep_csv: String,
    pub tsvd_best_level: Vec<f64>,
    pub checks: Vec<(String, String, bool)>,
    pub reports: Vec<RunReport>,
    pub traces: Vec<TrainTrace>,
}

impl BenchSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.2)
    }
}

/// Relative drop from the first to the last epoch.
pub fn loss_drop(trace: &[f64]) -> f64 {
    match (trace.first(), trace.last()) {
        (Some(a), Some(b)) if trace.len() > 1 => (a - b) / a.abs(),
        _ => 0.0,
    }
}

/// Desk benchmark: TSVD sweep, MFVI, VINet (one model per seed) and RLM for
/// Helmholtz; writes tables, images and a JSON summary into `out`.
pub fn run_bench(cfg: &BenchConfig, out: &Path) -> Result<BenchSummary> {
    std::fs::create_dir_all(out)?;
    let (train_cfg, test_cfg) = cfg.datasets();
    let train_ds = vinet_core::data::build_dataset(&train_cfg)?;
    let test_ds = vinet_core::data::build_dataset(&test_cfg)?;
    let mut s = BenchSummary::default();
    let g0 = cfg.grids.first().copied().unwrap_or(33);

    // classical baseline
    let baseline = match cfg.model {
        ModelKind::Elliptic => {
            let sweep = tsvd_sweep(&test_ds, &cfg.grids, &cfg.tsvd)?;
            std::fs::write(out.join("tsvd_sweep.csv"), sweep.to_csv())?;
            s.sweep_csv = sweep.to_csv();
            s.tsvd_best_level = sweep.best().iter().map(|&i| sweep.levels[i]).collect();
            let best = sweep.best()[0];
            let r = sweep.reports[best].clone();
            s.reports.extend(sweep.reports);
            r
        }
        ModelKind::Helmholtz => {
            let (r, est) = rlm_run(&test_ds, g0, &cfg.rlm)?;
            write_report(out, &r, est.first().and_then(|e| e.as_ref()))?;
            s.reports.push(r.clone());
            r
        }
    };
    write_report(out, &baseline, None)?;

    let mut drops = Vec::new();
    let mut vinet_med = Vec::new();
    let mut cross = Vec::new();
    let mut snet_mse = Vec::new();
    let mut model0 = None;
    for &seed in &cfg.vinet_seeds {
        let mut vc = cfg.vinet.clone();
        vc.seed = seed;
        let (model, trace) = train_vinet(&train_ds, &vc)?;
        drops.push(loss_drop(&trace.stage2));
        let (r, post) = vinet_run(&model, &test_ds, g0)?;
        vinet_med.push(r.median_relerr);
        if cfg.grids.len() > 1 {
            let (_, post2) = vinet_run(&model, &test_ds, *cfg.grids.last().unwrap())?;
            let d: Vec<f64> = post
                .iter()
                .zip(&post2)
                .filter_map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => field_distance(&b.mean, &a.mean).ok(),
                    _ => None,
                })
                .collect();
            cross.push(median(&d));
        }
        let (est, its): (Vec<&[f64]>, Vec<&DataItem>) = post
            .iter()
            .zip(&test_ds.items)
            .take(cfg.mfvi_items)
            .filter_map(|(p, it)| p.as_ref().map(|p| (p.noise_variance_estimate.as_slice(), it)))
            .unzip();
        snet_mse.push(noise_variance_mse(&est, &its));
        let dir = out.join(format!("vinet_seed{seed}"));
        write_report(&dir, &r, post.first().and_then(|p| p.as_ref()).map(|p| &p.mean))?;
        if let Some(Some(p)) = post.first() {
            write_pgm(&dir.join("item0_std.pgm"), &p.pointwise_std)?;
            write_pgm(&dir.join("item0_a.pgm"), &p.a)?;
        }
        std::fs::write(dir.join("trace.json"), serde_json::to_string_pretty(&trace)?)?;
        s.reports.push(r);
        s.traces.push(trace);
        if model0.is_none() {
            model.save(&dir.join("model"))?;
            model0 = Some(model);
        }
    }
    let drop = median(&drops);
    s.checks.push(("stage-2 loss drop (median)".into(), format!("{drop:.3}"), drop >= 0.3));
    let v = median(&vinet_med);
    s.checks.push((
        format!("vinet vs {} median relerr", baseline.method),
        format!("{v:.4} vs {:.4}", baseline.median_relerr),
        v <= baseline.median_relerr,
    ));
    if !cross.is_empty() {
        let c = median(&cross);
        s.checks.push(("cross-grid mean difference".into(), format!("{c:.4}"), c < 0.1));
    }

    if cfg.model == ModelKind::Elliptic && cfg.mfvi_items > 0 {
        let (r, outs) = mfvi_run(&test_ds, g0, &cfg.mfvi, cfg.mfvi_items)?;
        write_report(out, &r, outs.first().and_then(|o| o.as_ref()).map(|o| &o.mean))?;
        let (est, its): (Vec<&[f64]>, Vec<&DataItem>) = outs
            .iter()
            .zip(&test_ds.items)
            .filter_map(|(o, it)| o.as_ref().map(|o| (o.noise_variance.as_slice(), it)))
            .unzip();
        let m = noise_variance_mse(&est, &its);
        let sn = median(&snet_mse);
        s.checks.push(("noise variance MSE snet vs mfvi".into(), format!("{sn:.3e} vs {m:.3e}"), sn < m));
        s.reports.push(r);
        if let Some(model) = &model0 {
            let (tm, tv) = timing(model, &test_ds, cfg)?;
            std::fs::write(out.join("timing.csv"), format!("method,grid,median_seconds\nmfvi,{0},{tm:.6}\nvinet,{0},{tv:.6}\n", cfg.timing_grid))?;
            s.checks.push(("speedup vinet vs mfvi".into(), format!("{:.1}x", tm / tv), tm >= 10.0 * tv));
        }
    }
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(s)
}

/// Median per-item seconds of MFVI and of VINet inference on the timing grid.
pub fn timing(model: &VinetModel, ds: &Dataset, cfg: &BenchConfig) -> Result<(f64, f64)> {
    let n = cfg.timing_grid;
    let items = &ds.items[..cfg.mfvi_items.min(ds.items.len()).max(1)];
    let h = ds.config.forward.build(n)?;
    let prior = mfvi_prior(&ds.config, n, &cfg.mfvi)?;
    let mut tm = Vec::new();
    let mut tv = Vec::new();
    for it in items {
        let (r, t) = timed(|| mfvi_item(h.as_ref(), &prior, &it.d_noisy, &cfg.mfvi));
        r?;
        tm.push(t);
        let (r, t) = timed(|| infer(model, &it.d_noisy, Grid::unit(n)));
        r?;
        tv.push(t);
    }
    Ok((median(&tm), median(&tv)))
}

/// Collect every `*.json` run report under `dir` into method × grid tables.
pub fn summarize(dir: &Path) -> Result<(String, String)> {
    let mut reports: Vec<RunReport> = Vec::new();
    for e in walk(dir)? {
        if e.extension().is_some_and(|x| x == "json") {
            if let Ok(r) = read_json::<RunReport>(&e) {
                reports.push(r);
            }
        }
    }
    reports.sort_by(|a, b| (a.method.as_str(), a.grid, a.config_hash.as_str()).cmp(&(b.method.as_str(), b.grid, b.config_hash.as_str())));
    let mut err = String::from("method,grid,config_hash,items,failures,mean_relerr,median_relerr\n");
    let mut tim = String::from("method,grid,config_hash,median_seconds\n");
    for r in &reports {
        err.push_str(&format!(
            "{},{},{},{},{},{:.6e},{:.6e}\n",
            r.method,
            r.grid,
            r.config_hash,
            r.items.len(),
            r.failures(),
            r.mean_relerr,
            r.median_relerr
        ));
        tim.push_str(&format!("{},{},{},{:.6}\n", r.method, r.grid, r.config_hash, r.median_seconds));
    }
    Ok((err, tim))
}

fn walk(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
