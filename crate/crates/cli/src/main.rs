use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use vinet_cli::*;
use vinet_core::data::{build_dataset, Dataset, DatasetConfig};
use vinet_core::report::{field_csv, write_pgm};
use vinet_core::vinet::{VinetConfig, VinetModel};
use vinet_core::Error;

#[derive(Parser)]
#[command(name = "vinet", about = "Variational Bayesian inversion for linear PDE inverse problems")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    /// JSON config for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// comma-separated inversion grid sizes, e.g. 33,65
    #[arg(long, global = true, value_delimiter = ',')]
    grids: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset (desk presets or a DatasetConfig JSON)
    Datagen {
        #[arg(long, default_value = "elliptic")]
        preset: String,
        #[arg(long)]
        items: Option<usize>,
        /// fixed noise level at the preset maximum (test split)
        #[arg(long)]
        test: bool,
    },
    /// Truncated-SVD inversion, or a level sweep with --sweep
    Tsvd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda_rel: Option<f64>,
        #[arg(long)]
        sweep: bool,
    },
    /// Mean-field variational inference
    Mfvi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        items: Option<usize>,
    },
    /// Recursive linearization (Helmholtz)
    Rlm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        kappas: Option<Vec<f64>>,
        #[arg(long)]
        inner: Option<usize>,
    },
    /// Train VINet; the model is written to <out>/model
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Posterior summaries from a trained model
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Desk benchmark; --assert turns threshold failures into exit code 4
    Bench {
        #[arg(long)]
        assert: bool,
    },
    /// Summarize every run report under --out into CSV tables
    Report,
}

fn config<T: Default + for<'de> serde::Deserialize<'de>>(g: &Global) -> vinet_core::Result<T> {
    match &g.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn grids(g: &Global, ds: &Dataset) -> Vec<usize> {
    g.grids.clone().unwrap_or_else(|| vec![ds.config.forward.inv_grid])
}

fn load_data(p: &Path) -> vinet_core::Result<Dataset> {
    Dataset::load(p).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot load dataset {}: {io}", p.display())),
        e => e,
    })
}

fn run(cli: Cli) -> vinet_core::Result<i32> {
    let g = &cli.global;
    std::fs::create_dir_all(&g.out)?;
    match &cli.cmd {
        Cmd::Datagen { preset, items, test } => {
            let mut cfg: DatasetConfig = match (&g.config, preset.as_str()) {
                (Some(p), _) => read_json(p)?,
                (None, "elliptic") => DatasetConfig::elliptic_desk(20, 0),
                (None, "helmholtz") => DatasetConfig::helmholtz_desk(10, 0),
                (None, other) => return Err(Error::Config(format!("unknown preset {other:?}"))),
            };
            if let Some(n) = items {
                cfg.n_items = *n;
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if *test {
                if let vinet_core::data::NoiseConfig::Multiplicative { a_max, .. } = cfg.noise {
                    cfg.noise = vinet_core::data::NoiseConfig::Multiplicative { a_max, fixed: Some(a_max) };
                }
            }
            let ds = build_dataset(&cfg)?;
            ds.save(&g.out)?;
            println!("wrote {} items to {}", ds.len(), g.out.display());
        }
        Cmd::Tsvd { data, lambda_rel, sweep } => {
            let ds = load_data(data)?;
            let mut cfg: TsvdRun = config(g)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if *sweep {
                let t = tsvd_sweep(&ds, &grids(g, &ds), &cfg)?;
                std::fs::write(g.out.join("tsvd_sweep.csv"), t.to_csv())?;
                for r in &t.reports {
                    std::fs::write(g.out.join(format!("tsvd_n{}_{}.csv", r.grid, r.config_hash)), r.to_csv(false))?;
                }
                print!("{}", t.to_csv());
            } else {
                if let Some(l) = lambda_rel {
                    cfg.lambda_rel = *l;
                }
                for n in grids(g, &ds) {
                    let (r, est) = tsvd_levels(&ds, n, &[cfg.lambda_rel], &cfg)?.remove(0);
                    write_report(&g.out, &r, est.first().and_then(|e| e.as_ref()))?;
                    println!("tsvd n={n}: mean relerr {:.4}, median {:.4}", r.mean_relerr, r.median_relerr);
                }
            }
        }
        Cmd::Mfvi { data, items } => {
            let ds = load_data(data)?;
            let mut cfg: MfviRun = config(g)?;
            cfg.variance_field = true;
            for n in grids(g, &ds) {
                let (r, outs) = mfvi_run(&ds, n, &cfg, items.unwrap_or(ds.len()))?;
                write_report(&g.out, &r, None)?;
                for (i, o) in outs.iter().enumerate() {
                    let Some(o) = o else { continue };
                    let stem = g.out.join(format!("mfvi_n{n}_item{i}"));
                    write_pgm(&stem.with_extension("mean.pgm"), &o.mean)?;
                    std::fs::write(stem.with_extension("mean.csv"), field_csv(&o.mean))?;
                    if let Some(v) = &o.variance {
                        write_pgm(&stem.with_extension("var.pgm"), v)?;
                    }
                    let mut s = String::from("sensor,alpha,beta,noise_variance\n");
                    for k in 0..o.alpha.len() {
                        s.push_str(&format!("{k},{},{},{}\n", o.alpha[k], o.beta[k], o.noise_variance[k]));
                    }
                    std::fs::write(stem.with_extension("sigma.csv"), s)?;
                }
                println!("mfvi n={n}: mean relerr {:.4}, median {:.4}, median {:.3}s/item", r.mean_relerr, r.median_relerr, r.median_seconds);
            }
        }
        Cmd::Rlm { data, kappas, inner } => {
            let ds = load_data(data)?;
            let mut cfg: RlmRun = config(g)?;
            if let Some(k) = kappas {
                cfg.kappas = k.clone();
            }
            if let Some(i) = inner {
                cfg.inner = *i;
            }
            for n in grids(g, &ds) {
                let (r, est) = rlm_run(&ds, n, &cfg)?;
                write_report(&g.out, &r, est.first().and_then(|e| e.as_ref()))?;
                println!("rlm n={n}: mean relerr {:.4}, median {:.4}", r.mean_relerr, r.median_relerr);
            }
        }
        Cmd::Train { data } => {
            let ds = load_data(data)?;
            let mut cfg: VinetConfig = config(g)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let (model, trace) = train_vinet(&ds, &cfg)?;
            model.save(&g.out.join("model"))?;
            write_json(&g.out.join("trace.json"), &trace)?;
            println!(
                "trained: stage-1 {:?} → {:?}, stage-2 {:?} → {:?}",
                trace.stage1.first(),
                trace.stage1.last(),
                trace.stage2.first(),
                trace.stage2.last()
            );
        }
        Cmd::Infer { model, data } => {
            let m = VinetModel::load(model).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot load model {}: {io}", model.display())),
                e => e,
            })?;
            let ds = load_data(data)?;
            for n in grids(g, &ds) {
                let (r, post) = vinet_run(&m, &ds, n)?;
                write_report(&g.out, &r, None)?;
                for (i, p) in post.iter().enumerate() {
                    let Some(p) = p else { continue };
                    let stem = g.out.join(format!("vinet_n{n}_item{i}"));
                    write_pgm(&stem.with_extension("mean.pgm"), &p.mean)?;
                    write_pgm(&stem.with_extension("std.pgm"), &p.pointwise_std)?;
                    std::fs::write(stem.with_extension("mean.csv"), field_csv(&p.mean))?;
                    let mut s = String::from("sensor,alpha,beta,noise_variance\n");
                    for k in 0..p.sigma_alpha.len() {
                        s.push_str(&format!("{k},{},{},{}\n", p.sigma_alpha[k], p.sigma_beta[k], p.noise_variance_estimate[k]));
                    }
                    std::fs::write(stem.with_extension("sigma.csv"), s)?;
                }
                println!("vinet n={n}: mean relerr {:.4}, median {:.4}", r.mean_relerr, r.median_relerr);
            }
        }
        Cmd::Bench { assert } => {
            let mut cfg: BenchConfig = config(g)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(gr) = &g.grids {
                cfg.grids = gr.clone();
            }
            let s = run_bench(&cfg, &g.out)?;
            print!("{}", s.sweep_csv);
            for (name, val, ok) in &s.checks {
                println!("{} {name}: {val}", if *ok { "PASS" } else { "FAIL" });
            }
            if *assert && !s.passed() {
                return Ok(4);
            }
        }
        Cmd::Report => {
            let (err, tim) = summarize(&g.out)?;
            std::fs::write(g.out.join("relerr_table.csv"), &err)?;
            std::fs::write(g.out.join("timing_table.csv"), &tim)?;
            print!("{err}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("vinet") {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or(3, exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
