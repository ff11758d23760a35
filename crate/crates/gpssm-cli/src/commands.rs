//! Subcommand implementations. Each writes plot-ready CSV/JSON files into
//! the output directory and reports what it wrote on stdout.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use gpssm::elbo::{elbo, ElboEstimate};
use gpssm::oracle::{bound_check, fitc_nonmarkov_check, NonMarkovSetup};
use gpssm::optim::fit;
use gpssm::report::{
    grid_posterior, loglog_slope, metrics_vs_kink, pairwise_marginals, run_benchmark, BenchRow,
    Metrics,
};
use gpssm::ssm::{make_kink_dataset, Dataset};
use gpssm::{Error, Result};

use crate::config::RunConfig;

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    ensure_out(&cfg.out_dir)?;
    let seed = cfg.dataset.seed.unwrap_or(cfg.seed);
    let ds = make_kink_dataset(seed);
    let csv = cfg.out_dir.join("data.csv");
    let meta = cfg.out_dir.join("data.meta.json");
    ds.write_csv(&csv)?;
    ds.write_meta(&meta)?;
    println!("wrote {} and {}", csv.display(), meta.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset.path {
        Some(path) => {
            let meta = sidecar_path(path);
            Dataset::read_csv(path, meta.as_deref())
        }
        None => Ok(make_kink_dataset(cfg.dataset.seed.unwrap_or(cfg.seed))),
    }
}

fn sidecar_path(csv: &Path) -> Option<PathBuf> {
    let stem = csv.file_stem()?.to_str()?;
    let candidate = csv.with_file_name(format!("{stem}.meta.json"));
    candidate.exists().then_some(candidate)
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: &'a RunConfig,
    final_elbo: ElboEstimate,
    metrics: Metrics,
    best_iter: usize,
    trace_path: String,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    ensure_out(&cfg.out_dir)?;
    let ds = load_dataset(cfg)?;
    let fit_cfg = cfg.optimizer.to_fit_config(cfg.seed);
    let result = fit(&ds, cfg.variant, cfg.m, &fit_cfg)?;
    let model = result.model()?;

    let grid = grid_posterior(&model.gp, cfg.grid.lo, cfg.grid.hi, cfg.grid.n)?;
    let grid_path = cfg.out_dir.join("grid.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&grid_path)?);
        writeln!(out, "x,mean,std")?;
        for p in &grid {
            writeln!(out, "{},{},{}", p.x, p.mean, p.std)?;
        }
    }

    let pairs = pairwise_marginals(cfg.variant, &model, cfg.pair_samples, cfg.seed ^ 0xA5A5)?;
    let pairs_path = cfg.out_dir.join("pairs.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&pairs_path)?);
        writeln!(out, "t,mean_t,mean_t1,c00,c01,c11")?;
        for p in &pairs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                p.t, p.mean_t, p.mean_t1, p.c00, p.c01, p.c11
            )?;
        }
    }

    let trace_path = cfg.out_dir.join("trace.csv");
    result.write_trace_csv(&trace_path)?;

    // Data-covered region: the observed range (identity-like emission).
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..ds.t_len() {
        lo = lo.min(ds.y[(t, 0)]);
        hi = hi.max(ds.y[(t, 0)]);
    }
    let metrics = metrics_vs_kink(&grid, lo, hi);

    let final_elbo = elbo(
        cfg.variant,
        &model.chain,
        &model.gp,
        &model.em,
        &model.q_noise,
        &ds.y,
        cfg.report_samples,
        Some(&model.scheme),
        None,
        cfg.seed ^ 0x5A5A,
        u64::MAX,
    )?;

    let report = FitReport {
        config: cfg,
        final_elbo,
        metrics,
        best_iter: result.best_iter,
        trace_path: "trace.csv".into(),
    };
    let report_path = cfg.out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "wrote {}, {}, {} and {}",
        grid_path.display(),
        pairs_path.display(),
        trace_path.display(),
        report_path.display()
    );
    Ok(())
}

pub fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    ensure_out(&cfg.out_dir)?;
    let b = &cfg.benchmark;
    let rows = run_benchmark(
        &b.variants,
        &b.t_values,
        b.reps,
        b.m,
        b.tau,
        cfg.seed,
    )?;
    let bench_path = cfg.out_dir.join("bench.csv");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&bench_path)?);
        writeln!(out, "variant,T,tau,median_seconds")?;
        for r in &rows {
            writeln!(out, "{},{},{},{}", r.variant, r.t_len, r.tau, r.median_seconds)?;
        }
    }

    let mut slopes = serde_json::Map::new();
    let mut groups: Vec<(String, Vec<&BenchRow>)> = Vec::new();
    for r in &rows {
        let key = if r.tau > 0 {
            format!("{}_tau{}", r.variant, r.tau)
        } else {
            r.variant.clone()
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    for (key, group) in &groups {
        if group.len() >= 2 {
            slopes.insert(key.clone(), serde_json::json!(loglog_slope(group)));
        }
    }
    let slopes_path = cfg.out_dir.join("bench_slopes.json");
    std::fs::write(
        &slopes_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(slopes))?,
    )?;
    println!("wrote {} and {}", bench_path.display(), slopes_path.display());
    Ok(())
}

#[derive(Serialize)]
struct NonMarkovSummary {
    point_mass_deviation: f64,
    asymmetric_deviation: f64,
    decades: Vec<(f64, f64)>,
    monotone: bool,
}

/// Runs both oracles; returns `true` when any check is violated.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<bool> {
    ensure_out(&cfg.out_dir)?;
    let bound = bound_check(cfg.oracle.n_configs, cfg.oracle.samples, cfg.seed)?;
    let bound_path = cfg.out_dir.join("oracle_bound.json");
    std::fs::write(&bound_path, serde_json::to_string_pretty(&bound)?)?;

    let point_mass = fitc_nonmarkov_check(&NonMarkovSetup {
        var_u: 0.0,
        ..NonMarkovSetup::default()
    })?;
    let default_run = fitc_nonmarkov_check(&NonMarkovSetup::default())?;
    let mut decades = Vec::new();
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for var_u in [1.0, 0.1, 0.01, 0.001, 0.0001] {
        let dev = fitc_nonmarkov_check(&NonMarkovSetup {
            var_u,
            ..NonMarkovSetup::default()
        })?
        .max_deviation;
        monotone &= dev < prev;
        prev = dev;
        decades.push((var_u, dev));
    }
    let summary = NonMarkovSummary {
        point_mass_deviation: point_mass.max_deviation,
        asymmetric_deviation: default_run.max_deviation,
        decades,
        monotone,
    };
    let nm_path = cfg.out_dir.join("oracle_nonmarkov.json");
    std::fs::write(&nm_path, serde_json::to_string_pretty(&summary)?)?;
    let detail_path = cfg.out_dir.join("oracle_nonmarkov_detail.json");
    std::fs::write(&detail_path, serde_json::to_string_pretty(&default_run)?)?;

    let violated = bound.violations > 0
        || summary.point_mass_deviation > 1e-9
        || summary.asymmetric_deviation < 1e-3
        || !summary.monotone;
    println!(
        "wrote {}, {} and {} ({} bound violations)",
        bound_path.display(),
        nm_path.display(),
        detail_path.display(),
        bound.violations
    );
    Ok(violated)
}

pub fn classify_exit(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::Json(_) | Error::Io(_) => 2,
        _ => 3,
    }
}
