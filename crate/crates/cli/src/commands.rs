use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use dptails::data::{load_csv, write_scores_csv};
use dptails::oracle::{
    battery, grid_search_optimum, library_closed_form, shifted_closed_form, verify_barycenter_identity,
    verify_closed_form_with, BarycenterReport, ClosedForm, ClosedFormReport, UpperBranch,
};
use dptails::p_optimizer::fit_optimized;
use dptails::seed::{stream, Purpose};
use dptails::{
    fit, optimize_p, Dataset, DpTailsParams, Error, FittedTransform, GroupId, MetricsReport, Regime,
    Variant,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_alpha_grid, parse_schema};
use crate::pipeline::{prepare, repetition_seed, run_cell, BaseLearner, CellConfig, Source};
use crate::{
    BaseArg, CalibrateArgs, ConfigError, EvaluateArgs, Format, InputArgs, OptimizeArgs, SimulateArgs, SweepArgs,
    SyntheticArgs, TransformArgs, VerificationFailed, VerifyArgs,
};

fn config_err(e: anyhow::Error) -> anyhow::Error {
    ConfigError(format!("{e:#}")).into()
}

fn load(input: &InputArgs) -> anyhow::Result<Dataset> {
    let schema = parse_schema(&input.schema).map_err(config_err)?;
    Ok(load_csv(&input.input, &schema)?)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_transform(path: &Path) -> anyhow::Result<FittedTransform> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(FittedTransform::from_json(&text)?)
}

fn warn_xi(xi: f64, n: usize) {
    let bound = 1.0 / (n as f64).sqrt();
    if xi > bound {
        eprintln!("warning: xi = {xi} exceeds N^(-1/2) = {bound:.3e}; the risk guarantee asks for xi of order N^(-1/2) or smaller");
    }
}

fn regime_line(fitted: &FittedTransform) -> String {
    let params = fitted.params();
    let regime = match fitted.regime() {
        Regime::Attained => "attained",
        Regime::NoMinimum => "no minimum (the xi slack is active)",
    };
    format!(
        "regime: {regime}; alpha = {}, sum_s p_s Q_s(p) = {} at p = {}",
        params.alpha,
        fitted.average_quantile(params.p),
        params.p
    )
}

pub fn calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let ds = load(&args.input)?;
    let scores = ds.grouped_feature(0)?;
    let f = &args.fairness;
    warn_xi(f.xi, scores.total());
    let cfg = CellConfig {
        alpha: f.alpha,
        p: f.p,
        xi: f.xi,
        sigma: f.sigma,
        method: f.method.into(),
    };
    let seed = args.seed.seed;
    let fitted = match f.p {
        Some(p) => fit(&scores, &cfg.params(p), seed)?,
        None => {
            let (fitted, report) = fit_optimized(&scores, &cfg.params(0.0), cfg.method, seed)?;
            eprintln!(
                "optimized p = {} (objective {}, {} evaluations{})",
                report.argmin_p,
                report.argmin_value,
                report.evaluation_count,
                if report.plateau { ", plateau" } else { "" }
            );
            fitted
        }
    };
    eprintln!("{}", regime_line(&fitted));
    write_text(Some(&args.out), &fitted.to_json()?)
}

pub fn transform(args: TransformArgs) -> anyhow::Result<()> {
    let fitted = read_transform(&args.transform)?;
    let ds = load(&args.input)?;
    let with_target = ds.has_targets();
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    if with_target {
        w.write_record(["group", "fair_score", "target"])?;
    } else {
        w.write_record(["group", "fair_score"])?;
    }
    let mut counters: HashMap<GroupId, usize> = HashMap::new();
    for (i, row) in ds.rows().iter().enumerate() {
        if !fitted.groups().contains_key(&row.group) {
            return Err(Error::MalformedRow {
                row: i + 1,
                message: format!("unknown group `{}`", row.group),
            }
            .into());
        }
        let idx = counters.entry(row.group.clone()).or_default();
        let v = fitted.transform_element(row.features[0], &row.group, *idx, args.seed.seed)?;
        *idx += 1;
        let mut rec = vec![row.group.to_string(), v.to_string()];
        if let (true, Some(t)) = (with_target, row.target) {
            rec.push(t.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_reports(reports: &[MetricsReport], format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    match format {
        Format::Json => {
            let text = if reports.len() == 1 {
                reports[0].to_json()?
            } else {
                serde_json::to_string_pretty(reports)?
            };
            write_text(out, &text)
        }
        Format::Csv => {
            let mut w = output(out)?;
            MetricsReport::write_csv(reports, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

pub fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let params = match &args.transform {
        Some(path) => *read_transform(path)?.params(),
        None => {
            let alpha = args.alpha.context("--alpha is required without --transform").map_err(config_err)?;
            let p = args.p.context("--p is required without --transform").map_err(config_err)?;
            DpTailsParams::new(alpha, p)
        }
    };
    let ds = load(&args.input)?;
    let predictions = ds.grouped_feature(0)?;
    let targets = ds.grouped_targets()?;
    let report = MetricsReport::compute(&predictions, targets.as_ref(), &params, args.seed.seed)?;
    write_reports(&[report], args.format, args.out.as_deref())
}

pub fn optimize(args: OptimizeArgs) -> anyhow::Result<()> {
    let ds = load(&args.input)?;
    let scores = ds.grouped_feature(0)?;
    let p = if args.alpha == f64::INFINITY { 1.0 } else { 0.0 };
    let params = DpTailsParams::new(args.alpha, p).with_sigma(args.sigma);
    let report = optimize_p(&scores, &params, args.method.into(), args.seed.seed)?;
    write_text(args.out.as_deref(), &report.to_json()?)
}

fn synthetic_source(s: &SyntheticArgs) -> Source {
    Source::Synthetic {
        train: s.n_train,
        calibration: s.n,
        test: s.m,
        base: match s.base {
            BaseArg::Ols => BaseLearner::Ols,
            BaseArg::Oracle => BaseLearner::TrueRegression,
        },
    }
}

fn thread_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("cannot start worker threads")
}

#[derive(Debug, Serialize)]
struct SweepRow {
    #[serde(with = "dptails::serde_ext::extended_f64")]
    alpha: f64,
    rep: usize,
    seed: u64,
    p: Option<f64>,
    mse: Option<f64>,
    ks: Option<f64>,
    tail_unfairness: Option<f64>,
    threshold_gap_max: Option<f64>,
    error: Option<String>,
}

impl SweepRow {
    fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.alpha.to_string(),
            self.rep.to_string(),
            self.seed.to_string(),
            opt(self.p),
            opt(self.mse),
            opt(self.ks),
            opt(self.tail_unfairness),
            opt(self.threshold_gap_max),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

const SWEEP_HEADER: [&str; 9] = ["alpha", "rep", "seed", "p", "mse", "ks", "tail_unfairness", "threshold_gap_max", "error"];

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let alphas = parse_alpha_grid(&args.alphas).map_err(config_err)?;
    let source = match &args.input {
        Some(path) => {
            let schema = parse_schema(&args.schema).map_err(config_err)?;
            Source::Dataset(load_csv(path, &schema)?)
        }
        None => synthetic_source(&args.synthetic),
    };
    let seeds: Vec<u64> = (0..args.reps as usize).map(|r| repetition_seed(args.seed.seed, r)).collect();
    let pool = thread_pool(args.jobs)?;

    let (rows, errors) = pool.install(|| {
        let mut errors = Vec::new();
        let mut prepared = Vec::with_capacity(seeds.len());
        let results: Vec<_> = seeds.par_iter().map(|&s| prepare(&source, s)).collect();
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(p) => prepared.push(Ok(p)),
                Err(e) => {
                    eprintln!("rep = {r}: data preparation failed: {e}");
                    prepared.push(Err(e.to_string()));
                    errors.push(e);
                }
            }
        }
        let cells: Vec<(usize, usize)> = (0..alphas.len()).flat_map(|a| (0..seeds.len()).map(move |r| (a, r))).collect();
        let results: Vec<(SweepRow, Option<Error>)> = cells
            .par_iter()
            .map(|&(a, r)| {
                let alpha = alphas[a];
                let cfg = CellConfig {
                    alpha,
                    p: args.p,
                    xi: args.xi,
                    sigma: args.sigma,
                    method: args.method.into(),
                };
                let mut row = SweepRow {
                    alpha,
                    rep: r,
                    seed: seeds[r],
                    p: None,
                    mse: None,
                    ks: None,
                    tail_unfairness: None,
                    threshold_gap_max: None,
                    error: None,
                };
                match &prepared[r] {
                    Err(msg) => {
                        row.error = Some(format!("data preparation failed: {msg}"));
                        (row, None)
                    }
                    Ok(prep) => match run_cell(prep, &cfg, seeds[r]) {
                        Ok(m) => {
                            row.p = Some(m.p);
                            row.mse = m.mse;
                            row.ks = Some(m.ks);
                            row.tail_unfairness = Some(m.tail_unfairness);
                            row.threshold_gap_max = Some(m.max_threshold_gap());
                            (row, None)
                        }
                        Err(e) => {
                            row.error = Some(e.to_string());
                            (row, Some(e))
                        }
                    },
                }
            })
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        for (row, err) in results {
            if let Some(e) = err {
                eprintln!("cell alpha = {}, rep = {} failed: {e}", row.alpha, row.rep);
                errors.push(e);
            }
            rows.push(row);
        }
        (rows, errors)
    });

    match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
            w.write_record(SWEEP_HEADER)?;
            for row in &rows {
                w.write_record(row.csv_record())?;
            }
            w.flush()?;
        }
        Format::Json => write_text(args.out.as_deref(), &serde_json::to_string_pretty(&rows)?)?,
    }
    match errors.into_iter().next() {
        Some(e) => Err(anyhow::Error::from(e).context("some sweep cells failed")),
        None => Ok(()),
    }
}

pub fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let source = synthetic_source(&args.synthetic);
    let f = &args.fairness;
    warn_xi(f.xi, args.synthetic.n);
    let cfg = CellConfig {
        alpha: f.alpha,
        p: f.p,
        xi: f.xi,
        sigma: f.sigma,
        method: f.method.into(),
    };
    let mut reports = Vec::new();
    for rep in 0..args.reps as usize {
        let seed = repetition_seed(args.seed.seed, rep);
        let prepared = prepare(&source, seed)?;
        if rep == 0 {
            if let Some(path) = &args.data_out {
                let mut w = output(Some(path))?;
                write_scores_csv(&prepared.calibration, None, &mut w)?;
                w.flush()?;
            }
        }
        reports.push(run_cell(&prepared, &cfg, seed)?);
    }
    write_reports(&reports, args.format, args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct OracleEntry {
    name: String,
    closed_form: ClosedFormReport,
    barycenter: BarycenterReport,
}

/// Differences above `tol` between the grid optimum and the closed form.
fn level_diffs(inst: &dptails::oracle::DiscreteInstance, step: f64, tol: f64, closed_form: &ClosedForm) -> anyhow::Result<Vec<String>> {
    let grid = inst.value_grid(step);
    let mut lines = Vec::new();
    for (branch, variant, xi) in [(UpperBranch::Closed, Variant::Star, 0.0), (UpperBranch::Strict, Variant::Xi, step)] {
        let sol = grid_search_optimum(inst, &grid, branch)?;
        let cf = closed_form(inst, variant, xi)?;
        for (s, (a, b)) in sol.values.iter().zip(&cf).enumerate() {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                if (x - y).abs() > tol {
                    lines.push(format!(
                        "    {variant:?} group {s} level {i}: grid {x:.6} closed form {y:.6} diff {:.3e}",
                        (x - y).abs()
                    ));
                }
            }
        }
    }
    Ok(lines)
}

pub fn verify_oracle(args: VerifyArgs) -> anyhow::Result<()> {
    if !(args.step > 0.0) {
        return Err(ConfigError(format!("--step must be positive, got {}", args.step)).into());
    }
    let tol = args.tol.unwrap_or(2.0 * args.step);
    if !(tol >= args.step) {
        return Err(ConfigError(format!("--tol {tol} is below the grid step {}; the grid cannot resolve it", args.step)).into());
    }
    let items = battery(&mut stream(args.seed.seed, Purpose::Data, "oracle", 0), args.random)?;
    let closed_form: Box<ClosedForm> = match args.inject_shift {
        Some(shift) => Box::new(shifted_closed_form(shift)),
        None => Box::new(library_closed_form),
    };
    let entries: Vec<OracleEntry> = items
        .par_iter()
        .map(|item| -> dptails::Result<OracleEntry> {
            Ok(OracleEntry {
                name: item.name.clone(),
                closed_form: verify_closed_form_with(&item.instance, args.step, tol, closed_form.as_ref())?,
                barycenter: verify_barycenter_identity(&item.instance, args.step, 1e-9)?,
            })
        })
        .collect::<dptails::Result<_>>()?;

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{:<22} {:>6} {:>3} {:<10} {:>10} {:>10} {:>10} {:>10}  result",
        "instance", "groups", "m", "regime", "value_dev", "obj_dev", "xi_gap", "bary_dev"
    )?;
    let mut failures = 0;
    for (entry, item) in entries.iter().zip(&items) {
        let c = &entry.closed_form;
        let pass = c.pass && entry.barycenter.pass;
        let regime = match c.regime {
            Regime::Attained => "attained",
            Regime::NoMinimum => "no_minimum",
        };
        writeln!(
            out,
            "{:<22} {:>6} {:>3} {:<10} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}  {}",
            entry.name,
            c.groups,
            c.m,
            regime,
            c.max_value_deviation,
            c.objective_deviation,
            c.strict_gap,
            entry.barycenter.deviation,
            if pass { "PASS" } else { "FAIL" }
        )?;
        if !pass {
            failures += 1;
            for line in level_diffs(&item.instance, args.step, tol, closed_form.as_ref())? {
                writeln!(out, "{line}")?;
            }
        }
    }
    writeln!(out, "{} of {} instances passed (tol = {tol}, step = {})", entries.len() - failures, entries.len(), args.step)?;
    out.flush()?;
    drop(out);
    if let Some(path) = &args.out {
        write_text(Some(path), &serde_json::to_string_pretty(&entries)?)?;
    }
    if failures > 0 {
        return Err(VerificationFailed(failures).into());
    }
    Ok(())
}
