//! Experiment configuration, the simulation grid runner, real-data
//! evaluation from summary files, and report emission.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{optimize_cl_gd, optimize_claime_gd, write_trace, ContrastData, GdConfig};
use crate::cooc::{accumulate, create_text, load_summary, simulate_summary, CooccurrenceSummary};
use crate::error::{ClaimeError, Result};
use crate::evalkit::{auc_known_pairs, err_metric, write_auc_report, AucRow, FeatureDictionary, KnownPairSet};
use crate::gen::{make_embeddings, make_noise_covariance, sample_cohort, CovarianceSpec, LatentScale, SampleOptions};
use crate::pmi::{pmi_cl, pmi_claime, pmi_concat, ZeroPolicy};
use crate::seed::derive_seed;
use crate::spectral::{
    factor_claime, factor_joint, joint_representation, save_embeddings, sin_theta_frobenius, EmbeddingFactorization, Method,
    SvdOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    VaryN,
    VaryD,
    VarySNR,
    RealData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseCase {
    Case1,
    Case2,
    LowRankOrthogonal,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for NoiseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn linspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grids {
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub c: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Grids {
            n: vec![20_000, 40_000, 60_000, 80_000, 100_000],
            d: vec![200, 400, 600, 800, 1000],
            c: linspace(0.2, 1.0, 5),
            rho: linspace(0.0, 0.9, 5),
        }
    }
}

/// Real-data inputs: a summary file plus optional known-pair benchmark.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealDataInputs {
    pub summary: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub null_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub case: NoiseCase,
    pub grids: Grids,
    /// sample size when `n` is not the varied parameter
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub mean_len: f64,
    pub lambda: f64,
    /// Case 1 signal-to-noise constant when `c` is not varied
    pub c: f64,
    /// Case 2 correlation when `ρ` is not varied
    pub rho: f64,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub latent: LatentScale,
    pub gd: GdConfig,
    pub concat_zero: ZeroPolicy,
    /// record per-cell wall time (makes reports run-dependent)
    pub include_timing: bool,
    /// compute the rotation-aligned joint distance for two-block methods
    pub joint_diagnostics: bool,
    pub real: RealDataInputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::VaryN,
            case: NoiseCase::Case1,
            grids: Grids::default(),
            n: 100_000,
            d: 200,
            p: 4,
            mean_len: 50.0,
            lambda: 1.0,
            c: 0.2,
            rho: 0.8,
            methods: vec![Method::Claime, Method::Concate, Method::Cl],
            replications: 20,
            seed: 0,
            output_dir: None,
            latent: LatentScale::default(),
            gd: GdConfig::default(),
            concat_zero: ZeroPolicy::default(),
            include_timing: false,
            joint_diagnostics: true,
            real: RealDataInputs { null_draws: 1, ..Default::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Name of the varied parameter.
    pub fn parameter(&self) -> &'static str {
        match (self.experiment, self.case) {
            (Experiment::VaryN, _) => "n",
            (Experiment::VaryD, _) => "d",
            (Experiment::VarySNR, NoiseCase::Case2) => "rho",
            (Experiment::VarySNR, _) => "c",
            (Experiment::RealData, _) => "none",
        }
    }

    /// Values of the varied parameter.
    pub fn grid(&self) -> Vec<f64> {
        match self.parameter() {
            "n" => self.grids.n.iter().map(|&x| x as f64).collect(),
            "d" => self.grids.d.iter().map(|&x| x as f64).collect(),
            "c" => self.grids.c.clone(),
            "rho" => self.grids.rho.clone(),
            _ => vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClaimeError::Parameter(m));
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.experiment == Experiment::RealData {
            if self.real.summary.is_none() {
                return bad("RealData needs real.summary".into());
            }
            if self.real.pairs.is_some() != self.real.dict.is_some() {
                return bad("known pairs and the feature dictionary must be given together".into());
            }
            return Ok(());
        }
        if self.grid().is_empty() {
            return bad(format!("grid for {} is empty", self.parameter()));
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if self.experiment == Experiment::VarySNR && self.case == NoiseCase::LowRankOrthogonal {
            return bad("VarySNR is defined for Case1 and Case2".into());
        }
        let ds: Vec<usize> = if self.parameter() == "d" { self.grids.d.clone() } else { vec![self.d] };
        if let Some(d) = ds.iter().find(|&&d| d % 2 != 0 || d < 2 * self.p) {
            return bad(format!("d = {d} must be even and at least 2p"));
        }
        if self.parameter() == "n" && self.grids.n.iter().any(|&n| n < 2) {
            return bad("grid sample sizes must be at least 2".into());
        }
        if !(self.mean_len > 0.0) || !(self.lambda > 0.0) {
            return bad("mean_len and lambda must be positive".into());
        }
        Ok(())
    }

    fn noise_spec(&self, value: f64) -> CovarianceSpec {
        match (self.case, self.parameter()) {
            (NoiseCase::Case1, "c") => CovarianceSpec::Case1 { c: value },
            (NoiseCase::Case1, _) => CovarianceSpec::Case1 { c: self.c },
            (NoiseCase::Case2, "rho") => CovarianceSpec::Case2 { rho: value },
            (NoiseCase::Case2, _) => CovarianceSpec::Case2 { rho: self.rho },
            (NoiseCase::LowRankOrthogonal, _) => CovarianceSpec::LowRankOrthogonal,
        }
    }
}

/// One (method, grid value, replication) outcome. Metrics are empty when
/// the cell failed; `status` then holds the error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub case: String,
    pub method: String,
    pub parameter: String,
    pub value: f64,
    pub replication: usize,
    pub err: Option<f64>,
    pub sin_theta1: Option<f64>,
    pub sin_theta2: Option<f64>,
    pub joint_sin_theta: Option<f64>,
    pub wall_time_ms: Option<f64>,
    pub status: String,
}

/// Mean and standard error over replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub value: f64,
    pub replications: usize,
    pub mean_err: f64,
    pub stderr_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub auc: Vec<AucRow>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }

    /// Mean/stderr of `err` per (method, value), in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(m, v)| *m == r.method && *v == r.value) {
                keys.push((r.method.clone(), r.value));
            }
        }
        keys.into_iter()
            .map(|(method, value)| {
                let errs: Vec<f64> =
                    self.rows.iter().filter(|r| r.method == method && r.value == value).filter_map(|r| r.err).collect();
                let k = errs.len() as f64;
                let mean = errs.iter().sum::<f64>() / k;
                let var = if errs.len() > 1 { errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
                SummaryRow { method, value, replications: errs.len(), mean_err: mean, stderr_err: (var / k).sqrt() }
            })
            .collect()
    }

    /// Mean err of `method` at `value`, if any replication succeeded.
    pub fn mean_err(&self, method: Method, value: f64) -> Option<f64> {
        self.summary().into_iter().find(|s| s.method == method.name() && s.value == value && s.replications > 0).map(|s| s.mean_err)
    }
}

/// Seed of one cell: `hash(seed, experiment, case, grid value, replication)`.
pub fn cell_seed(cfg: &ExperimentConfig, value: f64, replication: usize) -> u64 {
    derive_seed(&[
        &cfg.seed.to_string(),
        &cfg.experiment.to_string(),
        &cfg.case.to_string(),
        &format!("{value:e}"),
        &replication.to_string(),
    ])
}

/// Seed of the true embeddings and noise covariance of a replication.
/// It leaves out the grid value so that every grid point of a
/// replication shares the same truth, except along `d` where it must change.
pub fn truth_seed(cfg: &ExperimentConfig, d: usize, replication: usize) -> u64 {
    derive_seed(&[&cfg.seed.to_string(), &cfg.case.to_string(), "truth", &d.to_string(), &replication.to_string()])
}

/// Estimates `method` from a summary (and the cohort for gradient methods).
pub fn estimate(
    method: Method,
    summary: &CooccurrenceSummary,
    data: Option<&ContrastData>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EmbeddingFactorization> {
    let p = cfg.p;
    let svd = SvdOptions { seed, ..SvdOptions::default() };
    let gd = GdConfig { p, lambda: cfg.lambda, seed, ..cfg.gd.clone() };
    let need = || data.ok_or_else(|| ClaimeError::Parameter(format!("{method} needs patient-level data")));
    match method {
        Method::Claime => factor_claime(&pmi_claime(summary)?, p, cfg.lambda, &svd),
        Method::Concate => factor_joint(&pmi_concat(summary, cfg.concat_zero)?, p, Method::Concate),
        Method::Cl => factor_joint(&pmi_cl(summary)?, p, Method::Cl),
        Method::ClaimeGd => Ok(optimize_claime_gd(need()?, &gd)?.factorization),
        Method::ClGd => Ok(optimize_cl_gd(need()?, &gd)?.factorization),
    }
}

struct Cell {
    value: f64,
    replication: usize,
}

fn failed_rows(cfg: &ExperimentConfig, cell: &Cell, methods: &[Method], e: &ClaimeError) -> Vec<ReportRow> {
    methods.iter().map(|&m| row(cfg, cell, m, None, None, format!("error: {e}"))).collect()
}

fn row(cfg: &ExperimentConfig, cell: &Cell, method: Method, metrics: Option<[Option<f64>; 4]>, time: Option<f64>, status: String) -> ReportRow {
    let [err, s1, s2, joint] = metrics.unwrap_or([None; 4]);
    ReportRow {
        experiment: cfg.experiment.to_string(),
        case: cfg.case.to_string(),
        method: method.name().to_string(),
        parameter: cfg.parameter().to_string(),
        value: cell.value,
        replication: cell.replication,
        err,
        sin_theta1: s1,
        sin_theta2: s2,
        joint_sin_theta: joint,
        wall_time_ms: time,
        status,
    }
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Vec<ReportRow> {
    let seed = cell_seed(cfg, cell.value, cell.replication);
    let d = if cfg.parameter() == "d" { cell.value as usize } else { cfg.d };
    let n = if cfg.parameter() == "n" { cell.value as usize } else { cfg.n };
    let (d1, d2) = (d / 2, d / 2);
    let tseed = truth_seed(cfg, d, cell.replication);
    let prepared = (|| {
        let truth = make_embeddings(d1, d2, cfg.p, tseed)?;
        let cov = make_noise_covariance(&cfg.noise_spec(cell.value), d1, d2, cfg.p, tseed, Some(&truth))?;
        let opts = SampleOptions { mean_len: cfg.mean_len, latent: cfg.latent, ..SampleOptions::default() };
        let needs_patients = cfg.methods.iter().any(|m| matches!(m, Method::ClaimeGd | Method::ClGd));
        let (summary, data) = if needs_patients {
            let cohort = sample_cohort(&truth, &cov, n, opts, seed)?;
            (accumulate(&cohort)?, Some(ContrastData::new(&cohort)?))
        } else {
            (simulate_summary(&truth, &cov, n, opts, seed)?, None)
        };
        Ok::<_, ClaimeError>((truth, summary, data))
    })();
    let (truth, summary, data) = match prepared {
        Ok(x) => x,
        Err(e) => return failed_rows(cfg, cell, &cfg.methods, &e),
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome = (|| {
                let f = estimate(method, &summary, data.as_ref(), cfg, seed)?;
                let err = err_metric(&f, &truth)?;
                let s1 = sin_theta_frobenius(&crate::linalg::polar(&f.v1hat), &truth.u1)?;
                let s2 = sin_theta_frobenius(&crate::linalg::polar(&f.v2hat), &truth.u2)?;
                let joint = if cfg.joint_diagnostics { Some(joint_representation(&f, &truth, seed)?.dist) } else { None };
                Ok::<_, ClaimeError>([Some(err), Some(s1), Some(s2), joint])
            })();
            let time = cfg.include_timing.then(|| start.elapsed().as_secs_f64() * 1e3);
            match outcome {
                Ok(metrics) => row(cfg, cell, method, Some(metrics), time, "ok".into()),
                Err(e) => row(cfg, cell, method, None, time, format!("error: {e}")),
            }
        })
        .collect()
}

/// Runs every (grid value, replication) cell in parallel, or the real-data
/// evaluation for [`Experiment::RealData`]. Cell failures are recorded in
/// the report rather than aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    if cfg.experiment == Experiment::RealData {
        return run_real_data(cfg);
    }
    let cells: Vec<Cell> =
        cfg.grid().into_iter().flat_map(|value| (0..cfg.replications).map(move |replication| Cell { value, replication })).collect();
    let rows: Vec<ReportRow> = cells.par_iter().flat_map_iter(|cell| run_cell(cfg, cell)).collect();
    let report = EvaluationReport { rows, ..Default::default() };
    if let Some(dir) = &cfg.output_dir {
        emit_report(&report, dir, &[ReportFormat::Csv, ReportFormat::Json])?;
    }
    Ok(report)
}

fn run_real_data(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    let summary = ingest_summary(cfg.real.summary.as_deref().expect("validated"))?;
    let mut report = EvaluationReport::default();
    let (m1, m2) = summary.feature_mask();
    let absent = m1.iter().chain(&m2).filter(|&&x| !x).count();
    if absent > 0 {
        report.warnings.push(format!("{absent} features never occur and are masked"));
    }
    let known = match (&cfg.real.pairs, &cfg.real.dict) {
        (Some(p), Some(d)) => Some((KnownPairSet::load(p)?, FeatureDictionary::load(d)?)),
        _ => None,
    };
    for &method in &cfg.methods {
        if matches!(method, Method::ClaimeGd | Method::ClGd) {
            report.warnings.push(format!("{method} needs patient-level data and is skipped"));
            continue;
        }
        let f = estimate(method, &summary, None, cfg, derive_seed(&[&cfg.seed.to_string(), "real", method.name()]))?;
        if let Some(dir) = &cfg.output_dir {
            std::fs::create_dir_all(dir)?;
            save_embeddings(&f, &dir.join(format!("embeddings_{}.tsv", method.name())))?;
        }
        if let Some((pairs, dict)) = &known {
            let r = auc_known_pairs(&f, pairs, dict, cfg.real.null_draws.max(1), cfg.seed)?;
            report.auc.extend(r.rows);
            report.warnings.extend(r.warnings);
        }
    }
    if let Some(dir) = &cfg.output_dir {
        let file = create_text(&dir.join("auc.csv"))?;
        write_auc_report(&report.auc, file)?;
    }
    Ok(report)
}

/// Loads and validates a summary file.
pub fn ingest_summary(path: &Path) -> Result<CooccurrenceSummary> {
    let s = load_summary(path)?;
    s.validate()?;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "experiment",
    "case",
    "method",
    "parameter",
    "value",
    "replication",
    "err",
    "sin_theta1",
    "sin_theta2",
    "joint_sin_theta",
    "wall_time_ms",
    "status",
];

/// Float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt17(x: Option<f64>) -> String {
    x.map(fmt17).unwrap_or_default()
}

pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.case.clone(),
            r.method.clone(),
            r.parameter.clone(),
            fmt17(r.value),
            r.replication.to_string(),
            opt17(r.err),
            opt17(r.sin_theta1),
            opt17(r.sin_theta2),
            opt17(r.joint_sin_theta),
            opt17(r.wall_time_ms),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "value", "replications", "mean_err", "stderr_err"])?;
    for r in rows {
        w.write_record([r.method.clone(), fmt17(r.value), r.replications.to_string(), fmt17(r.mean_err), fmt17(r.stderr_err)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.csv`, `summary.csv` and/or `report.json` into `dir`.
pub fn emit_report(report: &EvaluationReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Csv => {
                let path = dir.join("report.csv");
                write_report_csv(&report.rows, std::fs::File::create(&path)?)?;
                written.push(path);
                let path = dir.join("summary.csv");
                write_summary_csv(&report.summary(), std::fs::File::create(&path)?)?;
                written.push(path);
            }
            ReportFormat::Json => {
                let path = dir.join("report.json");
                let mut file = std::fs::File::create(&path)?;
                serde_json::to_writer_pretty(&mut file, report)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Writes a gradient optimizer trace next to a report.
pub fn emit_trace(trace: &[crate::contrast::TraceRow], path: &Path) -> Result<()> {
    write_trace(trace, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(experiment: Experiment) -> ExperimentConfig {
        ExperimentConfig {
            experiment,
            grids: Grids { n: vec![300, 600], d: vec![8, 12], c: vec![0.5, 1.0], rho: vec![0.2] },
            n: 400,
            d: 8,
            p: 2,
            replications: 2,
            seed: 11,
            joint_diagnostics: false,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_defaults_follow_the_protocol() {
        let g = Grids::default();
        assert_eq!(g.n, vec![20_000, 40_000, 60_000, 80_000, 100_000]);
        assert_eq!(g.c.len(), 5);
        assert!((g.c[0] - 0.2).abs() < 1e-15 && (g.c[4] - 1.0).abs() < 1e-15);
        assert!((g.rho[4] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(ExperimentConfig { d: 7, ..tiny(Experiment::VaryN) }.validate().is_err());
        assert!(ExperimentConfig { methods: vec![], ..tiny(Experiment::VaryN) }.validate().is_err());
        let mut cfg = tiny(Experiment::VaryN);
        cfg.grids.n.clear();
        assert!(cfg.validate().is_err());
        assert!(tiny(Experiment::RealData).validate().is_err());
    }

    #[test]
    fn one_row_per_method_cell_and_deterministic() {
        let cfg = tiny(Experiment::VaryN);
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 3);
        assert_eq!(a.failures(), 0);
        let b = run_experiment(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_report_csv(&a.rows, &mut x).unwrap();
        write_report_csv(&b.rows, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn cells_are_independent_of_the_grid() {
        let cfg = tiny(Experiment::VaryN);
        let full = run_experiment(&cfg).unwrap();
        let mut single = cfg.clone();
        single.grids.n = vec![600];
        single.replications = 2;
        let part = run_experiment(&single).unwrap();
        let subset: Vec<_> = full.rows.iter().filter(|r| r.value == 600.0).cloned().collect();
        assert_eq!(subset, part.rows);
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let mut cfg = tiny(Experiment::VarySNR);
        cfg.grids.c = vec![-1.0, 1.0];
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.failures(), 2 * 3);
        assert!(r.rows.iter().filter(|r| r.value == 1.0).all(|r| r.status == "ok"));
    }

    #[test]
    fn vary_d_changes_the_truth_dimension() {
        let r = run_experiment(&tiny(Experiment::VaryD)).unwrap();
        assert_eq!(r.failures(), 0);
        assert_eq!(r.summary().len(), 2 * 3);
    }

    #[test]
    fn gradient_methods_run_in_cells() {
        let mut cfg = tiny(Experiment::VaryN);
        cfg.grids.n = vec![200];
        cfg.replications = 1;
        cfg.methods = vec![Method::ClaimeGd, Method::ClGd];
        cfg.gd.max_epochs = 3;
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.failures(), 0, "{:?}", r.rows);
    }

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        write_report_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), REPORT_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt17(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
