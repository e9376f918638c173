//! `claime` command-line front end. Every flag can also be set through an
//! environment variable `CLAIME_<FLAG>` (e.g. `CLAIME_JOBS=4`).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use claime::cooc::{accumulate, save_summary, simulate_summary};
use claime::evalkit::{auc_known_pairs, cosine, kendall_tau, write_auc_report, FeatureDictionary, KnownPairSet};
use claime::gen::{
    make_embeddings, make_noise_covariance, sample_cohort, CovarianceSpec, LatentScale, NoiseCovariance, SampleOptions,
    TrueEmbeddings,
};
use claime::harness::{emit_report, estimate, fmt17, ingest_summary, run_experiment, ExperimentConfig, ReportFormat};
use claime::pmi::{pmi_cl, pmi_claime, pmi_concat, population_pmi_oracle, ZeroPolicy};
use claime::spectral::{load_embeddings, save_embeddings, Method};

#[derive(Parser)]
#[command(name = "claime", version, about = "Multimodal PMI embedding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectralMethod {
    Claime,
    Cl,
    Concate,
}

impl From<SpectralMethod> for Method {
    fn from(m: SpectralMethod) -> Self {
        match m {
            SpectralMethod::Claime => Method::Claime,
            SpectralMethod::Cl => Method::Cl,
            SpectralMethod::Concate => Method::Concate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Latent {
    InverseDim,
    Identity,
}

impl From<Latent> for LatentScale {
    fn from(l: Latent) -> Self {
        match l {
            Latent::InverseDim => LatentScale::InverseDim,
            Latent::Identity => LatentScale::Identity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation experiment described by a JSON config.
    Simulate {
        #[arg(long, env = "CLAIME_CONFIG")]
        config: PathBuf,
        /// worker threads (default: all cores)
        #[arg(long, env = "CLAIME_JOBS")]
        jobs: Option<usize>,
        /// report directory (overrides the config's output_dir)
        #[arg(long, env = "CLAIME_OUT")]
        out: Option<PathBuf>,
    },
    /// Estimate embeddings from a co-occurrence summary file.
    Embed {
        #[arg(long, env = "CLAIME_SUMMARY")]
        summary: PathBuf,
        #[arg(long, value_enum, env = "CLAIME_METHOD")]
        method: SpectralMethod,
        #[arg(long, env = "CLAIME_P")]
        p: usize,
        #[arg(long, default_value_t = 1.0, env = "CLAIME_LAMBDA")]
        lambda: f64,
        #[arg(long, default_value_t = 0, env = "CLAIME_SEED")]
        seed: u64,
        /// embeddings TSV (a JSON sidecar is written next to it)
        #[arg(long, env = "CLAIME_OUT")]
        out: Option<PathBuf>,
        /// also save the PMI matrix
        #[arg(long, env = "CLAIME_PMI_OUT")]
        pmi_out: Option<PathBuf>,
    },
    /// Known-pair AUC (and optionally Kendall's tau against relevance scores).
    Evaluate {
        #[arg(long, env = "CLAIME_EMBEDDINGS")]
        embeddings: PathBuf,
        #[arg(long, env = "CLAIME_PAIRS")]
        pairs: PathBuf,
        #[arg(long, env = "CLAIME_DICT")]
        dict: PathBuf,
        #[arg(long, default_value_t = 1, env = "CLAIME_NULL_DRAWS")]
        null_draws: usize,
        #[arg(long, default_value_t = 0, env = "CLAIME_SEED")]
        seed: u64,
        /// CSV `feature_a,feature_b,score` of relevance scores
        #[arg(long, env = "CLAIME_RELEVANCE")]
        relevance: Option<PathBuf>,
        /// AUC report CSV (default: stdout)
        #[arg(long, env = "CLAIME_OUT")]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo population PMI with standard errors.
    OraclePmi {
        /// true embeddings JSON
        #[arg(long, env = "CLAIME_EMB")]
        emb: PathBuf,
        /// noise covariance JSON
        #[arg(long, env = "CLAIME_COV")]
        cov: PathBuf,
        #[arg(long, env = "CLAIME_MC")]
        mc: usize,
        #[arg(long, default_value_t = 0, env = "CLAIME_SEED")]
        seed: u64,
        #[arg(long, value_enum, default_value = "inverse-dim", env = "CLAIME_LATENT")]
        latent: Latent,
        /// PMI matrix file; standard errors go to `<out>.se.json`
        #[arg(long, env = "CLAIME_OUT")]
        out: PathBuf,
    },
    /// Generate true embeddings and a noise covariance.
    MakeTruth {
        #[arg(long, env = "CLAIME_D1")]
        d1: usize,
        #[arg(long, env = "CLAIME_D2")]
        d2: usize,
        #[arg(long, env = "CLAIME_P")]
        p: usize,
        #[arg(long, default_value_t = 0, env = "CLAIME_SEED")]
        seed: u64,
        /// zero | case1:<c> | case2:<rho> | low-rank
        #[arg(long, default_value = "zero", env = "CLAIME_NOISE")]
        noise: String,
        #[arg(long, env = "CLAIME_EMB")]
        emb: PathBuf,
        #[arg(long, env = "CLAIME_COV")]
        cov: PathBuf,
    },
    /// Sample a cohort from a truth and write its co-occurrence summary.
    Sample {
        #[arg(long, env = "CLAIME_EMB")]
        emb: PathBuf,
        #[arg(long, env = "CLAIME_COV")]
        cov: PathBuf,
        #[arg(long, env = "CLAIME_N")]
        n: usize,
        #[arg(long, default_value_t = 0, env = "CLAIME_SEED")]
        seed: u64,
        #[arg(long, value_enum, default_value = "inverse-dim", env = "CLAIME_LATENT")]
        latent: Latent,
        /// summary file (`.gz` for gzip)
        #[arg(long, env = "CLAIME_OUT")]
        out: PathBuf,
        /// also write the patient-level cohort TSV
        #[arg(long, env = "CLAIME_COHORT")]
        cohort: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn parse_noise(spec: &str) -> Result<CovarianceSpec> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let value = || arg.parse::<f64>().with_context(|| format!("noise `{spec}` needs a numeric argument"));
    Ok(match kind {
        "zero" => CovarianceSpec::Zero,
        "case1" => CovarianceSpec::Case1 { c: value()? },
        "case2" => CovarianceSpec::Case2 { rho: value()? },
        "low-rank" => CovarianceSpec::LowRankOrthogonal,
        _ => bail!("unknown noise `{spec}`; expected zero, case1:<c>, case2:<rho> or low-rank"),
    })
}

fn simulate(config: &Path, jobs: Option<usize>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(config)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let report = pool.install(|| run_experiment(&cfg))?;
    if let Some(dir) = &cfg.output_dir {
        emit_report(&report, dir, &[ReportFormat::Csv, ReportFormat::Json])?;
        eprintln!("report written to {}", dir.display());
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "method\tvalue\treplications\tmean_err\tstderr_err")?;
    for s in report.summary() {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", s.method, s.value, s.replications, fmt17(s.mean_err), fmt17(s.stderr_err))?;
    }
    for r in &report.auc {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", r.pair_type.name(), r.group, r.method, fmt17(r.auc), r.count)?;
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    let failures = report.failures();
    if failures > 0 {
        eprintln!("{failures} cells failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn embed(summary: &Path, method: Method, p: usize, lambda: f64, seed: u64, out: Option<PathBuf>, pmi_out: Option<PathBuf>) -> Result<()> {
    let s = ingest_summary(summary)?;
    let cfg = ExperimentConfig { p, lambda, ..ExperimentConfig::default() };
    let f = estimate(method, &s, None, &cfg, seed)?;
    if let Some(path) = pmi_out {
        let pmi = match method {
            Method::Claime => pmi_claime(&s)?,
            Method::Cl => pmi_cl(&s)?,
            _ => pmi_concat(&s, ZeroPolicy::default())?,
        };
        pmi.save(&path)?;
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("embeddings_{}.tsv", method.name())));
    save_embeddings(&f, &out)?;
    for w in &f.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("{} embeddings ({} x {}) written to {}", method, f.d1() + f.d2(), f.p(), out.display());
    Ok(())
}

#[derive(serde::Deserialize)]
struct RelevanceRow {
    feature_a: usize,
    feature_b: usize,
    score: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    embeddings: &Path,
    pairs: &Path,
    dict: &Path,
    null_draws: usize,
    seed: u64,
    relevance: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let f = load_embeddings(embeddings)?;
    let known = KnownPairSet::load(pairs)?;
    let dict = FeatureDictionary::load(dict)?;
    let report = auc_known_pairs(&f, &known, &dict, null_draws, seed)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match out {
        Some(path) => write_auc_report(&report.rows, File::create(&path)?)?,
        None => write_auc_report(&report.rows, io::stdout().lock())?,
    }
    if let Some(path) = relevance {
        let rows = f.vhat();
        let mut reader = csv::Reader::from_path(&path)?;
        let (mut cos, mut scores) = (Vec::new(), Vec::new());
        for r in reader.deserialize::<RelevanceRow>() {
            let r = r?;
            if r.feature_a == 0 || r.feature_b == 0 || r.feature_a > rows.nrows() || r.feature_b > rows.nrows() {
                bail!("relevance pair ({}, {}) is outside the embedding", r.feature_a, r.feature_b);
            }
            if let Some(c) = cosine(&rows, r.feature_a - 1, r.feature_b - 1) {
                cos.push(c);
                scores.push(r.score);
            }
        }
        let tau = kendall_tau(&cos, &scores)?;
        eprintln!("kendall tau-b between cosine and relevance over {} pairs: {}", cos.len(), fmt17(tau));
    }
    Ok(())
}

fn oracle(emb: &Path, cov: &Path, mc: usize, seed: u64, latent: Latent, out: &Path) -> Result<()> {
    let truth: TrueEmbeddings = read_json(emb)?;
    let cov: NoiseCovariance = read_json(cov)?;
    let result = population_pmi_oracle(&truth, &cov, latent.into(), mc, seed)?;
    result.pmi.save(out)?;
    let rows: Vec<Vec<f64>> = result.std_errors.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut se_path = out.as_os_str().to_owned();
    se_path.push(".se.json");
    write_json(&rows, Path::new(&se_path))?;
    eprintln!("population PMI from {} draws written to {} (max standard error {})", result.draws, out.display(), fmt17(result.std_errors.max()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, jobs, out } => simulate(&config, jobs, out),
        Command::Embed { summary, method, p, lambda, seed, out, pmi_out } => {
            embed(&summary, method.into(), p, lambda, seed, out, pmi_out).map(|_| ExitCode::SUCCESS)
        }
        Command::Evaluate { embeddings, pairs, dict, null_draws, seed, relevance, out } => {
            evaluate(&embeddings, &pairs, &dict, null_draws, seed, relevance, out).map(|_| ExitCode::SUCCESS)
        }
        Command::OraclePmi { emb, cov, mc, seed, latent, out } => oracle(&emb, &cov, mc, seed, latent, &out).map(|_| ExitCode::SUCCESS),
        Command::MakeTruth { d1, d2, p, seed, noise, emb, cov } => (|| {
            let truth = make_embeddings(d1, d2, p, seed)?;
            let sigma = make_noise_covariance(&parse_noise(&noise)?, d1, d2, p, seed, Some(&truth))?;
            write_json(&truth, &emb)?;
            write_json(&sigma, &cov)?;
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Sample { emb, cov, n, seed, latent, out, cohort } => (|| {
            let truth: TrueEmbeddings = read_json(&emb)?;
            let sigma: NoiseCovariance = read_json(&cov)?;
            let opts = SampleOptions { latent: latent.into(), ..SampleOptions::default() };
            let summary = match cohort {
                Some(path) => {
                    let c = sample_cohort(&truth, &sigma, n, opts, seed)?;
                    c.write_tsv(BufWriter::new(File::create(&path)?))?;
                    accumulate(&c)?
                }
                None => simulate_summary(&truth, &sigma, n, opts, seed)?,
            };
            save_summary(&summary, &out)?;
            Ok(ExitCode::SUCCESS)
        })(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
