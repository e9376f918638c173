//! Summary-level co-occurrence statistics.
//!
//! Within-patient counts are accumulated from per-patient count vectors.
//! Cross-patient counts follow from the identity
//! `Σ_{i≠j} a_i b_jᵀ = (Σ a_i)(Σ b_j)ᵀ − Σ a_i b_iᵀ` and are expanded on demand.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClaimeError, Result};
use crate::gen::{Cohort, NoiseCovariance, PatientRecord, PatientSampler, SampleOptions, TrueEmbeddings};
use crate::linalg::Mat;
use crate::seed::{stream_rng, sub_seed};

pub type Counts = DMatrix<u64>;

const HEADER_TAG: &str = "#claime-cooc v1";

/// Empirical moments of the sequence lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// `S_1^{(M)}` for M = 1, 2
    pub s1: [f64; 2],
    pub s2: [f64; 2],
    pub s4: [f64; 2],
    /// `n⁻¹ Σ T⁽¹⁾ T⁽²⁾`
    pub s1_joint: f64,
    /// `(n⁻¹ Σ (T⁽¹⁾ T⁽²⁾)^{q/2})^{1/q}` for q = 2, 4
    pub s2_joint: f64,
    pub s4_joint: f64,
}

pub fn moments(lengths: &[(u32, u32)]) -> Result<Moments> {
    if lengths.is_empty() {
        return Err(ClaimeError::Parameter("moments of an empty cohort".into()));
    }
    let n = lengths.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| lengths.iter().map(|&(a, b)| f(a as f64, b as f64)).sum::<f64>() / n;
    Ok(Moments {
        s1: [mean(&|a, _| a), mean(&|_, b| b)],
        s2: [mean(&|a, _| a * a).sqrt(), mean(&|_, b| b * b).sqrt()],
        s4: [mean(&|a, _| a.powi(4)).powf(0.25), mean(&|_, b| b.powi(4)).powf(0.25)],
        s1_joint: mean(&|a, b| a * b),
        s2_joint: mean(&|a, b| a * b).sqrt(),
        s4_joint: mean(&|a, b| (a * b).powi(2)).powf(0.25),
    })
}

/// Aggregate co-occurrence counts, token totals and lengths of a cohort.
///
/// `n1`, `n2` hold the per-feature token totals `N(w) = Σ_i n_i(w)`; the
/// cross-patient blocks are functions of these and the within-patient
/// blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceSummary {
    pub d1: usize,
    pub d2: usize,
    pub c11: Counts,
    pub c22: Counts,
    pub d12: Counts,
    pub n1: Vec<u64>,
    pub n2: Vec<u64>,
    pub lengths: Vec<(u32, u32)>,
    /// Set when the token totals were not supplied by the source and were
    /// approximated from the marginals.
    pub totals_estimated: bool,
}

impl CooccurrenceSummary {
    pub fn empty(d1: usize, d2: usize) -> Self {
        CooccurrenceSummary {
            d1,
            d2,
            c11: Counts::zeros(d1, d1),
            c22: Counts::zeros(d2, d2),
            d12: Counts::zeros(d1, d2),
            n1: vec![0; d1],
            n2: vec![0; d2],
            lengths: Vec::new(),
            totals_estimated: false,
        }
    }

    pub fn n(&self) -> usize {
        self.lengths.len()
    }

    pub fn d(&self) -> usize {
        self.d1 + self.d2
    }

    pub fn moments(&self) -> Result<Moments> {
        moments(&self.lengths)
    }

    /// `γ_w^{(M)} = C^{(M,M)}(w, ·)`
    pub fn gamma(&self, modality: u8) -> Vec<f64> {
        let c = if modality == 1 { &self.c11 } else { &self.c22 };
        c.row_iter().map(|r| r.iter().sum::<u64>() as f64).collect()
    }

    /// `Σ_{i≠j} T⁽¹⁾_i T⁽²⁾_j = n(n S₁⁽¹⁾ S₁⁽²⁾ − S₁⁽¹,²⁾)`, computed exactly.
    pub fn cross_denominator(&self) -> f64 {
        let (mut a, mut b, mut ab) = (0u128, 0u128, 0u128);
        for &(t1, t2) in &self.lengths {
            a += t1 as u128;
            b += t2 as u128;
            ab += t1 as u128 * t2 as u128;
        }
        (a * b - ab) as f64
    }

    /// `C^{(c)} = N Mᵀ − D^{(1,2)}`
    pub fn ccross(&self) -> Mat {
        Mat::from_fn(self.d1, self.d2, |w, v| {
            (self.n1[w] as i128 * self.n2[v] as i128 - self.d12[(w, v)] as i128) as f64
        })
    }

    /// `C^{(M)} = N Nᵀ − Σ_i n_i n_iᵀ = N Nᵀ − C^{(M,M)} − diag(N)`
    pub fn cross_within(&self, modality: u8) -> Mat {
        let (c, totals) = if modality == 1 { (&self.c11, &self.n1) } else { (&self.c22, &self.n2) };
        let d = totals.len();
        Mat::from_fn(d, d, |w, v| {
            let diag = if w == v { totals[w] as i128 } else { 0 };
            (totals[w] as i128 * totals[v] as i128 - c[(w, v)] as i128 - diag) as f64
        })
    }

    /// Joint count matrix `[[C⁽¹,¹⁾, D⁽¹,²⁾], [D⁽²,¹⁾, C⁽²,²⁾]]`.
    pub fn joint_counts(&self) -> Mat {
        let (d1, d) = (self.d1, self.d());
        let mut out = Mat::zeros(d, d);
        out.view_mut((0, 0), (d1, d1)).copy_from(&self.c11.map(|x| x as f64));
        out.view_mut((d1, d1), (self.d2, self.d2)).copy_from(&self.c22.map(|x| x as f64));
        let d12 = self.d12.map(|x| x as f64);
        out.view_mut((0, d1), (d1, self.d2)).copy_from(&d12);
        out.view_mut((d1, 0), (self.d2, d1)).copy_from(&d12.transpose());
        out
    }

    /// Joint cross-patient matrix `[[C⁽¹⁾, C⁽ᶜ⁾], [C⁽ᶜ⁾ᵀ, C⁽²⁾]]`.
    pub fn joint_cross(&self) -> Mat {
        let (d1, d) = (self.d1, self.d());
        let mut out = Mat::zeros(d, d);
        out.view_mut((0, 0), (d1, d1)).copy_from(&self.cross_within(1));
        out.view_mut((d1, d1), (self.d2, self.d2)).copy_from(&self.cross_within(2));
        let cc = self.ccross();
        out.view_mut((0, d1), (d1, self.d2)).copy_from(&cc);
        out.view_mut((d1, 0), (self.d2, d1)).copy_from(&cc.transpose());
        out
    }

    /// Features with a positive within-modality marginal.
    pub fn feature_mask(&self) -> (Vec<bool>, Vec<bool>) {
        let keep = |g: Vec<f64>| g.into_iter().map(|x| x > 0.0).collect();
        (keep(self.gamma(1)), keep(self.gamma(2)))
    }

    /// SHA-256 over the canonical binary content.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(HEADER_TAG.as_bytes());
        for x in [self.d1 as u64, self.d2 as u64, self.n() as u64] {
            h.update(x.to_le_bytes());
        }
        for block in [&self.c11, &self.c22, &self.d12] {
            for x in block.iter() {
                h.update(x.to_le_bytes());
            }
        }
        for x in self.n1.iter().chain(&self.n2) {
            h.update(x.to_le_bytes());
        }
        for &(a, b) in &self.lengths {
            h.update(a.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        h.update([self.totals_estimated as u8]);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every structural invariant of the counts.
    pub fn validate(&self) -> Result<()> {
        let shape_ok = self.c11.shape() == (self.d1, self.d1)
            && self.c22.shape() == (self.d2, self.d2)
            && self.d12.shape() == (self.d1, self.d2)
            && self.n1.len() == self.d1
            && self.n2.len() == self.d2;
        if !shape_ok {
            return Err(ClaimeError::Dimension("summary blocks do not match (d1, d2)".into()));
        }
        for (name, c) in [("c11", &self.c11), ("c22", &self.c22)] {
            if c != &c.transpose() {
                return Err(ClaimeError::Integrity(format!("{name} is not symmetric")));
            }
            if let Some(w) = (0..c.nrows()).find(|&w| c[(w, w)] % 2 == 1) {
                return Err(ClaimeError::Integrity(format!("{name} diagonal entry {} is odd", w + 1)));
            }
        }
        if self.lengths.iter().any(|&(a, b)| a < 2 || b < 2) {
            return Err(ClaimeError::Integrity("a patient has fewer than two tokens in a modality".into()));
        }
        let pairs = |m: usize| -> u128 {
            self.lengths
                .iter()
                .map(|&(a, b)| {
                    let t = if m == 1 { a } else { b } as u128;
                    t * (t - 1)
                })
                .sum()
        };
        for (m, c) in [(1, &self.c11), (2, &self.c22)] {
            let total: u128 = c.iter().map(|&x| x as u128).sum();
            if total != pairs(m) {
                return Err(ClaimeError::Integrity(format!(
                    "modality {m}: within-patient pair total {total} differs from Σ T(T−1) = {}",
                    pairs(m)
                )));
            }
        }
        let d_total: u128 = self.d12.iter().map(|&x| x as u128).sum();
        let expected: u128 = self.lengths.iter().map(|&(a, b)| a as u128 * b as u128).sum();
        if d_total != expected {
            return Err(ClaimeError::Integrity(format!(
                "d12 total {d_total} differs from Σ T⁽¹⁾T⁽²⁾ = {expected}"
            )));
        }
        if !self.totals_estimated {
            for (m, totals) in [(1, &self.n1), (2, &self.n2)] {
                let sum: u128 = totals.iter().map(|&x| x as u128).sum();
                let expected: u128 = self.lengths.iter().map(|&(a, b)| if m == 1 { a } else { b } as u128).sum();
                if sum != expected {
                    return Err(ClaimeError::Integrity(format!(
                        "modality {m}: token totals sum to {sum}, lengths to {expected}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-shard accumulator with flat row-major blocks.
#[derive(Clone)]
struct Partial {
    d1: usize,
    d2: usize,
    c11: Vec<u64>,
    c22: Vec<u64>,
    d12: Vec<u64>,
    n1: Vec<u64>,
    n2: Vec<u64>,
}

impl Partial {
    fn new(d1: usize, d2: usize) -> Self {
        Partial {
            d1,
            d2,
            c11: vec![0; d1 * d1],
            c22: vec![0; d2 * d2],
            d12: vec![0; d1 * d2],
            n1: vec![0; d1],
            n2: vec![0; d2],
        }
    }

    fn add_patient(&mut self, patient: &PatientRecord) -> Result<()> {
        let a = count_vector(&patient.tokens1, self.d1, 1)?;
        let b = count_vector(&patient.tokens2, self.d2, 2)?;
        add_within(&mut self.c11, &mut self.n1, self.d1, &a);
        add_within(&mut self.c22, &mut self.n2, self.d2, &b);
        for &(w, x) in &a {
            let row = &mut self.d12[w * self.d2..(w + 1) * self.d2];
            for &(v, y) in &b {
                row[v] += x * y;
            }
        }
        Ok(())
    }

    fn absorb(mut self, other: Partial) -> Partial {
        for (dst, src) in [
            (&mut self.c11, &other.c11),
            (&mut self.c22, &other.c22),
            (&mut self.d12, &other.d12),
            (&mut self.n1, &other.n1),
            (&mut self.n2, &other.n2),
        ] {
            for (x, y) in dst.iter_mut().zip(src) {
                *x += y;
            }
        }
        self
    }

    fn finish(self, lengths: Vec<(u32, u32)>) -> CooccurrenceSummary {
        CooccurrenceSummary {
            d1: self.d1,
            d2: self.d2,
            c11: Counts::from_row_slice(self.d1, self.d1, &self.c11),
            c22: Counts::from_row_slice(self.d2, self.d2, &self.c22),
            d12: Counts::from_row_slice(self.d1, self.d2, &self.d12),
            n1: self.n1,
            n2: self.n2,
            lengths,
            totals_estimated: false,
        }
    }
}

/// Sorted `(feature, count)` pairs of one token sequence.
fn count_vector(tokens: &[u32], d: usize, modality: u8) -> Result<Vec<(usize, u64)>> {
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    if let Some(&bad) = sorted.last().filter(|&&t| t as usize >= d) {
        return Err(ClaimeError::Ingest {
            line: 0,
            message: format!("modality {modality} token id {bad} out of range for d = {d}"),
        });
    }
    let mut out: Vec<(usize, u64)> = Vec::new();
    for t in sorted {
        match out.last_mut() {
            Some((w, c)) if *w == t as usize => *c += 1,
            _ => out.push((t as usize, 1)),
        }
    }
    Ok(out)
}

fn add_within(block: &mut [u64], totals: &mut [u64], d: usize, counts: &[(usize, u64)]) {
    for &(w, x) in counts {
        totals[w] += x;
        let row = &mut block[w * d..(w + 1) * d];
        for &(v, y) in counts {
            row[v] += x * y;
        }
        row[w] -= x;
    }
}

const SHARD: usize = 512;

/// Summary of a cohort; sharded over patients, exact in any shard order.
pub fn accumulate(cohort: &Cohort) -> Result<CooccurrenceSummary> {
    if let Some(i) = cohort.patients.iter().position(|p| p.t1() < 2 || p.t2() < 2) {
        return Err(ClaimeError::Parameter(format!("patient {} has fewer than two tokens", i + 1)));
    }
    let (d1, d2) = (cohort.d1, cohort.d2);
    let partial = cohort
        .patients
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut acc = Partial::new(d1, d2);
            for p in chunk {
                acc.add_patient(p)?;
            }
            Ok::<_, ClaimeError>(acc)
        })
        .try_reduce(|| Partial::new(d1, d2), |a, b| Ok(a.absorb(b)))?;
    let lengths = cohort.patients.iter().map(|p| (p.t1() as u32, p.t2() as u32)).collect();
    Ok(partial.finish(lengths))
}

/// Samples `n` patients and accumulates them without holding the cohort.
/// Identical to `accumulate(&sample_cohort(..))` with the same arguments.
pub fn simulate_summary(
    emb: &TrueEmbeddings,
    cov: &NoiseCovariance,
    n: usize,
    opts: SampleOptions,
    seed: u64,
) -> Result<CooccurrenceSummary> {
    if n < 2 {
        return Err(ClaimeError::Parameter(format!("a cohort needs n >= 2 (got {n})")));
    }
    let sampler = PatientSampler::new(emb, cov, opts)?;
    let stream_seed = sub_seed(seed, "patients");
    let (d1, d2) = (emb.d1(), emb.d2());
    let shards: Vec<(Partial, Vec<(u32, u32)>)> = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|s| {
            let mut acc = Partial::new(d1, d2);
            let mut lengths = Vec::with_capacity(SHARD);
            for i in s * SHARD..((s + 1) * SHARD).min(n) {
                let patient = sampler.sample(&mut stream_rng(stream_seed, i as u64));
                lengths.push((patient.t1() as u32, patient.t2() as u32));
                acc.add_patient(&patient)?;
            }
            Ok((acc, lengths))
        })
        .collect::<Result<_>>()?;
    let mut total = Partial::new(d1, d2);
    let mut lengths = Vec::with_capacity(n);
    for (part, lens) in shards {
        total = total.absorb(part);
        lengths.extend(lens);
    }
    Ok(total.finish(lengths))
}

/// Pools two summaries over the same vocabularies.
pub fn merge(a: &CooccurrenceSummary, b: &CooccurrenceSummary) -> Result<CooccurrenceSummary> {
    if a.d1 != b.d1 || a.d2 != b.d2 {
        return Err(ClaimeError::Dimension(format!(
            "cannot merge vocabularies ({}, {}) and ({}, {})",
            a.d1, a.d2, b.d1, b.d2
        )));
    }
    let add = |x: &[u64], y: &[u64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<u64>>();
    let mut lengths = a.lengths.clone();
    lengths.extend_from_slice(&b.lengths);
    Ok(CooccurrenceSummary {
        d1: a.d1,
        d2: a.d2,
        c11: &a.c11 + &b.c11,
        c22: &a.c22 + &b.c22,
        d12: &a.d12 + &b.d12,
        n1: add(&a.n1, &b.n1),
        n2: add(&a.n2, &b.n2),
        lengths,
        totals_estimated: a.totals_estimated || b.totals_estimated,
    })
}

/// Approximate token totals from marginals: `N(w) ≈ γ_w Σ T / Σ T(T−1)`.
fn estimate_totals(gamma: &[f64], lengths: &[(u32, u32)], modality: u8) -> Vec<u64> {
    let pick = |&(a, b): &(u32, u32)| if modality == 1 { a } else { b } as f64;
    let tokens: f64 = lengths.iter().map(pick).sum();
    let pairs: f64 = lengths.iter().map(|l| pick(l) * (pick(l) - 1.0)).sum();
    if pairs <= 0.0 {
        return vec![0; gamma.len()];
    }
    gamma.iter().map(|g| (g * tokens / pairs).round() as u64).collect()
}

fn is_gzip(path: &Path, head: &[u8]) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")) || head.starts_with(&[0x1f, 0x8b])
}

fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 2];
    let got = file.read(&mut head)?;
    let file = File::open(path)?;
    Ok(if is_gzip(path, &head[..got]) {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

pub(crate) fn create_text(path: &Path) -> Result<Box<dyn Write>> {
    let file = BufWriter::new(File::create(path)?);
    Ok(if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    })
}

pub fn write_summary<W: Write>(s: &CooccurrenceSummary, mut out: W) -> Result<()> {
    writeln!(out, "{HEADER_TAG} d1={} d2={} n={}", s.d1, s.d2, s.n())?;
    for (name, block) in [("c11", &s.c11), ("c22", &s.c22), ("d12", &s.d12)] {
        for r in 0..block.nrows() {
            for c in 0..block.ncols() {
                let x = block[(r, c)];
                if x > 0 {
                    writeln!(out, "{name}\t{}\t{}\t{x}", r + 1, c + 1)?;
                }
            }
        }
    }
    if !s.totals_estimated {
        for (name, totals) in [("n1", &s.n1), ("n2", &s.n2)] {
            for (w, &x) in totals.iter().enumerate() {
                if x > 0 {
                    writeln!(out, "{name}\t{}\t1\t{x}", w + 1)?;
                }
            }
        }
    }
    for (i, &(a, b)) in s.lengths.iter().enumerate() {
        writeln!(out, "len\t{}\t{a}\t{b}", i + 1)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_summary(s: &CooccurrenceSummary, path: &Path) -> Result<()> {
    let mut out = create_text(path)?;
    write_summary(s, &mut out)?;
    out.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let rest = line.strip_prefix(HEADER_TAG).ok_or_else(|| ClaimeError::Ingest {
        line: 1,
        message: format!("expected header starting with `{HEADER_TAG}`"),
    })?;
    let (mut d1, mut d2, mut n) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| ClaimeError::Ingest {
            line: 1,
            message: format!("malformed header field `{field}`"),
        })?;
        let value: usize = value.parse().map_err(|_| ClaimeError::Ingest {
            line: 1,
            message: format!("header field `{field}` is not a non-negative integer"),
        })?;
        match key {
            "d1" => d1 = Some(value),
            "d2" => d2 = Some(value),
            "n" => n = Some(value),
            _ => {}
        }
    }
    match (d1, d2, n) {
        (Some(d1), Some(d2), Some(n)) => Ok((d1, d2, n)),
        _ => Err(ClaimeError::Ingest { line: 1, message: "header must set d1, d2 and n".into() }),
    }
}

/// Parses the text summary format. Within-modality blocks may be given in
/// full or as their upper triangle only; duplicate cells are rejected.
pub fn read_summary<R: BufRead>(input: R) -> Result<CooccurrenceSummary> {
    let mut lines = input.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(ClaimeError::Ingest { line: 1, message: "empty summary file".into() }),
        }
    };
    let (d1, d2, n) = parse_header(header.trim())?;
    let mut s = CooccurrenceSummary::empty(d1, d2);
    let mut seen = std::collections::HashSet::new();
    let mut lower_given = [false, false];
    let mut totals_given = [false, false];
    let mut lengths: Vec<Option<(u32, u32)>> = vec![None; n];
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ClaimeError::Ingest { line: lineno, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<u64> {
            fields[k].parse::<u64>().map_err(|_| err(format!("field {} (`{}`) is not a non-negative integer", k + 1, fields[k])))
        };
        let (a, b, x) = (num(1)? as usize, num(2)? as usize, num(3)?);
        let in_range = |value: usize, limit: usize, what: &str| -> Result<usize> {
            if value == 0 || value > limit {
                Err(err(format!("{what} {value} outside 1..={limit}")))
            } else {
                Ok(value - 1)
            }
        };
        if fields[0] == "len" {
            let i = in_range(a, n, "patient")?;
            let (t1, t2) = (u32::try_from(b), u32::try_from(x as usize));
            let (Ok(t1), Ok(t2)) = (t1, t2) else { return Err(err("length overflows u32".into())) };
            if lengths[i].replace((t1, t2)).is_some() {
                return Err(err(format!("duplicate lengths for patient {a}")));
            }
            continue;
        }
        let (block, rows, cols): (&mut Counts, usize, usize) = match fields[0] {
            "c11" => (&mut s.c11, d1, d1),
            "c22" => (&mut s.c22, d2, d2),
            "d12" => (&mut s.d12, d1, d2),
            "n1" | "n2" => {
                let m = if fields[0] == "n1" { 0 } else { 1 };
                let d = if m == 0 { d1 } else { d2 };
                let w = in_range(a, d, "row")?;
                if b != 1 {
                    return Err(err("token-total rows use column 1".into()));
                }
                if !seen.insert((fields[0].to_string(), w, 0)) {
                    return Err(err(format!("duplicate entry {} {a}", fields[0])));
                }
                totals_given[m] = true;
                if m == 0 { s.n1[w] = x } else { s.n2[w] = x }
                continue;
            }
            other => return Err(err(format!("unknown block `{other}`"))),
        };
        let r = in_range(a, rows, "row")?;
        let c = in_range(b, cols, "column")?;
        if !seen.insert((fields[0].to_string(), r, c)) {
            return Err(err(format!("duplicate entry {} ({a}, {b})", fields[0])));
        }
        block[(r, c)] = x;
        if r > c && fields[0] != "d12" {
            lower_given[if fields[0] == "c11" { 0 } else { 1 }] = true;
        }
    }
    for (m, block) in [&mut s.c11, &mut s.c22].into_iter().enumerate() {
        if !lower_given[m] {
            block.fill_lower_triangle_with_upper_triangle();
        }
    }
    s.lengths = lengths
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| ClaimeError::Integrity(format!("missing lengths for patient {}", i + 1))))
        .collect::<Result<_>>()?;
    match totals_given {
        [true, true] => {}
        [false, false] => {
            s.n1 = estimate_totals(&s.gamma(1), &s.lengths, 1);
            s.n2 = estimate_totals(&s.gamma(2), &s.lengths, 2);
            s.totals_estimated = true;
        }
        _ => return Err(ClaimeError::Integrity("token totals given for only one modality".into())),
    }
    s.validate()?;
    Ok(s)
}

/// Reads a summary file; gzip input is detected by extension or magic bytes.
pub fn load_summary(path: &Path) -> Result<CooccurrenceSummary> {
    read_summary(open_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::PatientRecord;

    /// codes [1,2] / cuis [3,3] and codes [1,1] / cuis [3,3,3]
    pub(crate) fn toy() -> Cohort {
        Cohort {
            patients: vec![PatientRecord::new(vec![0, 1], vec![0, 0]), PatientRecord::new(vec![0, 0], vec![0, 0, 0])],
            d1: 2,
            d2: 1,
            seed: 0,
        }
    }

    #[test]
    fn toy_counts() {
        let s = accumulate(&toy()).unwrap();
        assert_eq!(s.c11, Counts::from_row_slice(2, 2, &[2, 1, 1, 0]));
        assert_eq!(s.c22[(0, 0)], 8);
        assert_eq!(s.d12, Counts::from_row_slice(2, 1, &[8, 2]));
        assert_eq!(s.ccross(), Mat::from_row_slice(2, 1, &[7.0, 3.0]));
        let m = s.moments().unwrap();
        assert_eq!(m.s1, [2.0, 2.5]);
        assert_eq!(m.s1_joint, 5.0);
        assert_eq!(s.cross_denominator(), 10.0);
        s.validate().unwrap();
    }

    #[test]
    fn repeated_token_gives_two_ordered_pairs() {
        let cohort = Cohort { patients: vec![PatientRecord::new(vec![1, 1], vec![0, 0])], d1: 3, d2: 1, seed: 0 };
        let s = accumulate(&cohort).unwrap();
        assert_eq!(s.c11[(1, 1)], 2);
        assert_eq!(s.c11.iter().sum::<u64>(), 2);
    }

    #[test]
    fn moment_examples() {
        let m = moments(&[(3, 5); 7]).unwrap();
        for q in [m.s1[0], m.s2[0], m.s4[0]] {
            assert!((q - 3.0).abs() < 1e-12);
        }
        for q in [m.s1[1], m.s2[1], m.s4[1]] {
            assert!((q - 5.0).abs() < 1e-12);
        }
        assert_eq!(moments(&[(4, 2)]).unwrap().s2[0], 4.0);
        assert!(matches!(moments(&[]), Err(ClaimeError::Parameter(_))));
    }

    #[test]
    fn out_of_range_token_is_an_ingest_error() {
        let cohort = Cohort { patients: vec![PatientRecord::new(vec![0, 2], vec![0, 0]); 2], d1: 2, d2: 1, seed: 0 };
        assert!(matches!(accumulate(&cohort), Err(ClaimeError::Ingest { .. })));
    }

    #[test]
    fn merge_identity_and_dimension_check() {
        let s = accumulate(&toy()).unwrap();
        assert_eq!(merge(&s, &CooccurrenceSummary::empty(2, 1)).unwrap(), s);
        assert!(matches!(merge(&s, &CooccurrenceSummary::empty(3, 1)), Err(ClaimeError::Dimension(_))));
    }

    #[test]
    fn summary_text_round_trip() {
        let s = accumulate(&toy()).unwrap();
        let mut buf = Vec::new();
        write_summary(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#claime-cooc v1 d1=2 d2=1 n=2\n"));
        assert!(text.contains("d12\t1\t1\t8\n"));
        assert!(text.contains("len\t2\t2\t3\n"));
        assert_eq!(read_summary(&buf[..]).unwrap(), s);
    }

    #[test]
    fn upper_triangle_input_is_mirrored() {
        let text = "#claime-cooc v1 d1=2 d2=1 n=2\nc11\t1\t1\t2\nc11\t1\t2\t1\nc22\t1\t1\t8\nd12\t1\t1\t8\nd12\t2\t1\t2\nn1\t1\t1\t3\nn1\t2\t1\t1\nn2\t1\t1\t5\nlen\t1\t2\t2\nlen\t2\t2\t3\n";
        let s = read_summary(text.as_bytes()).unwrap();
        assert_eq!(s, accumulate(&toy()).unwrap());
    }

    #[test]
    fn ingest_rejects_bad_files() {
        let base = "#claime-cooc v1 d1=2 d2=1 n=2\n";
        let cases = [
            ("", "empty"),
            ("#other v1\n", "header"),
            ("#claime-cooc v1 d1=2 d2=1 n=2\nc11\t3\t1\t2\n", "range"),
            ("#claime-cooc v1 d1=2 d2=1 n=2\nc11\t1\t1\t-2\n", "negative"),
            ("#claime-cooc v1 d1=2 d2=1 n=2\nc33\t1\t1\t2\n", "block"),
            ("#claime-cooc v1 d1=2 d2=1 n=2\nc11\t1\t1\t2\nc11\t1\t1\t2\n", "duplicate"),
        ];
        for (text, why) in cases {
            assert!(matches!(read_summary(text.as_bytes()), Err(ClaimeError::Ingest { .. })), "{why}");
        }
        // odd diagonal, totals inconsistent with lengths
        let bad = format!("{base}c11\t1\t1\t3\nc22\t1\t1\t8\nd12\t1\t1\t10\nn1\t1\t1\t4\nn2\t1\t1\t5\nlen\t1\t2\t2\nlen\t2\t2\t3\n");
        assert!(matches!(read_summary(bad.as_bytes()), Err(ClaimeError::Integrity(_))));
        let missing = format!("{base}c11\t1\t1\t2\nlen\t1\t2\t2\n");
        assert!(matches!(read_summary(missing.as_bytes()), Err(ClaimeError::Integrity(_))));
    }

    #[test]
    fn totals_are_estimated_when_absent() {
        let text = "#claime-cooc v1 d1=2 d2=1 n=2\nc11\t1\t1\t2\nc11\t1\t2\t1\nc22\t1\t1\t8\nd12\t1\t1\t8\nd12\t2\t1\t2\nlen\t1\t2\t2\nlen\t2\t2\t3\n";
        let s = read_summary(text.as_bytes()).unwrap();
        assert!(s.totals_estimated);
        // all modality-1 lengths equal 2, so γ_w = N(w) exactly
        assert_eq!(s.n1, vec![3, 1]);
        assert_eq!(s.n2, vec![5]);
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = accumulate(&toy()).unwrap();
        let path = dir.path().join("toy.tsv.gz");
        save_summary(&s, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        assert_eq!(load_summary(&path).unwrap(), s);
        // magic-byte sniffing without the extension
        let renamed = dir.path().join("toy.bin");
        std::fs::copy(&path, &renamed).unwrap();
        assert_eq!(load_summary(&renamed).unwrap(), s);
    }
}
