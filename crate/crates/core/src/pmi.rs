//! Empirical association matrices and the Monte-Carlo population oracle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooc::CooccurrenceSummary;
use crate::error::{ClaimeError, Result};
use crate::gen::{softmax_probabilities, LatentScale, NoiseCovariance, PatientSampler, SampleOptions, TrueEmbeddings};
use crate::linalg::Mat;
use crate::seed::{stream_rng, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmiKind {
    Claime,
    ConcatLog,
    Cl,
    PopulationCross,
    PopulationJoint,
}

impl PmiKind {
    pub fn code(self) -> u32 {
        match self {
            PmiKind::Claime => 0,
            PmiKind::ConcatLog => 1,
            PmiKind::Cl => 2,
            PmiKind::PopulationCross => 3,
            PmiKind::PopulationJoint => 4,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => PmiKind::Claime,
            1 => PmiKind::ConcatLog,
            2 => PmiKind::Cl,
            3 => PmiKind::PopulationCross,
            4 => PmiKind::PopulationJoint,
            _ => return None,
        })
    }

    pub fn is_joint(self) -> bool {
        matches!(self, PmiKind::ConcatLog | PmiKind::Cl | PmiKind::PopulationJoint)
    }
}

/// Treatment of empty cells in the log-PMI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ZeroPolicy {
    /// Empty cells map to 0.
    #[default]
    Zero,
    /// Empty cells are treated as holding `eps` counts.
    Floor { eps: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub estimator: String,
    pub params: BTreeMap<String, f64>,
    pub source_digest: Option<String>,
    /// 1-based features removed for a zero marginal, per modality.
    pub dropped1: Vec<usize>,
    pub dropped2: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmiMatrix {
    #[serde(skip)]
    pub values: Mat,
    pub kind: PmiKind,
    pub d1: usize,
    pub d2: usize,
    pub provenance: Provenance,
}

impl PmiMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Block `(M, M')` of a joint matrix.
    pub fn block(&self, m: u8, m2: u8) -> Result<Mat> {
        if !self.kind.is_joint() {
            return Err(ClaimeError::Parameter("blocks are defined for joint matrices only".into()));
        }
        let range = |m: u8| if m == 1 { (0, self.d1) } else { (self.d1, self.d2) };
        let ((r0, nr), (c0, nc)) = (range(m), range(m2));
        Ok(self.values.view((r0, c0), (nr, nc)).into_owned())
    }

    /// Binary `CPMI` layout plus `<path>.json` provenance sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(b"CPMI")?;
        out.write_all(&self.kind.code().to_le_bytes())?;
        out.write_all(&(self.rows() as u64).to_le_bytes())?;
        out.write_all(&(self.cols() as u64).to_le_bytes())?;
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                out.write_all(&self.values[(r, c)].to_le_bytes())?;
            }
        }
        out.flush()?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"CPMI" {
            return Err(ClaimeError::Ingest { line: 0, message: "missing CPMI magic".into() });
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let kind = PmiKind::from_code(u32::from_le_bytes(word))
            .ok_or_else(|| ClaimeError::Ingest { line: 0, message: "unknown PMI kind".into() })?;
        let mut long = [0u8; 8];
        input.read_exact(&mut long)?;
        let rows = u64::from_le_bytes(long) as usize;
        input.read_exact(&mut long)?;
        let cols = u64::from_le_bytes(long) as usize;
        let mut values = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                input.read_exact(&mut long)?;
                values[(r, c)] = f64::from_le_bytes(long);
            }
        }
        let mut meta: PmiMatrix = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        if meta.kind != kind {
            return Err(ClaimeError::Integrity("CPMI kind differs from its sidecar".into()));
        }
        meta.values = values;
        Ok(meta)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn dropped(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i + 1).collect()
}

fn denominator(s: &CooccurrenceSummary) -> Result<f64> {
    let den = s.cross_denominator();
    if s.n() < 2 || !(den > 0.0) {
        return Err(ClaimeError::DegenerateCohort(format!(
            "cross-patient denominator n(n S1 S1 - S12) = {den} with n = {}",
            s.n()
        )));
    }
    Ok(den)
}

fn base_provenance(estimator: &str, s: &CooccurrenceSummary) -> Provenance {
    let mut prov = Provenance {
        estimator: estimator.into(),
        source_digest: Some(s.digest()),
        ..Provenance::default()
    };
    prov.params.insert("n".into(), s.n() as f64);
    if s.totals_estimated {
        prov.warnings.push("token totals were estimated from marginals".into());
    }
    prov
}

/// Linear cross-modal association estimator; approximately
/// `p_{w,w'} / (p_w p_{w'}) − 1` for `w` in modality 1 and `w'` in modality 2.
pub fn pmi_claime(s: &CooccurrenceSummary) -> Result<PmiMatrix> {
    let den = denominator(s)?;
    let (g1, g2) = (s.gamma(1), s.gamma(2));
    let (tot1, tot2): (f64, f64) = (g1.iter().sum(), g2.iter().sum());
    let d_total: f64 = s.d12.iter().map(|&x| x as f64).sum();
    let cc = s.ccross();
    let values = Mat::from_fn(s.d1, s.d2, |w, v| {
        if g1[w] <= 0.0 || g2[v] <= 0.0 {
            return 0.0;
        }
        tot1 * tot2 / (g1[w] * g2[v]) * (s.d12[(w, v)] as f64 / d_total - cc[(w, v)] / den)
    });
    let (m1, m2) = s.feature_mask();
    let mut provenance = base_provenance("claime", s);
    provenance.dropped1 = dropped(&m1);
    provenance.dropped2 = dropped(&m2);
    Ok(PmiMatrix { values, kind: PmiKind::Claime, d1: s.d1, d2: s.d2, provenance })
}

fn joint_mask(gamma: &[f64], d1: usize) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = gamma.iter().map(|&g| g > 0.0).collect();
    let all = dropped(&keep);
    let (a, b): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&w| w <= d1);
    (a, b.into_iter().map(|w| w - d1).collect())
}

/// Log-PMI of the concatenated count matrix.
pub fn pmi_concat(s: &CooccurrenceSummary, policy: ZeroPolicy) -> Result<PmiMatrix> {
    if let ZeroPolicy::Floor { eps } = policy {
        if !(eps > 0.0) {
            return Err(ClaimeError::Parameter(format!("floor policy needs eps > 0 (got {eps})")));
        }
    }
    let c = s.joint_counts();
    let gamma: Vec<f64> = c.row_iter().map(|r| r.sum()).collect();
    let total: f64 = gamma.iter().sum();
    let d = s.d();
    let mut values = Mat::zeros(d, d);
    for w in 0..d {
        for v in w..d {
            if gamma[w] <= 0.0 || gamma[v] <= 0.0 {
                continue;
            }
            let count = match (c[(w, v)], policy) {
                (x, _) if x > 0.0 => x,
                (_, ZeroPolicy::Zero) => continue,
                (_, ZeroPolicy::Floor { eps }) => eps,
            };
            let x = (count * total / (gamma[w] * gamma[v])).ln();
            values[(w, v)] = x;
            values[(v, w)] = x;
        }
    }
    let mut provenance = base_provenance("concate", s);
    if let ZeroPolicy::Floor { eps } = policy {
        provenance.params.insert("zero_floor".into(), eps);
    }
    (provenance.dropped1, provenance.dropped2) = joint_mask(&gamma, s.d1);
    Ok(PmiMatrix { values, kind: PmiKind::ConcatLog, d1: s.d1, d2: s.d2, provenance })
}

/// Linear association matrix of the concatenated contrastive loss.
pub fn pmi_cl(s: &CooccurrenceSummary) -> Result<PmiMatrix> {
    let den = denominator(s)?;
    let c = s.joint_counts();
    let cross = s.joint_cross();
    let gamma: Vec<f64> = c.row_iter().map(|r| r.sum()).collect();
    let total: f64 = gamma.iter().sum();
    let d = s.d();
    let mut values = Mat::zeros(d, d);
    for w in 0..d {
        for v in w..d {
            if gamma[w] <= 0.0 || gamma[v] <= 0.0 {
                continue;
            }
            let x = total * total / (gamma[w] * gamma[v]) * (c[(w, v)] / total - cross[(w, v)] / den);
            values[(w, v)] = x;
            values[(v, w)] = x;
        }
    }
    let mut provenance = base_provenance("cl", s);
    (provenance.dropped1, provenance.dropped2) = joint_mask(&gamma, s.d1);
    Ok(PmiMatrix { values, kind: PmiKind::Cl, d1: s.d1, d2: s.d2, provenance })
}

/// Population PMI estimate with per-entry delta-method standard errors.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub pmi: PmiMatrix,
    pub std_errors: Mat,
    /// `p_w` over the concatenated vocabulary
    pub marginals: Vec<f64>,
    /// `p_{w,w'}` over the concatenated vocabulary
    pub joint: Mat,
    pub draws: usize,
}

impl OracleResult {
    /// Cross-modal block `PMI^{(1,2)}` as its own matrix.
    pub fn cross(&self) -> PmiMatrix {
        let d1 = self.pmi.d1;
        PmiMatrix {
            values: self.pmi.values.view((0, d1), (d1, self.pmi.d2)).into_owned(),
            kind: PmiKind::PopulationCross,
            d1,
            d2: self.pmi.d2,
            provenance: self.pmi.provenance.clone(),
        }
    }

    pub fn cross_std_errors(&self) -> Mat {
        self.std_errors.view((0, self.pmi.d1), (self.pmi.d1, self.pmi.d2)).into_owned()
    }
}

#[derive(Clone)]
struct OracleSums {
    s1: DVector<f64>,
    s2: Mat,
    s3: Mat,
    s4: Mat,
}

impl OracleSums {
    fn new(d: usize) -> Self {
        OracleSums { s1: DVector::zeros(d), s2: Mat::zeros(d, d), s3: Mat::zeros(d, d), s4: Mat::zeros(d, d) }
    }

    fn add_batch(&mut self, probs: &Mat) {
        let squared = probs.component_mul(probs);
        for row in probs.row_iter() {
            self.s1 += row.transpose();
        }
        self.s2 += probs.transpose() * probs;
        self.s3 += squared.transpose() * probs;
        self.s4 += squared.transpose() * &squared;
    }

    fn absorb(&mut self, other: &OracleSums) {
        self.s1 += &other.s1;
        self.s2 += &other.s2;
        self.s3 += &other.s3;
        self.s4 += &other.s4;
    }
}

const ORACLE_BATCH: usize = 1024;

/// Monte-Carlo population PMI over draws of `(c, ε)`:
/// `log( E[p_w p_{w'}] / (E[p_w] E[p_{w'}]) )` on the concatenated vocabulary.
pub fn population_pmi_oracle(
    emb: &TrueEmbeddings,
    cov: &NoiseCovariance,
    latent: LatentScale,
    mc: usize,
    seed: u64,
) -> Result<OracleResult> {
    if mc < 2 {
        return Err(ClaimeError::Parameter(format!("oracle needs at least two draws (got {mc})")));
    }
    let opts = SampleOptions { latent, ..SampleOptions::default() };
    let sampler = PatientSampler::new(emb, cov, opts)?;
    let (d1, d) = (emb.d1(), emb.d());
    let stream_seed = sub_seed(seed, "population-oracle");
    let chunk = ORACLE_BATCH * (mc / (64 * ORACLE_BATCH)).max(4);
    let chunks = mc.div_ceil(chunk);
    let partials: Vec<OracleSums> = (0..chunks)
        .into_par_iter()
        .map(|k| -> Result<OracleSums> {
            let mut sums = OracleSums::new(d);
            let (start, end) = (k * chunk, ((k + 1) * chunk).min(mc));
            let mut batch_start = start;
            while batch_start < end {
                let batch_end = (batch_start + ORACLE_BATCH).min(end);
                let mut probs = Mat::zeros(batch_end - batch_start, d);
                for (row, draw) in (batch_start..batch_end).enumerate() {
                    let mut rng = stream_rng(stream_seed, draw as u64);
                    let c = sampler.draw_latent(&mut rng);
                    let e1 = sampler.draw_noise(1, &mut rng);
                    let e2 = sampler.draw_noise(2, &mut rng);
                    let p1 = softmax_probabilities(&emb.v1, &c, &e1);
                    let p2 = softmax_probabilities(&emb.v2, &c, &e2);
                    for (j, x) in p1.into_iter().chain(p2).enumerate() {
                        if !x.is_finite() {
                            return Err(ClaimeError::numeric(format!("non-finite softmax in draw {draw}")));
                        }
                        probs[(row, j)] = x;
                    }
                }
                sums.add_batch(&probs);
                batch_start = batch_end;
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut sums = OracleSums::new(d);
    for part in &partials {
        sums.absorb(part);
    }
    let m = mc as f64;
    let marg: Vec<f64> = sums.s1.iter().map(|x| x / m).collect();
    let joint = &sums.s2 / m;
    let mut values = Mat::zeros(d, d);
    let mut se = Mat::zeros(d, d);
    for w in 0..d {
        for v in 0..d {
            let (a, bw, bv) = (joint[(w, v)], marg[w], marg[v]);
            values[(w, v)] = (a / (bw * bv)).ln();
            // variance of the influence function X/A − Y/B_w − Z/B_v
            let var = sums.s4[(w, v)] / m / (a * a)
                + joint[(w, w)] / (bw * bw)
                + joint[(v, v)] / (bv * bv)
                - 2.0 * sums.s3[(w, v)] / m / (a * bw)
                - 2.0 * sums.s3[(v, w)] / m / (a * bv)
                + 2.0 * a / (bw * bv)
                - 1.0;
            se[(w, v)] = (var.max(0.0) / m).sqrt();
        }
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(ClaimeError::numeric("population PMI has non-finite entries"));
    }
    let mut provenance = Provenance { estimator: "population_oracle".into(), ..Provenance::default() };
    provenance.params.insert("mc".into(), m);
    provenance.params.insert("seed".into(), seed as f64);
    Ok(OracleResult {
        pmi: PmiMatrix { values, kind: PmiKind::PopulationJoint, d1, d2: emb.d2(), provenance },
        std_errors: se,
        marginals: marg,
        joint,
        draws: mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooc::accumulate;
    use crate::gen::{Cohort, PatientRecord};

    fn toy() -> CooccurrenceSummary {
        accumulate(&Cohort {
            patients: vec![PatientRecord::new(vec![0, 1], vec![0, 0]), PatientRecord::new(vec![0, 0], vec![0, 0, 0])],
            d1: 2,
            d2: 1,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn claime_toy_entries() {
        let m = pmi_claime(&toy()).unwrap();
        assert!((m.values[(0, 0)] - 2.0 / 15.0).abs() < 1e-12);
        assert!((m.values[(1, 0)] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn claime_balanced_pair_is_zero() {
        let s = accumulate(&Cohort {
            patients: vec![PatientRecord::new(vec![0, 0], vec![0, 0]); 2],
            d1: 1,
            d2: 1,
            seed: 0,
        })
        .unwrap();
        assert_eq!(pmi_claime(&s).unwrap().values[(0, 0)], 0.0);
    }

    #[test]
    fn single_patient_is_degenerate() {
        let s = accumulate(&Cohort { patients: vec![PatientRecord::new(vec![0, 0], vec![0, 0])], d1: 1, d2: 1, seed: 0 })
            .unwrap();
        assert!(matches!(pmi_claime(&s), Err(ClaimeError::DegenerateCohort(_))));
        assert!(matches!(pmi_cl(&s), Err(ClaimeError::DegenerateCohort(_))));
    }

    #[test]
    fn concat_toy_entry_and_zero_cell() {
        let m = pmi_concat(&toy(), ZeroPolicy::Zero).unwrap();
        assert!((m.values[(0, 2)] - (256.0f64 / 198.0).ln()).abs() < 1e-12);
        assert!((m.values[(0, 2)] - 0.256910).abs() < 1e-6);
        // C(2,2) = 0
        assert_eq!(m.values[(1, 1)], 0.0);
        let floored = pmi_concat(&toy(), ZeroPolicy::Floor { eps: 0.5 }).unwrap();
        assert!((floored.values[(1, 1)] - (0.5f64 * 32.0 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn independence_consistent_counts_give_zero() {
        // joint counts proportional to an outer product: C = g gᵀ with g = (1, 2 | 2)
        let mut s = CooccurrenceSummary::empty(2, 1);
        s.c11 = crate::cooc::Counts::from_row_slice(2, 2, &[2, 4, 4, 8]);
        s.c22 = crate::cooc::Counts::from_row_slice(1, 1, &[8]);
        s.d12 = crate::cooc::Counts::from_row_slice(2, 1, &[4, 8]);
        let m = pmi_concat(&s, ZeroPolicy::Zero).unwrap();
        assert!(m.values.amax() < 1e-12);
    }

    #[test]
    fn cl_is_exactly_symmetric() {
        let m = pmi_cl(&toy()).unwrap();
        assert_eq!(m.values, m.values.transpose());
    }

    #[test]
    fn zero_marginal_features_are_masked() {
        let s = accumulate(&Cohort {
            patients: vec![PatientRecord::new(vec![0, 0], vec![1, 1]), PatientRecord::new(vec![0, 2], vec![1, 1])],
            d1: 3,
            d2: 2,
            seed: 0,
        })
        .unwrap();
        let m = pmi_claime(&s).unwrap();
        assert_eq!(m.provenance.dropped1, vec![2]);
        assert_eq!(m.provenance.dropped2, vec![1]);
        assert!(m.values.row(1).iter().all(|&x| x == 0.0));
        assert!(m.values.iter().all(|x| x.is_finite()));
        let c = pmi_cl(&s).unwrap();
        assert_eq!(c.provenance.dropped1, vec![2]);
        assert_eq!(c.provenance.dropped2, vec![1]);
        assert!(c.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn oracle_uniform_case_is_zero() {
        let emb = TrueEmbeddings::from_blocks(Mat::zeros(3, 1), Mat::zeros(4, 1)).unwrap();
        let cov = NoiseCovariance::zero(3, 4);
        let res = population_pmi_oracle(&emb, &cov, LatentScale::InverseDim, 100, 1).unwrap();
        assert!(res.pmi.values.amax() < 1e-12);
        assert!((res.marginals[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((res.joint[(0, 4)] - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_is_deterministic() {
        let emb = crate::gen::make_embeddings(5, 4, 2, 3).unwrap();
        let cov = NoiseCovariance::zero(5, 4);
        let a = population_pmi_oracle(&emb, &cov, LatentScale::InverseDim, 5000, 9).unwrap();
        let b = population_pmi_oracle(&emb, &cov, LatentScale::InverseDim, 5000, 9).unwrap();
        assert_eq!(a.pmi.values, b.pmi.values);
        assert!(a.std_errors.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn cpmi_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.cpmi");
        let m = pmi_cl(&toy()).unwrap();
        m.save(&path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"CPMI");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(raw[8..16].try_into().unwrap()), 3);
        assert_eq!(raw.len(), 24 + 9 * 8);
        assert_eq!(PmiMatrix::load(&path).unwrap(), m);
    }
}
