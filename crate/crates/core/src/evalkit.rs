//! Evaluation metrics: the simulation error metric, known-pair AUC of cosine
//! similarities, cosine queries and Kendall's tau-b.
//!
//! Feature ids in files are global and 1-based (modality-2 ids start at
//! `d1 + 1`); in memory they are 0-based rows of the stacked embedding.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ClaimeError, Result};
use crate::gen::TrueEmbeddings;
use crate::linalg::Mat;
use crate::seed::{derive_seed, seeded_rng};
use crate::spectral::EmbeddingFactorization;

/// `max_M ‖V̂_M V̂_Mᵀ − V*_M V*_Mᵀ‖_F`
pub fn err_metric(fhat: &EmbeddingFactorization, truth: &TrueEmbeddings) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for m in [1u8, 2] {
        let (a, b) = (fhat.block(m), truth.block(m));
        if a.nrows() != b.nrows() {
            return Err(ClaimeError::Parameter(format!(
                "modality {m}: estimate has {} features, truth has {}",
                a.nrows(),
                b.nrows()
            )));
        }
        worst = worst.max((a * a.transpose() - b * b.transpose()).norm());
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairClass {
    Similar,
    Related,
}

impl PairClass {
    pub fn name(self) -> &'static str {
        match self {
            PairClass::Similar => "similar",
            PairClass::Related => "related",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownPair {
    pub a: usize,
    pub b: usize,
    pub label: String,
    pub class: PairClass,
}

/// Population the random comparison pairs are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullSpec {
    /// each endpoint replaced by a feature of the same semantic type
    #[default]
    SameSemanticType,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub feature_id: usize,
    pub modality: u8,
    pub code_string: String,
    pub description: String,
}

impl FeatureEntry {
    /// Code-system prefix before the first `:` (the whole code if none).
    pub fn semantic_type(&self) -> &str {
        self.code_string.split(':').next().unwrap_or("")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDictionary {
    pub entries: Vec<FeatureEntry>,
    rows: HashMap<usize, usize>,
}

impl FeatureDictionary {
    pub fn new(entries: Vec<FeatureEntry>) -> Result<Self> {
        let mut rows = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.feature_id == 0 {
                return Err(ClaimeError::Ingest { line: i + 2, message: "feature ids are 1-based".into() });
            }
            if rows.insert(e.feature_id, i).is_some() {
                return Err(ClaimeError::Ingest { line: i + 2, message: format!("duplicate feature id {}", e.feature_id) });
            }
        }
        Ok(FeatureDictionary { entries, rows })
    }

    pub fn get(&self, feature_id: usize) -> Option<&FeatureEntry> {
        self.rows.get(&feature_id).map(|&i| &self.entries[i])
    }

    /// Reads `feature_id,modality,code_string,description`.
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let entries = reader.deserialize().collect::<std::result::Result<Vec<FeatureEntry>, _>>()?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnownPairSet {
    pub pairs: Vec<KnownPair>,
    pub null_spec: NullSpec,
}

#[derive(Deserialize)]
struct PairRow {
    feature_a: usize,
    feature_b: usize,
    label: String,
    pair_class: PairClass,
}

impl KnownPairSet {
    /// Reads `feature_a,feature_b,label,pair_class` with 1-based global ids.
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let mut pairs = Vec::new();
        for (i, row) in reader.deserialize::<PairRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            if row.feature_a == 0 || row.feature_b == 0 {
                return Err(ClaimeError::Ingest { line, message: "feature ids are 1-based".into() });
            }
            if row.feature_a == row.feature_b {
                return Err(ClaimeError::Ingest { line, message: format!("self-pair {}", row.feature_a) });
            }
            pairs.push(KnownPair { a: row.feature_a - 1, b: row.feature_b - 1, label: row.label, class: row.pair_class });
        }
        Ok(KnownPairSet { pairs, null_spec: NullSpec::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Mann–Whitney AUC, `P(known > null) + ½ P(tie)`, from midranks. `None`
/// when either side is empty.
pub fn auc_scores(known: &[f64], null: &[f64]) -> Option<f64> {
    if known.is_empty() || null.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = known.iter().map(|&x| (x, true)).chain(null.iter().map(|&x| (x, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // midrank of positions i..=j (1-based)
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (n1, n0) = (known.len() as f64, null.len() as f64);
    Some((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Cosine similarity of two rows, `None` if either has zero norm.
pub fn cosine(m: &Mat, a: usize, b: usize) -> Option<f64> {
    let (x, y) = (m.row(a), m.row(b));
    let denom = x.norm() * y.norm();
    (denom > 0.0).then(|| x.dot(&y) / denom)
}

/// Rows ranked by cosine to `query`, descending, ties by row index.
pub fn cosine_topk(emb: &Mat, query: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if query >= emb.nrows() {
        return Err(ClaimeError::Parameter(format!("feature row {query} out of range")));
    }
    let qn = emb.row(query).norm();
    if qn == 0.0 {
        return Err(ClaimeError::UndefinedSimilarity(format!("feature row {query} has a zero embedding")));
    }
    let mut scored: Vec<(usize, f64)> = (0..emb.nrows())
        .into_par_iter()
        .filter(|&j| j != query)
        .map(|j| {
            let n = emb.row(j).norm();
            let c = if n > 0.0 { emb.row(query).dot(&emb.row(j)) / (qn * n) } else { 0.0 };
            (j, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Kendall's tau-b over all pairs.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(ClaimeError::Parameter(format!("need two equal-length lists of at least 2 scores, got {} and {}", x.len(), y.len())));
    }
    let (mut concordant, mut discordant, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let sx = (x[i] - x[j]).partial_cmp(&0.0).map(|o| o as i64).unwrap_or(0);
            let sy = (y[i] - y[j]).partial_cmp(&0.0).map(|o| o as i64).unwrap_or(0);
            match (sx, sy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if sx == sy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant) as f64;
    let denom = ((n0 + tx as f64) * (n0 + ty as f64)).sqrt();
    if denom == 0.0 {
        return Err(ClaimeError::UndefinedCorrelation("a score list is constant".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub pair_type: PairClass,
    pub group: String,
    pub method: String,
    pub auc: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub rows: Vec<AucRow>,
    pub warnings: Vec<String>,
}

/// AUC of known-pair cosines against random pairs, one row per
/// (pair class, relation label). Each known pair gets `null_draws` random
/// partners: endpoints are redrawn with replacement, uniformly among
/// features of the same semantic type (or among all features under
/// [`NullSpec::Uniform`]) that have a nonzero embedding.
pub fn auc_known_pairs(
    emb: &EmbeddingFactorization,
    known: &KnownPairSet,
    dict: &FeatureDictionary,
    null_draws: usize,
    seed: u64,
) -> Result<AucReport> {
    let rows = emb.vhat();
    let d = rows.nrows();
    for pair in &known.pairs {
        for f in [pair.a, pair.b] {
            if f >= d {
                return Err(ClaimeError::Parameter(format!("feature {} is outside the embedding ({d} rows)", f + 1)));
            }
            if known.null_spec == NullSpec::SameSemanticType && dict.get(f + 1).is_none() {
                return Err(ClaimeError::Parameter(format!("feature {} is missing from the dictionary", f + 1)));
            }
        }
    }
    let nonzero: Vec<bool> = rows.row_iter().map(|r| r.norm() > 0.0).collect();
    let mut pools: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for f in (0..d).filter(|&f| nonzero[f]) {
        let key = match known.null_spec {
            NullSpec::Uniform => String::new(),
            NullSpec::SameSemanticType => dict.get(f + 1).map(|e| e.semantic_type().to_string()).unwrap_or_default(),
        };
        pools.entry(key).or_default().push(f);
    }
    let pool_of = |f: usize| -> &[usize] {
        let key = match known.null_spec {
            NullSpec::Uniform => "",
            NullSpec::SameSemanticType => dict.get(f + 1).map(|e| e.semantic_type()).unwrap_or(""),
        };
        pools.get(key).map(|v| v.as_slice()).unwrap_or(&[])
    };

    let mut groups: BTreeMap<(PairClass, String), Vec<&KnownPair>> = BTreeMap::new();
    for pair in &known.pairs {
        groups.entry((pair.class, pair.label.clone())).or_default().push(pair);
    }
    let results: Vec<(Option<AucRow>, Vec<String>)> = groups
        .par_iter()
        .map(|((class, label), pairs)| {
            let mut warnings = Vec::new();
            let mut rng = seeded_rng(derive_seed(&[&seed.to_string(), class.name(), label]));
            let mut scores = Vec::with_capacity(pairs.len());
            let mut nulls = Vec::with_capacity(pairs.len() * null_draws);
            for pair in pairs {
                let Some(s) = cosine(&rows, pair.a, pair.b) else {
                    warnings.push(format!("pair ({}, {}) has a zero embedding and is skipped", pair.a + 1, pair.b + 1));
                    continue;
                };
                scores.push(s);
                let (pa, pb) = (pool_of(pair.a), pool_of(pair.b));
                for _ in 0..null_draws {
                    if pa.is_empty() || pb.is_empty() || (pa.len() == 1 && pa == pb) {
                        break;
                    }
                    loop {
                        let x = pa[rng.random_range(0..pa.len())];
                        let y = pb[rng.random_range(0..pb.len())];
                        if x != y {
                            nulls.push(cosine(&rows, x, y).expect("pools hold nonzero rows"));
                            break;
                        }
                    }
                }
            }
            match auc_scores(&scores, &nulls) {
                Some(auc) => (
                    Some(AucRow { pair_type: *class, group: label.clone(), method: emb.method.name().to_string(), auc, count: scores.len() }),
                    warnings,
                ),
                None => {
                    warnings.push(format!("group {}/{} has no scorable pairs and is skipped", class.name(), label));
                    (None, warnings)
                }
            }
        })
        .collect();
    let mut report = AucReport::default();
    for (row, warnings) in results {
        report.rows.extend(row);
        report.warnings.extend(warnings);
    }
    Ok(report)
}

/// CSV with columns `pair_type,group,method,auc,count`.
pub fn write_auc_report<W: Write>(rows: &[AucRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair_type", "group", "method", "auc", "count"])?;
    for r in rows {
        w.write_record([r.pair_type.name(), &r.group, &r.method, &format!("{:.17}", r.auc), &r.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Method;

    fn factorization(rows: Mat, d1: usize) -> EmbeddingFactorization {
        let p = rows.ncols();
        EmbeddingFactorization::from_joint(Method::Claime, &rows, d1, vec![1.0; p], None)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_scores(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
        assert_eq!(auc_scores(&[0.4, 0.4], &[0.4, 0.4, 0.4]), Some(0.5));
        assert_eq!(auc_scores(&[0.9, 0.3], &[0.5, 0.1]), Some(0.75));
        assert_eq!(auc_scores(&[], &[0.5]), None);
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(ClaimeError::UndefinedCorrelation(_))));
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn kendall_tau_b_with_ties() {
        // x = (1,1,2), y = (1,2,3): one x-tie, two concordant pairs
        let tau = kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((tau - 2.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cosine_queries() {
        let m = Mat::from_row_slice(3, 2, &[1.0, 2.0, 0.5, 0.0, 1.0, 2.0]);
        let top = cosine_topk(&m, 0, 2).unwrap();
        assert_eq!(top[0].0, 2);
        assert!((top[0].1 - 1.0).abs() < 1e-15);
        let ortho = Mat::identity(3, 3);
        assert!(cosine_topk(&ortho, 1, 5).unwrap().iter().all(|&(_, c)| c == 0.0));
        let zero = Mat::zeros(2, 2);
        assert!(matches!(cosine_topk(&zero, 0, 1), Err(ClaimeError::UndefinedSimilarity(_))));
    }

    #[test]
    fn cosine_ranking_by_hand() {
        let m = Mat::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, -1.0, 0.0, 2.0, 0.0]);
        let top = cosine_topk(&m, 0, 10).unwrap();
        let ids: Vec<usize> = top.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![4, 1, 2, 3]);
        let h = 0.5f64.sqrt();
        let expected = [1.0, h, 0.0, -1.0];
        for ((_, c), e) in top.iter().zip(expected) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn err_metric_examples() {
        let truth = crate::gen::make_embeddings(6, 4, 2, 7).unwrap();
        let exact = EmbeddingFactorization {
            method: Method::Claime,
            v1hat: truth.v1.clone(),
            v2hat: truth.v2.clone(),
            singvals: vec![1.0, 1.0],
            basis: None,
            warnings: vec![],
        };
        assert!(err_metric(&exact, &truth).unwrap() < 1e-14);
        let q = crate::linalg::haar_orthogonal(2, &mut seeded_rng(1));
        let rotated = EmbeddingFactorization { v1hat: &truth.v1 * &q, v2hat: &truth.v2 * q.transpose(), ..exact.clone() };
        assert!(err_metric(&rotated, &truth).unwrap() < 1e-14);
        let zero = EmbeddingFactorization { v1hat: Mat::zeros(6, 2), v2hat: Mat::zeros(4, 2), ..exact.clone() };
        let dense = |v: &Mat| (v * v.transpose()).norm();
        let expected = dense(&truth.v1).max(dense(&truth.v2));
        assert!((err_metric(&zero, &truth).unwrap() - expected).abs() < 1e-14);
        let lam = |l: &[f64]| l.iter().map(|x| x.powi(4)).sum::<f64>().sqrt();
        assert!((expected - lam(&truth.lambda1).max(lam(&truth.lambda2))).abs() < 1e-12);
        let bad = EmbeddingFactorization { v1hat: Mat::zeros(5, 2), ..exact };
        assert!(matches!(err_metric(&bad, &truth), Err(ClaimeError::Parameter(_))));
    }

    #[test]
    fn csv_loaders() {
        let dict = FeatureDictionary::read("feature_id,modality,code_string,description\n1,1,PheCode:250,diabetes\n2,2,RXNORM:6809,metformin\n".as_bytes()).unwrap();
        assert_eq!(dict.get(2).unwrap().semantic_type(), "RXNORM");
        let pairs = KnownPairSet::read("feature_a,feature_b,label,pair_class\n1,2,may_treat,related\n".as_bytes()).unwrap();
        assert_eq!(pairs.pairs[0], KnownPair { a: 0, b: 1, label: "may_treat".into(), class: PairClass::Related });
        assert!(KnownPairSet::read("feature_a,feature_b,label,pair_class\n3,3,x,similar\n".as_bytes()).is_err());
        assert!(FeatureDictionary::read("feature_id,modality,code_string,description\n1,1,a,b\n1,1,a,b\n".as_bytes()).is_err());
    }

    fn typed_dict(d: usize) -> FeatureDictionary {
        FeatureDictionary::new(
            (1..=d)
                .map(|i| FeatureEntry { feature_id: i, modality: 1, code_string: format!("T{}:{i}", i % 2), description: String::new() })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn known_pair_auc_separates_clusters_and_replays() {
        // two tight clusters; known pairs sit within clusters
        let d = 40;
        let mut rng = seeded_rng(5);
        let mut m = crate::linalg::standard_normal_matrix(d, 8, &mut rng) * 0.01;
        for i in 0..d {
            m[(i, i % 4)] += 1.0;
        }
        let pairs: Vec<KnownPair> = (0..d - 4)
            .map(|i| KnownPair { a: i, b: i + 4, label: "same".into(), class: PairClass::Similar })
            .collect();
        let known = KnownPairSet { pairs, null_spec: NullSpec::SameSemanticType };
        let report = auc_known_pairs(&factorization(m.clone(), d / 2), &known, &typed_dict(d), 1, 3).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].auc > 0.7, "{:?}", report.rows);
        assert_eq!(report.rows[0].count, d - 4);
        let again = auc_known_pairs(&factorization(m, d / 2), &known, &typed_dict(d), 1, 3).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn null_pairs_respect_semantic_type() {
        // type T0 rows point one way, T1 rows the other: same-type null
        // pairs always score 1
        let d = 10;
        let m = Mat::from_fn(d, 2, |i, j| if (i + 1) % 2 == j { 1.0 } else { 0.0 });
        let known = KnownPairSet {
            pairs: vec![KnownPair { a: 1, b: 3, label: "x".into(), class: PairClass::Related }],
            null_spec: NullSpec::SameSemanticType,
        };
        let report = auc_known_pairs(&factorization(m, 5), &known, &typed_dict(d), 50, 0).unwrap();
        assert_eq!(report.rows[0].auc, 0.5);
    }

    #[test]
    fn report_csv_layout() {
        let rows = vec![AucRow { pair_type: PairClass::Similar, group: "g".into(), method: "CLAIME".into(), auc: 0.75, count: 4 }];
        let mut buf = Vec::new();
        write_auc_report(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pair_type,group,method,auc,count\nsimilar,g,CLAIME,0.75000000000000000,4\n");
    }
}
