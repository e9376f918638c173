//! Rank-p spectral solvers, embedding factorizations and subspace geometry.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClaimeError, Result};
use crate::gen::{stack, TrueEmbeddings};
use crate::linalg::{self, Mat};
use crate::pmi::{PmiKind, PmiMatrix};
use crate::seed::{seeded_rng, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CLAIME", alias = "claime")]
    Claime,
    #[serde(rename = "Concate", alias = "concate")]
    Concate,
    #[serde(rename = "CL", alias = "cl")]
    Cl,
    #[serde(rename = "CLAIME-GD", alias = "claime-gd", alias = "claime_gd")]
    ClaimeGd,
    #[serde(rename = "CL-GD", alias = "cl-gd", alias = "cl_gd")]
    ClGd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Claime, Method::Concate, Method::Cl, Method::ClaimeGd, Method::ClGd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Claime => "CLAIME",
            Method::Concate => "Concate",
            Method::Cl => "CL",
            Method::ClaimeGd => "CLAIME-GD",
            Method::ClGd => "CL-GD",
        }
    }

    /// Whether the estimate is a single symmetric factor over both modalities.
    pub fn is_joint(self) -> bool {
        matches!(self, Method::Concate | Method::Cl | Method::ClGd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = ClaimeError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('-', "_").eq_ignore_ascii_case(s))
            .ok_or_else(|| ClaimeError::Parameter(format!("unknown method `{s}`")))
    }
}

/// Estimated embeddings of both modalities.
///
/// Joint estimators hold their eigenvector basis in `basis` (`d × p`); the
/// blocks `v1hat`, `v2hat` are then the row blocks of `vhat`.
#[derive(Clone, Debug)]
pub struct EmbeddingFactorization {
    pub method: Method,
    pub v1hat: Mat,
    pub v2hat: Mat,
    pub singvals: Vec<f64>,
    pub basis: Option<Mat>,
    pub warnings: Vec<String>,
}

impl EmbeddingFactorization {
    pub fn p(&self) -> usize {
        self.v1hat.ncols()
    }

    pub fn d1(&self) -> usize {
        self.v1hat.nrows()
    }

    pub fn d2(&self) -> usize {
        self.v2hat.nrows()
    }

    /// `[V̂1; V̂2]`
    pub fn vhat(&self) -> Mat {
        stack(&self.v1hat, &self.v2hat)
    }

    pub fn block(&self, modality: u8) -> &Mat {
        if modality == 1 {
            &self.v1hat
        } else {
            &self.v2hat
        }
    }

    /// Splits a joint `d × p` factor at `d1`.
    pub fn from_joint(method: Method, vhat: &Mat, d1: usize, singvals: Vec<f64>, basis: Option<Mat>) -> Self {
        let d2 = vhat.nrows() - d1;
        EmbeddingFactorization {
            method,
            v1hat: vhat.rows(0, d1).into_owned(),
            v2hat: vhat.rows(d1, d2).into_owned(),
            singvals,
            basis,
            warnings: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdBackend {
    /// Dense decomposition for small problems, subspace iteration otherwise.
    #[default]
    Auto,
    Dense,
    Randomized,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SvdOptions {
    /// Residual bound relative to the leading singular value.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub backend: SvdBackend,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions { tol: 1e-9, max_iter: 500, seed: 0, backend: SvdBackend::Auto }
    }
}

const DENSE_LIMIT: usize = 400;
const OVERSAMPLE: usize = 10;

/// Top-`p` singular triplets `(U, s, V)` with `s` non-increasing and each
/// left singular vector's largest-magnitude entry positive.
pub fn truncated_svd(m: &Mat, p: usize, opts: &SvdOptions) -> Result<(Mat, Vec<f64>, Mat)> {
    let (rows, cols) = m.shape();
    if p == 0 || p > rows.min(cols) {
        return Err(ClaimeError::Dimension(format!("rank {p} invalid for a {rows}×{cols} matrix")));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(ClaimeError::numeric("matrix has non-finite entries"));
    }
    let dense = match opts.backend {
        SvdBackend::Dense => true,
        SvdBackend::Randomized => false,
        SvdBackend::Auto => rows.min(cols) <= DENSE_LIMIT || p + OVERSAMPLE >= rows.min(cols),
    };
    if dense {
        let (u, s, v) = linalg::dense_svd(m);
        return Ok((u.columns(0, p).into_owned(), s[..p].to_vec(), v.columns(0, p).into_owned()));
    }
    subspace_iteration(m, p, opts)
}

fn subspace_iteration(m: &Mat, p: usize, opts: &SvdOptions) -> Result<(Mat, Vec<f64>, Mat)> {
    let k = (p + OVERSAMPLE).min(m.nrows().min(m.ncols()));
    let mut rng = seeded_rng(sub_seed(opts.seed, "truncated-svd"));
    let omega = linalg::standard_normal_matrix(m.ncols(), k, &mut rng);
    let mut q = thin_q(&(m * omega));
    let mut residuals = vec![f64::INFINITY; p];
    for _ in 0..opts.max_iter.max(1) {
        let z = thin_q(&(m.transpose() * &q));
        q = thin_q(&(m * z));
        // Rayleigh–Ritz on the current range
        let b = q.transpose() * m;
        let (ub, s, v) = linalg::dense_svd(&b);
        let u = &q * ub;
        let scale = s[0].max(f64::MIN_POSITIVE);
        residuals = (0..p).map(|j| (m * v.column(j) - u.column(j) * s[j]).norm() / scale).collect();
        if residuals.iter().all(|&r| r <= opts.tol) {
            let mut u = u.columns(0, p).into_owned();
            let mut v = v.columns(0, p).into_owned();
            linalg::fix_signs(&mut u, Some(&mut v));
            return Ok((u, s[..p].to_vec(), v));
        }
    }
    Err(ClaimeError::Numeric {
        message: format!("truncated SVD did not converge in {} iterations", opts.max_iter),
        residuals,
    })
}

fn thin_q(m: &Mat) -> Mat {
    let cols = m.ncols().min(m.nrows());
    m.clone().qr().q().columns(0, cols).into_owned()
}

/// `V̂1 = Û1 Λ̂^{1/2}`, `V̂2 = Û2 Λ̂^{1/2}` from the rank-`p` SVD of `pmi / λ`.
pub fn factor_claime(pmi: &PmiMatrix, p: usize, lambda: f64, opts: &SvdOptions) -> Result<EmbeddingFactorization> {
    if !matches!(pmi.kind, PmiKind::Claime | PmiKind::PopulationCross) {
        return Err(ClaimeError::Parameter(format!("factor_claime needs a cross-modal matrix, got {:?}", pmi.kind)));
    }
    if !(lambda > 0.0) {
        return Err(ClaimeError::Parameter(format!("lambda must be positive (got {lambda})")));
    }
    let scaled = &pmi.values / lambda;
    let (u, s, v) = truncated_svd(&scaled, p, opts)?;
    let mut warnings = Vec::new();
    let floor = s[0] * 1e-12;
    let positive = s.iter().filter(|&&x| x > floor).count();
    if positive < p {
        warnings.push(format!("rank deficient: {positive} of {p} singular values are positive"));
    }
    let root: Vec<f64> = s.iter().map(|&x| if x > floor { x.sqrt() } else { 0.0 }).collect();
    let scale = |mut m: Mat| {
        for (j, r) in root.iter().enumerate() {
            m.column_mut(j).scale_mut(*r);
        }
        m
    };
    Ok(EmbeddingFactorization {
        method: Method::Claime,
        v1hat: scale(u),
        v2hat: scale(v),
        singvals: s,
        basis: None,
        warnings,
    })
}

/// Top-`p` eigenpairs by algebraic value; negative eigenvalues are clamped
/// to zero before the square root.
pub fn factor_joint(pmi: &PmiMatrix, p: usize, method: Method) -> Result<EmbeddingFactorization> {
    if !pmi.kind.is_joint() {
        return Err(ClaimeError::Parameter(format!("factor_joint needs a joint matrix, got {:?}", pmi.kind)));
    }
    let m = &pmi.values;
    let d = m.nrows();
    if m.ncols() != d || p == 0 || p > d {
        return Err(ClaimeError::Dimension(format!("rank {p} invalid for a {}×{} matrix", d, m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * m.amax().max(f64::MIN_POSITIVE) {
        return Err(ClaimeError::Parameter(format!("matrix is not symmetric (max asymmetry {asym:.3e})")));
    }
    let (vals, vecs) = linalg::dense_sym_eigen(m);
    let basis = vecs.columns(0, p).into_owned();
    let mut warnings = Vec::new();
    let clamped: Vec<f64> = vals[..p].iter().map(|&x| x.max(0.0)).collect();
    let negative = vals[..p].iter().filter(|&&x| x < 0.0).count();
    if negative > 0 {
        warnings.push(format!("{negative} of the top {p} eigenvalues were negative and clamped to 0"));
    }
    let mut vhat = basis.clone();
    for (j, x) in clamped.iter().enumerate() {
        vhat.column_mut(j).scale_mut(x.sqrt());
    }
    let mut f = EmbeddingFactorization::from_joint(method, &vhat, pmi.d1, clamped, Some(basis));
    f.warnings = warnings;
    Ok(f)
}

/// `√(p − ‖Uᵀ W‖_F²)` for orthonormal `U`, `W`, evaluated as the residual
/// `‖W − U Uᵀ W‖_F` to avoid cancellation for nearly equal subspaces.
pub fn sin_theta_frobenius(u: &Mat, w: &Mat) -> Result<f64> {
    if u.shape() != w.shape() {
        return Err(ClaimeError::Dimension(format!("shapes {:?} and {:?} differ", u.shape(), w.shape())));
    }
    for (name, m) in [("U", u), ("W", w)] {
        let defect = linalg::orthonormality_defect(m);
        if defect > 1e-8 {
            return Err(ClaimeError::Parameter(format!("{name} is not orthonormal (defect {defect:.3e})")));
        }
    }
    Ok((w - u * (u.transpose() * w)).norm())
}

/// Outcome of the rotation search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestartCertificate {
    pub restarts: usize,
    /// Largest objective gain of any restart over the reported optimum.
    pub max_improvement: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct JointRepresentation {
    pub u_h: Mat,
    pub h: Mat,
    pub dist: f64,
    pub certificate: RestartCertificate,
}

pub const CERTIFICATE_RESTARTS: usize = 200;
const CERTIFICATE_TOL: f64 = 1e-6;

/// Rotation-aligned joint basis `[Û1 Hᵀ; Û2] / √2` closest to the truth's
/// joint basis, with `Û_M` the polar factor of `V̂_M`.
///
/// The objective `‖Û_Hᵀ U*‖_F²` is affine in `tr(Hᵀ B Aᵀ)` with
/// `A = Û1ᵀ U*_top`, `B = Û2ᵀ U*_bottom`, so the optimum over the orthogonal
/// group is the polar factor of `B Aᵀ`. Random restarts followed by local
/// ascent certify that no other stationary point does better.
pub fn joint_representation(f: &EmbeddingFactorization, truth: &TrueEmbeddings, seed: u64) -> Result<JointRepresentation> {
    if f.d1() != truth.d1() || f.d2() != truth.d2() || f.p() != truth.p {
        return Err(ClaimeError::Dimension("factorization does not match the truth".into()));
    }
    let target = truth.joint_basis();
    let p = f.p();
    if let Some(basis) = &f.basis {
        let dist = sin_theta_frobenius(basis, &target)?;
        let certificate = RestartCertificate { restarts: 0, max_improvement: 0.0, passed: true };
        return Ok(JointRepresentation { u_h: basis.clone(), h: Mat::identity(p, p), dist, certificate });
    }
    let u1 = linalg::polar(&f.v1hat);
    let u2 = linalg::polar(&f.v2hat);
    let a = u1.transpose() * target.rows(0, f.d1());
    let b = u2.transpose() * target.rows(f.d1(), f.d2());
    let g = &b * a.transpose();
    let objective = |h: &Mat| (h.transpose() * &g).trace();
    let h = linalg::polar(&g);
    let best = objective(&h);
    let mut rng = seeded_rng(sub_seed(seed, "rotation-restarts"));
    let mut max_improvement = f64::NEG_INFINITY;
    for _ in 0..CERTIFICATE_RESTARTS {
        let mut x = linalg::haar_orthogonal(p, &mut rng);
        if rng.random::<bool>() {
            x.column_mut(0).neg_mut();
        }
        let x = local_ascent(x, &g);
        max_improvement = max_improvement.max(objective(&x) - best);
    }
    let u_h = stack(&(&u1 * h.transpose()), &u2) / std::f64::consts::SQRT_2;
    let dist = sin_theta_frobenius(&u_h, &target)?;
    Ok(JointRepresentation {
        u_h,
        h,
        dist,
        certificate: RestartCertificate {
            restarts: CERTIFICATE_RESTARTS,
            max_improvement,
            passed: max_improvement <= CERTIFICATE_TOL,
        },
    })
}

/// Riemannian gradient ascent of `tr(Hᵀ G)` with polar retraction.
fn local_ascent(mut h: Mat, g: &Mat) -> Mat {
    let step = 0.5 / g.norm().max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        let riemannian = (g - &h * g.transpose() * &h) * 0.5;
        if riemannian.norm() < 1e-12 * g.norm().max(1.0) {
            break;
        }
        h = linalg::polar(&(&h + riemannian * (step * g.norm())));
    }
    h
}

/// Writes `feature_id<TAB>modality<TAB>e1..ep` rows with global 1-based ids.
pub fn write_embeddings<W: Write>(f: &EmbeddingFactorization, mut out: W) -> Result<()> {
    let mut id = 0usize;
    for (m, block) in [(1, &f.v1hat), (2, &f.v2hat)] {
        for row in block.row_iter() {
            id += 1;
            write!(out, "{id}\t{m}")?;
            for x in row.iter() {
                write!(out, "\t{x:.17e}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingSidecar {
    method: Method,
    d1: usize,
    d2: usize,
    p: usize,
    singvals: Vec<f64>,
    warnings: Vec<String>,
}

/// Embedding TSV plus a `<path>.json` metadata sidecar.
pub fn save_embeddings(f: &EmbeddingFactorization, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_embeddings(f, &mut out)?;
    out.flush()?;
    let sidecar = EmbeddingSidecar {
        method: f.method,
        d1: f.d1(),
        d2: f.d2(),
        p: f.p(),
        singvals: f.singvals.clone(),
        warnings: f.warnings.clone(),
    };
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(name)?), &sidecar)?;
    Ok(())
}

/// Reads the embedding TSV. The method comes from the sidecar when present.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingFactorization> {
    let input = BufReader::new(File::open(path)?);
    let mut rows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut expected_id = 1usize;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ClaimeError::Ingest { line: idx + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(err("expected feature id, modality and at least one coordinate".into()));
        }
        let id: usize = fields[0].parse().map_err(|_| err(format!("bad feature id `{}`", fields[0])))?;
        if id != expected_id {
            return Err(err(format!("feature ids must be consecutive from 1 (expected {expected_id}, got {id})")));
        }
        expected_id += 1;
        let m: usize = match fields[1] {
            "1" => 0,
            "2" => 1,
            other => return Err(err(format!("bad modality `{other}`"))),
        };
        if m == 0 && !rows[1].is_empty() {
            return Err(err("modality-1 rows must precede modality-2 rows".into()));
        }
        let coords = fields[2..]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| err(format!("bad coordinate `{x}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows[0].first().or(rows[1].first()) {
            if first.len() != coords.len() {
                return Err(err("rows have different dimensions".into()));
            }
        }
        rows[m].push(coords);
    }
    let p = rows[0].first().or(rows[1].first()).map_or(0, |r| r.len());
    let to_mat = |r: &Vec<Vec<f64>>| Mat::from_fn(r.len(), p, |i, j| r[i][j]);
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    let sidecar: Option<EmbeddingSidecar> = File::open(&name)
        .ok()
        .map(|f| serde_json::from_reader(BufReader::new(f)))
        .transpose()?;
    let (method, singvals, warnings) = match sidecar {
        Some(s) => (s.method, s.singvals, s.warnings),
        None => (Method::Claime, Vec::new(), Vec::new()),
    };
    Ok(EmbeddingFactorization {
        method,
        v1hat: to_mat(&rows[0]),
        v2hat: to_mat(&rows[1]),
        singvals,
        basis: None,
        warnings,
    })
}
