//! Linear contrastive losses on patient-level data and their stochastic
//! gradient-descent optimizers.
//!
//! Feature weights are the marginals normalised to sum to one,
//! `γ̃_w = γ_w / Σ γ`. With these weights the CLAIME loss equals
//! `λ/2 ‖V1 V2ᵀ − pmi_claime/λ‖² + const` and the CL loss equals
//! `λ/2 ‖V Vᵀ − pmi_cl/λ‖² + const` exactly.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cooc::accumulate;
use crate::error::{ClaimeError, Result};
use crate::gen::{stack, Cohort};
use crate::linalg::{self, Mat};
use crate::seed::{seeded_rng, sub_seed};
use crate::spectral::{EmbeddingFactorization, Method};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdConfig {
    pub p: usize,
    pub lambda: f64,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub neg_samples: usize,
    pub conv_tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            p: 4,
            lambda: 1.0,
            lr0: 1e-4,
            decay_factor: 10.0,
            decay_every: 10,
            neg_samples: 10,
            conv_tol: 1e-6,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClaimeError::Parameter(m.into()));
        if self.p == 0 {
            return bad("p must be positive");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if self.neg_samples == 0 {
            return bad("neg_samples must be at least 1");
        }
        if !(self.conv_tol > 0.0) {
            return bad("conv_tol must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.decay_factor >= 1.0) || self.decay_every == 0 {
            return bad("decay_factor must be >= 1 and decay_every positive");
        }
        Ok(())
    }

    /// `lr0 · decay_factor^{−⌊epoch / decay_every⌋}`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi(-((epoch / self.decay_every) as i32))
    }
}

type Sparse = Vec<(usize, f64)>;

/// Per-patient count vectors and normalised weights of a cohort.
#[derive(Clone, Debug)]
pub struct ContrastData {
    pub d1: usize,
    pub d2: usize,
    a: Vec<Sparse>,
    b: Vec<Sparse>,
    /// concatenated counts with modality-2 ids shifted by `d1`
    c: Vec<Sparse>,
    inv1: Vec<f64>,
    inv2: Vec<f64>,
    inv_joint: Vec<f64>,
    totals1: Vec<f64>,
    totals2: Vec<f64>,
    cross_den: f64,
    within12: f64,
    within_joint: f64,
}

fn sparse_counts(tokens: &[u32], offset: usize) -> Sparse {
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut out: Sparse = Vec::new();
    for t in sorted {
        let w = t as usize + offset;
        match out.last_mut() {
            Some((v, c)) if *v == w => *c += 1.0,
            _ => out.push((w, 1.0)),
        }
    }
    out
}

fn inverse_weights(gamma: &[f64]) -> Vec<f64> {
    let total: f64 = gamma.iter().sum();
    gamma.iter().map(|&g| if g > 0.0 { total / g } else { 0.0 }).collect()
}

impl ContrastData {
    pub fn new(cohort: &Cohort) -> Result<Self> {
        let s = accumulate(cohort)?;
        let cross_den = s.cross_denominator();
        if s.n() < 2 || !(cross_den > 0.0) {
            return Err(ClaimeError::DegenerateCohort(format!("cohort of {} patients", s.n())));
        }
        let joint = s.joint_counts();
        let gamma_joint: Vec<f64> = joint.row_iter().map(|r| r.sum()).collect();
        let a: Vec<Sparse> = cohort.patients.iter().map(|p| sparse_counts(&p.tokens1, 0)).collect();
        let b: Vec<Sparse> = cohort.patients.iter().map(|p| sparse_counts(&p.tokens2, 0)).collect();
        let c = cohort
            .patients
            .iter()
            .map(|p| {
                let mut v = sparse_counts(&p.tokens1, 0);
                v.extend(sparse_counts(&p.tokens2, s.d1));
                v
            })
            .collect();
        Ok(ContrastData {
            d1: s.d1,
            d2: s.d2,
            a,
            b,
            c,
            inv1: inverse_weights(&s.gamma(1)),
            inv2: inverse_weights(&s.gamma(2)),
            inv_joint: inverse_weights(&gamma_joint),
            totals1: s.n1.iter().map(|&x| x as f64).collect(),
            totals2: s.n2.iter().map(|&x| x as f64).collect(),
            cross_den,
            within12: s.d12.iter().map(|&x| x as f64).sum(),
            within_joint: gamma_joint.iter().sum(),
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// `Vᵀ diag(1/γ̃) counts`
    fn embed(v: &Mat, inv: &[f64], counts: &Sparse) -> Vec<f64> {
        let mut out = vec![0.0; v.ncols()];
        for &(w, x) in counts {
            let weight = x * inv[w];
            for (k, o) in out.iter_mut().enumerate() {
                *o += weight * v[(w, k)];
            }
        }
        out
    }

    fn check_weights(&self, v: &Mat, inv: &[f64], modality: u8, offset: usize) -> Result<()> {
        for (w, &g) in inv.iter().enumerate() {
            if g == 0.0 && v.row(w).iter().any(|&x| x != 0.0) {
                let local = if w >= offset && offset > 0 { w - offset } else { w };
                let m = if offset > 0 && w >= offset { 2 } else { modality };
                return Err(ClaimeError::WeightUndefined { modality: m, feature: local + 1 });
            }
        }
        Ok(())
    }

    fn check_claime(&self, v1: &Mat, v2: &Mat) -> Result<()> {
        if v1.nrows() != self.d1 || v2.nrows() != self.d2 || v1.ncols() != v2.ncols() {
            return Err(ClaimeError::Dimension(format!(
                "embeddings {:?} and {:?} do not match vocabularies ({}, {})",
                v1.shape(),
                v2.shape(),
                self.d1,
                self.d2
            )));
        }
        self.check_weights(v1, &self.inv1, 1, 0)?;
        self.check_weights(v2, &self.inv2, 2, 0)
    }

    fn check_cl(&self, v: &Mat) -> Result<()> {
        if v.nrows() != self.d1 + self.d2 {
            return Err(ClaimeError::Dimension(format!("embedding has {} rows, expected {}", v.nrows(), self.d1 + self.d2)));
        }
        self.check_weights(v, &self.inv_joint, 1, self.d1)
    }

    /// Exact CLAIME loss from weighted patient sums; the cross-patient term
    /// uses `Σ_{i≠j} ⟨x_i, y_j⟩ = ⟨Σ x, Σ y⟩ − Σ ⟨x_i, y_i⟩`.
    pub fn loss_claime(&self, v1: &Mat, v2: &Mat, lambda: f64) -> Result<f64> {
        self.check_claime(v1, v2)?;
        let p = v1.ncols();
        let (mut sx, mut sy, mut within) = (vec![0.0; p], vec![0.0; p], 0.0);
        for (a, b) in self.a.iter().zip(&self.b) {
            let x = Self::embed(v1, &self.inv1, a);
            let y = Self::embed(v2, &self.inv2, b);
            within += dot(&x, &y);
            add(&mut sx, &x);
            add(&mut sy, &y);
        }
        let cross = dot(&sx, &sy) - within;
        let reg = 0.5 * lambda * ((v1.transpose() * v1) * (v2.transpose() * v2)).trace();
        Ok(cross / self.cross_den - within / self.within12 + reg)
    }

    /// Exact gradient of [`Self::loss_claime`] with respect to `(V1, V2)`.
    pub fn grad_claime(&self, v1: &Mat, v2: &Mat, lambda: f64) -> Result<(Mat, Mat)> {
        self.check_claime(v1, v2)?;
        let p = v1.ncols();
        let (mut sx, mut sy) = (vec![0.0; p], vec![0.0; p]);
        // Σ_i a_i y_iᵀ and Σ_i b_i x_iᵀ, unweighted
        let mut ay = Mat::zeros(self.d1, p);
        let mut bx = Mat::zeros(self.d2, p);
        for (a, b) in self.a.iter().zip(&self.b) {
            let x = Self::embed(v1, &self.inv1, a);
            let y = Self::embed(v2, &self.inv2, b);
            add(&mut sx, &x);
            add(&mut sy, &y);
            scatter(&mut ay, a, &y, 1.0);
            scatter(&mut bx, b, &x, 1.0);
        }
        let g1 = self.data_grad(&self.totals1, &sy, &ay, &self.inv1) + lambda * v1 * (v2.transpose() * v2);
        let g2 = self.data_grad(&self.totals2, &sx, &bx, &self.inv2) + lambda * v2 * (v1.transpose() * v1);
        Ok((g1, g2))
    }

    fn data_grad(&self, totals: &[f64], partner_sum: &[f64], paired: &Mat, inv: &[f64]) -> Mat {
        Mat::from_fn(paired.nrows(), paired.ncols(), |w, k| {
            let cross = totals[w] * partner_sum[k] - paired[(w, k)];
            inv[w] * (cross / self.cross_den - paired[(w, k)] / self.within12)
        })
    }

    /// Exact CL loss on concatenated sequences.
    pub fn loss_cl(&self, v: &Mat, lambda: f64) -> Result<f64> {
        self.check_cl(v)?;
        let p = v.ncols();
        let (mut sz, mut within, mut self_sq) = (vec![0.0; p], 0.0, 0.0);
        for c in &self.c {
            let z = Self::embed(v, &self.inv_joint, c);
            let zz = dot(&z, &z);
            let diag: f64 = c.iter().map(|&(w, x)| x * self.inv_joint[w].powi(2) * v.row(w).norm_squared()).sum();
            within += zz - diag;
            self_sq += zz;
            add(&mut sz, &z);
        }
        let cross = dot(&sz, &sz) - self_sq;
        let gram = v.transpose() * v;
        let reg = 0.5 * lambda * gram.norm_squared();
        Ok(-within / self.within_joint + cross / self.cross_den + reg)
    }

    /// Exact gradient of [`Self::loss_cl`].
    pub fn grad_cl(&self, v: &Mat, lambda: f64) -> Result<Mat> {
        self.check_cl(v)?;
        let (d, p) = v.shape();
        let mut sz = vec![0.0; p];
        let mut cz = Mat::zeros(d, p);
        let mut counts = vec![0.0; d];
        for c in &self.c {
            let z = Self::embed(v, &self.inv_joint, c);
            add(&mut sz, &z);
            scatter(&mut cz, c, &z, 1.0);
            for &(w, x) in c {
                counts[w] += x;
            }
        }
        let mut g = Mat::from_fn(d, p, |w, k| {
            let inv = self.inv_joint[w];
            let within = 2.0 * inv * cz[(w, k)] - 2.0 * counts[w] * inv * inv * v[(w, k)];
            let cross = 2.0 * inv * (counts[w] * sz[k] - cz[(w, k)]);
            -within / self.within_joint + cross / self.cross_den
        });
        g += 2.0 * lambda * v * (v.transpose() * v);
        Ok(g)
    }

    fn negatives(&self, i: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
        let n = self.n();
        if k >= n - 1 {
            return ((0..n).filter(|&j| j != i).collect(), 1.0);
        }
        let picks = (0..k)
            .map(|_| {
                let j = rng.random_range(0..n - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            })
            .collect();
        (picks, (n - 1) as f64 / k as f64)
    }

    /// Gradient of `n ·` patient `i`'s sampled share of the CLAIME
    /// cross-patient term. Averaging over uniform `i` and fresh negatives
    /// gives the exact cross-term gradient.
    pub fn stochastic_cross_grad_claime(&self, v1: &Mat, v2: &Mat, i: usize, k: usize, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
        let p = v1.ncols();
        let (negs, scale) = self.negatives(i, k, rng);
        let c = self.n() as f64 * scale / self.cross_den;
        let x = Self::embed(v1, &self.inv1, &self.a[i]);
        let mut ysum = vec![0.0; p];
        for &j in &negs {
            add(&mut ysum, &Self::embed(v2, &self.inv2, &self.b[j]));
        }
        let mut g1 = Mat::zeros(self.d1, p);
        let mut g2 = Mat::zeros(self.d2, p);
        scatter_weighted(&mut g1, &self.a[i], &ysum, &self.inv1, c);
        for &j in &negs {
            scatter_weighted(&mut g2, &self.b[j], &x, &self.inv2, c);
        }
        (g1, g2)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `m += scale · counts ⊗ vec`
fn scatter(m: &mut Mat, counts: &Sparse, vec: &[f64], scale: f64) {
    for &(w, x) in counts {
        for (k, y) in vec.iter().enumerate() {
            m[(w, k)] += scale * x * y;
        }
    }
}

/// `m += scale · diag(inv) counts ⊗ vec`
fn scatter_weighted(m: &mut Mat, counts: &Sparse, vec: &[f64], inv: &[f64], scale: f64) {
    for &(w, x) in counts {
        let s = scale * x * inv[w];
        for (k, y) in vec.iter().enumerate() {
            m[(w, k)] += s * y;
        }
    }
}

pub fn loss_claime(cohort: &Cohort, v1: &Mat, v2: &Mat, lambda: f64) -> Result<f64> {
    ContrastData::new(cohort)?.loss_claime(v1, v2, lambda)
}

pub fn loss_cl(cohort: &Cohort, v: &Mat, lambda: f64) -> Result<f64> {
    ContrastData::new(cohort)?.loss_cl(v, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct GdOutcome {
    pub factorization: EmbeddingFactorization,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub final_loss: f64,
}

/// Optimizer trace as `epoch,loss,lr,wall_time_ms`.
pub fn write_trace<W: Write>(trace: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "epoch,loss,lr,wall_time_ms")?;
    for r in trace {
        writeln!(out, "{},{:.17e},{:.17e},{:.3}", r.epoch, r.loss, r.lr, r.wall_time_ms)?;
    }
    Ok(())
}

fn random_init(rows: usize, p: usize, inv: &[f64], rng: &mut ChaCha8Rng) -> Mat {
    let normal = Normal::new(0.0, (1.0 / p as f64).sqrt()).expect("valid scale");
    let mut m = Mat::zeros(rows, p);
    for w in 0..rows {
        if inv[w] > 0.0 {
            for k in 0..p {
                m[(w, k)] = normal.sample(rng);
            }
        }
    }
    m
}

struct EpochLoop<'a> {
    cfg: &'a GdConfig,
    start: Instant,
    trace: Vec<TraceRow>,
    previous: f64,
    initial: f64,
}

enum Step {
    Continue,
    Converged,
}

impl<'a> EpochLoop<'a> {
    fn new(cfg: &'a GdConfig, initial: f64) -> Self {
        EpochLoop { cfg, start: Instant::now(), trace: Vec::new(), previous: initial, initial }
    }

    fn record(&mut self, epoch: usize, loss: f64) -> Result<Step> {
        let lr = self.cfg.learning_rate(epoch);
        self.trace.push(TraceRow { epoch, loss, lr, wall_time_ms: self.start.elapsed().as_secs_f64() * 1e3 });
        if !loss.is_finite() || loss.abs() > 1e6 * self.initial.abs().max(1.0) {
            return Err(ClaimeError::Divergence {
                epoch,
                loss,
                trace: self.trace.iter().map(|r| r.loss).collect(),
            });
        }
        let change = (loss - self.previous).abs();
        self.previous = loss;
        Ok(if change < self.cfg.conv_tol { Step::Converged } else { Step::Continue })
    }
}

/// CLAIME-GD from the `N(0, 1/p)` initialization.
pub fn optimize_claime_gd(data: &ContrastData, cfg: &GdConfig) -> Result<GdOutcome> {
    cfg.validate()?;
    let mut rng = seeded_rng(sub_seed(cfg.seed, "claime-gd-init"));
    let v1 = random_init(data.d1, cfg.p, &data.inv1, &mut rng);
    let v2 = random_init(data.d2, cfg.p, &data.inv2, &mut rng);
    optimize_claime_gd_from(data, cfg, v1, v2)
}

/// CLAIME-GD from a given starting point.
///
/// Each epoch visits the patients in a seed-shuffled order. Patient `i`'s
/// step follows the gradient of `n · share_i + λ/2 ‖V1 V2ᵀ‖²`, where `share_i`
/// holds its within-patient term and `(n−1)/K` times its cross terms with
/// `K` uniformly drawn other patients.
pub fn optimize_claime_gd_from(data: &ContrastData, cfg: &GdConfig, mut v1: Mat, mut v2: Mat) -> Result<GdOutcome> {
    cfg.validate()?;
    if v1.ncols() != cfg.p {
        return Err(ClaimeError::Dimension("initial point does not have p columns".into()));
    }
    let n = data.n();
    let nf = n as f64;
    let mut rng = seeded_rng(sub_seed(cfg.seed, "claime-gd-epochs"));
    let initial = data.loss_claime(&v1, &v2, cfg.lambda)?;
    let mut looper = EpochLoop::new(cfg, initial);
    let mut order: Vec<usize> = (0..n).collect();
    let mut converged = false;
    let mut loss = initial;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        for &i in &order {
            let (negs, scale) = data.negatives(i, cfg.neg_samples, &mut rng);
            let cross = nf * scale / data.cross_den;
            let within = nf / data.within12;
            let x = ContrastData::embed(&v1, &data.inv1, &data.a[i]);
            let y = ContrastData::embed(&v2, &data.inv2, &data.b[i]);
            let mut ysum = vec![0.0; cfg.p];
            for &j in &negs {
                add(&mut ysum, &ContrastData::embed(&v2, &data.inv2, &data.b[j]));
            }
            let gram1 = v1.transpose() * &v1;
            let gram2 = v2.transpose() * &v2;
            // regularizer step first, then the sparse data rows at the old point
            let shrink1 = Mat::identity(cfg.p, cfg.p) - gram2 * (lr * cfg.lambda);
            let shrink2 = Mat::identity(cfg.p, cfg.p) - gram1 * (lr * cfg.lambda);
            let old1 = v1.clone();
            let old2 = v2.clone();
            v1 = &old1 * shrink1;
            v2 = &old2 * shrink2;
            scatter_weighted(&mut v1, &data.a[i], &ysum, &data.inv1, -lr * cross);
            scatter_weighted(&mut v1, &data.a[i], &y, &data.inv1, lr * within);
            for &j in &negs {
                scatter_weighted(&mut v2, &data.b[j], &x, &data.inv2, -lr * cross);
            }
            scatter_weighted(&mut v2, &data.b[i], &x, &data.inv2, lr * within);
        }
        loss = data.loss_claime(&v1, &v2, cfg.lambda)?;
        if let Step::Converged = looper.record(epoch, loss)? {
            converged = true;
            break;
        }
    }
    let factorization = rebalance(Method::ClaimeGd, &v1, &v2);
    Ok(GdOutcome { factorization, trace: looper.trace, converged, final_loss: loss })
}

/// Balanced factors of `V1 V2ᵀ`: `Q1 U S^{1/2}` and `Q2 W S^{1/2}` from
/// `V_M = Q_M R_M` and `R1 R2ᵀ = U S Wᵀ`. The loss depends on the product
/// only, so this leaves it unchanged.
pub fn rebalance(method: Method, v1: &Mat, v2: &Mat) -> EmbeddingFactorization {
    let p = v1.ncols();
    let qr1 = v1.clone().qr();
    let qr2 = v2.clone().qr();
    let (q1, r1) = (qr1.q(), qr1.r());
    let (q2, r2) = (qr2.q(), qr2.r());
    let (u, s, w) = linalg::dense_svd(&(&r1 * r2.transpose()));
    let root = Mat::from_diagonal(&nalgebra::DVector::from_iterator(p, s.iter().map(|x| x.sqrt())));
    let mut a = q1 * u * &root;
    let mut b = q2 * w * &root;
    linalg::fix_signs(&mut a, Some(&mut b));
    EmbeddingFactorization { method, v1hat: a, v2hat: b, singvals: s, basis: None, warnings: Vec::new() }
}

/// CL-GD from the `N(0, 1/p)` initialization.
pub fn optimize_cl_gd(data: &ContrastData, cfg: &GdConfig) -> Result<GdOutcome> {
    cfg.validate()?;
    let mut rng = seeded_rng(sub_seed(cfg.seed, "cl-gd-init"));
    let v = random_init(data.d1 + data.d2, cfg.p, &data.inv_joint, &mut rng);
    optimize_cl_gd_from(data, cfg, v)
}

/// CL-GD from a given starting point; same protocol as CLAIME-GD on the
/// concatenated sequences.
pub fn optimize_cl_gd_from(data: &ContrastData, cfg: &GdConfig, mut v: Mat) -> Result<GdOutcome> {
    cfg.validate()?;
    if v.ncols() != cfg.p {
        return Err(ClaimeError::Dimension("initial point does not have p columns".into()));
    }
    let n = data.n();
    let nf = n as f64;
    let mut rng = seeded_rng(sub_seed(cfg.seed, "cl-gd-epochs"));
    let initial = data.loss_cl(&v, cfg.lambda)?;
    let mut looper = EpochLoop::new(cfg, initial);
    let mut order: Vec<usize> = (0..n).collect();
    let mut converged = false;
    let mut loss = initial;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        for &i in &order {
            let (negs, scale) = data.negatives(i, cfg.neg_samples, &mut rng);
            let cross = nf * scale / data.cross_den;
            let within = nf / data.within_joint;
            let ci = &data.c[i];
            let z = ContrastData::embed(&v, &data.inv_joint, ci);
            let mut zsum = vec![0.0; cfg.p];
            for &j in &negs {
                add(&mut zsum, &ContrastData::embed(&v, &data.inv_joint, &data.c[j]));
            }
            let old = v.clone();
            let gram = old.transpose() * &old;
            v = &old * (Mat::identity(cfg.p, cfg.p) - gram * (2.0 * lr * cfg.lambda));
            // within-patient pairs t ≠ s
            scatter_weighted(&mut v, ci, &z, &data.inv_joint, 2.0 * lr * within);
            for &(w, x) in ci {
                let s = 2.0 * lr * within * x * data.inv_joint[w].powi(2);
                for k in 0..cfg.p {
                    v[(w, k)] -= s * old[(w, k)];
                }
            }
            // sampled cross-patient pairs, both orientations
            scatter_weighted(&mut v, ci, &zsum, &data.inv_joint, -lr * cross);
            for &j in &negs {
                scatter_weighted(&mut v, &data.c[j], &z, &data.inv_joint, -lr * cross);
            }
        }
        loss = data.loss_cl(&v, cfg.lambda)?;
        if let Step::Converged = looper.record(epoch, loss)? {
            converged = true;
            break;
        }
    }
    let (u, s, _) = linalg::dense_svd(&v);
    let p = cfg.p;
    let basis = u.columns(0, p).into_owned();
    let mut vhat = basis.clone();
    for j in 0..p {
        vhat.column_mut(j).scale_mut(s[j]);
    }
    let singvals = s[..p].iter().map(|x| x * x).collect();
    let factorization = EmbeddingFactorization::from_joint(Method::ClGd, &vhat, data.d1, singvals, Some(basis));
    Ok(GdOutcome { factorization, trace: looper.trace, converged, final_loss: loss })
}

/// Finite-difference agreement of one directional derivative.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientCheck {
    pub analytic: f64,
    /// `(h, central difference, relative discrepancy)`
    pub finite_differences: Vec<(f64, f64, f64)>,
    pub best_relative_error: f64,
    pub worst_relative_error: f64,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.best_relative_error <= tol
    }
}

pub const DEFAULT_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Compares `⟨grad, direction⟩` with central differences of `loss` along
/// `direction` for each step in `steps`.
pub fn gradient_check<F>(loss: F, grad: &Mat, point: &Mat, direction: &Mat, steps: &[f64]) -> Result<GradientCheck>
where
    F: Fn(&Mat) -> Result<f64>,
{
    let analytic = grad.dot(direction);
    let mut fds = Vec::with_capacity(steps.len());
    for &h in steps {
        let plus = loss(&(point + direction * h))?;
        let minus = loss(&(point - direction * h))?;
        let fd = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
        fds.push((h, fd, (fd - analytic).abs() / scale));
    }
    let best = fds.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    let worst = fds.iter().map(|x| x.2).fold(0.0, f64::max);
    Ok(GradientCheck { analytic, finite_differences: fds, best_relative_error: best, worst_relative_error: worst })
}

/// Gradient check of the CLAIME loss at `(V1, V2)` along `(D1, D2)`.
pub fn check_claime_gradient(data: &ContrastData, v1: &Mat, v2: &Mat, d1: &Mat, d2: &Mat, lambda: f64) -> Result<GradientCheck> {
    let (g1, g2) = data.grad_claime(v1, v2, lambda)?;
    let split = data.d1;
    let rows2 = data.d2;
    gradient_check(
        |x: &Mat| data.loss_claime(&x.rows(0, split).into_owned(), &x.rows(split, rows2).into_owned(), lambda),
        &stack(&g1, &g2),
        &stack(v1, v2),
        &stack(d1, d2),
        &DEFAULT_STEPS,
    )
}

/// Gradient check of the CL loss at `V` along `D`.
pub fn check_cl_gradient(data: &ContrastData, v: &Mat, direction: &Mat, lambda: f64) -> Result<GradientCheck> {
    let g = data.grad_cl(v, lambda)?;
    gradient_check(|x: &Mat| data.loss_cl(x, lambda), &g, v, direction, &DEFAULT_STEPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::PatientRecord;
    use crate::pmi::{pmi_claime, pmi_cl};
    use crate::spectral::{factor_claime, SvdOptions};

    fn toy() -> Cohort {
        Cohort {
            patients: vec![PatientRecord::new(vec![0, 1], vec![0, 0]), PatientRecord::new(vec![0, 0], vec![0, 0, 0])],
            d1: 2,
            d2: 1,
            seed: 0,
        }
    }

    /// Direct double sum over patients and token positions.
    fn brute_claime(cohort: &Cohort, v1: &Mat, v2: &Mat, lambda: f64) -> f64 {
        let s = accumulate(cohort).unwrap();
        let (g1, g2) = (s.gamma(1), s.gamma(2));
        let (t1, t2): (f64, f64) = (g1.iter().sum(), g2.iter().sum());
        let (mut cross, mut within) = (0.0, 0.0);
        for (i, pi) in cohort.patients.iter().enumerate() {
            for (j, pj) in cohort.patients.iter().enumerate() {
                for &w in &pi.tokens1 {
                    for &u in &pj.tokens2 {
                        let (w, u) = (w as usize, u as usize);
                        let term = v1.row(w).dot(&v2.row(u)) * t1 * t2 / (g1[w] * g2[u]);
                        if i == j {
                            within += term;
                        } else {
                            cross += term;
                        }
                    }
                }
            }
        }
        let d12: f64 = s.d12.iter().map(|&x| x as f64).sum();
        cross / s.cross_denominator() - within / d12 + 0.5 * lambda * (v1 * v2.transpose()).norm_squared()
    }

    fn brute_cl(cohort: &Cohort, v: &Mat, lambda: f64) -> f64 {
        let s = accumulate(cohort).unwrap();
        let joint = s.joint_counts();
        let g: Vec<f64> = joint.row_iter().map(|r| r.sum()).collect();
        let total: f64 = g.iter().sum();
        let seqs: Vec<Vec<usize>> = cohort
            .patients
            .iter()
            .map(|p| p.tokens1.iter().map(|&t| t as usize).chain(p.tokens2.iter().map(|&t| t as usize + s.d1)).collect())
            .collect();
        let (mut cross, mut within) = (0.0, 0.0);
        for (i, si) in seqs.iter().enumerate() {
            for (j, sj) in seqs.iter().enumerate() {
                for (t, &w) in si.iter().enumerate() {
                    for (u, &x) in sj.iter().enumerate() {
                        let term = v.row(w).dot(&v.row(x)) * total * total / (g[w] * g[x]);
                        if i != j {
                            cross += term;
                        } else if t != u {
                            within += term;
                        }
                    }
                }
            }
        }
        -within / total + cross / s.cross_denominator() + 0.5 * lambda * (v * v.transpose()).norm_squared()
    }

    #[test]
    fn zero_embeddings_give_zero_loss() {
        let data = ContrastData::new(&toy()).unwrap();
        assert_eq!(data.loss_claime(&Mat::zeros(2, 1), &Mat::from_element(1, 1, 3.0), 1.0).unwrap(), 0.0);
        assert_eq!(data.loss_claime(&Mat::from_element(2, 1, 3.0), &Mat::zeros(1, 1), 1.0).unwrap(), 0.0);
        assert_eq!(data.loss_cl(&Mat::zeros(3, 2), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn losses_match_brute_force() {
        let cohort = toy();
        let data = ContrastData::new(&cohort).unwrap();
        let mut rng = seeded_rng(3);
        let v1 = linalg::standard_normal_matrix(2, 2, &mut rng);
        let v2 = linalg::standard_normal_matrix(1, 2, &mut rng);
        let v = linalg::standard_normal_matrix(3, 2, &mut rng);
        for lambda in [1.0, 0.3] {
            let fast = data.loss_claime(&v1, &v2, lambda).unwrap();
            assert!((fast - brute_claime(&cohort, &v1, &v2, lambda)).abs() < 1e-12 * fast.abs().max(1.0));
            let fast = data.loss_cl(&v, lambda).unwrap();
            assert!((fast - brute_cl(&cohort, &v, lambda)).abs() < 1e-12 * fast.abs().max(1.0));
        }
    }

    #[test]
    fn loss_offsets_are_constant() {
        let cohort = toy();
        let data = ContrastData::new(&cohort).unwrap();
        let s = accumulate(&cohort).unwrap();
        let pc = pmi_claime(&s).unwrap().values;
        let pl = pmi_cl(&s).unwrap().values;
        let lambda = 0.7;
        let mut rng = seeded_rng(9);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..5 {
            let v1 = linalg::standard_normal_matrix(2, 3, &mut rng);
            let v2 = linalg::standard_normal_matrix(1, 3, &mut rng);
            let v = linalg::standard_normal_matrix(3, 3, &mut rng);
            a.push(data.loss_claime(&v1, &v2, lambda).unwrap() - 0.5 * lambda * (&v1 * v2.transpose() - &pc / lambda).norm_squared());
            b.push(data.loss_cl(&v, lambda).unwrap() - 0.5 * lambda * (&v * v.transpose() - &pl / lambda).norm_squared());
        }
        for offsets in [a, b] {
            let spread = offsets.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) - offsets.iter().fold(f64::INFINITY, |m, &x| m.min(x));
            assert!(spread <= 1e-8 * offsets[0].abs().max(1e-300), "{offsets:?}");
        }
    }

    #[test]
    fn absent_feature_with_nonzero_row_is_rejected() {
        let cohort = Cohort { d1: 3, ..toy() };
        let data = ContrastData::new(&cohort).unwrap();
        let mut v1 = Mat::zeros(3, 1);
        assert!(data.loss_claime(&v1, &Mat::zeros(1, 1), 1.0).is_ok());
        v1[(2, 0)] = 1.0;
        assert!(matches!(
            data.loss_claime(&v1, &Mat::zeros(1, 1), 1.0),
            Err(ClaimeError::WeightUndefined { modality: 1, feature: 3 })
        ));
        let mut v = Mat::zeros(4, 1);
        v[(2, 0)] = 1.0;
        assert!(matches!(data.loss_cl(&v, 1.0), Err(ClaimeError::WeightUndefined { modality: 1, feature: 3 })));
    }

    #[test]
    fn regularizer_only_gradient_is_exact() {
        let mut rng = seeded_rng(1);
        let v = linalg::standard_normal_matrix(5, 2, &mut rng);
        let dir = linalg::standard_normal_matrix(5, 2, &mut rng);
        let grad = 2.0 * &v * (v.transpose() * &v);
        let check = gradient_check(|x: &Mat| Ok(0.5 * (x * x.transpose()).norm_squared()), &grad, &v, &dir, &DEFAULT_STEPS).unwrap();
        assert!(check.passes(1e-9), "{check:?}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let data = ContrastData::new(&toy()).unwrap();
        let mut rng = seeded_rng(2);
        let g = |r, c, rng: &mut ChaCha8Rng| linalg::standard_normal_matrix(r, c, rng);
        let (v1, v2, d1, d2) = (g(2, 2, &mut rng), g(1, 2, &mut rng), g(2, 2, &mut rng), g(1, 2, &mut rng));
        assert!(check_claime_gradient(&data, &v1, &v2, &d1, &d2, 1.0).unwrap().passes(1e-5));
        let (v, d) = (g(3, 2, &mut rng), g(3, 2, &mut rng));
        assert!(check_cl_gradient(&data, &v, &d, 1.0).unwrap().passes(1e-5));
    }

    fn toy_cfg(p: usize) -> GdConfig {
        GdConfig { p, lr0: 0.05, decay_every: 6000, max_epochs: 30_000, conv_tol: 1e-18, neg_samples: 10, ..GdConfig::default() }
    }

    #[test]
    fn claime_gd_matches_spectral_on_toy() {
        let cohort = toy();
        let data = ContrastData::new(&cohort).unwrap();
        let pmi = pmi_claime(&accumulate(&cohort).unwrap()).unwrap();
        let spectral = factor_claime(&pmi, 1, 1.0, &SvdOptions::default()).unwrap();
        let target = &spectral.v1hat * spectral.v2hat.transpose();
        let out = optimize_claime_gd(&data, &toy_cfg(1)).unwrap();
        let got = &out.factorization.v1hat * out.factorization.v2hat.transpose();
        assert!((&got - &target).norm() <= 1e-3 * target.norm(), "{got} vs {target}");
    }

    #[test]
    fn cl_gd_matches_spectral_on_toy_and_replays() {
        let cohort = toy();
        let data = ContrastData::new(&cohort).unwrap();
        let pmi = pmi_cl(&accumulate(&cohort).unwrap()).unwrap();
        let spectral = crate::spectral::factor_joint(&pmi, 1, Method::Cl).unwrap();
        let target = spectral.vhat() * spectral.vhat().transpose();
        let out = optimize_cl_gd(&data, &toy_cfg(1)).unwrap();
        let got = out.factorization.vhat() * out.factorization.vhat().transpose();
        assert!((&got - &target).norm() <= 1e-3 * target.norm(), "{got} vs {target}");
        let again = optimize_cl_gd(&data, &toy_cfg(1)).unwrap();
        assert_eq!(out.factorization.vhat(), again.factorization.vhat());
        assert_eq!(out.trace.iter().map(|r| r.loss).collect::<Vec<_>>(), again.trace.iter().map(|r| r.loss).collect::<Vec<_>>());
    }

    #[test]
    fn spectral_point_is_stationary() {
        let cohort = toy();
        let data = ContrastData::new(&cohort).unwrap();
        let s = accumulate(&cohort).unwrap();
        let cfg = GdConfig { p: 1, max_epochs: 1, ..GdConfig::default() };
        let f = factor_claime(&pmi_claime(&s).unwrap(), 1, 1.0, &SvdOptions::default()).unwrap();
        let start = data.loss_claime(&f.v1hat, &f.v2hat, 1.0).unwrap();
        let out = optimize_claime_gd_from(&data, &cfg, f.v1hat.clone(), f.v2hat.clone()).unwrap();
        assert!((out.final_loss - start).abs() < 10.0 * cfg.conv_tol);
        let j = crate::spectral::factor_joint(&pmi_cl(&s).unwrap(), 1, Method::Cl).unwrap();
        let start = data.loss_cl(&j.vhat(), 1.0).unwrap();
        let out = optimize_cl_gd_from(&data, &cfg, j.vhat()).unwrap();
        assert!((out.final_loss - start).abs() < 10.0 * cfg.conv_tol);
    }

    #[test]
    fn rebalance_preserves_product() {
        let mut rng = seeded_rng(4);
        let v1 = linalg::standard_normal_matrix(6, 2, &mut rng) * 3.0;
        let v2 = linalg::standard_normal_matrix(4, 2, &mut rng) * 0.2;
        let f = rebalance(Method::ClaimeGd, &v1, &v2);
        assert!((&f.v1hat * f.v2hat.transpose() - &v1 * v2.transpose()).amax() < 1e-12);
        let gap = f.v1hat.transpose() * &f.v1hat - f.v2hat.transpose() * &f.v2hat;
        assert!(gap.amax() < 1e-12);
    }

    #[test]
    fn config_validation_and_schedule() {
        let cfg = GdConfig::default();
        assert_eq!(cfg.learning_rate(9), 1e-4);
        assert!((cfg.learning_rate(10) - 1e-5).abs() < 1e-20);
        assert!((cfg.learning_rate(25) - 1e-6).abs() < 1e-20);
        assert!(GdConfig { neg_samples: 0, ..cfg.clone() }.validate().is_err());
        assert!(GdConfig { lr0: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(GdConfig { conv_tol: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let data = ContrastData::new(&toy()).unwrap();
        let cfg = GdConfig { p: 1, lr0: 50.0, decay_every: 1000, max_epochs: 50, ..GdConfig::default() };
        let v1 = Mat::from_element(2, 1, 3.0);
        let v2 = Mat::from_element(1, 1, 3.0);
        match optimize_claime_gd_from(&data, &cfg, v1, v2) {
            Err(ClaimeError::Divergence { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.final_loss)),
        }
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow { epoch: 0, loss: 1.5, lr: 1e-4, wall_time_ms: 2.0 }];
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,loss,lr,wall_time_ms\n0,"));
    }
}
