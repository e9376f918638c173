//! Two-modality log-linear generative model and the noise-covariance
//! constructions used by the simulation study.
//!
//! Each patient draws a latent vector `c`, per-modality Gaussian noise, and two
//! Poisson sequence lengths. Tokens are then sampled i.i.d. from the softmax of
//! `⟨v_w, c⟩ + ε_w`, normalised within each modality.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ClaimeError, Result};
use crate::linalg::{self, rows_serde, Mat};
use crate::seed::{seeded_rng, stream_rng, sub_seed};

/// Clamp threshold for floating-point PSD violations, relative to `‖Σ‖`.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Ground-truth embeddings of both modalities.
///
/// `v_M = u_M · diag(lambda_M) · w_Mᵀ` with `u_M` orthonormal. The whole
/// embedding is rotated so that `w1 = I`, i.e. `v1 = u1 · diag(lambda1)`
/// exactly. Both blocks share the latent vector, so a common right rotation
/// does not change the model, but the two blocks cannot be brought to
/// diagonal form simultaneously; `w2` records the remaining rotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrueEmbeddings {
    pub p: usize,
    #[serde(with = "rows_serde")]
    pub v1: Mat,
    #[serde(with = "rows_serde")]
    pub v2: Mat,
    #[serde(with = "rows_serde")]
    pub u1: Mat,
    #[serde(with = "rows_serde")]
    pub u2: Mat,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    #[serde(with = "rows_serde")]
    pub w1: Mat,
    #[serde(with = "rows_serde")]
    pub w2: Mat,
}

impl TrueEmbeddings {
    /// Builds the factorised form from raw embedding blocks.
    pub fn from_blocks(v1: Mat, v2: Mat) -> Result<Self> {
        let p = v1.ncols();
        if v2.ncols() != p || p == 0 {
            return Err(ClaimeError::Dimension(format!(
                "embedding blocks have {} and {} columns",
                v1.ncols(),
                v2.ncols()
            )));
        }
        if v1.nrows() < p || v2.nrows() < p {
            return Err(ClaimeError::Dimension("each block needs at least p rows".into()));
        }
        // rotate both blocks so block 1 is in diagonal form
        let (_, _, w1_raw) = linalg::dense_svd(&v1);
        let v1 = v1 * &w1_raw;
        let v2 = v2 * &w1_raw;
        let (u1, lambda1, _) = thin_factor(&v1);
        let (u2, lambda2, w2) = thin_factor(&v2);
        Ok(TrueEmbeddings {
            p,
            v1,
            v2,
            u1,
            u2,
            lambda1,
            lambda2,
            w1: Mat::identity(p, p),
            w2,
        })
    }

    /// Orthonormal embeddings with `V*_M = U*_M` (all singular values one),
    /// columns centred over features.
    pub fn orthonormal(d1: usize, d2: usize, p: usize, seed: u64) -> Result<Self> {
        check_dims(d1, d2, p)?;
        if p >= d1 || p >= d2 {
            return Err(ClaimeError::Dimension("orthonormal centred blocks need p < d_M".into()));
        }
        let mut rng = seeded_rng(sub_seed(seed, "orthonormal-embeddings"));
        let mut blocks = [d1, d2].map(|d| {
            let mut g = linalg::standard_normal_matrix(d, p, &mut rng);
            center_columns(&mut g);
            linalg::orthonormal_basis(&g)
        });
        let [b1, b2] = std::mem::replace(&mut blocks, [Mat::zeros(0, 0), Mat::zeros(0, 0)]);
        Ok(TrueEmbeddings {
            p,
            u1: b1.clone(),
            u2: b2.clone(),
            v1: b1,
            v2: b2,
            lambda1: vec![1.0; p],
            lambda2: vec![1.0; p],
            w1: Mat::identity(p, p),
            w2: Mat::identity(p, p),
        })
    }

    pub fn d1(&self) -> usize {
        self.v1.nrows()
    }

    pub fn d2(&self) -> usize {
        self.v2.nrows()
    }

    pub fn d(&self) -> usize {
        self.d1() + self.d2()
    }

    /// `[V1; V2]`
    pub fn stacked(&self) -> Mat {
        stack(&self.v1, &self.v2)
    }

    /// Joint representation `[U1 W1ᵀ; U2 W2ᵀ] / √2`, orthonormal `d × p`.
    pub fn joint_basis(&self) -> Mat {
        let top = &self.u1 * self.w1.transpose();
        let bottom = &self.u2 * self.w2.transpose();
        stack(&top, &bottom) / std::f64::consts::SQRT_2
    }

    pub fn block(&self, modality: u8) -> &Mat {
        if modality == 1 {
            &self.v1
        } else {
            &self.v2
        }
    }
}

fn thin_factor(v: &Mat) -> (Mat, Vec<f64>, Mat) {
    let p = v.ncols();
    let (u, s, w) = linalg::dense_svd(v);
    (u.columns(0, p).into_owned(), s[..p].to_vec(), w.columns(0, p).into_owned())
}

pub(crate) fn stack(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn center_columns(m: &mut Mat) {
    let means = linalg::column_means(m);
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
}

fn check_dims(d1: usize, d2: usize, p: usize) -> Result<()> {
    if d1 < 2 || d2 < 2 {
        return Err(ClaimeError::Dimension(format!("need d1, d2 >= 2 (got {d1}, {d2})")));
    }
    if p < 1 || p > d1.min(d2) {
        return Err(ClaimeError::Dimension(format!("need 1 <= p <= min(d1, d2) (got p = {p})")));
    }
    Ok(())
}

/// Standard-normal embeddings, centred per column and scaled to unit
/// spectral norm in each block.
pub fn make_embeddings(d1: usize, d2: usize, p: usize, seed: u64) -> Result<TrueEmbeddings> {
    check_dims(d1, d2, p)?;
    let mut rng = seeded_rng(sub_seed(seed, "embeddings"));
    let mut make_block = |d: usize| -> Result<Mat> {
        let mut g = linalg::standard_normal_matrix(d, p, &mut rng);
        center_columns(&mut g);
        let s1 = linalg::spectral_norm(&g);
        if s1 <= 0.0 {
            return Err(ClaimeError::numeric("degenerate embedding block"));
        }
        Ok(g / s1)
    };
    let v1 = make_block(d1)?;
    let v2 = make_block(d2)?;
    TrueEmbeddings::from_blocks(v1, v2)
}

/// Requested noise structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Zero,
    /// `Σ_M = diag(I_{p/2}, 0) / c`
    Case1 { c: f64 },
    /// `Σ_M(w, w') = ρ^{|w−w'|} σ_w σ_{w'} / 2`, `σ_w ~ Unif(0, 1)`
    Case2 { rho: f64 },
    /// `Σ1 = P1 P1ᵀ`, `Σ2 = P2 P2ᵀ / 2`, with `P_M ⟂ U*_M`
    LowRankOrthogonal,
    Custom {
        #[serde(with = "rows_serde")]
        sigma1: Mat,
        #[serde(with = "rows_serde")]
        sigma2: Mat,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceKind {
    Zero,
    Case1 { c: f64 },
    Case2 { rho: f64, sigmas1: Vec<f64>, sigmas2: Vec<f64> },
    LowRankOrthogonal {
        #[serde(with = "rows_serde")]
        p1: Mat,
        #[serde(with = "rows_serde")]
        p2: Mat,
    },
    Custom,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseCovariance {
    #[serde(with = "rows_serde")]
    pub sigma1: Mat,
    #[serde(with = "rows_serde")]
    pub sigma2: Mat,
    pub kind: CovarianceKind,
}

impl NoiseCovariance {
    pub fn zero(d1: usize, d2: usize) -> Self {
        NoiseCovariance {
            sigma1: Mat::zeros(d1, d1),
            sigma2: Mat::zeros(d2, d2),
            kind: CovarianceKind::Zero,
        }
    }

    pub fn block(&self, modality: u8) -> &Mat {
        if modality == 1 {
            &self.sigma1
        } else {
            &self.sigma2
        }
    }

    /// `diag(Σ1, Σ2)`
    pub fn joint(&self) -> Mat {
        let (d1, d2) = (self.sigma1.nrows(), self.sigma2.nrows());
        let mut out = Mat::zeros(d1 + d2, d1 + d2);
        out.view_mut((0, 0), (d1, d1)).copy_from(&self.sigma1);
        out.view_mut((d1, d1), (d2, d2)).copy_from(&self.sigma2);
        out
    }
}

pub fn make_noise_covariance(
    spec: &CovarianceSpec,
    d1: usize,
    d2: usize,
    p: usize,
    seed: u64,
    truth: Option<&TrueEmbeddings>,
) -> Result<NoiseCovariance> {
    match spec {
        CovarianceSpec::Zero => Ok(NoiseCovariance::zero(d1, d2)),
        CovarianceSpec::Case1 { c } => {
            if !(*c > 0.0) || !c.is_finite() {
                return Err(ClaimeError::Parameter(format!("Case1 needs c > 0 (got {c})")));
            }
            if p % 2 != 0 {
                return Err(ClaimeError::Parameter(format!("Case1 needs even p (got {p})")));
            }
            let half = p / 2;
            if half > d1 || half > d2 {
                return Err(ClaimeError::Dimension("p/2 exceeds a vocabulary size".into()));
            }
            let block = |d: usize| Mat::from_fn(d, d, |i, j| if i == j && i < half { 1.0 / c } else { 0.0 });
            Ok(NoiseCovariance { sigma1: block(d1), sigma2: block(d2), kind: CovarianceKind::Case1 { c: *c } })
        }
        CovarianceSpec::Case2 { rho } => {
            if !(0.0..1.0).contains(rho) {
                return Err(ClaimeError::Parameter(format!("Case2 needs rho in [0, 1) (got {rho})")));
            }
            let mut rng = seeded_rng(sub_seed(seed, "case2-sigmas"));
            let unif = Uniform::new(0.0, 1.0).expect("valid range");
            let sigmas1: Vec<f64> = (0..d1).map(|_| unif.sample(&mut rng)).collect();
            let sigmas2: Vec<f64> = (0..d2).map(|_| unif.sample(&mut rng)).collect();
            let build = |s: &[f64]| {
                Mat::from_fn(s.len(), s.len(), |i, j| {
                    rho.powi(i.abs_diff(j) as i32) * s[i] * s[j] / 2.0
                })
            };
            Ok(NoiseCovariance {
                sigma1: build(&sigmas1),
                sigma2: build(&sigmas2),
                kind: CovarianceKind::Case2 { rho: *rho, sigmas1, sigmas2 },
            })
        }
        CovarianceSpec::LowRankOrthogonal => {
            let truth = truth.ok_or_else(|| {
                ClaimeError::Parameter("LowRankOrthogonal needs the true embeddings".into())
            })?;
            if truth.d1() != d1 || truth.d2() != d2 || truth.p != p {
                return Err(ClaimeError::Dimension("truth does not match (d1, d2, p)".into()));
            }
            if 2 * p > d1 || 2 * p > d2 {
                return Err(ClaimeError::Dimension("LowRankOrthogonal needs 2p <= d_M".into()));
            }
            let mut rng = seeded_rng(sub_seed(seed, "low-rank-orthogonal"));
            let p1 = orthogonal_complement_block(&truth.u1, p, &mut rng);
            let p2 = orthogonal_complement_block(&truth.u2, p, &mut rng);
            let sigma1 = &p1 * p1.transpose();
            let sigma2 = (&p2 * p2.transpose()) * 0.5;
            Ok(NoiseCovariance { sigma1, sigma2, kind: CovarianceKind::LowRankOrthogonal { p1, p2 } })
        }
        CovarianceSpec::Custom { sigma1, sigma2 } => {
            if sigma1.shape() != (d1, d1) || sigma2.shape() != (d2, d2) {
                return Err(ClaimeError::Dimension("custom covariance has the wrong shape".into()));
            }
            for s in [sigma1, sigma2] {
                if (s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
                    return Err(ClaimeError::Parameter("custom covariance is not symmetric".into()));
                }
            }
            Ok(NoiseCovariance { sigma1: sigma1.clone(), sigma2: sigma2.clone(), kind: CovarianceKind::Custom })
        }
    }
}

/// Orthonormal `d × p` block orthogonal to the columns of `u`.
fn orthogonal_complement_block<R: Rng + ?Sized>(u: &Mat, p: usize, rng: &mut R) -> Mat {
    let q = linalg::orthonormal_basis(u);
    let mut g = linalg::standard_normal_matrix(u.nrows(), p, rng);
    // project twice to push the overlap down to round-off
    for _ in 0..2 {
        let overlap = q.transpose() * &g;
        g -= &q * overlap;
    }
    let mut basis = linalg::orthonormal_basis(&g);
    let overlap = q.transpose() * &basis;
    basis -= &q * overlap;
    linalg::orthonormal_basis(&basis)
}

/// Covariance of the patient latent vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScale {
    /// `c ~ N(0, I_p)`
    Identity,
    /// `c ~ N(0, I_p / p)`, the scale under which `PMI ≈ V Vᵀ / p + Σ`
    #[default]
    InverseDim,
}

impl LatentScale {
    pub fn std_dev(self, p: usize) -> f64 {
        match self {
            LatentScale::Identity => 1.0,
            LatentScale::InverseDim => 1.0 / (p as f64).sqrt(),
        }
    }
}

/// Per-patient sampling options.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SampleOptions {
    pub mean_len: f64,
    #[serde(default)]
    pub latent: LatentScale,
    #[serde(default)]
    pub keep_latent: bool,
    #[serde(default)]
    pub keep_noise: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { mean_len: 50.0, latent: LatentScale::default(), keep_latent: false, keep_noise: false }
    }
}

/// One patient's two token sequences. Token ids are 0-based and local to
/// their modality (`tokens2[t] < d2`); exported files use global 1-based ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub tokens1: Vec<u32>,
    pub tokens2: Vec<u32>,
    pub latent: Option<Vec<f64>>,
    pub noise1: Option<Vec<f64>>,
    pub noise2: Option<Vec<f64>>,
}

impl PatientRecord {
    pub fn new(tokens1: Vec<u32>, tokens2: Vec<u32>) -> Self {
        PatientRecord { tokens1, tokens2, latent: None, noise1: None, noise2: None }
    }

    pub fn t1(&self) -> usize {
        self.tokens1.len()
    }

    pub fn t2(&self) -> usize {
        self.tokens2.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub d1: usize,
    pub d2: usize,
    pub seed: u64,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.patients.len()
    }

    /// Writes `patient_id<TAB>modality<TAB>token_id` lines with 1-based
    /// patients and global 1-based token ids.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, patient) in self.patients.iter().enumerate() {
            for &t in &patient.tokens1 {
                writeln!(out, "{}\t1\t{}", i + 1, t as usize + 1)?;
            }
            for &t in &patient.tokens2 {
                writeln!(out, "{}\t2\t{}", i + 1, self.d1 + t as usize + 1)?;
            }
        }
        Ok(())
    }
}

/// Pre-factorised sampler for one (truth, covariance, options) triple.
pub struct PatientSampler<'a> {
    emb: &'a TrueEmbeddings,
    factor1: Mat,
    factor2: Mat,
    latent_sd: f64,
    lengths: Poisson<f64>,
    opts: SampleOptions,
}

impl<'a> PatientSampler<'a> {
    pub fn new(emb: &'a TrueEmbeddings, cov: &NoiseCovariance, opts: SampleOptions) -> Result<Self> {
        if !(opts.mean_len > 0.0) || !opts.mean_len.is_finite() {
            return Err(ClaimeError::Parameter(format!("mean_len must be positive (got {})", opts.mean_len)));
        }
        if cov.sigma1.nrows() != emb.d1() || cov.sigma2.nrows() != emb.d2() {
            return Err(ClaimeError::Dimension("covariance does not match the embeddings".into()));
        }
        let factor = |s: &Mat, m: u8| {
            linalg::psd_factor(s, PSD_TOLERANCE).map_err(|(worst, floor)| ClaimeError::Numeric {
                message: format!("noise covariance {m} is not PSD: eigenvalue {worst:.3e} below {floor:.3e}"),
                residuals: vec![worst],
            })
        };
        Ok(PatientSampler {
            emb,
            factor1: factor(&cov.sigma1, 1)?,
            factor2: factor(&cov.sigma2, 2)?,
            latent_sd: opts.latent.std_dev(emb.p),
            lengths: Poisson::new(opts.mean_len).map_err(|e| ClaimeError::Parameter(e.to_string()))?,
            opts,
        })
    }

    pub fn draw_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.emb.p, |_, _| self.latent_sd * rng.sample::<f64, _>(StandardNormal))
    }

    /// Draws `ε ~ N(0, Σ_M)` through the PSD factor `F` with `F Fᵀ = Σ_M`.
    pub fn draw_noise<R: Rng + ?Sized>(&self, modality: u8, rng: &mut R) -> DVector<f64> {
        let factor = if modality == 1 { &self.factor1 } else { &self.factor2 };
        if factor.ncols() == 0 {
            return DVector::zeros(factor.nrows());
        }
        let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        factor * z
    }

    fn draw_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        loop {
            let t = self.lengths.sample(rng) as usize;
            if t >= 2 {
                return t;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PatientRecord {
        let c = self.draw_latent(rng);
        let eps1 = self.draw_noise(1, rng);
        let eps2 = self.draw_noise(2, rng);
        let probs1 = softmax_probabilities(&self.emb.v1, &c, &eps1);
        let probs2 = softmax_probabilities(&self.emb.v2, &c, &eps2);
        let t1 = self.draw_length(rng);
        let t2 = self.draw_length(rng);
        let tokens1 = draw_categorical(&probs1, t1, rng);
        let tokens2 = draw_categorical(&probs2, t2, rng);
        PatientRecord {
            tokens1,
            tokens2,
            latent: self.opts.keep_latent.then(|| c.iter().copied().collect()),
            noise1: self.opts.keep_noise.then(|| eps1.iter().copied().collect()),
            noise2: self.opts.keep_noise.then(|| eps2.iter().copied().collect()),
        }
    }
}

/// `p_w ∝ exp(⟨v_w, c⟩ + ε_w)` with max-subtraction.
pub fn softmax_probabilities(v: &Mat, c: &DVector<f64>, eps: &DVector<f64>) -> Vec<f64> {
    let logits = v * c + eps;
    let top = logits.max();
    let mut probs: Vec<f64> = logits.iter().map(|&x| (x - top).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], count: usize, rng: &mut R) -> Vec<u32> {
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cumulative.push(acc);
    }
    let last = probs.len() - 1;
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cumulative.partition_point(|&c| c <= u).min(last) as u32
        })
        .collect()
}

/// One patient from a fresh sampler; prefer [`PatientSampler`] in loops.
pub fn sample_patient<R: Rng + ?Sized>(
    emb: &TrueEmbeddings,
    cov: &NoiseCovariance,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<PatientRecord> {
    Ok(PatientSampler::new(emb, cov, opts)?.sample(rng))
}

/// `n` independent patients; patient `i` uses stream `i` of `seed`, so the
/// output does not depend on the number of worker threads.
pub fn sample_cohort(
    emb: &TrueEmbeddings,
    cov: &NoiseCovariance,
    n: usize,
    opts: SampleOptions,
    seed: u64,
) -> Result<Cohort> {
    if n < 2 {
        return Err(ClaimeError::Parameter(format!("a cohort needs n >= 2 (got {n})")));
    }
    let sampler = PatientSampler::new(emb, cov, opts)?;
    let stream_seed = sub_seed(seed, "patients");
    let patients = (0..n)
        .into_par_iter()
        .map(|i| sampler.sample(&mut stream_rng(stream_seed, i as u64)))
        .collect();
    Ok(Cohort { patients, d1: emb.d1(), d2: emb.d2(), seed })
}
