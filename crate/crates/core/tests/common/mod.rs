//! Shared oracles for the integration tests.
#![allow(dead_code)]

use claime::gen::{Cohort, PatientRecord};
use claime::linalg::Mat;
use rand::Rng;

/// Random cohort with `n` patients over `d1 + d2` features; every patient
/// has at least two tokens per modality.
pub fn random_cohort<R: Rng>(rng: &mut R, n: usize, d1: usize, d2: usize, max_len: usize) -> Cohort {
    let patients = (0..n)
        .map(|_| {
            let t1 = rng.random_range(2..=max_len.max(2));
            let t2 = rng.random_range(2..=max_len.max(2));
            PatientRecord::new(
                (0..t1).map(|_| rng.random_range(0..d1 as u32)).collect(),
                (0..t2).map(|_| rng.random_range(0..d2 as u32)).collect(),
            )
        })
        .collect();
    Cohort { patients, d1, d2, seed: 0 }
}

/// Tokens of patient `i` in modality `m`.
fn seq(c: &Cohort, i: usize, m: u8) -> &[u32] {
    if m == 1 {
        &c.patients[i].tokens1
    } else {
        &c.patients[i].tokens2
    }
}

/// Direct enumeration of pairs. `same_patient` selects within-patient
/// pairs (positions `t ≠ s` when `ma == mb`) or cross-patient pairs `i ≠ j`.
pub fn brute_pairs(c: &Cohort, ma: u8, mb: u8, same_patient: bool) -> Mat {
    let (ra, rb) = (if ma == 1 { c.d1 } else { c.d2 }, if mb == 1 { c.d1 } else { c.d2 });
    let mut out = Mat::zeros(ra, rb);
    let n = c.patients.len();
    for i in 0..n {
        for j in 0..n {
            if (i == j) != same_patient {
                continue;
            }
            for (t, &w) in seq(c, i, ma).iter().enumerate() {
                for (s, &u) in seq(c, j, mb).iter().enumerate() {
                    if same_patient && ma == mb && t == s {
                        continue;
                    }
                    out[(w as usize, u as usize)] += 1.0;
                }
            }
        }
    }
    out
}

/// Rows of `v` zeroed where `present` is false.
pub fn mask_rows(mut v: Mat, present: &[bool]) -> Mat {
    for (w, &keep) in present.iter().enumerate() {
        if !keep {
            v.row_mut(w).fill(0.0);
        }
    }
    v
}

/// `(max − min) / max(|x|, floor)` over `xs`.
pub fn relative_spread(xs: &[f64], floor: f64) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = xs.iter().map(|x| x.abs()).fold(floor, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        (hi - lo) / scale
    }
}
