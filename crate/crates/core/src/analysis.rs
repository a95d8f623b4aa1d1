//! Alignment accounting, SNR, the test-error bound, Monte-Carlo test error,
//! coefficient growth tables and the sign-agreement misalignment score.

use std::fmt;

use crate::data::{dot, sample_distribution, DataModelParams, SyntheticSample};
use crate::error::{Error, Result};
use crate::fedavg::{Checkpoint, CoefficientLedger};
use crate::model::{forward, CnnWeights};
use crate::Sign;

/// Aligned filter sets `A_j = { r : <w_{j,r}, j mu> >= 0 }`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentReport {
    pub m: usize,
    /// Aligned filter indices, indexed by [`Sign::index`].
    pub aligned: [Vec<usize>; 2],
}

impl AlignmentReport {
    pub fn aligned_count(&self, j: Sign) -> usize {
        self.aligned[j.index()].len()
    }

    pub fn misaligned_count(&self, j: Sign) -> usize {
        self.m - self.aligned_count(j)
    }

    pub fn is_aligned(&self, j: Sign, r: usize) -> bool {
        self.aligned[j.index()].binary_search(&r).is_ok()
    }
}

pub fn alignment_report(w: &CnnWeights, mu: &[f64]) -> Result<AlignmentReport> {
    if mu.len() != w.d() {
        return Err(Error::Shape {
            context: "signal dimension",
            expected: w.d(),
            found: mu.len(),
        });
    }
    let aligned = Sign::BOTH.map(|j| {
        (0..w.m())
            .filter(|&r| j.value() * dot(w.filter(j, r), mu) >= 0.0)
            .collect()
    });
    Ok(AlignmentReport { m: w.m(), aligned })
}

/// `SNR = |mu| / (sigma_p sqrt(d))`.
pub fn snr(params: &DataModelParams) -> f64 {
    params.mu_norm() / (params.sigma_p() * (params.d() as f64).sqrt())
}

/// Raw comparands for the benign/harmful regime test `SNR^2` vs `1/sqrt(n d)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrRegime {
    pub snr: f64,
    pub snr_sq: f64,
    pub threshold: f64,
}

pub fn snr_regime(params: &DataModelParams, n: usize) -> SnrRegime {
    let s = snr(params);
    SnrRegime {
        snr: s,
        snr_sq: s * s,
        threshold: 1.0 / ((n * params.d()) as f64).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    /// `|A_j|`, indexed by [`Sign::index`].
    pub aligned: [usize; 2],
    pub h: f64,
    pub tau: usize,
    pub snr: f64,
}

impl BoundInputs {
    pub fn new(params: &DataModelParams, n: usize, alignment: &AlignmentReport, h: f64, tau: usize) -> Self {
        Self {
            n,
            d: params.d(),
            m: alignment.m,
            aligned: [alignment.aligned_count(Sign::Pos), alignment.aligned_count(Sign::Neg)],
            h,
            tau,
            snr: snr(params),
        }
    }

    /// Checks the stored SNR against one recomputed from raw parameters.
    pub fn check_snr(&self, params: &DataModelParams) -> Result<()> {
        let fresh = snr(params);
        if ((self.snr - fresh) / fresh).abs() > 1e-12 {
            return Err(Error::config("snr", format!("stored {} but parameters give {fresh}", self.snr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundValue {
    /// `exp(-(n/d) [bracket_j]^2)`, indexed by [`Sign::index`].
    pub per_label: [f64; 2],
    /// `(1/2) sum_j per_label[j]`.
    pub average: f64,
}

/// Upper bound on test error as a function of alignment, heterogeneity and
/// local steps:
///
/// ```text
/// (1/2) sum_j exp(-(n/d) [ a_j SNR^2 + (1 - a_j) SNR^2 (h + (1 - h)/tau) ]^2),  a_j = |A_j|/m
/// ```
///
/// Constants are taken literally; the value is a trend diagnostic.
pub fn theorem2_bound(b: &BoundInputs) -> BoundValue {
    let snr_sq = b.snr * b.snr;
    let local = b.h + (1.0 - b.h) / b.tau as f64;
    let per_label = b.aligned.map(|a| {
        let frac = a as f64 / b.m as f64;
        let bracket = frac * snr_sq + (1.0 - frac) * snr_sq * local;
        (-(b.n as f64 / b.d as f64) * bracket * bracket).exp()
    });
    BoundValue {
        per_label,
        average: 0.5 * (per_label[0] + per_label[1]),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestErrorEstimate {
    pub error: f64,
    pub stderr: f64,
    pub n_test: usize,
    /// Every test output was exactly zero.
    pub degenerate: bool,
}

/// Misclassification rate on `samples`; `f = 0` counts as an error.
pub fn error_on(w: &CnnWeights, samples: &[SyntheticSample]) -> Result<TestErrorEstimate> {
    if samples.is_empty() {
        return Err(Error::Usage("test error needs at least one sample".into()));
    }
    let mut wrong = 0usize;
    let mut all_zero = true;
    for x in samples {
        let f = forward(w, x)?;
        if f != 0.0 {
            all_zero = false;
        }
        if !(x.y.value() * f > 0.0) {
            wrong += 1;
        }
    }
    let n = samples.len() as f64;
    let p = wrong as f64 / n;
    Ok(TestErrorEstimate {
        error: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        n_test: samples.len(),
        degenerate: all_zero,
    })
}

/// Monte-Carlo estimate of `P(y != sign f(W, x))` over fresh samples.
pub fn test_error(w: &CnnWeights, params: &DataModelParams, n_test: usize, rng_seed: u64) -> Result<TestErrorEstimate> {
    if n_test == 0 {
        return Err(Error::config("n_test", "must be at least 1"));
    }
    error_on(w, &sample_distribution(params, n_test, rng_seed))
}

/// `Gamma / sum Pbar`, with flags where the quotient is not a number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoefficientRatio {
    Finite(f64),
    /// `sum Pbar = 0` with `Gamma > 0`.
    Infinite,
    /// Both terms zero.
    Indeterminate,
}

impl CoefficientRatio {
    pub fn new(gamma: f64, sum_pbar: f64) -> Self {
        if sum_pbar > 0.0 {
            CoefficientRatio::Finite(gamma / sum_pbar)
        } else if gamma > 0.0 {
            CoefficientRatio::Infinite
        } else {
            CoefficientRatio::Indeterminate
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            CoefficientRatio::Finite(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for CoefficientRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientRatio::Finite(v) => write!(f, "{v:.16e}"),
            CoefficientRatio::Infinite => f.write_str("inf"),
            CoefficientRatio::Indeterminate => f.write_str("indeterminate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthRow {
    pub round: usize,
    pub j: Sign,
    pub r: usize,
    pub gamma: f64,
    pub sum_pbar: f64,
    pub ratio: CoefficientRatio,
    pub aligned_at_init: bool,
}

/// Per-filter signal learning, noise memorization and their ratio at every
/// recorded round, ordered by `(round, j, r)`.
pub fn growth_summary(ledger: &CoefficientLedger, alignment: &AlignmentReport) -> Vec<GrowthRow> {
    let m = ledger.m();
    let mut rows = Vec::with_capacity(ledger.history().len() * 2 * m);
    for snap in ledger.history() {
        for j in Sign::BOTH {
            for r in 0..m {
                let slot = j.index() * m + r;
                let gamma = snap.gamma[slot];
                let sum_pbar = ledger.sum_pbar(snap.round, slot);
                rows.push(GrowthRow {
                    round: snap.round,
                    j,
                    r,
                    gamma,
                    sum_pbar,
                    ratio: CoefficientRatio::new(gamma, sum_pbar),
                    aligned_at_init: alignment.is_aligned(j, r),
                });
            }
        }
    }
    rows
}

fn sign_of(v: f64) -> i64 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalAlignment {
    pub round: usize,
    /// Sign-agreement score of every filter slot against the reference.
    pub scores: Vec<i64>,
    /// Fraction of filters with a negative score, indexed by [`Sign::index`].
    pub misaligned_fraction: [f64; 2],
}

/// Sign-agreement score of filter `w` against `reference` over the feature
/// maps `[<w, x(1)>, <w, x(2)>]` of every sample in `batch`; `sign(0) = +1`.
pub fn agreement_score(w: &[f64], reference: &[f64], batch: &[SyntheticSample]) -> i64 {
    batch
        .iter()
        .flat_map(|x| x.patches.iter())
        .map(|patch| sign_of(dot(w, patch)) * sign_of(dot(reference, patch)))
        .sum()
}

/// Empirical misalignment of each checkpoint relative to `reference`.
pub fn empirical_misalignment(
    checkpoints: &[Checkpoint],
    reference: &CnnWeights,
    batch: &[SyntheticSample],
) -> Result<Vec<EmpiricalAlignment>> {
    if batch.is_empty() {
        return Err(Error::Usage("empirical misalignment needs a nonempty batch".into()));
    }
    if let Some(x) = batch.iter().find(|x| x.d() != reference.d()) {
        return Err(Error::Shape {
            context: "batch sample dimension",
            expected: reference.d(),
            found: x.d(),
        });
    }
    let m = reference.m();
    checkpoints
        .iter()
        .map(|c| {
            c.weights.same_shape(reference)?;
            let scores: Vec<i64> = (0..reference.num_filters())
                .map(|s| agreement_score(c.weights.slot_filter(s), reference.slot_filter(s), batch))
                .collect();
            let misaligned_fraction = Sign::BOTH.map(|j| {
                let off = j.index() * m;
                scores[off..off + m].iter().filter(|&&a| a < 0).count() as f64 / m as f64
            });
            Ok(EmpiricalAlignment {
                round: c.round,
                scores,
                misaligned_fraction,
            })
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mu = mean(values);
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && values[order[k + 1]] == values[order[i]] {
            k += 1;
        }
        let rank = (i + k) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=k] {
            ranks[idx] = rank;
        }
        i = k + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SignalPatch};
    use crate::model::{init_weights, InitSpec};

    fn params() -> DataModelParams {
        DataModelParams::with_norm(200, 3.0, 0.1f64.sqrt()).unwrap()
    }

    #[test]
    fn snr_appendix_value() {
        let p = params();
        assert!((snr(&p) - 3.0 / 20f64.sqrt()).abs() < 1e-15);
        assert!((snr(&p) - 0.6708203932499369).abs() < 1e-15);
        let wide = DataModelParams::with_norm(800, 3.0, 0.1f64.sqrt()).unwrap();
        assert!((snr(&wide) - snr(&p) / 2.0).abs() < 1e-15);
        let noisy = DataModelParams::with_norm(200, 3.0, 1e12).unwrap();
        assert!(snr(&noisy) < 1e-12);
        let regime = snr_regime(&p, 20);
        assert!((regime.threshold - 1.0 / 4000f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn alignment_of_forced_and_zero_init() {
        let p = params();
        let w = init_weights(&InitSpec::misaligned(0.01, 5), &p, 10, 2).unwrap();
        let rep = alignment_report(&w, p.mu()).unwrap();
        assert_eq!((rep.misaligned_count(Sign::Pos), rep.misaligned_count(Sign::Neg)), (5, 5));

        let rep = alignment_report(&CnnWeights::zeros(10, 200), p.mu()).unwrap();
        assert_eq!(rep.aligned_count(Sign::Pos) + rep.aligned_count(Sign::Neg), 20);
        assert!(alignment_report(&w, &[1.0; 3]).is_err());
    }

    #[test]
    fn bound_special_cases() {
        let inputs = BoundInputs {
            n: 20,
            d: 200,
            m: 10,
            aligned: [10, 10],
            h: 0.0,
            tau: 100,
            snr: 0.6708203932499369,
        };
        let full = theorem2_bound(&inputs).average;
        let snr4 = inputs.snr.powi(4);
        assert!((full - (-20.0 * snr4 / 200.0).exp()).abs() < 1e-12);

        let tau1 = BoundInputs {
            aligned: [3, 7],
            tau: 1,
            ..inputs.clone()
        };
        let expect = (-(20.0 / 200.0) * snr4).exp();
        assert!((theorem2_bound(&tau1).average - expect).abs() < 1e-12);

        // h = 1/2: bracket = SNR^2 (a + (1 - a)(1/2 + 1/(2 tau)))
        let half = BoundInputs {
            aligned: [4, 4],
            h: 0.5,
            tau: 4,
            ..inputs.clone()
        };
        let bracket = inputs.snr.powi(2) * (0.4 + 0.6 * (0.5 + 0.125));
        assert!((theorem2_bound(&half).per_label[0] - (-0.1 * bracket * bracket).exp()).abs() < 1e-15);
        let p = params();
        assert!(inputs.check_snr(&p).is_ok());
        assert!(BoundInputs { snr: 0.5, ..inputs }.check_snr(&p).is_err());
    }

    #[test]
    fn zero_weights_error_is_one() {
        let p = params();
        let est = test_error(&CnnWeights::zeros(3, 200), &p, 200, 1).unwrap();
        assert_eq!(est.error, 1.0);
        assert!(est.degenerate);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn single_signal_filter_zero_noise_limit() {
        // sigma_p -> 0: only the +1 class is ever scored positive
        let mu = vec![3.0, 0.0];
        let mut w = CnnWeights::zeros(1, 2);
        w.filter_mut(Sign::Pos, 0).copy_from_slice(&[1.0, 0.0]);
        let samples: Vec<_> = (0..400)
            .map(|i| {
                let y = if i % 2 == 0 { Sign::Pos } else { Sign::Neg };
                SyntheticSample::from_parts(y, SignalPatch::First, &mu, vec![0.0, 0.0]).unwrap()
            })
            .collect();
        assert_eq!(error_on(&w, &samples).unwrap().error, 0.5);
    }

    #[test]
    fn ratio_flags() {
        assert_eq!(CoefficientRatio::new(0.0, 0.0), CoefficientRatio::Indeterminate);
        assert_eq!(CoefficientRatio::new(1.0, 0.0), CoefficientRatio::Infinite);
        assert_eq!(CoefficientRatio::new(1.0, 4.0).value(), Some(0.25));
        assert_eq!(CoefficientRatio::Indeterminate.to_string(), "indeterminate");
    }

    #[test]
    fn empirical_misalignment_self_and_flip() {
        let p = params();
        let w = init_weights(&InitSpec::gaussian(0.5), &p, 4, 1).unwrap();
        let batch = generate_dataset(&p, 20, 1).unwrap();
        let mut flipped = w.clone();
        flipped.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        let cps = vec![
            Checkpoint { round: 0, weights: flipped },
            Checkpoint { round: 5, weights: w.clone() },
        ];
        let rows = empirical_misalignment(&cps, &w, &batch).unwrap();
        // a flip disagrees everywhere except on patches where both products are exactly 0
        assert_eq!(rows[0].misaligned_fraction, [1.0, 1.0]);
        assert!(rows[1].scores.iter().all(|&a| a == 40));
        assert_eq!(rows[1].misaligned_fraction, [0.0, 0.0]);
        assert!(empirical_misalignment(&cps, &w, &[]).is_err());
    }

    #[test]
    fn spearman_ties_and_constants() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
        assert!((slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
