//! Synthetic two-patch signal-noise data and client partitioning.
//!
//! Every sample carries one patch equal to `y * mu` and one patch holding a
//! Gaussian noise vector orthogonal to `mu`. Noise is drawn by projecting an
//! isotropic draw `g ~ N(0, sigma_p^2 I)` onto the orthogonal complement of
//! `mu`, which samples the degenerate covariance `sigma_p^2 (I - mu mu^T / |mu|^2)`
//! exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;
use crate::Sign;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Parameters of the data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DataModelParams {
    mu: Vec<f64>,
    sigma_p: f64,
}

impl DataModelParams {
    pub fn new(mu: Vec<f64>, sigma_p: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::config("d", format!("must be at least 2, got {}", mu.len())));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("mu", "entries must be finite"));
        }
        if norm_sq(&mu) <= 0.0 {
            return Err(Error::config("mu", "signal vector must be nonzero"));
        }
        if !(sigma_p > 0.0 && sigma_p.is_finite()) {
            return Err(Error::config("sigma_p", format!("must be positive, got {sigma_p}")));
        }
        Ok(Self { mu, sigma_p })
    }

    /// Signal `mu = mu_norm * e_1`.
    pub fn with_norm(d: usize, mu_norm: f64, sigma_p: f64) -> Result<Self> {
        if !(mu_norm > 0.0 && mu_norm.is_finite()) {
            return Err(Error::config("mu_norm", format!("must be positive, got {mu_norm}")));
        }
        let mut mu = vec![0.0; d];
        if let Some(first) = mu.first_mut() {
            *first = mu_norm;
        }
        Self::new(mu, sigma_p)
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    pub fn mu_norm_sq(&self) -> f64 {
        norm_sq(&self.mu)
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu_norm_sq().sqrt()
    }
}

/// Position of the signal patch inside `x = [x(1), x(2)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalPatch {
    First,
    Second,
}

impl SignalPatch {
    /// One-based patch index.
    pub fn index(self) -> u8 {
        match self {
            SignalPatch::First => 1,
            SignalPatch::Second => 2,
        }
    }

    pub fn from_index(index: u8) -> Option<Self> {
        match index {
            1 => Some(SignalPatch::First),
            2 => Some(SignalPatch::Second),
            _ => None,
        }
    }
}

/// One labeled sample with its generating structure retained.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub y: Sign,
    pub signal_patch: SignalPatch,
    /// Patches `x(1)` and `x(2)`.
    pub patches: [Vec<f64>; 2],
    noise_norm_sq: f64,
}

impl SyntheticSample {
    /// Builds a sample from its label, patch position and noise vector.
    ///
    /// The noise is taken as given; callers that need orthogonality to `mu`
    /// project first with [`project_out`].
    pub fn from_parts(y: Sign, signal_patch: SignalPatch, mu: &[f64], noise: Vec<f64>) -> Result<Self> {
        if noise.len() != mu.len() {
            return Err(Error::Shape {
                context: "sample noise",
                expected: mu.len(),
                found: noise.len(),
            });
        }
        let signal: Vec<f64> = mu.iter().map(|v| y.value() * v).collect();
        let noise_norm_sq = norm_sq(&noise);
        let patches = match signal_patch {
            SignalPatch::First => [signal, noise],
            SignalPatch::Second => [noise, signal],
        };
        Ok(Self {
            y,
            signal_patch,
            patches,
            noise_norm_sq,
        })
    }

    pub fn d(&self) -> usize {
        self.patches[0].len()
    }

    /// The signal patch `y * mu`.
    pub fn signal(&self) -> &[f64] {
        match self.signal_patch {
            SignalPatch::First => &self.patches[0],
            SignalPatch::Second => &self.patches[1],
        }
    }

    /// The noise patch `xi`.
    pub fn noise(&self) -> &[f64] {
        match self.signal_patch {
            SignalPatch::First => &self.patches[1],
            SignalPatch::Second => &self.patches[0],
        }
    }

    /// `|xi|^2`, computed once when the sample is built.
    pub fn noise_norm_sq(&self) -> f64 {
        self.noise_norm_sq
    }
}

/// `g - (<g, mu> / |mu|^2) mu`.
pub fn project_out(g: &[f64], mu: &[f64]) -> Vec<f64> {
    let coef = dot(g, mu) / norm_sq(mu);
    g.iter().zip(mu).map(|(gi, mi)| gi - coef * mi).collect()
}

fn draw_noise<R: Rng + ?Sized>(params: &DataModelParams, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..params.d())
        .map(|_| params.sigma_p * rng.sample::<f64, _>(StandardNormal))
        .collect();
    project_out(&g, &params.mu)
}

fn draw_patch<R: Rng + ?Sized>(rng: &mut R) -> SignalPatch {
    if rng.random_bool(0.5) {
        SignalPatch::First
    } else {
        SignalPatch::Second
    }
}

fn build(params: &DataModelParams, labels: Vec<Sign>, rng: &mut impl Rng) -> Vec<SyntheticSample> {
    labels
        .into_iter()
        .map(|y| {
            let patch = draw_patch(rng);
            let noise = draw_noise(params, rng);
            // lengths agree by construction
            SyntheticSample::from_parts(y, patch, &params.mu, noise).expect("noise has length d")
        })
        .collect()
}

/// Training set with exactly `n / 2` samples of each label in shuffled order.
pub fn generate_dataset(params: &DataModelParams, n: usize, rng_seed: u64) -> Result<Vec<SyntheticSample>> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::config("n", format!("must be even and at least 2, got {n}")));
    }
    let mut rng = seed::rng(rng_seed);
    let mut labels: Vec<Sign> = (0..n)
        .map(|i| if i < n / 2 { Sign::Pos } else { Sign::Neg })
        .collect();
    labels.shuffle(&mut rng);
    Ok(build(params, labels, &mut rng))
}

/// Fresh i.i.d. draws from the data distribution (labels uniform on ±1).
pub fn sample_distribution(params: &DataModelParams, n: usize, rng_seed: u64) -> Vec<SyntheticSample> {
    let mut rng = seed::rng(rng_seed);
    let labels: Vec<Sign> = (0..n)
        .map(|_| if rng.random_bool(0.5) { Sign::Pos } else { Sign::Neg })
        .collect();
    build(params, labels, &mut rng)
}

/// Assignment of global sample indices to `K` equal-size clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPartition {
    pub num_clients: usize,
    pub per_client: usize,
    /// `assignment[k]` lists the global sample indices of client `k`, ascending.
    pub assignment: Vec<Vec<usize>>,
    pub realized_h: f64,
}

impl ClientPartition {
    /// Builds a partition from explicit client lists and measures its `h`.
    pub fn from_assignment(assignment: Vec<Vec<usize>>, labels: &[Sign]) -> Result<Self> {
        let num_clients = assignment.len();
        if num_clients == 0 {
            return Err(Error::Partition("no clients".into()));
        }
        let per_client = assignment[0].len();
        if assignment.iter().any(|a| a.len() != per_client) {
            return Err(Error::Partition("clients must hold equally many samples".into()));
        }
        let n = labels.len();
        if num_clients * per_client != n {
            return Err(Error::Partition(format!(
                "{num_clients} clients x {per_client} samples does not cover {n} samples"
            )));
        }
        let mut seen = vec![false; n];
        for &i in assignment.iter().flatten() {
            if i >= n {
                return Err(Error::Partition(format!("sample index {i} out of range 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Partition(format!("sample {i} assigned twice")));
            }
        }
        let mut partition = Self {
            num_clients,
            per_client,
            assignment,
            realized_h: 0.0,
        };
        partition.realized_h = measure_h(&partition, labels)?;
        Ok(partition)
    }

    pub fn n(&self) -> usize {
        self.num_clients * self.per_client
    }

    /// Owned copy of client `k`'s local dataset, in assignment order.
    pub fn client_data(&self, samples: &[SyntheticSample], k: usize) -> Vec<SyntheticSample> {
        self.assignment[k].iter().map(|&i| samples[i].clone()).collect()
    }

    /// Client owning each global sample index.
    pub fn client_of(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n()];
        for (k, list) in self.assignment.iter().enumerate() {
            for &i in list {
                owner[i] = k;
            }
        }
        owner
    }
}

/// Per-client minority count realized for a target `h`.
///
/// Clamped to `N / 2` so the minority class stays the minority when `N` is odd.
pub fn minority_count(target_h: f64, per_client: usize) -> usize {
    ((target_h * per_client as f64).round() as usize).min(per_client / 2)
}

/// Splits samples across `num_clients` clients with per-client minority
/// count `round(target_h * N)`. Client `k` (zero-based) has majority label
/// +1 when `k` is even and -1 when odd.
pub fn partition_clients(
    samples: &[SyntheticSample],
    num_clients: usize,
    target_h: f64,
    rng_seed: u64,
) -> Result<ClientPartition> {
    let n = samples.len();
    if num_clients == 0 {
        return Err(Error::config("K", "must be at least 1"));
    }
    if n == 0 || !n.is_multiple_of(num_clients) {
        return Err(Error::config("K", format!("{n} samples not divisible across {num_clients} clients")));
    }
    if !(0.0..=0.5).contains(&target_h) {
        return Err(Error::config("target_h", format!("must lie in [0, 1/2], got {target_h}")));
    }
    let per_client = n / num_clients;
    let minority = minority_count(target_h, per_client);

    let mut rng = seed::rng(rng_seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| samples[i].y == Sign::Pos).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| samples[i].y == Sign::Neg).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let need_pos: usize = (0..num_clients)
        .map(|k| if k % 2 == 0 { per_client - minority } else { minority })
        .sum();
    let need_neg = n - need_pos;
    if pos.len() < need_pos {
        return Err(Error::Partition(format!(
            "need {need_pos} positive samples, have {} (deficit {})",
            pos.len(),
            need_pos - pos.len()
        )));
    }
    if neg.len() < need_neg {
        return Err(Error::Partition(format!(
            "need {need_neg} negative samples, have {} (deficit {})",
            neg.len(),
            need_neg - neg.len()
        )));
    }

    let mut pos = pos.into_iter();
    let mut neg = neg.into_iter();
    let assignment = (0..num_clients)
        .map(|k| {
            let n_pos = if k % 2 == 0 { per_client - minority } else { minority };
            let mut list: Vec<usize> = pos.by_ref().take(n_pos).collect();
            list.extend(neg.by_ref().take(per_client - n_pos));
            list.sort_unstable();
            list
        })
        .collect();
    let labels: Vec<Sign> = samples.iter().map(|s| s.y).collect();
    ClientPartition::from_assignment(assignment, &labels)
}

/// Heterogeneity `h = sum_k min(|D+_k|, |D-_k|) / n`.
pub fn measure_h(partition: &ClientPartition, labels: &[Sign]) -> Result<f64> {
    let mut total = 0usize;
    let mut covered = 0usize;
    for list in &partition.assignment {
        let mut pos = 0usize;
        let mut neg = 0usize;
        for &i in list {
            match labels.get(i) {
                Some(Sign::Pos) => pos += 1,
                Some(Sign::Neg) => neg += 1,
                None => {
                    return Err(Error::Partition(format!(
                        "sample index {i} out of range for {} labels",
                        labels.len()
                    )))
                }
            }
        }
        covered += list.len();
        total += pos.min(neg);
    }
    if covered == 0 {
        return Err(Error::Partition("empty partition".into()));
    }
    Ok(total as f64 / covered as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix_params() -> DataModelParams {
        DataModelParams::with_norm(200, 3.0, 0.1f64.sqrt()).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(
            DataModelParams::new(vec![0.0, 0.0], 1.0),
            Err(Error::Config { field, .. }) if field == "mu"
        ));
        assert!(matches!(
            DataModelParams::new(vec![1.0], 1.0),
            Err(Error::Config { field, .. }) if field == "d"
        ));
        assert!(matches!(
            DataModelParams::new(vec![1.0, 0.0], 0.0),
            Err(Error::Config { field, .. }) if field == "sigma_p"
        ));
        assert!(generate_dataset(&appendix_params(), 3, 0).is_err());
    }

    #[test]
    fn projection_removes_first_coordinate() {
        let xi = project_out(&[2.0, 3.0, 4.0, 5.0], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(xi, vec![0.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_noise_sample() {
        let mu = [1.0, 2.0, 0.0];
        let xi = project_out(&[0.0; 3], &mu);
        let s = SyntheticSample::from_parts(Sign::Neg, SignalPatch::Second, &mu, xi).unwrap();
        assert_eq!(s.patches[0], vec![0.0; 3]);
        assert_eq!(s.patches[1], vec![-1.0, -2.0, 0.0]);
        assert_eq!(s.noise_norm_sq(), 0.0);
    }

    #[test]
    fn appendix_dataset_structure() {
        let params = appendix_params();
        let data = generate_dataset(&params, 20, 7).unwrap();
        assert_eq!(data.len(), 20);
        assert_eq!(data.iter().filter(|s| s.y == Sign::Pos).count(), 10);
        let mu_norm = params.mu_norm();
        for s in &data {
            let expect: Vec<f64> = params.mu().iter().map(|v| s.y.value() * v).collect();
            assert_eq!(s.signal(), expect.as_slice());
            let xi_norm = s.noise_norm_sq().sqrt();
            assert!(dot(s.noise(), params.mu()).abs() <= 1e-10 * xi_norm * mu_norm);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let params = appendix_params();
        let a = generate_dataset(&params, 20, 11).unwrap();
        let b = generate_dataset(&params, 20, 11).unwrap();
        assert_eq!(a, b);
        let pa = partition_clients(&a, 2, 0.3, 5).unwrap();
        let pb = partition_clients(&b, 2, 0.3, 5).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn partition_endpoints() {
        let data = generate_dataset(&appendix_params(), 20, 7).unwrap();
        let p = partition_clients(&data, 2, 0.0, 1).unwrap();
        assert!(p.assignment[0].iter().all(|&i| data[i].y == Sign::Pos));
        assert!(p.assignment[1].iter().all(|&i| data[i].y == Sign::Neg));
        assert_eq!(p.realized_h, 0.0);

        let p = partition_clients(&data, 2, 0.5, 1).unwrap();
        for list in &p.assignment {
            assert_eq!(list.iter().filter(|&&i| data[i].y == Sign::Pos).count(), 5);
        }
        assert_eq!(p.realized_h, 0.5);
    }

    #[test]
    fn partition_intermediate_h() {
        let data = generate_dataset(&appendix_params(), 20, 7).unwrap();
        let p = partition_clients(&data, 2, 0.3, 1).unwrap();
        // client 0: 7+ 3-, client 1: 3+ 7-
        let pos0 = p.assignment[0].iter().filter(|&&i| data[i].y == Sign::Pos).count();
        let pos1 = p.assignment[1].iter().filter(|&&i| data[i].y == Sign::Pos).count();
        assert_eq!((pos0, pos1), (7, 3));
        assert_eq!(p.realized_h, 6.0 / 20.0);
    }

    #[test]
    fn partition_infeasible_reports_deficit() {
        // three clients with all-positive majorities on clients 0 and 2
        let data = generate_dataset(&appendix_params(), 18, 3).unwrap();
        let err = partition_clients(&data, 3, 0.0, 0).unwrap_err();
        assert!(matches!(err, Error::Partition(ref msg) if msg.contains("deficit 3")), "{err}");
    }

    #[test]
    fn measure_h_direct_counts() {
        use Sign::{Neg, Pos};
        let mut labels = vec![Pos; 7];
        labels.extend([Neg; 3]);
        labels.extend([Pos; 3]);
        labels.extend([Neg; 7]);
        let p = ClientPartition::from_assignment(vec![(0..10).collect(), (10..20).collect()], &labels).unwrap();
        assert_eq!(p.realized_h, 0.3);

        let bad = ClientPartition {
            num_clients: 1,
            per_client: 1,
            assignment: vec![vec![99]],
            realized_h: 0.0,
        };
        assert!(matches!(measure_h(&bad, &labels), Err(Error::Partition(_))));
    }

    #[test]
    fn odd_client_size_clamps_minority() {
        assert_eq!(minority_count(0.5, 5), 2);
        assert_eq!(minority_count(0.3, 10), 3);
        assert_eq!(minority_count(0.0, 10), 0);
    }
}
