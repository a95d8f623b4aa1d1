//! Two-layer ReLU CNN with fixed second layer.
//!
//! The network has `2m` filters `w_{j,r}`, `j` in {+1, -1}, each applied to
//! both patches of the input:
//!
//! ```text
//! f(W, x) = (1/m) sum_r [relu(<w_{+1,r}, x1>) + relu(<w_{+1,r}, x2>)]
//!         - (1/m) sum_r [relu(<w_{-1,r}, x1>) + relu(<w_{-1,r}, x2>)]
//! ```
//!
//! The ReLU derivative uses `relu'(0) = 1`, so the half-space `<w, j mu> >= 0`
//! that defines an aligned filter is closed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{dot, norm_sq, DataModelParams, SyntheticSample};
use crate::error::{Error, Result};
use crate::seed;
use crate::Sign;

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

pub fn relu_prime(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Logistic loss `log(1 + exp(-z))` in overflow-free form.
pub fn logistic_loss(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + (-z).max(0.0)
}

/// `d/dz log(1 + exp(-z)) = -1 / (1 + exp(z))`.
pub fn logistic_loss_prime(z: f64) -> f64 {
    -1.0 / (1.0 + z.exp())
}

/// The `2m` first-layer filters, stored contiguously: filters of class +1
/// occupy slots `0..m`, filters of class -1 occupy `m..2m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnWeights {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl CnnWeights {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            data: vec![0.0; 2 * m * d],
        }
    }

    /// Builds weights from `2m` filters in slot order (+1 filters first).
    pub fn from_filters(m: usize, filters: Vec<Vec<f64>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("m", "must be at least 1"));
        }
        if filters.len() != 2 * m {
            return Err(Error::Shape {
                context: "filter count",
                expected: 2 * m,
                found: filters.len(),
            });
        }
        let d = filters[0].len();
        let mut data = Vec::with_capacity(2 * m * d);
        for f in &filters {
            if f.len() != d {
                return Err(Error::Shape {
                    context: "filter length",
                    expected: d,
                    found: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("weights", "entries must be finite"));
            }
            data.extend_from_slice(f);
        }
        Ok(Self { m, d, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_filters(&self) -> usize {
        2 * self.m
    }

    /// Slot of filter `(j, r)`.
    pub fn slot(&self, j: Sign, r: usize) -> usize {
        j.index() * self.m + r
    }

    /// Inverse of [`CnnWeights::slot`].
    pub fn filter_of_slot(&self, slot: usize) -> (Sign, usize) {
        (Sign::BOTH[slot / self.m], slot % self.m)
    }

    pub fn filter(&self, j: Sign, r: usize) -> &[f64] {
        self.slot_filter(self.slot(j, r))
    }

    pub fn filter_mut(&mut self, j: Sign, r: usize) -> &mut [f64] {
        let s = self.slot(j, r);
        self.slot_filter_mut(s)
    }

    pub fn slot_filter(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.d..(slot + 1) * self.d]
    }

    pub fn slot_filter_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.data[slot * self.d..(slot + 1) * self.d]
    }

    /// All weights flattened in slot order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &CnnWeights) -> Result<()> {
        if self.m != other.m {
            return Err(Error::Shape {
                context: "filters per class",
                expected: self.m,
                found: other.m,
            });
        }
        if self.d != other.d {
            return Err(Error::Shape {
                context: "filter dimension",
                expected: self.d,
                found: other.d,
            });
        }
        Ok(())
    }

    /// `self <- self - step * other`.
    pub fn sub_scaled(&mut self, step: f64, other: &CnnWeights) {
        for (w, g) in self.data.iter_mut().zip(&other.data) {
            *w -= step * g;
        }
    }

    /// `<w_{j,r}, j mu>` for every slot.
    pub fn signal_alignment(&self, mu: &[f64]) -> Vec<f64> {
        (0..self.num_filters())
            .map(|s| {
                let (j, _) = self.filter_of_slot(s);
                j.value() * dot(self.slot_filter(s), mu)
            })
            .collect()
    }

    fn check_sample(&self, x: &SyntheticSample) -> Result<()> {
        if x.d() != self.d {
            return Err(Error::Shape {
                context: "sample dimension",
                expected: self.d,
                found: x.d(),
            });
        }
        Ok(())
    }
}

/// Initialization recipe.
#[derive(Clone, Debug, Default)]
pub struct InitSpec {
    pub sigma_0: f64,
    /// Number of filters forced misaligned, indexed by [`Sign::index`].
    pub forced_misaligned: Option<[usize; 2]>,
    pub pretrained_from: Option<CnnWeights>,
}

impl InitSpec {
    pub fn gaussian(sigma_0: f64) -> Self {
        Self {
            sigma_0,
            ..Self::default()
        }
    }

    pub fn misaligned(sigma_0: f64, per_class: usize) -> Self {
        Self {
            sigma_0,
            forced_misaligned: Some([per_class, per_class]),
            pretrained_from: None,
        }
    }
}

/// Reflects `w` across the hyperplane orthogonal to `mu`, flipping the sign
/// of its `mu`-parallel part.
fn reflect_parallel(w: &mut [f64], mu: &[f64], mu_norm_sq: f64) {
    let coef = 2.0 * dot(w, mu) / mu_norm_sq;
    for (wi, mi) in w.iter_mut().zip(mu) {
        *wi -= coef * mi;
    }
}

pub fn init_weights(spec: &InitSpec, params: &DataModelParams, m: usize, rng_seed: u64) -> Result<CnnWeights> {
    if m == 0 {
        return Err(Error::config("m", "must be at least 1"));
    }
    if let Some(w) = &spec.pretrained_from {
        if spec.forced_misaligned.is_some() {
            return Err(Error::config(
                "forced_misaligned",
                "cannot be combined with a pre-trained initialization",
            ));
        }
        w.same_shape(&CnnWeights::zeros(m, params.d()))?;
        return Ok(w.clone());
    }
    if !(spec.sigma_0 >= 0.0 && spec.sigma_0.is_finite()) {
        return Err(Error::config("sigma_0", format!("must be nonnegative, got {}", spec.sigma_0)));
    }

    let d = params.d();
    let mut rng = seed::rng(rng_seed);
    let mut w = CnnWeights::zeros(m, d);
    for v in w.as_mut_slice() {
        *v = spec.sigma_0 * rng.sample::<f64, _>(StandardNormal);
    }

    if let Some(forced) = spec.forced_misaligned {
        let mu = params.mu();
        let mu_norm_sq = params.mu_norm_sq();
        for j in Sign::BOTH {
            let target = forced[j.index()];
            if target > m {
                return Err(Error::config(
                    "forced_misaligned",
                    format!("{target} exceeds m = {m} for j = {j}"),
                ));
            }
            let align: Vec<f64> = (0..m).map(|r| j.value() * dot(w.filter(j, r), mu)).collect();
            let current = align.iter().filter(|&&a| a < 0.0).count();
            let to_flip: Vec<usize> = if current > target {
                (0..m).filter(|&r| align[r] < 0.0).take(current - target).collect()
            } else {
                let candidates: Vec<usize> = (0..m).filter(|&r| align[r] > 0.0).collect();
                if candidates.len() < target - current {
                    return Err(Error::config(
                        "forced_misaligned",
                        format!(
                            "cannot misalign {target} filters for j = {j}: only {} have a nonzero signal component",
                            current + candidates.len()
                        ),
                    ));
                }
                candidates.into_iter().take(target - current).collect()
            };
            for r in to_flip {
                reflect_parallel(w.filter_mut(j, r), mu, mu_norm_sq);
            }
        }
    }
    Ok(w)
}

fn half_logit(w: &CnnWeights, j: Sign, x: &SyntheticSample) -> f64 {
    let m = w.m();
    let sum: f64 = (0..m)
        .map(|r| {
            let f = w.filter(j, r);
            relu(dot(f, &x.patches[0])) + relu(dot(f, &x.patches[1]))
        })
        .sum();
    sum / m as f64
}

/// Network output `f(W, x)` evaluated on the raw patches.
pub fn forward(w: &CnnWeights, x: &SyntheticSample) -> Result<f64> {
    w.check_sample(x)?;
    Ok(half_logit(w, Sign::Pos, x) - half_logit(w, Sign::Neg, x))
}

/// Mean logistic loss `(1/N) sum_i l(y_i f(W, x_i))`.
pub fn loss(w: &CnnWeights, dataset: &[SyntheticSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Usage("loss of an empty dataset".into()));
    }
    let mut total = 0.0;
    for x in dataset {
        total += logistic_loss(x.y.value() * forward(w, x)?);
    }
    Ok(total / dataset.len() as f64)
}

/// Per-sample quantities of one gradient evaluation: `l'_i` and the ReLU
/// derivative masks of every filter on the signal and noise patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub num_samples: usize,
    /// `l'(y_i f(W, x_i))`, one per sample.
    pub loss_derivs: Vec<f64>,
    /// `relu'(<w_slot, y_i mu>)`, indexed `slot * N + i`.
    pub signal_active: Vec<bool>,
    /// `relu'(<w_slot, xi_i>)`, indexed `slot * N + i`.
    pub noise_active: Vec<bool>,
    pub mean_loss: f64,
}

impl Activations {
    pub fn signal(&self, slot: usize, i: usize) -> bool {
        self.signal_active[slot * self.num_samples + i]
    }

    pub fn noise(&self, slot: usize, i: usize) -> bool {
        self.noise_active[slot * self.num_samples + i]
    }
}

/// Evaluates outputs, loss derivatives and ReLU masks on `dataset`.
pub fn activations(w: &CnnWeights, dataset: &[SyntheticSample]) -> Result<Activations> {
    if dataset.is_empty() {
        return Err(Error::Usage("gradient of an empty dataset".into()));
    }
    let n = dataset.len();
    let slots = w.num_filters();
    let inv_m = 1.0 / w.m() as f64;
    let mut signal_active = vec![false; slots * n];
    let mut noise_active = vec![false; slots * n];
    let mut outputs = vec![0.0; n];

    for (i, x) in dataset.iter().enumerate() {
        w.check_sample(x)?;
        let (mut pos, mut neg) = (0.0, 0.0);
        for s in 0..slots {
            let f = w.slot_filter(s);
            let a_sig = dot(f, x.signal());
            let a_noise = dot(f, x.noise());
            signal_active[s * n + i] = a_sig >= 0.0;
            noise_active[s * n + i] = a_noise >= 0.0;
            let v = relu(a_sig) + relu(a_noise);
            if s < w.m() {
                pos += v;
            } else {
                neg += v;
            }
        }
        outputs[i] = pos * inv_m - neg * inv_m;
    }

    let mut loss_derivs = Vec::with_capacity(n);
    let mut total = 0.0;
    for (x, f) in dataset.iter().zip(&outputs) {
        let z = x.y.value() * f;
        total += logistic_loss(z);
        loss_derivs.push(logistic_loss_prime(z));
    }
    Ok(Activations {
        num_samples: n,
        loss_derivs,
        signal_active,
        noise_active,
        mean_loss: total / n as f64,
    })
}

/// Gradient of the mean loss assembled from precomputed activations.
///
/// `dL/dw_{j,r} = (1/N) sum_i l'_i (j/m) [relu'(<w, y_i mu>) mu + relu'(<w, xi_i>) y_i xi_i]`,
/// with `mu = y_i * signal_i`. Samples are reduced in ascending index order.
pub fn gradient_from_activations(w: &CnnWeights, dataset: &[SyntheticSample], act: &Activations) -> CnnWeights {
    let n = dataset.len();
    let scale = 1.0 / (n as f64 * w.m() as f64);
    let mut grad = CnnWeights::zeros(w.m(), w.d());
    for s in 0..w.num_filters() {
        let (j, _) = w.filter_of_slot(s);
        let g = grad.slot_filter_mut(s);
        for (i, x) in dataset.iter().enumerate() {
            let base = act.loss_derivs[i] * j.value() * scale * x.y.value();
            if act.signal(s, i) {
                for (gk, sk) in g.iter_mut().zip(x.signal()) {
                    *gk += base * sk;
                }
            }
            if act.noise(s, i) {
                for (gk, nk) in g.iter_mut().zip(x.noise()) {
                    *gk += base * nk;
                }
            }
        }
    }
    grad
}

/// Gradient of [`loss`] with respect to every filter.
pub fn gradient(w: &CnnWeights, dataset: &[SyntheticSample]) -> Result<CnnWeights> {
    let act = activations(w, dataset)?;
    Ok(gradient_from_activations(w, dataset, &act))
}

/// `grad_W f(W, x)`, used for the Euler identity `<grad f, W> = f`.
pub fn output_gradient(w: &CnnWeights, x: &SyntheticSample) -> Result<CnnWeights> {
    w.check_sample(x)?;
    let inv_m = 1.0 / w.m() as f64;
    let mut grad = CnnWeights::zeros(w.m(), w.d());
    for s in 0..w.num_filters() {
        let (j, _) = w.filter_of_slot(s);
        let f = w.slot_filter(s).to_vec();
        let g = grad.slot_filter_mut(s);
        for patch in &x.patches {
            if dot(&f, patch) >= 0.0 {
                for (gk, pk) in g.iter_mut().zip(patch) {
                    *gk += j.value() * inv_m * pk;
                }
            }
        }
    }
    Ok(grad)
}

/// `|w_slot|^2` helper used by reports.
pub fn filter_norm_sq(w: &CnnWeights, slot: usize) -> f64 {
    norm_sq(w.slot_filter(slot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, project_out, SignalPatch};

    fn params() -> DataModelParams {
        DataModelParams::with_norm(200, 3.0, 0.1f64.sqrt()).unwrap()
    }

    #[test]
    fn loss_values() {
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // log(1 + e^-10) evaluated in 50-digit arithmetic
        assert!((logistic_loss(10.0) - 4.539889921686465e-5).abs() < 1e-18);
        assert!((logistic_loss(-800.0) - 800.0).abs() < 1e-9);
        assert!(logistic_loss(800.0) >= 0.0);
        assert_eq!(logistic_loss_prime(0.0), -0.5);
        assert!(logistic_loss_prime(800.0).abs() < 1e-300);
    }

    #[test]
    fn zero_weights() {
        let p = params();
        let data = generate_dataset(&p, 20, 1).unwrap();
        let w = CnnWeights::zeros(10, 200);
        for x in &data {
            assert_eq!(forward(&w, x).unwrap(), 0.0);
        }
        assert!((loss(&w, &data).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss(&w, &[]).is_err());
    }

    #[test]
    fn single_filter_hand_evaluation() {
        let mu = vec![3.0, 0.0, 0.0, 0.0];
        let xi = project_out(&[0.5, 1.0, -2.0, 0.25], &mu);
        let x = SyntheticSample::from_parts(Sign::Pos, SignalPatch::First, &mu, xi.clone()).unwrap();
        let w = CnnWeights::from_filters(1, vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        // <w, xi> = 0 here, so f = |mu| exactly
        assert_eq!(forward(&w, &x).unwrap(), 3.0);

        let w = CnnWeights::from_filters(1, vec![vec![1.0, 0.5, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        assert_eq!(forward(&w, &x).unwrap(), 3.0 + 0.5);
    }

    #[test]
    fn negative_sample_with_no_positive_filters() {
        let p = params();
        let mut w = init_weights(&InitSpec::gaussian(1.0), &p, 4, 3).unwrap();
        for r in 0..4 {
            w.filter_mut(Sign::Pos, r).fill(0.0);
        }
        for x in generate_dataset(&p, 20, 2).unwrap().iter() {
            assert!(forward(&w, x).unwrap() <= 0.0);
        }
    }

    #[test]
    fn shape_errors() {
        let p = params();
        let data = generate_dataset(&p, 2, 0).unwrap();
        let w = CnnWeights::zeros(2, 10);
        assert!(matches!(forward(&w, &data[0]), Err(Error::Shape { .. })));
        assert!(matches!(gradient(&w, &data), Err(Error::Shape { .. })));
    }

    #[test]
    fn one_sample_gradient_matches_chain_rule() {
        let mu = vec![2.0, 0.0, 0.0];
        let xi = vec![0.0, 1.0, 1.0];
        let x = SyntheticSample::from_parts(Sign::Neg, SignalPatch::Second, &mu, xi.clone()).unwrap();
        // both preactivations of the +1 filter positive: <w, -mu> = 1, <w, xi> = 1
        let w = CnnWeights::from_filters(1, vec![vec![-0.5, 0.5, 0.5], vec![0.0; 3]]).unwrap();
        let f = forward(&w, &x).unwrap();
        let lp = logistic_loss_prime(x.y.value() * f);
        let g = gradient(&w, std::slice::from_ref(&x)).unwrap();
        for k in 0..3 {
            let expect = lp * (mu[k] + x.y.value() * xi[k]);
            assert!((g.filter(Sign::Pos, 0)[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_loss_gives_zero_gradient() {
        let mu = vec![1.0, 0.0];
        let x = SyntheticSample::from_parts(Sign::Pos, SignalPatch::First, &mu, vec![0.0, 0.0]).unwrap();
        let w = CnnWeights::from_filters(1, vec![vec![1e4, 0.0], vec![0.0, 0.0]]).unwrap();
        let g = gradient(&w, &[x]).unwrap();
        assert!(g.max_abs() < 1e-300);
    }

    #[test]
    fn forced_misalignment_counts() {
        let p = params();
        for seed in 0..5 {
            let w = init_weights(&InitSpec::misaligned(0.01, 5), &p, 10, seed).unwrap();
            for j in Sign::BOTH {
                let mis = (0..10).filter(|&r| j.value() * dot(w.filter(j, r), p.mu()) < 0.0).count();
                assert_eq!(mis, 5);
            }
            let w = init_weights(&InitSpec::misaligned(0.01, 0), &p, 10, seed).unwrap();
            assert!(w.signal_alignment(p.mu()).iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn forcing_only_touches_parallel_component() {
        let p = params();
        let raw = init_weights(&InitSpec::gaussian(0.01), &p, 10, 9).unwrap();
        let forced = init_weights(&InitSpec::misaligned(0.01, 10), &p, 10, 9).unwrap();
        for s in 0..20 {
            let a = raw.slot_filter(s);
            let b = forced.slot_filter(s);
            assert_eq!(&a[1..], &b[1..]);
            assert!((a[0].abs() - b[0].abs()).abs() <= 4.0 * f64::EPSILON * a[0].abs());
        }
    }

    #[test]
    fn zero_sigma_init() {
        let p = params();
        let w = init_weights(&InitSpec::gaussian(0.0), &p, 3, 0).unwrap();
        assert_eq!(w.max_abs(), 0.0);
        assert!(w.signal_alignment(p.mu()).iter().all(|&a| a >= 0.0));
        assert!(init_weights(&InitSpec::misaligned(0.0, 1), &p, 3, 0).is_err());
        assert!(init_weights(&InitSpec::misaligned(0.01, 4), &p, 3, 0).is_err());
    }

    #[test]
    fn pretrained_init_is_copied() {
        let p = params();
        let base = init_weights(&InitSpec::gaussian(0.3), &p, 3, 4).unwrap();
        let spec = InitSpec {
            sigma_0: 0.01,
            forced_misaligned: None,
            pretrained_from: Some(base.clone()),
        };
        assert_eq!(init_weights(&spec, &p, 3, 99).unwrap(), base);
        let both = InitSpec {
            forced_misaligned: Some([1, 1]),
            ..spec
        };
        assert!(init_weights(&both, &p, 3, 0).is_err());
    }
}
