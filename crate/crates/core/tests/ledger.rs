mod common;

use common::{dot, norm, paper_params, reference_output, setup, Setup};
use fedalign::data::{ClientPartition, DataModelParams};
use fedalign::fedavg::{train, FedConfig, TrainOutput};
use fedalign::model::InitSpec;
use fedalign::Sign;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn run(s: &Setup, eta: f64, tau: usize, rounds: usize) -> TrainOutput {
    let mut cfg = FedConfig::new(eta, tau, rounds).unwrap();
    cfg.checkpoint_every = 1;
    train(&s.samples, &s.partition, &s.init, s.params.mu(), &cfg).unwrap()
}

/// Recovers `(Gamma, P)` for one filter by solving the Gram system of
/// `[mu, xi_1, ..., xi_n]` against the displacement from initialization.
fn gram_coefficients(s: &Setup, j: Sign, delta: &[f64]) -> (f64, Vec<f64>) {
    let d = s.params.d();
    let n = s.samples.len();
    let mut basis = DMatrix::<f64>::zeros(d, n + 1);
    basis.set_column(0, &DVector::from_column_slice(s.params.mu()));
    for (i, x) in s.samples.iter().enumerate() {
        basis.set_column(i + 1, &DVector::from_column_slice(x.noise()));
    }
    let gram = basis.transpose() * &basis;
    let rhs = basis.transpose() * DVector::from_column_slice(delta);
    let c = gram.cholesky().expect("basis is linearly independent").solve(&rhs);
    let gamma = j.value() * c[0] * s.params.mu_norm_sq();
    let p = (0..n).map(|i| c[i + 1] * s.samples[i].noise_norm_sq()).collect();
    (gamma, p)
}

#[test]
fn coefficients_match_gram_solve_oracle() {
    let s = setup(paper_params(), 20, 2, 0.0, 10, &InitSpec::misaligned(0.01, 5), 11);
    let out = run(&s, 0.1, 20, 6);
    let ledger = &out.ledger;
    for c in &out.checkpoints {
        let snap = ledger.at(c.round).unwrap();
        for slot in 0..c.weights.num_filters() {
            let (j, _) = c.weights.filter_of_slot(slot);
            let delta: Vec<f64> = c
                .weights
                .slot_filter(slot)
                .iter()
                .zip(s.init.slot_filter(slot))
                .map(|(a, b)| a - b)
                .collect();
            let (gamma, p) = gram_coefficients(&s, j, &delta);
            let scale = 1.0 + snap.gamma[slot].abs();
            assert!((gamma - snap.gamma[slot]).abs() <= 1e-8 * scale, "round {} slot {slot}", c.round);
            for (i, pi) in p.iter().enumerate() {
                let ours = snap.pbar[slot * 20 + i] + snap.punder[slot * 20 + i];
                assert!((pi - ours).abs() <= 1e-8 * (1.0 + ours.abs()), "round {} slot {slot} sample {i}", c.round);
            }
        }
    }
}

/// Plain gradient descent that applies the coefficient recursions directly
/// from its own forward evaluation, for `K = 1, tau = 1`.
#[test]
fn single_client_single_step_matches_hand_tracker() {
    let params = DataModelParams::with_norm(40, 2.0, 0.4).unwrap();
    let s = setup(params, 10, 1, 0.5, 3, &InitSpec::gaussian(0.05), 3);
    let (eta, rounds) = (0.2, 15);
    let out = run(&s, eta, 1, rounds);

    let n = s.samples.len();
    let m = s.init.m();
    let mu_sq = s.params.mu_norm_sq();
    let mut w = s.init.clone();
    let mut gamma = vec![0.0; 2 * m];
    let mut pbar = vec![0.0; 2 * m * n];
    let mut punder = vec![0.0; 2 * m * n];
    for t in 0..rounds {
        let lp: Vec<f64> = s
            .samples
            .iter()
            .map(|x| -1.0 / (1.0 + (x.y.value() * reference_output(&w, x)).exp()))
            .collect();
        let mut next = w.clone();
        for j in Sign::BOTH {
            for r in 0..m {
                let slot = j.index() * m + r;
                let f = w.filter(j, r).to_vec();
                let mut step = vec![0.0; f.len()];
                for (i, x) in s.samples.iter().enumerate() {
                    let sig = dot(&f, x.signal()) >= 0.0;
                    let noi = dot(&f, x.noise()) >= 0.0;
                    let c = eta * lp[i] * j.value() * x.y.value() / (n as f64 * m as f64);
                    if sig {
                        gamma[slot] -= eta / (n as f64 * m as f64) * lp[i] * mu_sq;
                        step.iter_mut().zip(x.signal()).for_each(|(a, b)| *a += c * b);
                    }
                    if noi {
                        let q = eta / (n as f64 * m as f64) * lp[i] * x.noise_norm_sq();
                        if x.y == j {
                            pbar[slot * n + i] -= q;
                        } else {
                            punder[slot * n + i] += q;
                        }
                        step.iter_mut().zip(x.noise()).for_each(|(a, b)| *a += c * b);
                    }
                }
                next.filter_mut(j, r).iter_mut().zip(&step).for_each(|(a, b)| *a -= b);
            }
        }
        w = next;
        let snap = out.ledger.at(t + 1).unwrap();
        for k in 0..2 * m {
            assert!((snap.gamma[k] - gamma[k]).abs() <= 1e-12 * (1.0 + gamma[k].abs()));
        }
        for k in 0..2 * m * n {
            assert!((snap.pbar[k] - pbar[k]).abs() <= 1e-12 * (1.0 + pbar[k].abs()));
            assert!((snap.punder[k] - punder[k]).abs() <= 1e-12 * (1.0 + punder[k].abs()));
        }
    }
    let diff: f64 = w
        .as_slice()
        .iter()
        .zip(out.final_weights.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12);
}

fn check_trajectory(s: &Setup, out: &TrainOutput) {
    let ledger = &out.ledger;
    let mu = s.params.mu();
    let n = s.samples.len();
    for w in ledger.history().windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(a.gamma.iter().zip(&b.gamma).all(|(x, y)| y >= x));
        assert!(a.pbar.iter().zip(&b.pbar).all(|(x, y)| y >= x));
        assert!(a.punder.iter().zip(&b.punder).all(|(x, y)| y <= x));
    }
    for c in &out.checkpoints {
        let snap = ledger.at(c.round).unwrap();
        let rec = ledger.reconstruct(c.round, &s.init, &s.samples, mu).unwrap();
        for slot in 0..c.weights.num_filters() {
            let (j, _) = c.weights.filter_of_slot(slot);
            let w = c.weights.slot_filter(slot);
            let diff: Vec<f64> = w.iter().zip(rec.slot_filter(slot)).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) / (1.0 + norm(w)) <= 1e-8);
            let disp: Vec<f64> = w.iter().zip(s.init.slot_filter(slot)).map(|(a, b)| a - b).collect();
            let lhs = dot(&disp, mu);
            let rhs = j.value() * snap.gamma[slot];
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-300) + 1e-15);
        }
        assert_eq!(snap.pbar.len(), 2 * s.init.m() * n);
    }
}

#[test]
fn reconstruction_monotonicity_and_signal_projection() {
    for (h, tau) in [(0.0, 10), (0.5, 3), (0.3, 1)] {
        let s = setup(paper_params(), 20, 2, h, 10, &InitSpec::misaligned(0.01, 5), 5);
        let out = run(&s, 0.1, tau, 30);
        check_trajectory(&s, &out);
    }
}

#[test]
fn once_aligned_stays_aligned() {
    for h in [0.0, 0.5] {
        let s = setup(paper_params(), 20, 2, h, 10, &InitSpec::misaligned(0.01, 5), 17);
        let out = run(&s, 0.1, 20, 25);
        let mu = s.params.mu();
        let m = s.init.m();
        let mut aligned_since = vec![false; 2 * m];
        for c in &out.checkpoints {
            for (slot, a) in c.weights.signal_alignment(mu).iter().enumerate() {
                if aligned_since[slot] {
                    assert!(*a >= 0.0, "slot {slot} lost alignment at round {}", c.round);
                }
                aligned_since[slot] |= *a >= 0.0;
            }
        }
    }
}

#[test]
fn reconstruct_rejects_mismatched_inputs() {
    let s = setup(paper_params(), 20, 2, 0.0, 10, &InitSpec::gaussian(0.01), 1);
    let out = run(&s, 0.1, 2, 2);
    assert!(out.ledger.reconstruct(9, &s.init, &s.samples, s.params.mu()).is_err());
    assert!(out.ledger.reconstruct(1, &s.init, &s.samples[..10], s.params.mu()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ledger_invariants_hold_on_random_setups(
        seed in 0u64..1000,
        clients in prop::sample::select(vec![1usize, 2, 4]),
        h_idx in 0usize..3,
        tau in 1usize..6,
        eta in 0.01f64..0.5,
    ) {
        // one client holds both classes, so only a balanced split is feasible
        let h = if clients == 1 { 0.5 } else { [0.0, 0.25, 0.5][h_idx] };
        let params = DataModelParams::with_norm(30, 2.0, 0.3).unwrap();
        let s = setup(params, 8, clients, h, 3, &InitSpec::gaussian(0.05), seed);
        let labels: Vec<Sign> = s.samples.iter().map(|x| x.y).collect();
        prop_assert!(ClientPartition::from_assignment(s.partition.assignment.clone(), &labels).is_ok());
        let out = run(&s, eta, tau, 8);
        check_trajectory(&s, &out);
    }
}
