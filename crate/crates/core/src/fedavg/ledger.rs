//! Signal-learning and noise-memorization coefficients.
//!
//! Every global filter decomposes exactly as
//!
//! ```text
//! w_{j,r}^(t) = w_{j,r}^(0) + j Gamma_{j,r}^(t) mu / |mu|^2
//!             + sum_{k,i} (Pbar + Punder)_{j,r,k,i}^(t) xi_{k,i} / |xi_{k,i}|^2
//! ```
//!
//! and the coefficients evolve by recursions driven only by the loss
//! derivatives and ReLU masks seen during local steps. The ledger applies
//! those recursions round by round from the local traces.
//!
//! Noise coefficients are keyed by global sample index; the client-local
//! index `(k, i)` maps to `partition.assignment[k][i]`.

use crate::data::{ClientPartition, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::CnnWeights;
use crate::Sign;

use super::LocalTrace;

/// Coefficients of every filter at one round.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerSnapshot {
    pub round: usize,
    /// `Gamma`, one per filter slot.
    pub gamma: Vec<f64>,
    /// `Pbar`, indexed `slot * n + sample`.
    pub pbar: Vec<f64>,
    /// `Punder`, indexed `slot * n + sample`.
    pub punder: Vec<f64>,
    /// Local signal coefficients of the round that produced this snapshot,
    /// indexed `slot * K + k`. Zero at round 0.
    pub local_gamma: Vec<f64>,
    /// Local noise coefficients of that round, indexed `slot * n + sample`.
    pub local_rho: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientLedger {
    m: usize,
    n: usize,
    num_clients: usize,
    history: Vec<LedgerSnapshot>,
}

impl CoefficientLedger {
    /// Ledger at round 0: all coefficients zero.
    pub fn new(m: usize, n: usize, num_clients: usize) -> Self {
        let slots = 2 * m;
        let zero = LedgerSnapshot {
            round: 0,
            gamma: vec![0.0; slots],
            pbar: vec![0.0; slots * n],
            punder: vec![0.0; slots * n],
            local_gamma: vec![0.0; slots * num_clients],
            local_rho: vec![0.0; slots * n],
        };
        Self {
            m,
            n,
            num_clients,
            history: vec![zero],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn history(&self) -> &[LedgerSnapshot] {
        &self.history
    }

    pub fn current(&self) -> &LedgerSnapshot {
        self.history.last().expect("ledger always holds round 0")
    }

    pub fn at(&self, round: usize) -> Option<&LedgerSnapshot> {
        self.history.get(round)
    }

    /// Applies one round of the coefficient recursions.
    ///
    /// `traces[k]` must hold client `k`'s `tau` local steps.
    pub fn update(
        &mut self,
        traces: &[LocalTrace],
        samples: &[SyntheticSample],
        partition: &ClientPartition,
        mu_norm_sq: f64,
        eta: f64,
        tau: usize,
    ) -> Result<()> {
        let slots = 2 * self.m;
        let n = self.n;
        let kk = self.num_clients;
        if traces.len() != kk {
            return Err(Error::Ledger(format!("expected {kk} client traces, got {}", traces.len())));
        }
        if partition.num_clients != kk || partition.n() != n || samples.len() != n {
            return Err(Error::Ledger("partition does not match ledger dimensions".into()));
        }

        let prev = self.current();
        let mut next = LedgerSnapshot {
            round: prev.round + 1,
            gamma: prev.gamma.clone(),
            pbar: prev.pbar.clone(),
            punder: prev.punder.clone(),
            local_gamma: vec![0.0; slots * kk],
            local_rho: vec![0.0; slots * n],
        };

        let m = self.m as f64;
        let per_client = partition.per_client;
        let local_scale = eta / (per_client as f64 * m);
        let global_scale = eta / (n as f64 * m);

        for (k, trace) in traces.iter().enumerate() {
            if trace.client != k {
                return Err(Error::Ledger(format!("trace {k} belongs to client {}", trace.client)));
            }
            if trace.steps.len() != tau {
                return Err(Error::Ledger(format!(
                    "client {k} trace has {} steps, expected {tau}",
                    trace.steps.len()
                )));
            }
            let ids = &partition.assignment[k];
            for (s, act) in trace.steps.iter().enumerate() {
                if act.num_samples != per_client
                    || act.loss_derivs.len() != per_client
                    || act.signal_active.len() != slots * per_client
                    || act.noise_active.len() != slots * per_client
                {
                    return Err(Error::Ledger(format!("client {k} step {s}: trace entries missing")));
                }
                for slot in 0..slots {
                    let j = Sign::BOTH[slot / self.m];
                    let mut signal_sum = 0.0;
                    for (i, &sample) in ids.iter().enumerate() {
                        let lp = act.loss_derivs[i];
                        if act.signal(slot, i) {
                            signal_sum += lp;
                        }
                        if act.noise(slot, i) {
                            let x = &samples[sample];
                            let xi_sq = x.noise_norm_sq();
                            let jy = j.value() * x.y.value();
                            next.local_rho[slot * n + sample] += -local_scale * lp * xi_sq * jy;
                            if x.y == j {
                                next.pbar[slot * n + sample] += -global_scale * lp * xi_sq;
                            } else {
                                next.punder[slot * n + sample] += global_scale * lp * xi_sq;
                            }
                        }
                    }
                    next.local_gamma[slot * kk + k] += -local_scale * signal_sum * mu_norm_sq;
                    next.gamma[slot] += -global_scale * signal_sum * mu_norm_sq;
                }
            }
        }
        self.history.push(next);
        Ok(())
    }

    /// `sum_{k,i} Pbar_{slot,k,i}` at `round`.
    pub fn sum_pbar(&self, round: usize, slot: usize) -> f64 {
        let snap = &self.history[round];
        snap.pbar[slot * self.n..(slot + 1) * self.n].iter().sum()
    }

    /// `sum_{k,i} Punder_{slot,k,i}` at `round`.
    pub fn sum_punder(&self, round: usize, slot: usize) -> f64 {
        let snap = &self.history[round];
        snap.punder[slot * self.n..(slot + 1) * self.n].iter().sum()
    }

    /// Rebuilds the global weights at `round` from the initial weights and
    /// the coefficients.
    pub fn reconstruct(
        &self,
        round: usize,
        init: &CnnWeights,
        samples: &[SyntheticSample],
        mu: &[f64],
    ) -> Result<CnnWeights> {
        let snap = self
            .history
            .get(round)
            .ok_or_else(|| Error::Ledger(format!("round {round} not recorded")))?;
        if init.m() != self.m || samples.len() != self.n {
            return Err(Error::Ledger("reconstruction inputs do not match ledger".into()));
        }
        let mu_norm_sq: f64 = mu.iter().map(|v| v * v).sum();
        let mut w = init.clone();
        for slot in 0..2 * self.m {
            let (j, _) = w.filter_of_slot(slot);
            let c = j.value() * snap.gamma[slot] / mu_norm_sq;
            let f = w.slot_filter_mut(slot);
            for (fk, mk) in f.iter_mut().zip(mu) {
                *fk += c * mk;
            }
            for (idx, x) in samples.iter().enumerate() {
                let p = snap.pbar[slot * self.n + idx] + snap.punder[slot * self.n + idx];
                if p == 0.0 {
                    continue;
                }
                let c = p / x.noise_norm_sq();
                for (fk, nk) in f.iter_mut().zip(x.noise()) {
                    *fk += c * nk;
                }
            }
        }
        Ok(w)
    }
}
