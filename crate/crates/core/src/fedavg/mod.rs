//! FedAvg with full-batch local gradient descent.
//!
//! Each round broadcasts the global weights, runs `tau` local GD steps on
//! every client, averages the local models uniformly and advances the
//! [`CoefficientLedger`] from the recorded local traces. Clients run in
//! ascending index order and every reduction has a fixed order, so a run is
//! bit-reproducible from its inputs.

mod ledger;

pub use ledger::{CoefficientLedger, LedgerSnapshot};

use crate::data::{ClientPartition, DataModelParams, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::{self, Activations, CnnWeights};
use crate::Sign;

/// Hard cap on the number of rounds a configuration may request.
pub const MAX_ROUNDS: usize = 10_000_000;

/// Weights whose magnitude exceeds this are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub eta: f64,
    pub tau: usize,
    pub rounds: usize,
    pub checkpoint_every: usize,
    /// Stop as soon as the global training loss is at or below this value.
    pub stop_at_loss: Option<f64>,
}

impl FedConfig {
    /// Configuration with the default checkpoint stride `max(1, T / 50)`.
    pub fn new(eta: f64, tau: usize, rounds: usize) -> Result<Self> {
        let cfg = Self {
            eta,
            tau,
            rounds,
            checkpoint_every: (rounds / 50).max(1),
            stop_at_loss: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", format!("must be a nonnegative number, got {}", self.eta)));
        }
        if self.tau == 0 {
            return Err(Error::config("tau", "must be at least 1"));
        }
        if self.rounds > MAX_ROUNDS {
            return Err(Error::config("rounds", format!("exceeds the cap of {MAX_ROUNDS}")));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if let Some(eps) = self.stop_at_loss {
            if !(eps > 0.0) {
                return Err(Error::config("epsilon", format!("must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

/// Loss derivatives and ReLU masks of one client's local steps in a round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrace {
    pub client: usize,
    /// `steps[s]` is evaluated at `W_k^(t,s)`, before step `s` is applied.
    pub steps: Vec<Activations>,
}

/// Runs `tau` local GD steps from `global` on one client's data.
pub fn local_round(
    global: &CnnWeights,
    client_data: &[SyntheticSample],
    cfg: &FedConfig,
    round: usize,
    client: usize,
) -> Result<(CnnWeights, LocalTrace)> {
    if client_data.is_empty() {
        return Err(Error::Usage(format!("client {client} has no data")));
    }
    let mut w = global.clone();
    let mut steps = Vec::with_capacity(cfg.tau);
    for s in 0..cfg.tau {
        let act = model::activations(&w, client_data)?;
        if !act.mean_loss.is_finite() {
            return Err(Error::Divergence {
                round,
                step: s,
                client,
                detail: format!("local loss is {}", act.mean_loss),
            });
        }
        let grad = model::gradient_from_activations(&w, client_data, &act);
        w.sub_scaled(cfg.eta, &grad);
        let peak = w.max_abs();
        if !(peak <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                round,
                step: s,
                client,
                detail: format!("weight magnitude {peak:e} exceeds {DIVERGENCE_LIMIT:e}"),
            });
        }
        steps.push(act);
    }
    Ok((w, LocalTrace { client, steps }))
}

/// Uniform average of the local models, summed in ascending client order.
pub fn aggregate(locals: &[CnnWeights]) -> Result<CnnWeights> {
    let first = locals
        .first()
        .ok_or_else(|| Error::Usage("aggregate of zero client models".into()))?;
    let mut sum = first.clone();
    for w in &locals[1..] {
        sum.same_shape(w)?;
        for (acc, v) in sum.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *acc += v;
        }
    }
    let k = locals.len() as f64;
    for v in sum.as_mut_slice() {
        *v /= k;
    }
    Ok(sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub weights: CnnWeights,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub initial: CnnWeights,
    pub checkpoints: Vec<Checkpoint>,
    pub ledger: CoefficientLedger,
    /// `losses[t] = L(W^(t))` for every round reached.
    pub losses: Vec<f64>,
    /// Last round reached (`T`, or the early-stop round).
    pub final_round: usize,
    pub final_weights: CnnWeights,
    /// Whether the stop threshold was met; `None` without a threshold.
    pub reached_target: Option<bool>,
}

impl TrainOutput {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("round 0 loss is always recorded")
    }

    pub fn checkpoint(&self, round: usize) -> Option<&CnnWeights> {
        self.checkpoints.iter().find(|c| c.round == round).map(|c| &c.weights)
    }
}

pub fn train(
    samples: &[SyntheticSample],
    partition: &ClientPartition,
    init: &CnnWeights,
    mu: &[f64],
    cfg: &FedConfig,
) -> Result<TrainOutput> {
    train_with_observer(samples, partition, init, mu, cfg, |_, _| {})
}

/// [`train`], calling `observer(t, W^(t))` for every round reached.
pub fn train_with_observer(
    samples: &[SyntheticSample],
    partition: &ClientPartition,
    init: &CnnWeights,
    mu: &[f64],
    cfg: &FedConfig,
    mut observer: impl FnMut(usize, &CnnWeights),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if partition.n() != samples.len() {
        return Err(Error::Partition(format!(
            "partition covers {} samples, dataset has {}",
            partition.n(),
            samples.len()
        )));
    }
    if mu.len() != init.d() {
        return Err(Error::Shape {
            context: "signal dimension",
            expected: init.d(),
            found: mu.len(),
        });
    }
    let mu_norm_sq: f64 = mu.iter().map(|v| v * v).sum();
    let clients: Vec<Vec<SyntheticSample>> = (0..partition.num_clients)
        .map(|k| partition.client_data(samples, k))
        .collect();

    let mut ledger = CoefficientLedger::new(init.m(), samples.len(), partition.num_clients);
    let mut w = init.clone();
    let mut losses = Vec::new();
    let mut checkpoints = vec![Checkpoint {
        round: 0,
        weights: w.clone(),
    }];
    let mut final_round = cfg.rounds;
    let mut reached_target = cfg.stop_at_loss.map(|_| false);

    for t in 0..=cfg.rounds {
        let l = model::loss(&w, samples)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                round: t,
                step: 0,
                client: 0,
                detail: format!("global loss is {l}"),
            });
        }
        losses.push(l);
        observer(t, &w);
        if let Some(eps) = cfg.stop_at_loss {
            if l <= eps {
                reached_target = Some(true);
                final_round = t;
                break;
            }
        }
        if t == cfg.rounds {
            break;
        }

        let mut locals = Vec::with_capacity(clients.len());
        let mut traces = Vec::with_capacity(clients.len());
        for (k, data) in clients.iter().enumerate() {
            let (wk, trace) = local_round(&w, data, cfg, t, k)?;
            locals.push(wk);
            traces.push(trace);
        }
        w = aggregate(&locals)?;
        ledger.update(&traces, samples, partition, mu_norm_sq, cfg.eta, cfg.tau)?;

        let next = t + 1;
        if next % cfg.checkpoint_every == 0 && next != cfg.rounds {
            checkpoints.push(Checkpoint {
                round: next,
                weights: w.clone(),
            });
        }
    }
    if checkpoints.last().map(|c| c.round) != Some(final_round) {
        // an early stop can land on a stride multiple that was already stored
        checkpoints.retain(|c| c.round < final_round);
        checkpoints.push(Checkpoint {
            round: final_round,
            weights: w.clone(),
        });
    }

    Ok(TrainOutput {
        initial: init.clone(),
        checkpoints,
        ledger,
        losses,
        final_round,
        final_weights: w,
        reached_target,
    })
}

/// Centralized pre-training setup: plain GD on data drawn with `mu_pre`.
#[derive(Clone, Debug)]
pub struct PretrainSpec {
    pub params: DataModelParams,
    pub n: usize,
    pub iters: usize,
    pub eta: f64,
    pub data_seed: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub weights: CnnWeights,
    pub iters: usize,
    /// Aligned filters per class against `mu_pre`, indexed by [`Sign::index`].
    pub aligned_pre: [usize; 2],
    pub final_loss: f64,
}

fn aligned_counts(w: &CnnWeights, mu: &[f64]) -> [usize; 2] {
    let align = w.signal_alignment(mu);
    let mut counts = [0; 2];
    for (slot, a) in align.iter().enumerate() {
        if *a >= 0.0 {
            counts[w.filter_of_slot(slot).0.index()] += 1;
        }
    }
    counts
}

/// Centralized GD (one client, one local step per round) for `spec.iters`
/// iterations starting from `init`.
pub fn pretrain_centralized(spec: &PretrainSpec, init: &CnnWeights) -> Result<PretrainOutcome> {
    let samples = crate::data::generate_dataset(&spec.params, spec.n, spec.data_seed)?;
    let labels: Vec<Sign> = samples.iter().map(|s| s.y).collect();
    let partition = ClientPartition::from_assignment(vec![(0..spec.n).collect()], &labels)?;
    let mut cfg = FedConfig::new(spec.eta, 1, spec.iters)?;
    cfg.checkpoint_every = spec.iters.max(1);
    let out = train(&samples, &partition, init, spec.params.mu(), &cfg)?;
    Ok(PretrainOutcome {
        aligned_pre: aligned_counts(&out.final_weights, spec.params.mu()),
        final_loss: out.final_loss(),
        weights: out.final_weights,
        iters: spec.iters,
    })
}

/// Doubles the pre-training budget (1, 2, 4, ...) until every filter is
/// aligned with `mu_pre`, giving up past `max_iters`.
pub fn pretrain_until_aligned(spec: &PretrainSpec, init: &CnnWeights, max_iters: usize) -> Result<PretrainOutcome> {
    let m = init.m();
    if aligned_counts(init, spec.params.mu()) == [m, m] {
        return pretrain_centralized(&PretrainSpec { iters: 0, ..spec.clone() }, init);
    }
    let mut iters = 1;
    loop {
        let outcome = pretrain_centralized(&PretrainSpec { iters, ..spec.clone() }, init)?;
        if outcome.aligned_pre == [m, m] {
            return Ok(outcome);
        }
        if iters >= max_iters {
            return Err(Error::Usage(format!(
                "filters still misaligned after {iters} pre-training iterations: aligned {:?}",
                outcome.aligned_pre
            )));
        }
        iters = (iters * 2).min(max_iters);
    }
}

/// Pre-trains centrally on `mu_pre`, then runs FedAvg on `samples` (drawn
/// with the downstream signal `mu`) from the pre-trained weights.
pub fn pretrain_then_finetune(
    pre: &PretrainSpec,
    init: &CnnWeights,
    samples: &[SyntheticSample],
    partition: &ClientPartition,
    mu: &[f64],
    cfg: &FedConfig,
) -> Result<(PretrainOutcome, TrainOutput)> {
    if pre.params.d() != mu.len() {
        return Err(Error::Shape {
            context: "pre-training signal dimension",
            expected: mu.len(),
            found: pre.params.d(),
        });
    }
    let outcome = pretrain_centralized(pre, init)?;
    let out = train(samples, partition, &outcome.weights, mu, cfg)?;
    Ok((outcome, out))
}
