#![allow(dead_code)]

use fedalign::data::{generate_dataset, partition_clients, ClientPartition, DataModelParams, SyntheticSample};
use fedalign::model::{init_weights, CnnWeights, InitSpec};
use fedalign::Sign;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The default synthetic setup.
pub fn paper_params() -> DataModelParams {
    DataModelParams::with_norm(200, 3.0, 0.1f64.sqrt()).unwrap()
}

pub struct Setup {
    pub params: DataModelParams,
    pub samples: Vec<SyntheticSample>,
    pub partition: ClientPartition,
    pub init: CnnWeights,
}

pub fn setup(params: DataModelParams, n: usize, clients: usize, h: f64, m: usize, init: &InitSpec, seed: u64) -> Setup {
    let samples = generate_dataset(&params, n, seed).unwrap();
    let partition = partition_clients(&samples, clients, h, seed + 1).unwrap();
    let init = init_weights(init, &params, m, seed + 2).unwrap();
    Setup {
        params,
        samples,
        partition,
        init,
    }
}

/// Network output written directly from the definition, independent of the crate.
pub fn reference_output(w: &CnnWeights, x: &SyntheticSample) -> f64 {
    let relu = |z: f64| z.max(0.0);
    let m = w.m() as f64;
    let mut f = 0.0;
    for j in Sign::BOTH {
        for r in 0..w.m() {
            let filt = w.filter(j, r);
            f += j.value() * (relu(dot(filt, &x.patches[0])) + relu(dot(filt, &x.patches[1]))) / m;
        }
    }
    f
}

/// Mean logistic loss from the definition `log(1 + exp(-z))`.
pub fn reference_loss(w: &CnnWeights, data: &[SyntheticSample]) -> f64 {
    data.iter()
        .map(|x| {
            let z = x.y.value() * reference_output(w, x);
            (-z).exp().ln_1p()
        })
        .sum::<f64>()
        / data.len() as f64
}
