//! Single runs: generate, partition, initialize, train, analyze, persist.

mod sweep;

pub use sweep::{
    calibrate_eta, preset, run_sweep, Axis, CalibrationRow, RunStatus, SweepReport, SweepRow, SweepRun, SweepSeries,
    SweepSpec, ETA_GRID, PRESETS,
};

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::{
    alignment_report, empirical_misalignment, growth_summary, test_error, theorem2_bound, AlignmentReport,
    BoundInputs, BoundValue, EmpiricalAlignment, TestErrorEstimate,
};
use crate::config::RunConfig;
use crate::csvio::{dataset_table, fmt_f64, key_values, weights_table, Table};
use crate::data::{generate_dataset, partition_clients, ClientPartition, DataModelParams, SyntheticSample};
use crate::error::{Error, Result};
use crate::fedavg::{train, TrainOutput};
use crate::model::init_weights;
use crate::seed::{derive, Stream};
use crate::Sign;

/// Everything a run produces, held in memory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub seed: u64,
    pub params: DataModelParams,
    pub samples: Vec<SyntheticSample>,
    pub partition: ClientPartition,
    pub train: TrainOutput,
    pub init_alignment: AlignmentReport,
    pub bound: BoundValue,
    /// Monte-Carlo test error at every checkpoint, in checkpoint order.
    pub checkpoint_errors: Vec<(usize, TestErrorEstimate)>,
    /// Definition-based alignment at every checkpoint.
    pub checkpoint_alignment: Vec<(usize, AlignmentReport)>,
    /// Sign-agreement misalignment against the final weights, over the training set.
    pub empirical: Vec<EmpiricalAlignment>,
}

impl RunOutcome {
    pub fn final_test_error(&self) -> TestErrorEstimate {
        self.checkpoint_errors.last().expect("final round is always a checkpoint").1
    }

    pub fn stop_round(&self) -> usize {
        self.train.final_round
    }
}

/// Dataset and partition for one seed, exactly as a run would build them.
pub fn build_data(config: &RunConfig, seed: u64) -> Result<(DataModelParams, Vec<SyntheticSample>, ClientPartition)> {
    config.validate()?;
    let params = config.data_params()?;
    let samples = generate_dataset(&params, config.n, derive(seed, Stream::Data))?;
    let partition = partition_clients(&samples, config.clients, config.h, derive(seed, Stream::Partition))?;
    Ok((params, samples, partition))
}

/// Runs the full pipeline for one seed without touching the file system.
pub fn execute(config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let (params, samples, partition) = build_data(config, seed)?;
    let init = init_weights(&config.init_spec(), &params, config.m, derive(seed, Stream::Init))?;
    let fed = config.fed_config()?;
    let train = train(&samples, &partition, &init, params.mu(), &fed)?;

    let init_alignment = alignment_report(&init, params.mu())?;
    let bound = theorem2_bound(&BoundInputs::new(
        &params,
        config.n,
        &init_alignment,
        partition.realized_h,
        config.tau,
    ));
    let test_seed = derive(seed, Stream::Test);
    let checkpoint_errors = train
        .checkpoints
        .iter()
        .map(|c| Ok((c.round, test_error(&c.weights, &params, config.n_test, test_seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let checkpoint_alignment = train
        .checkpoints
        .iter()
        .map(|c| Ok((c.round, alignment_report(&c.weights, params.mu())?)))
        .collect::<Result<Vec<_>>>()?;
    let empirical = empirical_misalignment(&train.checkpoints, &train.final_weights, &samples)?;

    Ok(RunOutcome {
        config: config.clone(),
        seed,
        params,
        samples,
        partition,
        train,
        init_alignment,
        bound,
        checkpoint_errors,
        checkpoint_alignment,
        empirical,
    })
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn trajectory_table(out: &RunOutcome) -> Table {
    let ledger = &out.train.ledger;
    let m = ledger.m();
    let mut t = Table::new(&[
        "round",
        "j",
        "r",
        "gamma",
        "sum_pbar_over_ki",
        "sum_punder_over_ki",
        "aligned_at_init",
    ]);
    for snap in ledger.history() {
        for j in Sign::BOTH {
            for r in 0..m {
                let slot = j.index() * m + r;
                t.row(vec![
                    snap.round.to_string(),
                    j.to_string(),
                    r.to_string(),
                    fmt_f64(snap.gamma[slot]),
                    fmt_f64(ledger.sum_pbar(snap.round, slot)),
                    fmt_f64(ledger.sum_punder(snap.round, slot)),
                    flag(out.init_alignment.is_aligned(j, r)),
                ]);
            }
        }
    }
    t
}

/// One row per round reached; test error columns are filled at checkpoints.
pub fn summary_table(out: &RunOutcome) -> Table {
    let mut t = Table::new(&["round", "train_loss", "test_error", "test_error_stderr", "theorem2_bound"]);
    let mut errors = out.checkpoint_errors.iter().peekable();
    for (round, loss) in out.train.losses.iter().enumerate() {
        let (err, se) = match errors.peek() {
            Some((r, e)) if *r == round => {
                errors.next();
                (fmt_f64(e.error), fmt_f64(e.stderr))
            }
            _ => (String::new(), String::new()),
        };
        t.row(vec![round.to_string(), fmt_f64(*loss), err, se, fmt_f64(out.bound.average)]);
    }
    t
}

pub fn alignment_table(out: &RunOutcome) -> Table {
    let mut t = Table::new(&["round", "j", "def1_misaligned_count", "empirical_misaligned_fraction"]);
    for ((round, report), emp) in out.checkpoint_alignment.iter().zip(&out.empirical) {
        debug_assert_eq!(*round, emp.round);
        for j in Sign::BOTH {
            t.row(vec![
                round.to_string(),
                j.to_string(),
                report.misaligned_count(j).to_string(),
                fmt_f64(emp.misaligned_fraction[j.index()]),
            ]);
        }
    }
    t
}

pub fn growth_table(out: &RunOutcome) -> Table {
    let mut t = Table::new(&["round", "j", "r", "gamma", "sum_pbar", "ratio_or_flag", "aligned_at_init"]);
    for row in growth_summary(&out.train.ledger, &out.init_alignment) {
        t.row(vec![
            row.round.to_string(),
            row.j.to_string(),
            row.r.to_string(),
            fmt_f64(row.gamma),
            fmt_f64(row.sum_pbar),
            row.ratio.to_string(),
            flag(row.aligned_at_init),
        ]);
    }
    t
}

/// SHA-256 of `blob <len>\0<content>`, the object-hash framing git uses.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

/// Configuration text of a single-seed run; the input to [`content_hash`].
pub fn run_inputs(config: &RunConfig, seed: u64) -> String {
    RunConfig {
        seeds: vec![seed],
        ..config.clone()
    }
    .to_kv()
}

pub fn manifest(out: &RunOutcome, dataset_csv: &str) -> String {
    let inputs = run_inputs(&out.config, out.seed);
    let reached = match out.train.reached_target {
        Some(true) => "true",
        Some(false) => "false",
        None => "disabled",
    };
    let results = [
        ("seed", out.seed.to_string()),
        ("stop_round", out.stop_round().to_string()),
        ("reached_epsilon", reached.to_string()),
        ("final_train_loss", fmt_f64(out.train.final_loss())),
        ("final_test_error", fmt_f64(out.final_test_error().error)),
        ("input_hash", content_hash(inputs.as_bytes())),
        ("dataset_hash", content_hash(dataset_csv.as_bytes())),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
    ]
    .map(|(k, v)| (k.to_string(), v));
    format!("{inputs}{}", key_values(&results))
}

pub fn checkpoint_file(round: usize) -> String {
    format!("checkpoints/weights_round_{round:06}.csv")
}

/// All files of a run directory as `(relative path, contents)`.
pub fn artifacts(out: &RunOutcome) -> Vec<(String, String)> {
    let dataset = dataset_table(&out.samples, &out.partition).into_string();
    let mut files = vec![
        ("manifest.txt".to_string(), manifest(out, &dataset)),
        ("trajectory.csv".to_string(), trajectory_table(out).into_string()),
        ("summary.csv".to_string(), summary_table(out).into_string()),
        ("alignment.csv".to_string(), alignment_table(out).into_string()),
        ("growth.csv".to_string(), growth_table(out).into_string()),
    ];
    for c in &out.train.checkpoints {
        files.push((checkpoint_file(c.round), weights_table(&c.weights).into_string()));
    }
    files.push(("dataset.csv".to_string(), dataset));
    files
}

/// Writes `files` into `dir` via a sibling staging directory renamed into
/// place at the end, so a failure leaves nothing behind. An existing `dir`
/// is replaced.
pub fn write_files(dir: &Path, files: &[(String, String)]) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("output path {} has no final component", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        for (rel, contents) in files {
            let path = staging.join(rel);
            if let Some(p) = path.parent() {
                fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    })();
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

/// Executes one seed and writes its run directory.
pub fn run_single(config: &RunConfig, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let out = execute(config, seed)?;
    write_files(dir, &artifacts(&out))?;
    Ok(out)
}

/// Executes every seed of `config`. A single seed writes straight into
/// `dir`; several seeds write `dir/seed_<s>` each.
pub fn run_all_seeds(config: &RunConfig, dir: &Path) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    if let [seed] = config.seeds[..] {
        return Ok(vec![run_single(config, seed, dir)?]);
    }
    config
        .seeds
        .iter()
        .map(|&s| run_single(config, s, &dir.join(format!("seed_{s}"))))
        .collect()
}

/// Result of re-deriving a run directory from its manifest.
#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub outcome: RunOutcome,
    /// Files whose stored bytes differ from the replay.
    pub mismatched: Vec<String>,
    /// Files the replay produces but the directory lacks.
    pub missing: Vec<String>,
}

/// Reads `dir/manifest.txt`, replays the run and compares every artifact.
pub fn analyze(dir: &Path) -> Result<AnalyzeReport> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let config = RunConfig::from_kv(&text)?;
    let seed = manifest_seed(&text)?;
    let outcome = execute(&config, seed)?;
    let mut mismatched = Vec::new();
    let mut missing = Vec::new();
    for (rel, contents) in artifacts(&outcome) {
        match fs::read(dir.join(&rel)) {
            Ok(bytes) if bytes == contents.as_bytes() => {}
            Ok(_) => mismatched.push(rel),
            Err(_) => missing.push(rel),
        }
    }
    Ok(AnalyzeReport {
        outcome,
        mismatched,
        missing,
    })
}

fn manifest_seed(text: &str) -> Result<u64> {
    text.lines()
        .find_map(|l| l.strip_prefix("seed="))
        .ok_or_else(|| Error::parse("manifest", "no seed entry"))?
        .trim()
        .parse()
        .map_err(|_| Error::parse("manifest", "seed is not an integer"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            d: 30,
            n: 8,
            m: 3,
            tau: 5,
            rounds: 40,
            n_test: 200,
            ..RunConfig::default()
        }
    }

    #[test]
    fn summary_has_a_row_per_round_and_errors_at_checkpoints() {
        let out = execute(&small(), 1).unwrap();
        let text = summary_table(&out).into_string();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), out.stop_round() + 1);
        assert!(!rows[0].contains(",,"));
        assert!(!rows.last().unwrap().contains(",,"));
    }

    #[test]
    fn manifest_records_seed_and_hash() {
        let out = execute(&small(), 9).unwrap();
        let dataset = dataset_table(&out.samples, &out.partition).into_string();
        let text = manifest(&out, &dataset);
        assert_eq!(manifest_seed(&text).unwrap(), 9);
        assert!(text.contains(&format!("input_hash={}", content_hash(run_inputs(&out.config, 9).as_bytes()))));
        let back = RunConfig::from_kv(&text).unwrap();
        assert_eq!(back.seeds, vec![9]);
    }

    #[test]
    fn content_hash_matches_git_blob_framing() {
        // sha256 of "blob 0\0", as `git hash-object --object-format=sha256` prints for an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn zero_rounds_give_round_zero_artifacts() {
        let cfg = RunConfig {
            rounds: 0,
            sigma_0: 0.0,
            ..small()
        };
        let out = execute(&cfg, 2).unwrap();
        assert_eq!(out.stop_round(), 0);
        assert_eq!(out.train.losses, vec![std::f64::consts::LN_2]);
        assert!(out.final_test_error().degenerate);
    }
}
