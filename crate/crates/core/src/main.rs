use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedalign::analysis::{growth_summary, snr_regime};
use fedalign::config::RunConfig;
use fedalign::csvio::{dataset_table, key_values};
use fedalign::experiment::{self, Axis, SweepSpec};
use fedalign::{Error, Result, Sign};

#[derive(Parser)]
#[command(name = "fedalign", version, about = "FedAvg on a two-layer ReLU CNN with signal/noise coefficient tracking")]
struct Cli {
    /// Root directory for outputs when --out is not given.
    #[arg(long, env = "FEDALIGN_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and partition a dataset, writing dataset.csv.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration (every listed seed) and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset (fig2a, fig2b, fig2c, fig3, calibrate-eta) or a custom sweep.
    Sweep {
        /// Preset name or `custom`.
        name: String,
        /// Axis of a custom sweep: misaligned_count, tau or h.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values of a custom sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Seeds per value, counting up from the first configured seed.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Skip the per-run directories and write only the aggregates.
        #[arg(long)]
        no_run_dirs: bool,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a run directory from its manifest, check every artifact and report.
    Analyze { run_dir: PathBuf },
}

/// Configuration file plus per-field overrides, applied in that order.
#[derive(Args)]
struct ConfigArgs {
    /// `key=value` configuration file; a run manifest also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generic override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    mu_norm: Option<String>,
    #[arg(long)]
    sigma_p: Option<String>,
    #[arg(long)]
    sigma_p_sq: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    sigma_0: Option<String>,
    /// `none`, a per-class count, or `pos:neg`.
    #[arg(long)]
    misaligned: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    early_stop: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    t1_marker: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let fields = [
            ("d", &self.d),
            ("mu_norm", &self.mu_norm),
            ("sigma_p", &self.sigma_p),
            ("sigma_p_sq", &self.sigma_p_sq),
            ("n", &self.n),
            ("m", &self.m),
            ("sigma_0", &self.sigma_0),
            ("misaligned", &self.misaligned),
            ("clients", &self.clients),
            ("h", &self.h),
            ("eta", &self.eta),
            ("tau", &self.tau),
            ("rounds", &self.rounds),
            ("epsilon", &self.epsilon),
            ("early_stop", &self.early_stop),
            ("checkpoint_every", &self.checkpoint_every),
            ("n_test", &self.n_test),
            ("seeds", &self.seeds),
            ("t1_marker", &self.t1_marker),
        ];
        for (key, value) in fields {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let (_, samples, partition) = experiment::build_data(cfg, seed)?;
        let prefix = if cfg.seeds.len() == 1 { String::new() } else { format!("seed_{seed}/") };
        files.push((format!("{prefix}dataset.csv"), dataset_table(&samples, &partition).into_string()));
        let info = [
            ("realized_h".to_string(), partition.realized_h.to_string()),
        ];
        files.push((
            format!("{prefix}config.txt"),
            format!("{}{}", experiment::run_inputs(cfg, seed), key_values(&info)),
        ));
    }
    experiment::write_files(dir, &files)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cfg: &RunConfig, dir: &Path) -> Result<()> {
    for out in experiment::run_all_seeds(cfg, dir)? {
        let err = out.final_test_error();
        let reached = match out.train.reached_target {
            Some(true) => "reached epsilon",
            Some(false) => "did not reach epsilon",
            None => "early stop disabled",
        };
        println!(
            "seed {}: stop round {} ({reached}), train loss {:.6}, test error {:.4} +/- {:.4}",
            out.seed,
            out.stop_round(),
            out.train.final_loss(),
            err.error,
            err.stderr
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(
    name: &str,
    axis: Option<&str>,
    values: Vec<f64>,
    repeats: usize,
    run_dirs: bool,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<()> {
    if name == "calibrate-eta" {
        let (best, rows) = experiment::calibrate_eta(cfg, 1)?;
        let mut text = String::from("eta,runs,failures\n");
        for r in &rows {
            println!("eta {:e}: {} runs, {} failed", r.eta, r.runs, r.failures);
            text.push_str(&format!("{},{},{}\n", fedalign::csvio::fmt_f64(r.eta), r.runs, r.failures));
        }
        println!("selected eta = {best:e}");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("calibration.csv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        return Ok(());
    }
    let spec = if name == "custom" {
        let axis = axis.ok_or_else(|| Error::Usage("custom sweeps need --axis".into()))?;
        SweepSpec::custom(cfg, Axis::parse(axis)?, values, repeats)?
    } else {
        if axis.is_some() || !values.is_empty() {
            return Err(Error::Usage("--axis and --values apply only to custom sweeps".into()));
        }
        experiment::preset(name, cfg, repeats)?
    };
    let report = experiment::run_sweep(&spec, run_dirs.then_some(dir))?;
    if !run_dirs {
        report.write(dir, spec.dump_ledger)?;
    }
    for row in &report.rows {
        println!(
            "{} {}={}: mean test error {:.4} (std {:.4}, {} runs, {} failed)",
            row.series,
            report.axis,
            report.axis.format_value(row.value),
            row.mean_test_error,
            row.std_test_error,
            row.runs,
            row.failures
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn analyze(dir: &Path) -> Result<bool> {
    let report = experiment::analyze(dir)?;
    let out = &report.outcome;
    let regime = snr_regime(&out.params, out.config.n);
    println!("run {} (seed {})", dir.display(), out.seed);
    println!(
        "SNR {:.6}, SNR^2 {:.6} vs 1/sqrt(nd) {:.6}",
        regime.snr, regime.snr_sq, regime.threshold
    );
    println!("realized h {:.4}", out.partition.realized_h);
    for j in Sign::BOTH {
        println!(
            "j = {j}: misaligned at init {} of {}, bound term {:.6e}",
            out.init_alignment.misaligned_count(j),
            out.config.m,
            out.bound.per_label[j.index()]
        );
    }
    let err = out.final_test_error();
    println!(
        "stop round {}, train loss {:.6}, test error {:.4} +/- {:.4}, bound {:.6e}",
        out.stop_round(),
        out.train.final_loss(),
        err.error,
        err.stderr,
        out.bound.average
    );
    if let Some(t1) = out.config.t1_marker {
        let round = t1.min(out.stop_round());
        println!("coefficients at marker round {round}:");
        for g in growth_summary(&out.train.ledger, &out.init_alignment)
            .iter()
            .filter(|g| g.round == round)
        {
            let tag = if g.aligned_at_init { "aligned" } else { "misaligned" };
            println!("  ({}, {}) {tag}: gamma {:.6e}, sum pbar {:.6e}, ratio {}", g.j, g.r, g.gamma, g.sum_pbar, g.ratio);
        }
    }
    for f in &report.missing {
        println!("missing: {f}");
    }
    for f in &report.mismatched {
        println!("differs from replay: {f}");
    }
    let ok = report.missing.is_empty() && report.mismatched.is_empty();
    if ok {
        println!("all artifacts reproduce byte for byte");
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => config
            .resolve()
            .and_then(|cfg| gen_data(&cfg, &out.unwrap_or_else(|| cli.out_root.join("data")))),
        Command::Run { config, out } => config
            .resolve()
            .and_then(|cfg| run(&cfg, &out.unwrap_or_else(|| cli.out_root.join("run")))),
        Command::Sweep {
            name,
            axis,
            values,
            repeats,
            no_run_dirs,
            config,
            out,
        } => config.resolve().and_then(|cfg| {
            let dir = out.unwrap_or_else(|| cli.out_root.join(format!("sweep-{name}")));
            sweep(&name, axis.as_deref(), values, repeats, !no_run_dirs, &cfg, &dir)
        }),
        Command::Analyze { run_dir } => match analyze(&run_dir) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
