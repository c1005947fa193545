use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use flmarket::aggregation::{bias_bound, err_bound, mechanism_err_bound, var_bound, Aggregator};
use flmarket::experiments::{run_sweep, write_sweep_csv, ModelStore, SweepSpec, SWEEP_COLUMNS};
use flmarket::market::{generate_bid_profile, Bid, BidProfile, MarketConfig, Scenario, ValuationFamily, ValuationFunction};
use flmarket::murba::{
    checkpoint_name, load_checkpoint, save_checkpoint, train_mbr_with, CheckpointMeta, MbrModel, TrainConfig,
    LOG_HEADER,
};
use flmarket::sim::{load_csv_dataset, run_fl, synthetic_blobs, Auctioneer, Mechanism, SimConfig};
use flmarket::ClipBound;

const AUCTION_COLUMNS: &str = "owner,family,scale,privacy_budget,epsilon,payment";
const SUMMARY_COLUMNS: &str = "metric,value";
const AGGREGATE_COLUMNS: &str = "owner,epsilon,lambda";
const SIM_COLUMNS: &str = "run_id,round,budget,mechanism,aggregator,err_bound,total_payment,accuracy,seed";

#[derive(Parser)]
#[command(name = "flmarket", version, about = "Auction-based trading of noisy gradients for federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one auction on a generated or file-provided profile.
    #[command(after_help = format!(
        "Output: per-owner CSV `{AUCTION_COLUMNS}`, a blank line, then `{SUMMARY_COLUMNS}` rows \
         (winners, total_payment, err_bound_varopt, err_bound_biasopt).\n\
         Profile files use the header `family,scale,privacy_budget` with family one of \
         linear, quadratic, squareroot, exponential, step."
    ))]
    Auction(AuctionArgs),
    /// Aggregation weights and error bounds for given privacy parameters.
    #[command(after_help = format!(
        "Output: `{AGGREGATE_COLUMNS}`, a blank line, then `{SUMMARY_COLUMNS}` rows (bias, variance, err_bound)."
    ))]
    Aggregate(AggregateArgs),
    /// Train an MBR model and write the checkpoint, its metadata and the epoch log.
    #[command(after_help = format!(
        "Writes <out>/mbr_n<N>_m<M>.mbr, <out>/mbr_n<N>_m<M>.mbr.json and <out>/mbr_n<N>_m<M>.log.csv \
         with columns `{LOG_HEADER}`. The log is flushed after every epoch."
    ))]
    TrainMbr(TrainArgs),
    /// Multi-round federated training with per-round gradient auctions.
    #[command(after_help = format!("Output columns: `{SIM_COLUMNS}`."))]
    Simulate(SimulateArgs),
    /// Parameter sweep over budget, n or M.
    #[command(after_help = format!("Output columns: `{}`.", SWEEP_COLUMNS.join(",")))]
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MechArg {
    Allin,
    Murba,
}

impl From<MechArg> for Mechanism {
    fn from(m: MechArg) -> Self {
        match m {
            MechArg::Allin => Mechanism::AllIn,
            MechArg::Murba => Mechanism::Murba,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggrArg {
    Biasopt,
    Varopt,
}

impl From<AggrArg> for Aggregator {
    fn from(a: AggrArg) -> Self {
        match a {
            AggrArg::Biasopt => Aggregator::BiasOpt,
            AggrArg::Varopt => Aggregator::VarOpt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Low,
    High,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Low => Scenario::Low,
            ScenarioArg::High => Scenario::High,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct MbrSource {
    /// MBR checkpoint file (MURBA only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory holding mbr_n<N>_m<M>.mbr checkpoints (MURBA only).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

impl MbrSource {
    fn load(&self, n: usize, m: usize) -> Result<MbrModel> {
        let path = match (&self.checkpoint, &self.checkpoint_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join(checkpoint_name(n, m)),
            (None, None) => PathBuf::from(checkpoint_name(n, m)),
        };
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let (model, _) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        if model.n() != n || model.m() != m {
            bail!(
                "{} is trained for n={}, M={} but n={n}, M={m} was requested",
                path.display(),
                model.n(),
                model.m()
            );
        }
        Ok(model)
    }
}

#[derive(Args)]
struct AuctionArgs {
    #[arg(long, value_enum)]
    mech: MechArg,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 10.0)]
    budget: f64,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Low)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Read the profile from a CSV file instead of generating one.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[command(flatten)]
    mbr: MbrSource,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Comma-separated privacy parameters.
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
    #[arg(long, value_enum, default_value_t = AggrArg::Varopt)]
    aggr: AggrArg,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    mech: MechArg,
    #[arg(long, value_enum, default_value_t = AggrArg::Varopt)]
    aggr: AggrArg,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 10.0)]
    budget: f64,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Low)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Bypass the market: all owners, no noise, uniform weights.
    #[arg(long)]
    noiseless: bool,
    /// CSV dataset; the synthetic blobs are used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    label: String,
    #[arg(long, default_value_t = 100)]
    rows_per_owner: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    mbr: MbrSource,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep description.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; seeds are base, base + 1, ...
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn family_name(f: ValuationFamily) -> &'static str {
    match f {
        ValuationFamily::Linear => "linear",
        ValuationFamily::Quadratic => "quadratic",
        ValuationFamily::SquareRoot => "squareroot",
        ValuationFamily::Exponential => "exponential",
        ValuationFamily::Step => "step",
    }
}

fn read_profile(path: &Path) -> Result<BidProfile> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut bids = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.with_context(|| format!("{}: line {line}", path.display()))?;
        if rec.len() < 3 {
            bail!("{}: line {line}: expected family,scale,privacy_budget", path.display());
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .with_context(|| format!("{}: line {line}: invalid number {:?}", path.display(), &rec[i]))
        };
        let scale = num(1)?;
        let valuation = match rec[0].trim() {
            "linear" => ValuationFunction::linear(scale)?,
            "quadratic" => ValuationFunction::quadratic(scale)?,
            "squareroot" => ValuationFunction::square_root(scale)?,
            "exponential" => ValuationFunction::exponential(scale)?,
            "step" => ValuationFunction::step(scale, 0.0)?,
            other => bail!("{}: line {line}: unknown family {other:?}", path.display()),
        };
        bids.push(Bid::new(valuation, num(2)?)?);
    }
    Ok(BidProfile::new(bids)?)
}

fn cmd_auction(a: AuctionArgs) -> Result<()> {
    let profile = match &a.profile {
        Some(p) => read_profile(p)?,
        None => {
            let market = MarketConfig::for_scenario(a.n, a.budget, a.scenario.into(), a.seed);
            generate_bid_profile(&market, &mut market.rng())?
        }
    };
    let model;
    let auctioneer = match a.mech {
        MechArg::Allin => Auctioneer::AllIn,
        MechArg::Murba => {
            model = a.mbr.load(profile.len(), a.m)?;
            Auctioneer::Murba(&model)
        }
    };
    let clip = ClipBound::new(a.clip)?;
    let outcome = auctioneer.run(&profile, a.budget)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{AUCTION_COLUMNS}")?;
    for (i, bid) in profile.bids().iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{},{},{}",
            family_name(bid.valuation.family()),
            bid.valuation.scale(),
            bid.privacy_budget,
            outcome.epsilons[i],
            outcome.payments[i]
        )?;
    }
    writeln!(w)?;
    writeln!(w, "{SUMMARY_COLUMNS}")?;
    writeln!(w, "winners,{}", outcome.winners().count())?;
    writeln!(w, "total_payment,{}", outcome.total_payment())?;
    for aggr in [Aggregator::VarOpt, Aggregator::BiasOpt] {
        writeln!(w, "err_bound_{aggr},{}", mechanism_err_bound(aggr, &outcome.epsilons, clip))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_aggregate(a: AggregateArgs) -> Result<()> {
    let clip = ClipBound::new(a.clip)?;
    let aggr: Aggregator = a.aggr.into();
    let lambdas = aggr.weights(&a.eps)?;
    let mut w = output(&a.out)?;
    writeln!(w, "{AGGREGATE_COLUMNS}")?;
    for (i, (e, l)) in a.eps.iter().zip(lambdas.iter()).enumerate() {
        writeln!(w, "{i},{e},{l}")?;
    }
    writeln!(w)?;
    writeln!(w, "{SUMMARY_COLUMNS}")?;
    writeln!(w, "bias,{}", bias_bound(&lambdas, clip))?;
    writeln!(w, "variance,{}", var_bound(&lambdas, &a.eps, clip))?;
    writeln!(w, "err_bound,{}", err_bound(&lambdas, &a.eps, clip))?;
    w.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => read_toml::<TrainConfig>(p)?,
        (None, Preset::Desk) => TrainConfig::desk(),
        (None, Preset::Full) => TrainConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.model.n = n;
        cfg.market.n = n;
    }
    if let Some(m) = a.m {
        cfg.model.m = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.scenario {
        let s: Scenario = s.into();
        cfg.market.sensitivity = s.sensitivity();
        cfg.model.privacy_scale = s.sensitivity();
    }
    cfg.validate()?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let name = checkpoint_name(cfg.model.n, cfg.model.m);
    let ckpt = a.out.join(&name);
    let log_path = a.out.join(name.replace(".mbr", ".log.csv"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{LOG_HEADER}")?;
    log.flush()?;

    let sample = cfg.training_sample()?;
    let mut log_err = None;
    let outcome = train_mbr_with(&cfg, &sample, |entry| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", entry.csv_row()).and_then(|_| log.flush()) {
                log_err = Some(e);
            }
        }
        eprintln!(
            "epoch {}: lagrangian {:.6} err {:.6} regret {:.6}/{:.6} ir {:.6}/{:.6}",
            entry.epoch, entry.lagrangian, entry.err_hat, entry.regret_mean, entry.regret_max, entry.ir_mean, entry.ir_max
        );
    });
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let outcome = outcome.with_context(|| format!("training aborted; partial log kept at {}", log_path.display()))?;
    let meta = CheckpointMeta {
        epochs_completed: outcome.log.len(),
        training: cfg,
    };
    save_checkpoint(&ckpt, &outcome.model, &meta)?;
    eprintln!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_toml::<SimConfig>(p)?,
        None => SimConfig {
            rounds: a.rounds,
            learning_rate: a.lr,
            clip: a.clip,
            mechanism: a.mech.into(),
            aggregator: a.aggr.into(),
            market: MarketConfig::for_scenario(a.n, a.budget, a.scenario.into(), a.seed),
            seed: a.seed,
            noiseless: a.noiseless,
            mbr_checkpoint: a.mbr.checkpoint.clone(),
        },
    };
    if a.config.is_some() {
        cfg.mechanism = a.mech.into();
        cfg.aggregator = a.aggr.into();
        cfg.seed = a.seed;
        cfg.market.seed = a.seed;
        cfg.noiseless |= a.noiseless;
    }
    let n = cfg.market.n;
    let data = match &a.data {
        Some(p) => load_csv_dataset(p, &a.label, n, cfg.seed)?,
        None => synthetic_blobs(n, a.rows_per_owner, cfg.seed)?,
    };
    let model = match cfg.mechanism {
        Mechanism::Murba => {
            let src = MbrSource {
                checkpoint: cfg.mbr_checkpoint.clone(),
                checkpoint_dir: a.mbr.checkpoint_dir.clone(),
            };
            Some(src.load(n, a.m)?)
        }
        Mechanism::AllIn => None,
    };
    let report = run_fl(&cfg, &data, model.as_ref().map(|m| m as _))?;
    let mut w = output(&a.out)?;
    writeln!(w, "{SIM_COLUMNS}")?;
    for r in &report.rounds {
        writeln!(
            w,
            "0,{},{},{},{},{},{},{},{}",
            r.round, cfg.market.budget, cfg.mechanism, cfg.aggregator, r.err_bound, r.total_payment, r.accuracy, cfg.seed
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_toml::<SweepSpec>(p)?,
        None => SweepSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.base_seed = s;
    }
    if a.checkpoint_dir.is_some() {
        spec.checkpoint_dir = a.checkpoint_dir.clone();
    }
    spec.validate()?;
    let models = if spec.required_models().is_empty() {
        ModelStore::default()
    } else {
        let dir = spec.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        ModelStore::load_for(&spec, &dir)?
    };
    let result = run_sweep(&spec, &models)?;
    write_sweep_csv(output(&a.out)?, &result)?;
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Auction(a) => cmd_auction(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::TrainMbr(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
