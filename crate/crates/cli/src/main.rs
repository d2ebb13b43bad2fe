use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nfq_core::batch::GrowingBatch;
use nfq_core::checkpoint;
use nfq_core::config::{ExperimentConfig, Seeds};
use nfq_core::costs::{CostKind, CostSpec};
use nfq_core::env::{CartPole, Environment};
use nfq_core::metrics::{mean_std, METRICS_CSV_HEADER};
use nfq_core::nfq::{greedy_rollouts, q_diagnostics, train_growing_batch, train_offline, train_replay, EvalStart, RolloutOptions};
use nfq_core::qfunc::ActionSet;
use nfq_core::NfqError;

#[derive(Parser, Debug)]
#[command(name = "nfq", version, about = "Growing-batch neural fitted Q-iteration on a cart-pole swing-up simulator")]
struct Cli {
    /// Experiment configuration (JSON); missing fields come from its preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for network, exploration and environment streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Growing-batch training on the simulator.
    Train(TrainArgs),
    /// Train on a fixed dataset without exploring.
    Offline(OfflineArgs),
    /// Re-run a logged training run episode by episode.
    Replay(ReplayArgs),
    /// Recompute costs of a dataset under another cost function.
    Relabel(RelabelArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Print a checkpoint manifest and q-statistics over a dataset.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Named preset used when no --config is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run this many independent seeds into `<out>/seed<k>`.
    #[arg(long)]
    seed_sweep: Option<usize>,
    /// Dataset whose episodes are injected as demonstrations.
    #[arg(long)]
    demo: Option<PathBuf>,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args, Debug)]
struct OfflineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    td_updates: Option<usize>,
    /// Start from this checkpoint instead of a fresh network.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Skip evaluation episodes.
    #[arg(long)]
    no_eval: bool,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A run directory or a dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Network seed; defaults to the original run's.
    #[arg(long)]
    net_seed: Option<u64>,
    /// Explore live once the log is exhausted.
    #[arg(long)]
    continue_live: bool,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args, Debug)]
struct RelabelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args, Debug, Clone)]
struct CostArgs {
    /// Replace the cost function.
    #[arg(long, value_enum)]
    cost: Option<CostChoice>,
    /// Pole margin for margin-based costs.
    #[arg(long)]
    margin: Option<f64>,
    /// Penalty added to every non-zero action.
    #[arg(long)]
    action_penalty: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CostChoice {
    Shaped,
    TimeOptimal,
    ShapedInMargin,
    SwayKiller,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StartChoice {
    Center,
    Random,
    Continue,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, value_enum, default_value = "center")]
    start: StartChoice,
    /// Actions the greedy policy must not choose, e.g. `500,-500`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mask_actions: Option<Vec<f64>>,
    /// Replacement action set; `33` selects the extended set.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    extend_actions: Option<Vec<String>>,
    /// Write per-episode metrics CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<NfqError>()) {
        Some(NfqError::Config(_)) => 2,
        Some(NfqError::Io { .. }) | Some(NfqError::Parse { .. }) => 3,
        Some(_) => 4,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 4,
    }
}

fn base_config(cli: &Cli, preset: Option<&str>) -> anyhow::Result<ExperimentConfig> {
    let mut config = match (&cli.config, preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::nfq2_default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = Seeds::from_base(seed);
    }
    if let Some(out) = &cli.out {
        config.io.out_dir = Some(out.clone());
    }
    Ok(config)
}

fn apply_cost(mut cost: CostSpec, args: &CostArgs) -> CostSpec {
    if let Some(choice) = args.cost {
        let margin = args.margin;
        let regions = cost.regions;
        cost = match choice {
            CostChoice::Shaped => CostSpec::shaped(),
            CostChoice::TimeOptimal => CostSpec::time_optimal(),
            CostChoice::ShapedInMargin => CostSpec::shaped_in_margin(margin.unwrap_or(0.05)),
            CostChoice::SwayKiller => CostSpec::sway_killer(),
        };
        cost.regions = regions;
    }
    if let Some(m) = args.margin {
        if cost.kind != CostKind::Shaped {
            cost.pole_margin = m;
        }
    }
    if let Some(p) = args.action_penalty {
        cost = cost.with_action_penalty(p);
    }
    cost
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(cli, args),
        Command::Offline(args) => cmd_offline(cli, args),
        Command::Replay(args) => cmd_replay(cli, args),
        Command::Relabel(args) => cmd_relabel(args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = base_config(cli, args.preset.as_deref())?;
    if let Some(e) = args.episodes {
        config.schedule.episodes = e;
    }
    if let Some(s) = args.steps {
        config.schedule.steps_per_episode = s;
    }
    if let Some(demo) = &args.demo {
        config.io.demonstration = Some(demo.clone());
    }
    config.cost = apply_cost(config.cost, &args.cost);
    if config.schedule.episodes == 0 {
        return Err(NfqError::config("schedule.episodes: must be at least 1").into());
    }
    config.validate()?;
    let sweep = args.seed_sweep.unwrap_or(1);
    if sweep == 0 {
        return Err(NfqError::config("--seed-sweep: must be at least 1").into());
    }
    let base = config.seeds.network;
    for k in 0..sweep {
        let mut c = config.clone();
        if args.seed_sweep.is_some() {
            c.seeds = Seeds::from_base(base + k as u64);
            c.io.out_dir = Some(config.io.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(format!("seed{k}")));
        } else if c.io.out_dir.is_none() {
            c.io.out_dir = Some(PathBuf::from("runs").join("train"));
        }
        let mut env = CartPole::new(c.env.sim, c.env.latency)?;
        let art = train_growing_batch(&mut env, &c)?;
        let dir = c.io.out_dir.as_ref().expect("set above");
        match art.best() {
            Some(best) => println!(
                "{}: best episode {} avg cost {:.5} N {}",
                dir.display(),
                best.episode,
                best.report.avg_cost,
                best.report.big_n.map_or("-".into(), |n| n.to_string())
            ),
            None => println!("{}: no evaluations", dir.display()),
        }
    }
    Ok(())
}

fn cmd_offline(cli: &Cli, args: &OfflineArgs) -> anyhow::Result<()> {
    let mut config = base_config(cli, args.preset.as_deref())?;
    if let Some(lr) = args.lr {
        config.schedule.train.learning_rate = lr;
    }
    if let Some(n) = args.eval_every {
        config.schedule.eval_every_td = n;
    }
    if let Some(n) = args.td_updates {
        config.schedule.offline_td_updates = n;
    }
    let (batch, warnings) = GrowingBatch::load_for_run(&args.data, config.agent.lookback)?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    config.cost = apply_cost(batch.meta.cost, &args.cost);
    config.agent.actions = batch.meta.action_set.values().to_vec();
    config.agent.action_bound = batch.meta.action_bound;
    config.env.sim.force_bound = config.env.sim.force_bound.max(batch.meta.action_bound);
    if config.io.out_dir.is_none() {
        config.io.out_dir = Some(PathBuf::from("runs").join("offline"));
    }
    config.validate()?;
    let initial = match &args.init_checkpoint {
        Some(dir) => Some(checkpoint::load(dir)?.0),
        None => None,
    };
    let batch = if batch.meta.cost != config.cost { batch.relabel(&config.cost) } else { batch };
    let mut env = CartPole::new(config.env.sim, config.env.latency)?;
    let env: Option<&mut dyn Environment> = if args.no_eval { None } else { Some(&mut env) };
    let art = train_offline(&batch, env, &config, initial)?;
    if let Some(best) = art.best() {
        println!("best after {} TD updates: avg cost {:.5} N {:?}", best.episode, best.report.avg_cost, best.report.big_n);
    }
    if let Some(last) = art.qstats.last() {
        println!("final q-stats: min {:.5} avg {:.5} max {:.5}", last.stats.q_min, last.stats.q_avg, last.stats.q_max);
    }
    Ok(())
}

/// Resolves a replay source into the dataset path and the original run configuration, if any.
fn replay_source(data: &Path) -> anyhow::Result<(PathBuf, Option<ExperimentConfig>)> {
    if data.is_dir() {
        let batch = data.join("data").join("batch.jsonl");
        let config_path = data.join("config.json");
        let config = if config_path.exists() { Some(ExperimentConfig::load(&config_path)?) } else { None };
        Ok((batch, config))
    } else {
        Ok((data.to_path_buf(), None))
    }
}

fn cmd_replay(cli: &Cli, args: &ReplayArgs) -> anyhow::Result<()> {
    let (path, original) = replay_source(&args.data)?;
    let mut config = match (original, &cli.config) {
        (Some(c), None) => c,
        _ => base_config(cli, None)?,
    };
    if let Some(seed) = cli.seed {
        config.seeds = Seeds::from_base(seed);
    }
    if let Some(seed) = args.net_seed {
        config.seeds.network = seed;
    }
    config.io.out_dir = Some(cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join("replay")));
    config.io.demonstration = None;
    let (batch, warnings) = GrowingBatch::load_for_run(&path, config.agent.lookback)?;
    warnings.iter().for_each(|w| log::warn!("{w}"));
    if let Some(e) = args.episodes {
        config.schedule.episodes = e;
    }
    config.validate()?;
    let mut env = CartPole::new(config.env.sim, config.env.latency)?;
    let env: Option<&mut dyn Environment> = if args.no_eval && !args.continue_live { None } else { Some(&mut env) };
    config.schedule.eval_each_episode &= !args.no_eval;
    let art = train_replay(&batch.episodes, env, args.continue_live, &config)?;
    for note in &art.notes {
        println!("{note}");
    }
    println!("replayed {} episodes, {} transitions", art.growth.len(), art.batch.len());
    Ok(())
}

fn cmd_relabel(args: &RelabelArgs) -> anyhow::Result<()> {
    let batch = GrowingBatch::load(&args.data)?;
    if args.cost.cost.is_none() && args.cost.action_penalty.is_none() && args.cost.margin.is_none() {
        return Err(NfqError::config("relabel needs --cost, --margin or --action-penalty").into());
    }
    let cost = apply_cost(batch.meta.cost, &args.cost);
    cost.validate()?;
    let relabeled = batch.relabel(&cost);
    relabeled.save(&args.output)?;
    println!(
        "{} -> {}: {} transitions ({} dropped), cost {}",
        args.data.display(),
        args.output.display(),
        relabeled.len(),
        batch.len() - relabeled.len(),
        cost.id()
    );
    Ok(())
}

/// The configuration stored next to a checkpoint's run, if any.
fn run_config_for(checkpoint: &Path) -> Option<ExperimentConfig> {
    checkpoint.ancestors().skip(1).take(3).map(|d| d.join("config.json")).find(|p| p.exists()).and_then(|p| {
        ExperimentConfig::load(&p).map_err(|e| log::warn!("ignoring {}: {e}", p.display())).ok()
    })
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let (mut qf, _) = checkpoint::load(&args.checkpoint)?;
    let config = match &cli.config {
        Some(_) => base_config(cli, None)?,
        None => run_config_for(&args.checkpoint).unwrap_or_else(ExperimentConfig::nfq2_default),
    };
    if let Some(list) = &args.extend_actions {
        let set = if list.len() == 1 && list[0] == "33" {
            let unit = qf.action_set.max_magnitude();
            ActionSet::extended(unit)
        } else {
            let values = list.iter().map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().context("--extend-actions")?;
            ActionSet::new(values)?
        };
        qf = qf.extend_action_set(set)?;
    }
    let mask = match &args.mask_actions {
        Some(removed) => Some(qf.action_set.mask_excluding(removed)?),
        None => None,
    };
    let start = match args.start {
        StartChoice::Center => EvalStart::Center,
        StartChoice::Random => EvalStart::Random,
        StartChoice::Continue => EvalStart::Continue,
    };
    let seed = cli.seed.unwrap_or(config.seeds.environment);
    let opts = RolloutOptions { episodes: args.episodes, max_steps: args.steps, start, mask: mask.as_deref(), seed };
    let results = greedy_rollouts(&qf, &config, &opts)?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    println!("{METRICS_CSV_HEADER}");
    for (i, (_, report)) in results.iter().enumerate() {
        let row = report.csv_row(i);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    let column = |f: &dyn Fn(&nfq_core::StabilityReport) -> Option<f64>| {
        let v: Vec<f64> = results.iter().filter_map(|(_, r)| f(r)).collect();
        mean_std(&v).map_or(String::new(), |(m, s)| format!("{m:.4}±{s:.4}"))
    };
    println!(
        "mean,{},{},{},{},{},{},,{}/{} finite N",
        column(&|r| r.n.map(|v| v as f64)),
        column(&|r| r.big_n.map(|v| v as f64)),
        column(&|r| r.e_inf),
        column(&|r| r.e_t),
        column(&|r| r.e_t_mean),
        column(&|r| Some(r.avg_cost)),
        results.iter().filter(|(_, r)| r.big_n.is_some()).count(),
        results.len()
    );
    if let Some(path) = &args.csv {
        std::fs::write(path, csv).map_err(|e| NfqError::io(path, e))?;
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> anyhow::Result<()> {
    let (qf, manifest) = checkpoint::load(&args.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    if let Some(data) = &args.data {
        let lookback = (qf.state_dim() + 1) / 6;
        let (batch, warnings) = GrowingBatch::load_for_run(data, lookback)?;
        warnings.iter().for_each(|w| log::warn!("{w}"));
        let stacked = batch.stacked()?;
        if stacked.is_empty() {
            bail!("dataset {} is empty", data.display());
        }
        let stats = q_diagnostics(&qf, &stacked.states, stacked.state_dim)?;
        println!(
            "q over {} states x {} actions: min {:.6} avg {:.6} max {:.6}",
            stacked.len(),
            qf.action_set.len(),
            stats.q_min,
            stats.q_avg,
            stats.q_max
        );
    }
    Ok(())
}
