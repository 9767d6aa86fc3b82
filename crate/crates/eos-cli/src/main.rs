//! Command-line surface for the edge-of-stability lab: pretraining, buffer
//! generation, training with spectral logging, one-shot λ₁ probes and SVG
//! plots. Defaults follow the experiment settings throughout.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eos_core::env::Breakout;
use eos_core::harness::{
    final_buffer, generate_buffer, pretrain_agent, probe_batch, train_offline, train_online,
    Algorithm, BatchMode, ExplorationSchedule, PretrainConfig, RegimeKind, RegimeSpec, TrainConfig,
};
use eos_core::io::{
    load_buffer, load_checkpoint, read_metrics, render_svg, save_buffer, save_checkpoint,
    Checkpoint, MetricsWriter,
};
use eos_core::nn::QNetworkSpec;
use eos_core::rl::{build_c51_loss, build_dqn_loss, OptimizerConfig};

#[derive(Parser)]
#[command(name = "eos", about = "DQN/C51 edge-of-stability laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    Breakout,
}

#[derive(Clone, Copy, ValueEnum)]
enum RolloutRegime {
    Greedy,
    EpsGreedy,
    FinalBuffer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Dqn,
    C51,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainRegime {
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Momentum,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source agent online with Adam and persist its checkpoint,
    /// replay tail and return curve.
    Pretrain(PretrainArgs),
    /// Build an offline replay buffer from a pretrained checkpoint.
    Rollout(RolloutArgs),
    /// Train an agent in one of the data regimes, logging loss and λ₁.
    Train(TrainArgs),
    /// Estimate λ₁ of the loss Hessian at a checkpoint and print it.
    Probe(ProbeArgs),
    /// Render a metrics CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_enum, default_value = "breakout")]
    env: EnvName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    /// Replay capacity; the trailing window persisted for the final-buffer
    /// regime.
    #[arg(long, default_value_t = 1_000_000)]
    buffer_capacity: usize,
    /// Checkpoint output path; the replay tail goes to `<out>.replay.eosb`
    /// and the return curve to `<out>.metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    regime: RolloutRegime,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    transitions: usize,
    /// Random-action probability for eps-greedy rollouts.
    #[arg(long, default_value_t = 0.3)]
    eps: f32,
    /// Pretrainer replay tail (final-buffer regime); defaults to
    /// `<ckpt>.replay.eosb`.
    #[arg(long)]
    pretrain_buffer: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "dqn")]
    algo: Algo,
    #[arg(long, value_enum, default_value = "offline")]
    regime: TrainRegime,
    /// Replay buffer file (offline regime).
    #[arg(long)]
    buffer: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "momentum")]
    opt: Opt,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Minibatch size, or "full" for full-batch training on a frozen
    /// subsample.
    #[arg(long, default_value = "512")]
    batch: String,
    #[arg(long, default_value_t = 10_000)]
    subsample: usize,
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f32,
    #[arg(long, default_value_t = 1000)]
    target_period: usize,
    /// λ₁ logging cadence in optimizer steps.
    #[arg(long, default_value_t = 100)]
    eig_period: u64,
    #[arg(long, default_value_t = 30)]
    eig_iters: usize,
    #[arg(long, default_value_t = 5000)]
    eval_period: u64,
    #[arg(long, default_value_t = 10)]
    eval_episodes: usize,
    #[arg(long, value_enum, default_value = "breakout")]
    env: EnvName,
    #[arg(long, default_value_t = 1_000_000)]
    buffer_capacity: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    buffer: PathBuf,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    /// Probe batch: a size, or "full" for a frozen subsample.
    #[arg(long, default_value = "512")]
    batch: String,
    #[arg(long, default_value_t = 10_000)]
    subsample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f32,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_batch(s: &str) -> Result<BatchMode> {
    if s.eq_ignore_ascii_case("full") {
        Ok(BatchMode::Full)
    } else {
        let n: usize = s.parse().with_context(|| format!("bad batch size {s:?}"))?;
        Ok(BatchMode::Mini(n))
    }
}

fn replay_tail_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".replay.eosb");
    PathBuf::from(s)
}

fn metrics_sibling_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let EnvName::Breakout = args.env;
    let cfg = PretrainConfig {
        buffer_capacity: args.buffer_capacity,
        ..PretrainConfig::new(args.steps, args.seed)
    };
    let mut env = Breakout::new(args.seed);
    let mut metrics = MetricsWriter::create(&metrics_sibling_path(&args.out))?;
    let mut io_err: Option<eos_core::io::IoError> = None;
    let result = pretrain_agent(&mut env, &cfg, &mut |row| {
        if io_err.is_none() {
            if let Err(e) = metrics.write_row(row) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.finish()?;
    save_buffer(&replay_tail_path(&args.out), &result.replay, 3)?;
    save_checkpoint(
        &args.out,
        &Checkpoint { network: result.network, step: args.steps, opt_state: None },
    )?;
    eprintln!(
        "pretrained {} steps, {} episodes, final avg_return {:?}",
        args.steps, result.episodes, result.final_avg_return
    );
    Ok(())
}

fn cmd_rollout(args: RolloutArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let buffer = match args.regime {
        RolloutRegime::Greedy | RolloutRegime::EpsGreedy => {
            let kind = match args.regime {
                RolloutRegime::Greedy => RegimeKind::OfflineGreedy,
                _ => RegimeKind::OfflineEpsGreedy,
            };
            let mut regime = RegimeSpec::new(kind);
            regime.buffer_size = args.transitions;
            regime.eps_random = args.eps;
            let mut env = Breakout::new(args.seed);
            generate_buffer(&regime, &ckpt.network, &mut env, args.seed)?
        }
        RolloutRegime::FinalBuffer => {
            let tail_path =
                args.pretrain_buffer.clone().unwrap_or_else(|| replay_tail_path(&args.ckpt));
            let tail = load_buffer(&tail_path)
                .with_context(|| format!("pretrain replay tail {}", tail_path.display()))?;
            final_buffer(&tail, args.transitions)?
        }
    };
    save_buffer(&args.out, &buffer, ckpt.network.spec.head.num_actions() as u16)?;
    eprintln!("wrote {} transitions to {}", buffer.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let algorithm = match args.algo {
        Algo::Dqn => Algorithm::Dqn,
        Algo::C51 => Algorithm::C51,
    };
    let optimizer = match args.opt {
        Opt::Sgd => OptimizerConfig::Sgd { lr: args.lr },
        Opt::Momentum => OptimizerConfig::HeavyBall { lr: args.lr, beta: args.beta },
    };
    let mut cfg = TrainConfig::new(algorithm, optimizer, args.steps, args.seed);
    cfg.batch = parse_batch(&args.batch)?;
    cfg.gamma = args.gamma;
    cfg.full_batch_subsample = args.subsample;
    cfg.target_period = args.target_period;
    cfg.eig_log_period = args.eig_period;
    cfg.eig_iters = args.eig_iters;
    cfg.eval_period = args.eval_period;
    cfg.eval_episodes = args.eval_episodes;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut metrics = MetricsWriter::create(&args.out_dir.join("metrics.csv"))?;
    let mut io_err: Option<eos_core::io::IoError> = None;
    let mut on_row = |row: &eos_core::harness::RunRow| {
        if io_err.is_none() {
            if let Err(e) = metrics.write_row(row) {
                io_err = Some(e);
            }
        }
    };

    let spec = match algorithm {
        Algorithm::Dqn => QNetworkSpec::dqn_breakout(),
        Algorithm::C51 => QNetworkSpec::c51_breakout(cfg.support.n),
    };
    let artifacts = match args.regime {
        TrainRegime::Offline => {
            let buffer_path = match &args.buffer {
                Some(p) => p,
                None => bail!("--buffer is required for offline training"),
            };
            let buffer = load_buffer(buffer_path)?;
            train_offline(&spec, &buffer, &cfg, Some(&Breakout::new), &mut on_row)?
        }
        TrainRegime::Online => {
            let EnvName::Breakout = args.env;
            let mut env = Breakout::new(args.seed);
            let schedule = ExplorationSchedule::default();
            train_online(&mut env, &spec, &cfg, &schedule, args.buffer_capacity, &mut on_row)?
        }
    };
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.finish()?;
    save_checkpoint(
        &args.out_dir.join("checkpoint.eosc"),
        &Checkpoint {
            network: eos_core::nn::QNetwork { spec, params: artifacts.params, seed: args.seed },
            step: args.steps,
            opt_state: None,
        },
    )?;
    if let Some(summary) = cfg
        .threshold()
        .and_then(|t| eos_core::spectral::eos_phase(&artifacts.log.lambda_series(), t).ok())
    {
        eprintln!(
            "done: first_crossing {:?}, edge fraction {:.3}",
            summary.first_crossing, summary.edge_fraction
        );
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    use eos_core::autodiff::LossGraph;
    use eos_core::rl::TargetNetwork;

    let ckpt = load_checkpoint(&args.ckpt)?;
    let buffer = load_buffer(&args.buffer)?;
    let spec = ckpt.network.spec.clone();
    let support = eos_core::rl::CategoricalSupport::c51();
    let batch = match parse_batch(&args.batch)? {
        BatchMode::Mini(n) => n,
        BatchMode::Full => args.subsample,
    };
    let (obs, actions, transitions) = probe_batch(&spec, &buffer, batch, args.seed);
    // The checkpoint's own parameters double as the frozen target, exactly
    // as at the start of a training segment (the target starts as a copy).
    let target = TargetNetwork::new(ckpt.network.params.clone(), 1);
    let mut graph = match spec.head {
        eos_core::nn::Head::Dqn { .. } => {
            let y = eos_core::rl::dqn_target(&spec, target.params(), &transitions, args.gamma)?;
            LossGraph::build(&ckpt.network.params, |tape, p| {
                build_dqn_loss(tape, &spec, p, obs, &actions, &y)
            })?
        }
        eos_core::nn::Head::C51 { .. } => {
            let m = eos_core::rl::c51_target_masses(
                &spec,
                target.params(),
                &support,
                &transitions,
                args.gamma,
            )?;
            LossGraph::build(&ckpt.network.params, |tape, p| {
                build_c51_loss(tape, &spec, p, obs, &actions, &m)
            })?
        }
    };
    let loss = graph.loss_value();
    let layout = std::sync::Arc::clone(ckpt.network.params.layout());
    let dim = layout.total_len();
    let (lambda1, residual, iterations) =
        eos_core::spectral::leading_eigenvalue(dim, args.iters, args.seed, |v| {
            let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let pv = eos_core::autodiff::ParamVector::new(std::sync::Arc::clone(&layout), v32)
                .expect("layout fixed");
            graph
                .hvp(&pv)
                .map(|hv| hv.values().iter().map(|&x| x as f64).collect())
                .unwrap_or_else(|_| vec![f64::NAN; dim])
        })?;
    println!(
        "step={} lambda1={lambda1:.6} residual={residual:.6} iterations={iterations} loss={loss} batch={batch}",
        ckpt.step
    );
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let rows = read_metrics(&args.metrics)?;
    std::fs::write(&args.out, render_svg(&rows))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Train(args) => cmd_train(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Plot(args) => cmd_plot(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
