use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use actiongrad::harness::{
    cmd_ablate, cmd_compare, cmd_eval, cmd_gen_data, cmd_toy, cmd_train_critic, cmd_train_policy,
    resolve_config, ExperimentConfig,
};
use actiongrad::Result;

#[derive(Parser)]
#[command(
    name = "actiongrad",
    about = "Offline-RL toolkit: sequence policies, expectile critics, and gradient-refined action selection",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every config-driven command. Precedence, lowest to
/// highest: per-env preset, --config file, --set overrides, named flags.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; missing fields fall back to env presets
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name (bandit-v0 | stitch-v0)
    #[arg(long)]
    env: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (JSON lines, as written by gen-data)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Policy checkpoint to load
    #[arg(long)]
    policy_ckpt: Option<PathBuf>,
    /// Critic checkpoint to load
    #[arg(long)]
    critic_ckpt: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set critic.lr=0.003 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Record real wall-clock times instead of zeros in metrics rows
    #[arg(long)]
    timings: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = resolve_config(self.config.as_deref(), &self.sets, self.env.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(dataset) = &self.dataset {
            cfg.dataset = Some(dataset.clone());
        }
        if let Some(p) = &self.policy_ckpt {
            cfg.policy_ckpt = Some(p.clone());
        }
        if let Some(c) = &self.critic_ckpt {
            cfg.critic_ckpt = Some(c.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a logged dataset and write it as JSON lines
    GenData {
        /// Environment name (bandit-v0 | stitch-v0)
        #[arg(long, default_value = "bandit-v0")]
        env: String,
        /// Number of episodes to log
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file path
        #[arg(long, default_value = "out/dataset.jsonl")]
        out: PathBuf,
    },
    /// Train a critic on a dataset; writes critic.ckpt and its loss curve
    TrainCritic(ConfigArgs),
    /// Train a sequence policy; writes policy.ckpt and its loss curve
    TrainPolicy(ConfigArgs),
    /// Evaluate a saved policy, optionally with critic-guided refinement
    Eval(ConfigArgs),
    /// Run the self-contained bandit comparison (dt / dt_tp / dt_pg / dt_ag)
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/toy")]
        out: PathBuf,
        /// Record real wall-clock times instead of zeros in metrics rows
        #[arg(long)]
        timings: bool,
    },
    /// Sweep step size, step count, and gradient method over one policy/critic pair
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Step sizes to sweep, comma-separated
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1")]
        etas: Vec<f64>,
        /// Refinement step counts to sweep, comma-separated
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,20")]
        ns: Vec<usize>,
        /// Gradient methods to sweep: none|momentum|rmsprop|adam
        #[arg(long, value_delimiter = ',', default_value = "none")]
        methods: Vec<String>,
        /// Use the exact bandit critic instead of training one
        #[arg(long)]
        analytic_critic: bool,
    },
    /// Train one critic per env and compare rf / rf_pg / rf_awac / rf_ag against it
    Compare {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/compare")]
        out: PathBuf,
        /// Record real wall-clock times instead of zeros in metrics rows
        #[arg(long)]
        timings: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { env, count, seed, out } => cmd_gen_data(&env, count, seed, &out),
        Cmd::TrainCritic(args) => {
            let cfg = args.resolve()?;
            cmd_train_critic(&cfg).map(|_| ())
        }
        Cmd::TrainPolicy(args) => {
            let cfg = args.resolve()?;
            cmd_train_policy(&cfg).map(|_| ())
        }
        Cmd::Eval(args) => {
            let cfg = args.resolve()?;
            cmd_eval(&cfg, args.timings).map(|_| ())
        }
        Cmd::Toy { seed, out, timings } => cmd_toy(&out, seed, timings).map(|_| ()),
        Cmd::Ablate { cfg, etas, ns, methods, analytic_critic } => {
            let config = cfg.resolve()?;
            cmd_ablate(&config, &etas, &ns, &methods, analytic_critic, cfg.timings).map(|_| ())
        }
        Cmd::Compare { seed, out, timings } => cmd_compare(&out, seed, timings).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
