//! Command-line experiment driver: dataset generation, critic/policy
//! training, evaluation, the bandit toy comparison, the η×n / gradient-method
//! ablation grid, and the critic-sharing method comparison. Every command is
//! deterministic given its config and seed, down to the output bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::{
    sample_expectile, train_critic_bellman, train_critic_iql, train_critic_regression,
    AnalyticBandit, CriticBundle, CriticConfig, CriticMode, CriticTrainLog, QFunction,
};
use crate::data::{load_dataset, save_dataset, Dataset};
use crate::envs::{
    bandit_dataset, bandit_dataset_with_mix, make_env, normalized_score, stitch_dataset, Env,
    StitchEnv, StitchStart, StitchState, BANDIT_NAME, STITCH_NAME,
};
use crate::inference::{run_episode, AgConfig, AgMethod, EvalConfig, RtgMode};
use crate::policy::{train_policy, DtConfig, DtModel, LossMode, PolicyTrainLog};
use crate::rng::RngStream;
use crate::{Error, Result};

// ------------------------------------------------------------ configuration

/// One experiment, mirrored one-for-one by the JSON config file. Field paths
/// double as `--set` keys (e.g. `--set critic.lr=0.003`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Row label in metrics CSV; defaults to the command name.
    pub label: Option<String>,
    pub env: String,
    pub dataset: Option<PathBuf>,
    pub critic_mode: CriticMode,
    pub critic: CriticConfig,
    pub policy: DtConfig,
    pub ag: AgConfig,
    pub eval: EvalConfig,
    pub policy_ckpt: Option<PathBuf>,
    pub critic_ckpt: Option<PathBuf>,
    /// Forced initial state for envs that support one (stitch: "s1"/"s2").
    pub start: Option<String>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            label: None,
            env: BANDIT_NAME.to_string(),
            dataset: None,
            critic_mode: CriticMode::Iql,
            critic: CriticConfig::default(),
            policy: DtConfig::default(),
            ag: AgConfig { n: 0, ..AgConfig::default() },
            eval: EvalConfig::default(),
            policy_ckpt: None,
            critic_ckpt: None,
            start: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Per-env defaults sized for the desk-scale envs. User config deep-merges
/// on top, so any explicitly set key wins field-by-field.
pub fn env_preset(env: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig { env: env.to_string(), ..ExperimentConfig::default() };
    match env {
        BANDIT_NAME => {
            cfg.critic_mode = CriticMode::Regression;
            cfg.critic = CriticConfig {
                lr: 3e-3,
                steps: 1500,
                batch: 128,
                hidden: vec![32, 32],
                ..CriticConfig::default()
            };
            cfg.policy = DtConfig {
                k: 1,
                n_layers: 2,
                n_heads: 1,
                embed_dim: 32,
                loss_mode: LossMode::DtMse,
                tau_rtg: 0.95,
                lr: 1e-3,
                steps: 1200,
                batch: 64,
                max_timestep: 4,
                rtg_hidden: vec![16],
                ..DtConfig::default()
            };
            cfg.eval = EvalConfig {
                max_steps: 5,
                k_max: 1,
                adaptive_context: false,
                ..EvalConfig::default()
            };
        }
        STITCH_NAME => {
            cfg.critic_mode = CriticMode::Iql;
            cfg.critic = CriticConfig {
                lr: 3e-3,
                steps: 2500,
                batch: 128,
                hidden: vec![48, 48],
                ..CriticConfig::default()
            };
            cfg.policy = DtConfig {
                k: 1,
                n_layers: 2,
                n_heads: 1,
                embed_dim: 32,
                loss_mode: LossMode::RfNll,
                tau_rtg: 0.9,
                lr: 1e-3,
                steps: 1500,
                batch: 64,
                max_timestep: 8,
                rtg_hidden: vec![16],
                ..DtConfig::default()
            };
            cfg.eval = EvalConfig {
                max_steps: 5,
                k_max: 1,
                adaptive_context: false,
                ..EvalConfig::default()
            };
        }
        other => return Err(Error::Config(format!("unknown environment {other:?}"))),
    }
    Ok(cfg)
}

/// Recursively overlay `user` onto `base`: objects merge key-by-key, any
/// other value replaces wholesale.
pub fn deep_merge(base: serde_json::Value, user: serde_json::Value) -> serde_json::Value {
    match (base, user) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                let merged = match b.remove(&k) {
                    Some(prev) => deep_merge(prev, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            serde_json::Value::Object(b)
        }
        (_, user) => user,
    }
}

/// Apply one `--set key.path=value` override to a JSON tree. Values parse as
/// JSON when possible and fall back to plain strings.
pub fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {spec:?}")))?;
    if path.is_empty() {
        return Err(Error::Usage("--set key must be nonempty".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("--set path {path:?} crosses a non-object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Usage(format!("--set path {path:?} crosses a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Assemble the effective config: env preset <- config file <- --set pairs.
/// The env is resolved first (from flag, then file, then default) so the
/// right preset is used as the base.
pub fn resolve_config(
    file: Option<&Path>,
    sets: &[String],
    env_flag: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut user = match file {
        Some(p) => {
            let raw = std::fs::read_to_string(p)?;
            serde_json::from_str(&raw)?
        }
        None => serde_json::json!({}),
    };
    for s in sets {
        apply_set(&mut user, s)?;
    }
    if let Some(env) = env_flag {
        apply_set(&mut user, &format!("env={env}"))?;
    }
    let env = user
        .get("env")
        .and_then(|v| v.as_str())
        .unwrap_or(BANDIT_NAME)
        .to_string();
    let base = serde_json::to_value(env_preset(&env)?)?;
    let merged = deep_merge(base, user);
    Ok(serde_json::from_value(merged)?)
}

fn derived_seed(master: u64, label: &str) -> u64 {
    let mut s = RngStream::named("harness", master).child(label);
    s.next_u64()
}

// --------------------------------------------------------------- CSV output

/// 17-significant-digit scientific notation: enough to round-trip any f64.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Comma-separated, UTF-8, LF line endings, truncating any existing file so
/// reruns are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(&header.join(","));
    s.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "ragged CSV row");
        s.push_str(&row.join(","));
        s.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// One evaluated episode; the shared schema for all evaluation commands.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub episode: usize,
    pub raw_return: f64,
    pub normalized_score: f64,
    pub eta: f64,
    pub n: usize,
    pub grad_method: String,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "experiment",
    "method",
    "env",
    "seed",
    "episode",
    "raw_return",
    "normalized_score",
    "eta",
    "n",
    "grad_method",
    "wall_ms",
];

impl MetricsRow {
    pub fn to_fields(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            self.method.clone(),
            self.env.clone(),
            self.seed.to_string(),
            self.episode.to_string(),
            fmt_float(self.raw_return),
            fmt_float(self.normalized_score),
            fmt_float(self.eta),
            self.n.to_string(),
            self.grad_method.clone(),
            self.wall_ms.to_string(),
        ]
    }
}

/// Metrics label for the gradient method; plain ascent carries no moment
/// state, hence "none", and any n = 0 row is "none" regardless of method.
pub fn grad_method_label(ag: &AgConfig) -> &'static str {
    if ag.n == 0 {
        return "none";
    }
    match ag.method {
        AgMethod::Plain => "none",
        AgMethod::Momentum => "momentum",
        AgMethod::Rmsprop => "rmsprop",
        AgMethod::Adam => "adam",
    }
}

// ------------------------------------------------------------- shared steps

/// Env construction honoring an optional forced start state.
pub fn build_env(env: &str, start: Option<&str>) -> Result<Box<dyn Env>> {
    match start {
        None => make_env(env),
        Some(s) if env == STITCH_NAME => {
            Ok(Box::new(StitchEnv::new(StitchStart::Fixed(StitchState::parse(s)?))))
        }
        Some(s) => {
            Err(Error::Config(format!("env {env:?} does not support a forced start ({s:?})")))
        }
    }
}

fn load_required_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.dataset.as_ref().ok_or_else(|| {
        Error::Config("no dataset path configured; run gen-data and pass --dataset".into())
    })?;
    load_dataset(path)
}

/// Evaluation summary plus its per-episode rows. The mean is taken over all
/// episode rows; the spread is the population std across per-seed means.
pub struct EvalRows {
    pub rows: Vec<MetricsRow>,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Mirror of the evaluation protocol that also emits one metrics row per
/// episode (same RNG derivation, so returns match `inference::evaluate`).
#[allow(clippy::too_many_arguments)]
pub fn run_eval_rows(
    env: &mut dyn Env,
    model: &DtModel,
    qfn: Option<&dyn QFunction>,
    eval: &EvalConfig,
    ag: &AgConfig,
    experiment: &str,
    method: &str,
    timings: bool,
) -> Result<EvalRows> {
    let env_name = env.spec().name.clone();
    let grad = grad_method_label(ag).to_string();
    let mut rows = Vec::with_capacity(eval.seeds.len() * eval.episodes);
    let mut seed_ret_means = Vec::with_capacity(eval.seeds.len());
    let mut seed_score_means = Vec::with_capacity(eval.seeds.len());
    for &seed in &eval.seeds {
        let base = RngStream::named("eval", seed);
        let mut returns = Vec::with_capacity(eval.episodes);
        for ep in 0..eval.episodes {
            let mut ep_rng = base.child_indexed("episode", ep as u64);
            let t0 = Instant::now();
            let log = run_episode(env, model, qfn, eval, ag, &mut ep_rng)?;
            let wall_ms = if timings { t0.elapsed().as_millis() as u64 } else { 0 };
            let score = normalized_score(&env_name, log.total_return)?;
            rows.push(MetricsRow {
                experiment: experiment.to_string(),
                method: method.to_string(),
                env: env_name.clone(),
                seed,
                episode: ep,
                raw_return: log.total_return,
                normalized_score: score,
                eta: ag.eta,
                n: ag.n,
                grad_method: grad.clone(),
                wall_ms,
            });
            returns.push(log.total_return);
        }
        let m = mean(&returns);
        seed_ret_means.push(m);
        seed_score_means.push(normalized_score(&env_name, m)?);
    }
    let all_returns: Vec<f64> = rows.iter().map(|r| r.raw_return).collect();
    let all_scores: Vec<f64> = rows.iter().map(|r| r.normalized_score).collect();
    Ok(EvalRows {
        mean_return: mean(&all_returns),
        std_return: pop_std(&seed_ret_means, mean(&seed_ret_means)),
        mean_score: mean(&all_scores),
        std_score: pop_std(&seed_score_means, mean(&seed_score_means)),
        rows,
    })
}

fn write_critic_loss_csv(path: &Path, mode: CriticMode, log: &CriticTrainLog) -> Result<()> {
    if mode == CriticMode::Iql {
        let rows: Vec<Vec<String>> = log
            .q_losses
            .iter()
            .zip(&log.v_losses)
            .enumerate()
            .map(|(i, (q, v))| vec![i.to_string(), fmt_float(*q), fmt_float(*v)])
            .collect();
        write_csv(path, &["step", "q_loss", "v_loss"], &rows)
    } else {
        let rows: Vec<Vec<String>> = log
            .q_losses
            .iter()
            .enumerate()
            .map(|(i, q)| vec![i.to_string(), fmt_float(*q)])
            .collect();
        write_csv(path, &["step", "q_loss"], &rows)
    }
}

fn write_policy_loss_csv(path: &Path, log: &PolicyTrainLog) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt_float(*l)])
        .collect();
    write_csv(path, &["step", "loss"], &rows)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing hex to a String cannot fail");
    }
    Ok(out)
}

// ----------------------------------------------------------------- commands

/// Generate a logged dataset for `env` and write it as JSON lines.
pub fn cmd_gen_data(env: &str, count: usize, seed: u64, out_file: &Path) -> Result<()> {
    let mut rng = RngStream::named("gen-data", seed);
    let dataset = match env {
        BANDIT_NAME => bandit_dataset(count, &mut rng),
        STITCH_NAME => stitch_dataset(count, &mut rng)?,
        other => return Err(Error::Config(format!("unknown environment {other:?}"))),
    };
    if let Some(dir) = out_file.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(out_file, &dataset)?;
    println!(
        "wrote {} episodes ({} steps) to {}",
        dataset.trajectories.len(),
        dataset.trajectories.iter().map(|t| t.len()).sum::<usize>(),
        out_file.display()
    );
    Ok(())
}

/// Train the configured critic and write its checkpoint and loss curve.
pub fn cmd_train_critic(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dataset = load_required_dataset(cfg)?;
    let (bundle, log) = match cfg.critic_mode {
        CriticMode::Iql => train_critic_iql(&dataset, &cfg.critic)?,
        CriticMode::Regression => train_critic_regression(&dataset, &cfg.critic)?,
        CriticMode::Bellman => train_critic_bellman(&dataset, &cfg.critic)?,
    };
    std::fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.out.join("critic.ckpt");
    bundle.save(&ckpt)?;
    write_critic_loss_csv(&cfg.out.join("critic_loss.csv"), cfg.critic_mode, &log)?;
    let last = log.q_losses.last().copied().unwrap_or(f64::NAN);
    println!("critic ({:?}) trained for {} steps; final q_loss {last:.6}; wrote {}",
        cfg.critic_mode, log.q_losses.len(), ckpt.display());
    Ok(ckpt)
}

/// Train the configured policy (loading a frozen critic when the loss mode
/// requires one) and write its checkpoint and loss curve.
pub fn cmd_train_policy(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dataset = load_required_dataset(cfg)?;
    let bundle = if cfg.policy.loss_mode.needs_critic() {
        let path = cfg.critic_ckpt.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "loss mode {:?} needs --critic-ckpt (train one with train-critic)",
                cfg.policy.loss_mode
            ))
        })?;
        Some(CriticBundle::load(path)?)
    } else {
        None
    };
    let (model, log) = train_policy(&dataset, &cfg.policy, bundle.as_ref().map(|b| &b.q))?;
    std::fs::create_dir_all(&cfg.out)?;
    let ckpt = cfg.out.join("policy.ckpt");
    model.save(&ckpt)?;
    write_policy_loss_csv(&cfg.out.join("policy_loss.csv"), &log)?;
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "policy ({:?}) trained for {} steps; final loss {last:.6}; wrote {}",
        cfg.policy.loss_mode,
        log.losses.len(),
        ckpt.display()
    );
    Ok(ckpt)
}

/// Evaluate a saved policy (optionally refined by a saved critic) and write
/// per-episode metrics rows.
pub fn cmd_eval(cfg: &ExperimentConfig, timings: bool) -> Result<(PathBuf, EvalRows)> {
    let policy_path = cfg
        .policy_ckpt
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --policy-ckpt".into()))?;
    let model = DtModel::load(policy_path)?;
    let bundle = match (&cfg.critic_ckpt, cfg.ag.n > 0) {
        (Some(path), true) => Some(CriticBundle::load(path)?),
        (None, true) => {
            return Err(Error::Config(
                "refinement (ag.n > 0) needs --critic-ckpt".into(),
            ));
        }
        (_, false) => None,
    };
    let mut env = build_env(&cfg.env, cfg.start.as_deref())?;
    let experiment = cfg.label.clone().unwrap_or_else(|| "eval".to_string());
    let mode_name = serde_json::to_value(model.config.loss_mode)?;
    let mut method = mode_name.as_str().unwrap_or("policy").to_string();
    if cfg.ag.n > 0 {
        method.push_str("+ag");
    }
    let qfn: Option<&dyn QFunction> = bundle.as_ref().map(|b| &b.q as &dyn QFunction);
    let summary =
        run_eval_rows(env.as_mut(), &model, qfn, &cfg.eval, &cfg.ag, &experiment, &method, timings)?;
    std::fs::create_dir_all(&cfg.out)?;
    let csv = cfg.out.join("eval.csv");
    let rows: Vec<Vec<String>> = summary.rows.iter().map(|r| r.to_fields()).collect();
    write_csv(&csv, &METRICS_HEADER, &rows)?;
    println!(
        "{method}: score {:.2} ± {:.2} (raw {:.4} ± {:.4}) over {} episodes -> {}",
        summary.mean_score,
        summary.std_score,
        summary.mean_return,
        summary.std_return,
        summary.rows.len(),
        csv.display()
    );
    Ok((csv, summary))
}

/// One method's summary line in the toy comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ToyRow {
    pub method: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub eta: f64,
    pub n: usize,
}

/// End-to-end bandit comparison: one logged dataset, one learned critic, and
/// four methods on top — plain return conditioning (dt), token-predicted
/// conditioning (dt_tp), value-regularized training (dt_pg), and
/// refinement at inference (dt_ag). Also dumps the critic's response curve
/// over the action grid.
pub fn cmd_toy(out: &Path, master_seed: u64, timings: bool) -> Result<Vec<ToyRow>> {
    std::fs::create_dir_all(out)?;

    // Logged data: magnitudes uniform in (0.5, 1], sign 98% positive. The
    // slight asymmetry keeps the conditional action mean informative —
    // a perfectly symmetric set would make "average action given return"
    // collapse to 0, which is the optimum and would hide the gap this
    // comparison exists to show.
    let mut data_rng = RngStream::named("toy-data", derived_seed(master_seed, "data"));
    let dataset = bandit_dataset_with_mix(10_000, 0.98, &mut data_rng);
    save_dataset(&out.join("bandit.jsonl"), &dataset)?;

    // critic: direct reward regression (single-step env)
    let critic_cfg = CriticConfig {
        lr: 3e-3,
        steps: 1500,
        batch: 128,
        hidden: vec![32, 32],
        seed: derived_seed(master_seed, "critic"),
        ..CriticConfig::default()
    };
    let (bundle, critic_log) = train_critic_regression(&dataset, &critic_cfg)?;
    bundle.save(&out.join("critic.ckpt"))?;
    write_critic_loss_csv(&out.join("critic_loss.csv"), CriticMode::Regression, &critic_log)?;

    // critic response curve on the action grid (the "left panel" as data)
    let curve: Vec<Vec<String>> = (0..=200)
        .map(|i| {
            let a = -1.0 + i as f64 * 0.01;
            vec![fmt_float(a), fmt_float(bundle.q.q(&[0.0], &[a]))]
        })
        .collect();
    write_csv(&out.join("toy_critic_curve.csv"), &["action", "q_value"], &curve)?;

    // two policies from the same data: behavior cloning and value-regularized
    let dt_cfg = DtConfig {
        k: 1,
        n_layers: 2,
        n_heads: 1,
        embed_dim: 32,
        loss_mode: LossMode::DtMse,
        tau_rtg: 0.95,
        lr: 1e-3,
        steps: 1200,
        batch: 64,
        max_timestep: 4,
        rtg_hidden: vec![16],
        seed: derived_seed(master_seed, "policy"),
        ..DtConfig::default()
    };
    let (dt, dt_log) = train_policy(&dataset, &dt_cfg, None)?;
    dt.save(&out.join("policy_dt.ckpt"))?;
    write_policy_loss_csv(&out.join("policy_dt_loss.csv"), &dt_log)?;

    let pg_cfg = DtConfig {
        loss_mode: LossMode::RfPg,
        alpha: 4.0,
        seed: derived_seed(master_seed, "policy-pg"),
        ..dt_cfg.clone()
    };
    let (pg, pg_log) = train_policy(&dataset, &pg_cfg, Some(&bundle.q))?;
    pg.save(&out.join("policy_pg.ckpt"))?;
    write_policy_loss_csv(&out.join("policy_pg_loss.csv"), &pg_log)?;

    // conditioning target: an optimistic expectile of the logged returns
    let preset = sample_expectile(&dataset.returns(), 0.95);

    let eval_preset = EvalConfig {
        max_steps: 5,
        k_max: 1,
        rtg_mode: RtgMode::Preset(preset),
        adaptive_context: false,
        ..EvalConfig::default()
    };
    let eval_predicted = EvalConfig { rtg_mode: RtgMode::PredictedPerStep, ..eval_preset.clone() };
    let ag_off = AgConfig { n: 0, ..AgConfig::default() };
    let ag_on = AgConfig::default(); // eta 0.05, n 10, plain

    let mut env = make_env(BANDIT_NAME)?;
    let runs: [(&str, &DtModel, Option<&dyn QFunction>, &EvalConfig, &AgConfig); 4] = [
        ("dt", &dt, None, &eval_preset, &ag_off),
        ("dt_tp", &dt, None, &eval_predicted, &ag_off),
        ("dt_pg", &pg, None, &eval_predicted, &ag_off),
        ("dt_ag", &dt, Some(&bundle.q), &eval_preset, &ag_on),
    ];
    let mut summary_rows = Vec::new();
    let mut episode_rows = Vec::new();
    for (method, model, qfn, eval, ag) in runs {
        let res = run_eval_rows(env.as_mut(), model, qfn, eval, ag, "toy", method, timings)?;
        summary_rows.push(ToyRow {
            method: method.to_string(),
            mean_return: res.mean_return,
            std_return: res.std_return,
            mean_score: res.mean_score,
            std_score: res.std_score,
            eta: ag.eta,
            n: ag.n,
        });
        episode_rows.extend(res.rows);
    }

    let rows: Vec<Vec<String>> = summary_rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                fmt_float(r.mean_return),
                fmt_float(r.std_return),
                fmt_float(r.mean_score),
                fmt_float(r.std_score),
                fmt_float(r.eta),
                r.n.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("toy_summary.csv"),
        &["method", "mean_return", "std_return", "mean_score", "std_score", "eta", "n"],
        &rows,
    )?;
    let ep_rows: Vec<Vec<String>> = episode_rows.iter().map(|r| r.to_fields()).collect();
    write_csv(&out.join("toy_episodes.csv"), &METRICS_HEADER, &ep_rows)?;

    for r in &summary_rows {
        println!("{:>6}: reward {:.4} ± {:.4}", r.method, r.mean_return, r.std_return);
    }
    Ok(summary_rows)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub method: String,
    pub eta: f64,
    pub n: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
}

fn parse_method(s: &str) -> Result<AgMethod> {
    match s {
        "none" | "plain" => Ok(AgMethod::Plain),
        "momentum" => Ok(AgMethod::Momentum),
        "rmsprop" => Ok(AgMethod::Rmsprop),
        "adam" => Ok(AgMethod::Adam),
        other => Err(Error::Usage(format!(
            "unknown gradient method {other:?} (expected none|momentum|rmsprop|adam)"
        ))),
    }
}

/// Sweep η × n × gradient-method over one policy/critic pair, one summary
/// row per cell. `analytic_critic` swaps in the exact bandit quadratic.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    etas: &[f64],
    ns: &[usize],
    methods: &[String],
    analytic_critic: bool,
    timings: bool,
) -> Result<(PathBuf, Vec<AblateRow>)> {
    if etas.is_empty() || ns.is_empty() || methods.is_empty() {
        return Err(Error::Config("ablation grids must be nonempty".into()));
    }
    if analytic_critic && cfg.env != BANDIT_NAME {
        return Err(Error::Config(format!(
            "the analytic critic models the bandit quadratic, not {}",
            cfg.env
        )));
    }
    let parsed: Vec<AgMethod> = methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?;
    std::fs::create_dir_all(&cfg.out)?;

    // one dataset, one trained policy, one critic — shared by every cell
    let dataset = match &cfg.dataset {
        Some(p) => load_dataset(p)?,
        None => {
            let mut rng = RngStream::named("ablate-data", derived_seed(cfg.seed, "data"));
            match cfg.env.as_str() {
                BANDIT_NAME => bandit_dataset_with_mix(10_000, 0.98, &mut rng),
                STITCH_NAME => stitch_dataset(1000, &mut rng)?,
                other => return Err(Error::Config(format!("unknown environment {other:?}"))),
            }
        }
    };
    let policy_cfg =
        DtConfig { seed: derived_seed(cfg.seed, "policy"), ..cfg.policy.clone() };
    let needs_critic = parsed.iter().any(|_| ns.iter().any(|&n| n > 0));
    let learned = if needs_critic && !analytic_critic {
        let critic_cfg =
            CriticConfig { seed: derived_seed(cfg.seed, "critic"), ..cfg.critic.clone() };
        let (bundle, _) = match cfg.critic_mode {
            CriticMode::Iql => train_critic_iql(&dataset, &critic_cfg)?,
            CriticMode::Regression => train_critic_regression(&dataset, &critic_cfg)?,
            CriticMode::Bellman => train_critic_bellman(&dataset, &critic_cfg)?,
        };
        bundle.save(&cfg.out.join("critic.ckpt"))?;
        Some(bundle)
    } else {
        None
    };
    let (model, _) = train_policy(&dataset, &policy_cfg, None)?;
    model.save(&cfg.out.join("policy.ckpt"))?;

    let preset = sample_expectile(&dataset.returns(), 0.95);
    let eval = if policy_cfg.loss_mode == LossMode::DtMse {
        EvalConfig { rtg_mode: RtgMode::Preset(preset), ..cfg.eval.clone() }
    } else {
        cfg.eval.clone()
    };

    let analytic = AnalyticBandit;
    let mut env = build_env(&cfg.env, cfg.start.as_deref())?;
    let mut out_rows = Vec::new();
    for (mi, &method) in parsed.iter().enumerate() {
        for &eta in etas {
            for &n in ns {
                let ag = AgConfig { eta, n, method, ..cfg.ag.clone() };
                let qfn: Option<&dyn QFunction> = if n == 0 {
                    None
                } else if analytic_critic {
                    Some(&analytic)
                } else {
                    Some(&learned.as_ref().expect("critic trained above").q)
                };
                let label = format!("ablate:{}", methods[mi]);
                let res = run_eval_rows(
                    env.as_mut(),
                    &model,
                    qfn,
                    &eval,
                    &ag,
                    &label,
                    &methods[mi],
                    timings,
                )?;
                out_rows.push(AblateRow {
                    method: grad_method_label(&ag).to_string(),
                    eta,
                    n,
                    mean_return: res.mean_return,
                    std_return: res.std_return,
                    mean_score: res.mean_score,
                    std_score: res.std_score,
                });
            }
        }
    }
    let csv_rows: Vec<Vec<String>> = out_rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                fmt_float(r.eta),
                r.n.to_string(),
                fmt_float(r.mean_return),
                fmt_float(r.std_return),
                fmt_float(r.mean_score),
                fmt_float(r.std_score),
            ]
        })
        .collect();
    let csv = cfg.out.join("ablation.csv");
    write_csv(
        &csv,
        &["method", "eta", "n", "mean_return", "std_return", "mean_score", "std_score"],
        &csv_rows,
    )?;
    println!("{} ablation cells -> {}", out_rows.len(), csv.display());
    Ok((csv, out_rows))
}

/// One method's line in the critic-sharing comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub env: String,
    pub method: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_score: f64,
    pub std_score: f64,
    /// Percent delta of mean_score versus the plain sequence policy,
    /// formatted like "+21.2%".
    pub delta_vs_rf: String,
    pub critic_sha256: String,
}

/// Format a percent delta in the comparison table's style.
pub fn format_delta(score: f64, rf_score: f64) -> String {
    if rf_score.abs() < 1e-12 {
        return "n/a".to_string();
    }
    format!("{:+.1}%", 100.0 * (score - rf_score) / rf_score)
}

/// Train one critic per env and compare the critic-using methods against the
/// plain sequence policy: value-regularized training (rf_pg), advantage
/// weighting (rf_awac), and inference-time refinement (rf_ag) — all three
/// consuming the *same* frozen critic checkpoint.
pub fn cmd_compare(out: &Path, master_seed: u64, timings: bool) -> Result<Vec<CompareRow>> {
    std::fs::create_dir_all(out)?;
    let mut all_rows = Vec::new();
    for env_name in [BANDIT_NAME, STITCH_NAME] {
        let tag = if env_name == BANDIT_NAME { "bandit" } else { "stitch" };
        let mut rng =
            RngStream::named("compare-data", derived_seed(master_seed, &format!("data-{tag}")));
        let dataset = match env_name {
            BANDIT_NAME => bandit_dataset_with_mix(10_000, 0.98, &mut rng),
            _ => stitch_dataset(1000, &mut rng)?,
        };
        save_dataset(&out.join(format!("{tag}.jsonl")), &dataset)?;

        let preset_cfg = env_preset(env_name)?;
        let critic_cfg = CriticConfig {
            seed: derived_seed(master_seed, &format!("critic-{tag}")),
            ..preset_cfg.critic
        };
        let (bundle, _) = train_critic_iql(&dataset, &critic_cfg)?;
        let ckpt = out.join(format!("{tag}_critic.ckpt"));
        bundle.save(&ckpt)?;
        let critic_hash = sha256_file(&ckpt)?;

        // identical seeds and hyperparameters; only the loss mode differs
        let base = DtConfig {
            loss_mode: LossMode::RfNll,
            seed: derived_seed(master_seed, &format!("policy-{tag}")),
            ..preset_cfg.policy
        };
        let (rf, _) = train_policy(&dataset, &base, None)?;
        rf.save(&out.join(format!("{tag}_rf.ckpt")))?;
        let pg_cfg = DtConfig { loss_mode: LossMode::RfPg, alpha: 2.0, ..base.clone() };
        let (pg, _) = train_policy(&dataset, &pg_cfg, Some(&bundle.q))?;
        let awac_cfg = DtConfig { loss_mode: LossMode::RfAwac, lambda: 1.0, ..base.clone() };
        let (awac, _) = train_policy(&dataset, &awac_cfg, Some(&bundle.q))?;

        let eval = EvalConfig {
            rtg_mode: RtgMode::PredictedPerStep,
            ..preset_cfg.eval
        };
        let ag_off = AgConfig { n: 0, ..AgConfig::default() };
        let ag_on = AgConfig::default();
        let mut env = make_env(env_name)?;
        let runs: [(&str, &DtModel, Option<&dyn QFunction>, &AgConfig); 4] = [
            ("rf", &rf, None, &ag_off),
            ("rf_pg", &pg, None, &ag_off),
            ("rf_awac", &awac, None, &ag_off),
            ("rf_ag", &rf, Some(&bundle.q), &ag_on),
        ];
        let mut env_rows = Vec::new();
        for (method, model, qfn, ag) in runs {
            let res =
                run_eval_rows(env.as_mut(), model, qfn, &eval, ag, "compare", method, timings)?;
            env_rows.push(CompareRow {
                env: env_name.to_string(),
                method: method.to_string(),
                mean_return: res.mean_return,
                std_return: res.std_return,
                mean_score: res.mean_score,
                std_score: res.std_score,
                delta_vs_rf: String::new(),
                critic_sha256: critic_hash.clone(),
            });
        }
        let rf_score = env_rows[0].mean_score;
        for row in &mut env_rows {
            row.delta_vs_rf = format_delta(row.mean_score, rf_score);
        }
        all_rows.extend(env_rows);
    }

    let csv_rows: Vec<Vec<String>> = all_rows
        .iter()
        .map(|r| {
            vec![
                r.env.clone(),
                r.method.clone(),
                fmt_float(r.mean_return),
                fmt_float(r.std_return),
                fmt_float(r.mean_score),
                fmt_float(r.std_score),
                r.delta_vs_rf.clone(),
                r.critic_sha256.clone(),
            ]
        })
        .collect();
    write_csv(
        &out.join("compare.csv"),
        &[
            "env",
            "method",
            "mean_return",
            "std_return",
            "mean_score",
            "std_score",
            "delta_vs_rf",
            "critic_sha256",
        ],
        &csv_rows,
    )?;
    for r in &all_rows {
        println!(
            "{:>9} on {:<10}: score {:>8.2} ± {:>6.2}  ({})",
            r.method, r.env, r.mean_score, r.std_score, r.delta_vs_rf
        );
    }
    Ok(all_rows)
}
