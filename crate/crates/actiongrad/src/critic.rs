//! Value-function training from a fixed dataset — no environment interaction,
//! no policy queries. Three trainers share one transition pipeline:
//!
//! * `train_critic_iql` — the main path: Q regresses onto `r + γ·V(s')`, V
//!   chases an expectile of a slowly-tracking Q copy, so V estimates an upper
//!   envelope of in-dataset action values instead of a policy's mean.
//! * `train_critic_regression` — plain reward regression for one-step tasks.
//! * `train_critic_bellman` — SARSA-style bootstrapping off dataset actions,
//!   kept as the ablation baseline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_param_step, binding_grads, load_tensors, mlp_eval, pack_mlp, save_tensors, unpack_mlp,
    Activation, AdamConfig, AdamState, MlpParams, NamedTensor, Tape, Tensor,
};
use crate::data::{Dataset, NormStats};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Hyperparameters shared by all three critic trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Discount for bootstrapped targets; irrelevant for pure regression.
    pub gamma: f64,
    /// Expectile for the V fit; above 0.5 biases V toward high-Q actions.
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    /// Per-step blend rate of the slow Q copy used as the V target.
    pub polyak_rate: f64,
    /// When false, V regresses onto the live Q instead of the slow copy —
    /// the textbook two-equation form, less stable but exactly as written.
    pub use_q_target: bool,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            gamma: 0.99,
            tau: 0.7,
            lr: 3e-4,
            steps: 2000,
            batch: 256,
            hidden: vec![64, 64],
            polyak_rate: 0.005,
            use_q_target: true,
            seed: 0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1], got {}", self.gamma)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return Err(Error::Config(format!(
                "polyak_rate must be in (0,1], got {}",
                self.polyak_rate
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!("hidden widths must be nonzero: {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// Which trainer produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Iql,
    Regression,
    Bellman,
}

/// Q(s, a) network: an MLP over the concatenated (normalized state, action).
#[derive(Debug, Clone)]
pub struct QNet {
    pub params: MlpParams,
    pub norm: NormStats,
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// V(s) network over the normalized state.
#[derive(Debug, Clone)]
pub struct VNet {
    pub params: MlpParams,
    pub norm: NormStats,
    pub obs_dim: usize,
}

impl VNet {
    pub fn value(&self, state: &[f64]) -> f64 {
        mlp_eval(&self.params, &self.norm.apply(state))[0]
    }
}

/// Deterministic forward pass of the learned Q.
pub fn q_value(qnet: &QNet, state: &[f64], action: &[f64]) -> f64 {
    qnet.q(state, action)
}

/// Anything that can score and differentiate an action. The learned [`QNet`]
/// is the production implementation; [`AnalyticBandit`] is the exact
/// quadratic used to pin down refinement arithmetic in tests and ablations.
pub trait QFunction {
    fn act_dim(&self) -> usize;
    fn q(&self, state: &[f64], action: &[f64]) -> f64;
    /// dQ/da at (state, action), length `act_dim`.
    fn grad_wrt_action(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
}

impl QFunction for QNet {
    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn q(&self, state: &[f64], action: &[f64]) -> f64 {
        let mut input = self.norm.apply(state);
        input.extend_from_slice(action);
        mlp_eval(&self.params, &input)[0]
    }

    fn grad_wrt_action(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let s = tape.constant(1, self.obs_dim, self.norm.apply(state));
        let a = tape.leaf(&Tensor::row(action.to_vec()).with_grad());
        let sa = tape.concat_cols(&[s, a]);
        let q = self.params.apply(&mut tape, &binding, sa);
        let grads = tape.backward(q).expect("Q output is scalar");
        grads.wrt(a).expect("action requires grad").to_vec()
    }
}

/// Exact quadratic critic Q(s, a) = 1 - a², gradient -2a. State is ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticBandit;

impl QFunction for AnalyticBandit {
    fn act_dim(&self) -> usize {
        1
    }

    fn q(&self, _state: &[f64], action: &[f64]) -> f64 {
        1.0 - action[0] * action[0]
    }

    fn grad_wrt_action(&self, _state: &[f64], action: &[f64]) -> Vec<f64> {
        vec![-2.0 * action[0]]
    }
}

/// Asymmetric squared loss |tau - 1(u<0)| · u². Its minimizer over a sample
/// is the tau-expectile; tau = 0.5 recovers half-MSE.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// The tau-expectile of a sample: the v solving
/// `tau·Σ(x−v)₊ = (1−tau)·Σ(v−x)₊`, found by bisection on that strictly
/// decreasing subgradient. tau = 0.5 recovers the sample mean.
pub fn sample_expectile(values: &[f64], tau: f64) -> f64 {
    assert!(!values.is_empty() && tau > 0.0 && tau < 1.0);
    let grad = |v: f64| -> f64 {
        values
            .iter()
            .map(|&x| if x >= v { tau * (x - v) } else { (1.0 - tau) * (x - v) })
            .sum()
    };
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo == hi {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if grad(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Per-step training losses. `v_losses` stays empty outside IQL.
#[derive(Debug, Clone, Default)]
pub struct CriticTrainLog {
    pub q_losses: Vec<f64>,
    pub v_losses: Vec<f64>,
}

/// A trained critic plus everything needed to reload and resume it.
#[derive(Debug, Clone)]
pub struct CriticBundle {
    pub config: CriticConfig,
    pub mode: CriticMode,
    pub q: QNet,
    pub v: Option<VNet>,
    pub q_target: Option<MlpParams>,
}

// ------------------------------------------------------------- transitions

/// Flat (s, a, r, s', a', done) arrays with states pre-normalized. The final
/// step of a terminal episode gets zero placeholders for (s', a') — they are
/// multiplied out by the done mask. Non-terminal final steps (truncation)
/// yield no transition at all: there is nothing to bootstrap from.
struct Transitions {
    obs: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    rew: Vec<f64>,
    next_obs: Vec<Vec<f64>>,
    next_act: Vec<Vec<f64>>,
    not_done: Vec<f64>,
}

impl Transitions {
    fn len(&self) -> usize {
        self.rew.len()
    }
}

fn extract_transitions(dataset: &Dataset, norm: &NormStats) -> Result<Transitions> {
    let (obs_dim, act_dim) = dataset.dims()?;
    let zero_obs = norm.apply(&vec![0.0; obs_dim]);
    let zero_act = vec![0.0; act_dim];
    let mut tr = Transitions {
        obs: Vec::new(),
        act: Vec::new(),
        rew: Vec::new(),
        next_obs: Vec::new(),
        next_act: Vec::new(),
        not_done: Vec::new(),
    };
    for traj in &dataset.trajectories {
        let t_max = traj.len();
        for t in 0..t_max {
            let done = traj.terminals[t];
            if t + 1 == t_max && !done {
                continue; // truncated tail: no successor to bootstrap from
            }
            tr.obs.push(norm.apply(&traj.observations[t]));
            tr.act.push(traj.actions[t].clone());
            tr.rew.push(traj.rewards[t]);
            if done {
                tr.next_obs.push(zero_obs.clone());
                tr.next_act.push(zero_act.clone());
                tr.not_done.push(0.0);
            } else {
                tr.next_obs.push(norm.apply(&traj.observations[t + 1]));
                tr.next_act.push(traj.actions[t + 1].clone());
                tr.not_done.push(1.0);
            }
        }
    }
    if tr.len() == 0 {
        return Err(Error::Config("dataset yields no usable transitions".into()));
    }
    Ok(tr)
}

fn concat_rows(a: &[Vec<f64>], b: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * (a[0].len() + b[0].len()));
    for &i in idx {
        out.extend_from_slice(&a[i]);
        out.extend_from_slice(&b[i]);
    }
    out
}

fn gather_rows(a: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * a[0].len());
    for &i in idx {
        out.extend_from_slice(&a[i]);
    }
    out
}

/// θ̄ ← θ̄ + rate·(θ − θ̄), elementwise over all tensors.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, rate: f64) {
    let mut tp = target.parameters_mut();
    let op = online.parameters();
    for (t, o) in tp.iter_mut().zip(op) {
        for (tv, ov) in t.values.iter_mut().zip(&o.values) {
            *tv += rate * (*ov - *tv);
        }
    }
}

fn sample_indices(n: usize, batch: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n as u64) as usize).collect()
}

// ---------------------------------------------------------------- trainers

/// Expectile-critic training: alternating V and Q steps per iteration.
///
///   L_V = E[ |τ − 1(u<0)|·u² ],  u = Q̄(s,a) − V(s)
///   L_Q = E[ (r + γ·V(s')·(1−done) − Q(s,a))² ]
///
/// Targets are detached values; gradients never cross between the nets. The
/// whole loop sees only the dataset — it cannot query an environment or a
/// policy by construction.
pub fn train_critic_iql(
    dataset: &Dataset,
    config: &CriticConfig,
) -> Result<(CriticBundle, CriticTrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a critic on an empty dataset".into()));
    }
    let (obs_dim, act_dim) = dataset.dims()?;
    let norm = NormStats::fit(dataset)?;
    let tr = extract_transitions(dataset, &norm)?;
    let n = tr.len();
    let b = config.batch;

    let rng = RngStream::named("critic", config.seed);
    let mut q_sizes = vec![obs_dim + act_dim];
    q_sizes.extend_from_slice(&config.hidden);
    q_sizes.push(1);
    let mut q = MlpParams::init(&q_sizes, Activation::Gelu, &mut rng.child("q-init"))?;
    let mut v_sizes = vec![obs_dim];
    v_sizes.extend_from_slice(&config.hidden);
    v_sizes.push(1);
    let mut v = MlpParams::init(&v_sizes, Activation::Gelu, &mut rng.child("v-init"))?;
    let mut q_target = q.clone();

    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut q_opt = AdamState::for_params(adam, &q.parameters());
    let mut v_opt = AdamState::for_params(adam, &v.parameters());
    let mut batches = rng.child("batches");
    let mut log = CriticTrainLog::default();

    for _ in 0..config.steps {
        let idx = sample_indices(n, b, &mut batches);

        // V step: pull V toward the tau-expectile of the (slow) Q at dataset
        // actions. Q values are constants here.
        let q_src = if config.use_q_target { &q_target } else { &q };
        let qbar: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let mut input = tr.obs[i].clone();
                input.extend_from_slice(&tr.act[i]);
                mlp_eval(q_src, &input)[0]
            })
            .collect();
        let mut tape = Tape::new();
        let vb = v.bind(&mut tape, true);
        let s = tape.constant(b, obs_dim, gather_rows(&tr.obs, &idx));
        let v_out = v.apply(&mut tape, &vb, s);
        let qbar_node = tape.constant(b, 1, qbar);
        let u = tape.sub(qbar_node, v_out);
        let w = tape.expectile(u, config.tau);
        let total = tape.sum(w);
        let loss_v = tape.scale(total, 1.0 / b as f64);
        log.v_losses.push(tape.value(loss_v)[0]);
        let grads = tape.backward(loss_v)?;
        let mut vp = v.parameters_mut();
        adam_param_step(&mut vp, &binding_grads(&vb, &grads), &mut v_opt);
        drop(vp);

        // Q step: plain squared error onto r + gamma * V(s') with terminal
        // masking; V values are constants (post-update this iteration).
        let target: Vec<f64> = idx
            .iter()
            .map(|&i| tr.rew[i] + config.gamma * mlp_eval(&v, &tr.next_obs[i])[0] * tr.not_done[i])
            .collect();
        let mut tape = Tape::new();
        let qb = q.bind(&mut tape, true);
        let sa = tape.constant(b, obs_dim + act_dim, concat_rows(&tr.obs, &tr.act, &idx));
        let q_out = q.apply(&mut tape, &qb, sa);
        let target_node = tape.constant(b, 1, target);
        let diff = tape.sub(target_node, q_out);
        let sq = tape.mul(diff, diff);
        let total = tape.sum(sq);
        let loss_q = tape.scale(total, 1.0 / b as f64);
        log.q_losses.push(tape.value(loss_q)[0]);
        let grads = tape.backward(loss_q)?;
        let mut qp = q.parameters_mut();
        adam_param_step(&mut qp, &binding_grads(&qb, &grads), &mut q_opt);
        drop(qp);

        polyak_update(&mut q_target, &q, config.polyak_rate);
    }

    let bundle = CriticBundle {
        config: config.clone(),
        mode: CriticMode::Iql,
        q: QNet { params: q, norm: norm.clone(), obs_dim, act_dim },
        v: Some(VNet { params: v, norm, obs_dim }),
        q_target: Some(q_target),
    };
    Ok((bundle, log))
}

/// Reward regression `E[(r − Q(s,a))²]` for datasets of one-step episodes.
pub fn train_critic_regression(
    dataset: &Dataset,
    config: &CriticConfig,
) -> Result<(CriticBundle, CriticTrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a critic on an empty dataset".into()));
    }
    if let Some(i) = dataset.trajectories.iter().position(|t| t.len() != 1) {
        return Err(Error::Config(format!(
            "reward regression needs single-step episodes; trajectory {i} has {} steps",
            dataset.trajectories[i].len()
        )));
    }
    let (bundle, log) = bootstrap_loop(dataset, config, CriticMode::Regression)?;
    Ok((bundle, log))
}

/// SARSA-style bootstrapping: targets `r + γ·Q̄(s', a')·(1−done)` with a'
/// taken from the dataset, never from any refined or policy action.
pub fn train_critic_bellman(
    dataset: &Dataset,
    config: &CriticConfig,
) -> Result<(CriticBundle, CriticTrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a critic on an empty dataset".into()));
    }
    bootstrap_loop(dataset, config, CriticMode::Bellman)
}

/// Shared loop for the two Q-only trainers. Regression is the special case
/// where every transition is terminal, so the bootstrap term vanishes; using
/// one code path (and one RNG layout) makes that reduction literal: on an
/// all-terminal dataset both modes produce bitwise-identical networks.
fn bootstrap_loop(
    dataset: &Dataset,
    config: &CriticConfig,
    mode: CriticMode,
) -> Result<(CriticBundle, CriticTrainLog)> {
    let (obs_dim, act_dim) = dataset.dims()?;
    let norm = NormStats::fit(dataset)?;
    let tr = extract_transitions(dataset, &norm)?;
    let n = tr.len();
    let b = config.batch;

    let rng = RngStream::named("critic", config.seed);
    let mut q_sizes = vec![obs_dim + act_dim];
    q_sizes.extend_from_slice(&config.hidden);
    q_sizes.push(1);
    let mut q = MlpParams::init(&q_sizes, Activation::Gelu, &mut rng.child("q-init"))?;
    let mut q_target = q.clone();
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut q_opt = AdamState::for_params(adam, &q.parameters());
    let mut batches = rng.child("batches");
    let mut log = CriticTrainLog::default();

    for _ in 0..config.steps {
        let idx = sample_indices(n, b, &mut batches);
        let target: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let boot = if tr.not_done[i] != 0.0 {
                    let mut input = tr.next_obs[i].clone();
                    input.extend_from_slice(&tr.next_act[i]);
                    config.gamma * mlp_eval(&q_target, &input)[0]
                } else {
                    0.0
                };
                tr.rew[i] + boot
            })
            .collect();
        let mut tape = Tape::new();
        let qb = q.bind(&mut tape, true);
        let sa = tape.constant(b, obs_dim + act_dim, concat_rows(&tr.obs, &tr.act, &idx));
        let q_out = q.apply(&mut tape, &qb, sa);
        let target_node = tape.constant(b, 1, target);
        let diff = tape.sub(target_node, q_out);
        let sq = tape.mul(diff, diff);
        let total = tape.sum(sq);
        let loss = tape.scale(total, 1.0 / b as f64);
        log.q_losses.push(tape.value(loss)[0]);
        let grads = tape.backward(loss)?;
        let mut qp = q.parameters_mut();
        adam_param_step(&mut qp, &binding_grads(&qb, &grads), &mut q_opt);
        drop(qp);
        polyak_update(&mut q_target, &q, config.polyak_rate);
    }

    let bundle = CriticBundle {
        config: config.clone(),
        mode,
        q: QNet { params: q, norm, obs_dim, act_dim },
        v: None,
        q_target: Some(q_target),
    };
    Ok((bundle, log))
}

// -------------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
struct CriticSidecar {
    config: CriticConfig,
    mode: CriticMode,
    norm: NormStats,
    obs_dim: usize,
    act_dim: usize,
    activation: Activation,
    has_v: bool,
    has_q_target: bool,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

impl CriticBundle {
    /// Write tensors to `path` and a JSON sidecar to `path + ".json"`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<NamedTensor> = pack_mlp("q", &self.q.params);
        if let Some(v) = &self.v {
            tensors.extend(pack_mlp("v", &v.params));
        }
        if let Some(t) = &self.q_target {
            tensors.extend(pack_mlp("q_target", t));
        }
        save_tensors(path, &tensors)?;
        let sidecar = CriticSidecar {
            config: self.config.clone(),
            mode: self.mode,
            norm: self.q.norm.clone(),
            obs_dim: self.q.obs_dim,
            act_dim: self.q.act_dim,
            activation: self.q.params.activation,
            has_v: self.v.is_some(),
            has_q_target: self.q_target.is_some(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CriticBundle> {
        let tensors = load_tensors(path)?;
        let raw = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: CriticSidecar = serde_json::from_str(&raw)?;
        let q = QNet {
            params: unpack_mlp("q", &tensors, sidecar.activation)?,
            norm: sidecar.norm.clone(),
            obs_dim: sidecar.obs_dim,
            act_dim: sidecar.act_dim,
        };
        let v = if sidecar.has_v {
            Some(VNet {
                params: unpack_mlp("v", &tensors, sidecar.activation)?,
                norm: sidecar.norm.clone(),
                obs_dim: sidecar.obs_dim,
            })
        } else {
            None
        };
        let q_target = if sidecar.has_q_target {
            Some(unpack_mlp("q_target", &tensors, sidecar.activation)?)
        } else {
            None
        };
        Ok(CriticBundle { config: sidecar.config, mode: sidecar.mode, q, v, q_target })
    }
}
