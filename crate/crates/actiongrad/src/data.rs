//! Trajectory storage, return-to-go computation, context-window sampling,
//! state normalization, and the JSON-lines episode file format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result};

/// One episode of logged interaction. All four lists share the same leading
/// length `T >= 1`, and only the final step may be terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Check the structural invariants: equal leading lengths, T >= 1,
    /// homogeneous per-step dims, terminal only at the final step.
    pub fn validate(&self) -> Result<()> {
        let t = self.observations.len();
        if t == 0 {
            return Err(Error::Config("trajectory has zero steps".into()));
        }
        if self.actions.len() != t || self.rewards.len() != t || self.terminals.len() != t {
            return Err(Error::Config(format!(
                "ragged trajectory: {} observations, {} actions, {} rewards, {} terminals",
                t,
                self.actions.len(),
                self.rewards.len(),
                self.terminals.len()
            )));
        }
        let obs_dim = self.observations[0].len();
        let act_dim = self.actions[0].len();
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("zero-width observation or action".into()));
        }
        for (i, o) in self.observations.iter().enumerate() {
            if o.len() != obs_dim {
                return Err(Error::Config(format!(
                    "observation dim changes from {obs_dim} to {} at step {i}",
                    o.len()
                )));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.len() != act_dim {
                return Err(Error::Config(format!(
                    "action dim changes from {act_dim} to {} at step {i}",
                    a.len()
                )));
            }
        }
        if let Some(pos) = self.terminals[..t - 1].iter().position(|&d| d) {
            return Err(Error::Config(format!(
                "terminal flag at step {pos} before the final step {}",
                t - 1
            )));
        }
        Ok(())
    }
}

/// Where a dataset came from, carried in memory for logging and reproducible
/// regeneration. Not part of the episode file itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub count: usize,
}

/// An immutable collection of trajectories with homogeneous dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    /// Wrap known-good trajectories. Panics on invariant violations — this is
    /// the constructor for programmatic generators; file loads go through
    /// [`load_dataset`], which reports structured errors instead.
    pub fn new(trajectories: Vec<Trajectory>) -> Dataset {
        let d = Dataset { trajectories, provenance: None };
        if let Err(e) = d.validate() {
            panic!("invalid dataset: {e}");
        }
        d
    }

    pub fn with_provenance(mut self, generator: &str, seed: u64) -> Dataset {
        self.provenance = Some(Provenance {
            generator: generator.to_string(),
            seed,
            count: self.trajectories.len(),
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            t.validate()
                .map_err(|e| Error::Config(format!("trajectory {i}: {e}")))?;
        }
        if let Some(first) = self.trajectories.first() {
            let (od, ad) = (first.observations[0].len(), first.actions[0].len());
            for (i, t) in self.trajectories.iter().enumerate() {
                if t.observations[0].len() != od || t.actions[0].len() != ad {
                    return Err(Error::Config(format!(
                        "trajectory {i} dims ({}, {}) differ from ({od}, {ad})",
                        t.observations[0].len(),
                        t.actions[0].len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// (obs_dim, act_dim); a dataset with no episodes has no dims.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let t = self
            .trajectories
            .first()
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        Ok((t.observations[0].len(), t.actions[0].len()))
    }

    /// Total returns, one per trajectory.
    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.total_return()).collect()
    }
}

// --------------------------------------------------------------- return-to-go

/// Undiscounted suffix sums: `RTG_t = sum of rewards[t..]`. Built back to
/// front so `RTG_t - RTG_{t+1} == r_t` holds exactly in floating point.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    assert!(!rewards.is_empty(), "compute_rtg on an empty reward list");
    let mut rtg = vec![0.0; rewards.len()];
    let last = rewards.len() - 1;
    rtg[last] = rewards[last];
    for t in (0..last).rev() {
        rtg[t] = rtg[t + 1] + rewards[t];
    }
    rtg
}

/// Evaluation-time conditioning update: subtract the reward just observed
/// from the running return-to-go.
pub fn update_rtg_eval(prev_rtg: f64, prev_reward: f64) -> f64 {
    prev_rtg - prev_reward
}

/// Largest |RTG| in the dataset, floored at 1, used to keep return tokens in
/// a trainable range. Dividing by this maps every RTG into [-1, 1].
pub fn rtg_scale(dataset: &Dataset) -> f64 {
    let mut m: f64 = 1.0;
    for t in &dataset.trajectories {
        for v in compute_rtg(&t.rewards) {
            m = m.max(v.abs());
        }
    }
    m
}

// --------------------------------------------------------------- norm stats

/// Per-dimension observation mean and standard deviation (population std,
/// floored at 1e-6 so constant dimensions stay finite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    /// Identity stats (mean 0, std 1), for callers that opt out.
    pub fn identity(dim: usize) -> NormStats {
        NormStats { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(dataset: &Dataset) -> Result<NormStats> {
        let (obs_dim, _) = dataset.dims()?;
        let mut mean = vec![0.0; obs_dim];
        let mut count = 0usize;
        for t in &dataset.trajectories {
            for o in &t.observations {
                for (m, v) in mean.iter_mut().zip(o) {
                    *m += v;
                }
                count += 1;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; obs_dim];
        for t in &dataset.trajectories {
            for o in &t.observations {
                for (s, (v, m)) in var.iter_mut().zip(o.iter().zip(&mean)) {
                    let d = v - m;
                    *s += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unapply(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

// ------------------------------------------------------------ context batches

/// A batch of fixed-length context windows. Each window is a contiguous
/// trajectory segment ending at its prediction step; windows shorter than `k`
/// are left-padded with zeros and masked out. Layout is row-major
/// `[sample][position][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub batch: usize,
    pub k: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub states: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// 1.0 for real positions, 0.0 for padding.
    pub mask: Vec<f64>,
}

impl ContextBatch {
    pub fn empty(batch: usize, k: usize, obs_dim: usize, act_dim: usize) -> ContextBatch {
        ContextBatch {
            batch,
            k,
            obs_dim,
            act_dim,
            states: vec![0.0; batch * k * obs_dim],
            rtgs: vec![0.0; batch * k],
            actions: vec![0.0; batch * k * act_dim],
            timesteps: vec![0; batch * k],
            mask: vec![0.0; batch * k],
        }
    }

    pub fn state(&self, b: usize, pos: usize) -> &[f64] {
        let base = (b * self.k + pos) * self.obs_dim;
        &self.states[base..base + self.obs_dim]
    }

    pub fn action(&self, b: usize, pos: usize) -> &[f64] {
        let base = (b * self.k + pos) * self.act_dim;
        &self.actions[base..base + self.act_dim]
    }

    pub fn rtg(&self, b: usize, pos: usize) -> f64 {
        self.rtgs[b * self.k + pos]
    }

    pub fn timestep(&self, b: usize, pos: usize) -> usize {
        self.timesteps[b * self.k + pos]
    }

    pub fn valid(&self, b: usize, pos: usize) -> bool {
        self.mask[b * self.k + pos] != 0.0
    }
}

/// Uniformly sample `batch` (trajectory, end-index) pairs and cut the length-k
/// window ending at each index. RTG values are full suffix sums of the source
/// trajectory; timesteps are absolute indices within the episode.
pub fn sample_context_batch(
    dataset: &Dataset,
    k: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<ContextBatch> {
    if k == 0 {
        return Err(Error::Config("context length k must be >= 1".into()));
    }
    let (obs_dim, act_dim) = dataset.dims()?;
    let rtgs: Vec<Vec<f64>> = dataset
        .trajectories
        .iter()
        .map(|t| compute_rtg(&t.rewards))
        .collect();
    // Cumulative step counts let one uniform draw pick a (traj, end) pair.
    let mut starts = Vec::with_capacity(dataset.trajectories.len());
    let mut total = 0u64;
    for t in &dataset.trajectories {
        starts.push(total);
        total += t.len() as u64;
    }
    let mut out = ContextBatch::empty(batch, k, obs_dim, act_dim);
    for b in 0..batch {
        let flat = rng.below(total);
        let ti = match starts.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let end = (flat - starts[ti]) as usize;
        let traj = &dataset.trajectories[ti];
        let w = k.min(end + 1);
        for j in 0..w {
            let pos = k - w + j; // left padding occupies positions [0, k-w)
            let t = end + 1 - w + j;
            let slot = b * k + pos;
            out.states[slot * obs_dim..(slot + 1) * obs_dim]
                .copy_from_slice(&traj.observations[t]);
            out.actions[slot * act_dim..(slot + 1) * act_dim]
                .copy_from_slice(&traj.actions[t]);
            out.rtgs[slot] = rtgs[ti][t];
            out.timesteps[slot] = t;
            out.mask[slot] = 1.0;
        }
    }
    Ok(out)
}

/// Build a single-sample, unpadded context from live evaluation history.
/// The three slices are aligned per step; the final action slot is the
/// current step's placeholder (zeros) since that action is being predicted.
pub fn window_from_history(
    states: &[Vec<f64>],
    rtgs: &[f64],
    actions: &[Vec<f64>],
    window: usize,
    act_dim: usize,
) -> ContextBatch {
    assert!(window >= 1 && window <= states.len());
    assert_eq!(states.len(), rtgs.len());
    assert_eq!(states.len(), actions.len() + 1, "actions lag states by one");
    let obs_dim = states[0].len();
    let mut out = ContextBatch::empty(1, window, obs_dim, act_dim);
    let t0 = states.len() - window;
    for j in 0..window {
        let t = t0 + j;
        out.states[j * obs_dim..(j + 1) * obs_dim].copy_from_slice(&states[t]);
        out.rtgs[j] = rtgs[t];
        if t < actions.len() {
            out.actions[j * act_dim..(j + 1) * act_dim].copy_from_slice(&actions[t]);
        }
        out.timesteps[j] = t;
        out.mask[j] = 1.0;
    }
    out
}

// ----------------------------------------------------------------- file IO

/// Write one JSON object per episode with keys "observations", "actions",
/// "rewards", "terminals". UTF-8, LF line endings.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for t in &dataset.trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a JSON-lines episode file, reporting the 1-based line number of any
/// malformed or inconsistent record. An empty file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        traj.validate()
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let d = (traj.observations[0].len(), traj.actions[0].len());
        match dims {
            None => dims = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("dims {d:?} differ from earlier episodes {expect:?}"),
                });
            }
            _ => {}
        }
        trajectories.push(traj);
    }
    Ok(Dataset { trajectories, provenance: None })
}
