//! The sequence policy: a small causal transformer over per-step
//! (state, return-to-go, action) token triples, with a Gaussian action head
//! and a parameter-disjoint return-token head.
//!
//! Four training objectives share one trunk:
//!
//! * `dt_mse`  — squared error on action means (behavior cloning),
//! * `rf_nll`  — Gaussian NLL with an entropy bonus,
//! * `rf_pg`   — rf_nll minus a normalized frozen-critic value term,
//! * `rf_awac` — rf_nll with exponentiated-advantage weights on the NLL.
//!
//! The return head is a separate per-state MLP (it never sees the trunk), is
//! fitted by expectile regression in every mode, and because it shares no
//! parameters with the action path it never perturbs action training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_param_step, load_tensors, mlp_eval, pack_mlp, save_tensors, unpack_mlp, Activation,
    AdamConfig, AdamState, Gradients, MlpBinding, MlpParams, NamedTensor, NodeId, Tape, Tensor,
};
use crate::critic::{QFunction, QNet};
use crate::data::{rtg_scale, sample_context_batch, ContextBatch, Dataset, NormStats};
use crate::rng::RngStream;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    DtMse,
    RfNll,
    RfPg,
    RfAwac,
}

impl LossMode {
    pub fn needs_critic(self) -> bool {
        matches!(self, LossMode::RfPg | LossMode::RfAwac)
    }
}

/// Order of the three tokens within one timestep. The default puts the
/// return token directly before the action it conditions; the alternative is
/// the classic return-first layout. Either way the action is predicted from
/// the token at position 3t+1 — the last token before a_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrder {
    StateRtgAction,
    RtgStateAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtConfig {
    /// Context length in timesteps (3k tokens).
    pub k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub loss_mode: LossMode,
    /// Weight of the normalized critic-value term in rf_pg.
    pub alpha: f64,
    /// Advantage temperature in rf_awac.
    pub lambda: f64,
    pub entropy_coef: f64,
    /// Expectile for the return head; above 0.5 chases high-return episodes.
    pub tau_rtg: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub token_order: TokenOrder,
    /// Capacity of the learned timestep-embedding table.
    pub max_timestep: usize,
    /// Hidden widths of the return head.
    pub rtg_hidden: Vec<usize>,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            k: 20,
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            dropout: 0.0,
            loss_mode: LossMode::RfNll,
            alpha: 1.0,
            lambda: 1.0,
            entropy_coef: 0.1,
            tau_rtg: 0.9,
            lr: 1e-3,
            steps: 1000,
            batch: 64,
            seed: 0,
            token_order: TokenOrder::StateRtgAction,
            max_timestep: 64,
            rtg_hidden: vec![32],
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("context length k must be >= 1".into()));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layers, heads, and embed_dim must be >= 1".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.tau_rtg > 0.0 && self.tau_rtg < 1.0) {
            return Err(Error::Config(format!("tau_rtg must be in (0,1), got {}", self.tau_rtg)));
        }
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("lr, steps, and batch must be positive".into()));
        }
        if self.max_timestep == 0 {
            return Err(Error::Config("max_timestep must be >= 1".into()));
        }
        if self.rtg_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("rtg_hidden widths must be nonzero".into()));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone)]
pub struct DtModel {
    pub config: DtConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub norm: NormStats,
    /// Divisor applied to return tokens before embedding; predictions from
    /// the return head are in these scaled units.
    pub rtg_scale: f64,
    pub state_embed: MlpParams,
    pub rtg_embed: MlpParams,
    pub action_embed: MlpParams,
    pub timestep_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    /// Linear head: embed_dim -> 2*act_dim (mean, raw log_std).
    pub action_head: MlpParams,
    /// Separate per-state network: obs_dim -> 1 (scaled return token).
    pub rtg_head: MlpParams,
}

fn ln_tensors(d: usize) -> (Tensor, Tensor) {
    (Tensor::row(vec![1.0; d]), Tensor::row(vec![0.0; d]))
}

impl DtModel {
    pub fn init(
        config: &DtConfig,
        obs_dim: usize,
        act_dim: usize,
        norm: NormStats,
        rtg_scale: f64,
        rng: &mut RngStream,
    ) -> Result<DtModel> {
        config.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("obs_dim and act_dim must be nonzero".into()));
        }
        let d = config.embed_dim;
        let state_embed = MlpParams::init(&[obs_dim, d], Activation::Gelu, &mut rng.child("se"))?;
        let rtg_embed = MlpParams::init(&[1, d], Activation::Gelu, &mut rng.child("re"))?;
        let action_embed = MlpParams::init(&[act_dim, d], Activation::Gelu, &mut rng.child("ae"))?;
        let timestep_embed =
            Tensor::uniform_init(vec![config.max_timestep, d], d, &mut rng.child("te"));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut brng = rng.child_indexed("block", i as u64);
            let (ln1_gain, ln1_bias) = ln_tensors(d);
            let (ln2_gain, ln2_bias) = ln_tensors(d);
            blocks.push(Block {
                ln1_gain,
                ln1_bias,
                wq: Tensor::uniform_init(vec![d, d], d, &mut brng),
                bq: Tensor::row(vec![0.0; d]),
                wk: Tensor::uniform_init(vec![d, d], d, &mut brng),
                bk: Tensor::row(vec![0.0; d]),
                wv: Tensor::uniform_init(vec![d, d], d, &mut brng),
                bv: Tensor::row(vec![0.0; d]),
                wo: Tensor::uniform_init(vec![d, d], d, &mut brng),
                bo: Tensor::row(vec![0.0; d]),
                ln2_gain,
                ln2_bias,
                mlp: MlpParams::init(&[d, 4 * d, d], Activation::Gelu, &mut brng)?,
            });
        }
        let (ln_f_gain, ln_f_bias) = ln_tensors(d);
        let action_head =
            MlpParams::init(&[d, 2 * act_dim], Activation::Gelu, &mut rng.child("head"))?;
        let mut rtg_sizes = vec![obs_dim];
        rtg_sizes.extend_from_slice(&config.rtg_hidden);
        rtg_sizes.push(1);
        let rtg_head = MlpParams::init(&rtg_sizes, Activation::Gelu, &mut rng.child("rtg"))?;
        Ok(DtModel {
            config: config.clone(),
            obs_dim,
            act_dim,
            norm,
            rtg_scale,
            state_embed,
            rtg_embed,
            action_embed,
            timestep_embed,
            blocks,
            ln_f_gain,
            ln_f_bias,
            action_head,
            rtg_head,
        })
    }

    /// Every parameter tensor in a fixed order. [`DtBinding::order`] mirrors
    /// this exactly; keep the two walks in sync.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.extend(self.state_embed.parameters());
        out.extend(self.rtg_embed.parameters());
        out.extend(self.action_embed.parameters());
        out.push(&self.timestep_embed);
        for b in &self.blocks {
            out.push(&b.ln1_gain);
            out.push(&b.ln1_bias);
            out.push(&b.wq);
            out.push(&b.bq);
            out.push(&b.wk);
            out.push(&b.bk);
            out.push(&b.wv);
            out.push(&b.bv);
            out.push(&b.wo);
            out.push(&b.bo);
            out.push(&b.ln2_gain);
            out.push(&b.ln2_bias);
            out.extend(b.mlp.parameters());
        }
        out.push(&self.ln_f_gain);
        out.push(&self.ln_f_bias);
        out.extend(self.action_head.parameters());
        out.extend(self.rtg_head.parameters());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.state_embed.parameters_mut());
        out.extend(self.rtg_embed.parameters_mut());
        out.extend(self.action_embed.parameters_mut());
        out.push(&mut self.timestep_embed);
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.wq);
            out.push(&mut b.bq);
            out.push(&mut b.wk);
            out.push(&mut b.bk);
            out.push(&mut b.wv);
            out.push(&mut b.bv);
            out.push(&mut b.wo);
            out.push(&mut b.bo);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.extend(b.mlp.parameters_mut());
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.extend(self.action_head.parameters_mut());
        out.extend(self.rtg_head.parameters_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DtBinding {
        let mut order = Vec::new();
        let bind_one = |t: &Tensor, tape: &mut Tape, order: &mut Vec<NodeId>| {
            let mut c = t.clone();
            c.requires_grad = trainable;
            let id = tape.leaf(&c);
            order.push(id);
            id
        };
        let bind_mlp = |m: &MlpParams, tape: &mut Tape, order: &mut Vec<NodeId>| {
            let b = m.bind(tape, trainable);
            for i in 0..b.weights.len() {
                order.push(b.weights[i]);
                order.push(b.biases[i]);
            }
            b
        };
        let state_embed = bind_mlp(&self.state_embed, tape, &mut order);
        let rtg_embed = bind_mlp(&self.rtg_embed, tape, &mut order);
        let action_embed = bind_mlp(&self.action_embed, tape, &mut order);
        let timestep = bind_one(&self.timestep_embed, tape, &mut order);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let ln1 = (bind_one(&b.ln1_gain, tape, &mut order), bind_one(&b.ln1_bias, tape, &mut order));
            let wq = bind_one(&b.wq, tape, &mut order);
            let bq = bind_one(&b.bq, tape, &mut order);
            let wk = bind_one(&b.wk, tape, &mut order);
            let bk = bind_one(&b.bk, tape, &mut order);
            let wv = bind_one(&b.wv, tape, &mut order);
            let bv = bind_one(&b.bv, tape, &mut order);
            let wo = bind_one(&b.wo, tape, &mut order);
            let bo = bind_one(&b.bo, tape, &mut order);
            let ln2 = (bind_one(&b.ln2_gain, tape, &mut order), bind_one(&b.ln2_bias, tape, &mut order));
            let mlp = bind_mlp(&b.mlp, tape, &mut order);
            blocks.push(BlockBinding { ln1, wq, bq, wk, bk, wv, bv, wo, bo, ln2, mlp });
        }
        let ln_f = (bind_one(&self.ln_f_gain, tape, &mut order), bind_one(&self.ln_f_bias, tape, &mut order));
        let action_head = bind_mlp(&self.action_head, tape, &mut order);
        let rtg_head = bind_mlp(&self.rtg_head, tape, &mut order);
        DtBinding { state_embed, rtg_embed, action_embed, timestep, blocks, ln_f, action_head, rtg_head, order }
    }
}

pub struct BlockBinding {
    ln1: (NodeId, NodeId),
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2: (NodeId, NodeId),
    mlp: MlpBinding,
}

/// Tape leaves for one bound model, `order` aligned with
/// [`DtModel::parameters`].
pub struct DtBinding {
    state_embed: MlpBinding,
    rtg_embed: MlpBinding,
    action_embed: MlpBinding,
    timestep: NodeId,
    blocks: Vec<BlockBinding>,
    ln_f: (NodeId, NodeId),
    action_head: MlpBinding,
    rtg_head: MlpBinding,
    pub order: Vec<NodeId>,
}

impl DtBinding {
    pub fn grads<'g>(&self, grads: &'g Gradients) -> Vec<Option<&'g [f64]>> {
        self.order.iter().map(|&id| grads.wrt(id)).collect()
    }
}

/// Per-position network outputs for a whole context batch. Padded positions
/// hold finite but meaningless values; consult the batch mask.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub batch: usize,
    pub k: usize,
    pub act_dim: usize,
    /// B*k*act_dim action means.
    pub mean: Vec<f64>,
    /// B*k*act_dim log standard deviations, already clamped.
    pub log_std: Vec<f64>,
    /// B*k return-head predictions in scaled units (multiply by the model's
    /// rtg_scale for return units).
    pub rtg_scaled: Vec<f64>,
}

impl PolicyOutput {
    pub fn mean_at(&self, b: usize, pos: usize) -> &[f64] {
        let base = (b * self.k + pos) * self.act_dim;
        &self.mean[base..base + self.act_dim]
    }

    pub fn log_std_at(&self, b: usize, pos: usize) -> &[f64] {
        let base = (b * self.k + pos) * self.act_dim;
        &self.log_std[base..base + self.act_dim]
    }
}

/// Nodes produced by one sample's forward pass, each spanning all k
/// positions of that sample's window.
struct SampleNodes {
    /// [k, act_dim]
    mean: NodeId,
    /// [k, act_dim], clamped
    log_std: NodeId,
    /// [k, 1], scaled units
    rtg: NodeId,
}

fn forward_sample(
    model: &DtModel,
    tape: &mut Tape,
    binding: &DtBinding,
    batch: &ContextBatch,
    b: usize,
    dropout_rng: &mut Option<&mut RngStream>,
) -> SampleNodes {
    let k = batch.k;
    let d = model.config.embed_dim;
    let n_tokens = 3 * k;

    // constants for this sample
    let mut state_vals = Vec::with_capacity(k * model.obs_dim);
    for pos in 0..k {
        state_vals.extend(model.norm.apply(batch.state(b, pos)));
    }
    let states = tape.constant(k, model.obs_dim, state_vals);
    let rtg_vals: Vec<f64> = (0..k).map(|pos| batch.rtg(b, pos) / model.rtg_scale).collect();
    let rtgs = tape.constant(k, 1, rtg_vals);
    let mut act_vals = Vec::with_capacity(k * model.act_dim);
    for pos in 0..k {
        act_vals.extend_from_slice(batch.action(b, pos));
    }
    let actions = tape.constant(k, model.act_dim, act_vals);

    // token embeddings, each with its step's learned timestep embedding
    let timesteps: Vec<usize> = (0..k)
        .map(|pos| batch.timestep(b, pos).min(model.config.max_timestep - 1))
        .collect();
    let ts_emb = tape.gather_rows(binding.timestep, &timesteps);
    let embed = |m: &MlpParams, mb: &MlpBinding, x: NodeId, tape: &mut Tape| {
        let e = m.apply(tape, mb, x);
        tape.add(e, ts_emb)
    };
    let s_emb = embed(&model.state_embed, &binding.state_embed, states, tape);
    let r_emb = embed(&model.rtg_embed, &binding.rtg_embed, rtgs, tape);
    let a_emb = embed(&model.action_embed, &binding.action_embed, actions, tape);
    let mut x = match model.config.token_order {
        TokenOrder::StateRtgAction => tape.interleave3(s_emb, r_emb, a_emb),
        TokenOrder::RtgStateAction => tape.interleave3(r_emb, s_emb, a_emb),
    };

    // additive attention mask: token j visible from i iff j <= i and j's
    // timestep is not padding. -1e30 underflows to exact zero probability
    // through the row softmax.
    let mut mask_vals = vec![0.0; n_tokens * n_tokens];
    for i in 0..n_tokens {
        for j in 0..n_tokens {
            let visible = j <= i && batch.valid(b, j / 3);
            if !visible {
                mask_vals[i * n_tokens + j] = -1e30;
            }
        }
    }
    let attn_mask = tape.constant(n_tokens, n_tokens, mask_vals);

    let n_heads = model.config.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (bi, bb) in binding.blocks.iter().enumerate() {
        // attention sublayer
        let h = tape.layer_norm(x, bb.ln1.0, bb.ln1.1);
        let q = tape.matmul(h, bb.wq);
        let q = tape.add_row(q, bb.bq);
        let kk = tape.matmul(h, bb.wk);
        let kk = tape.add_row(kk, bb.bk);
        let v = tape.matmul(h, bb.wv);
        let v = tape.add_row(v, bb.bv);
        let mut head_outs = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh);
            let kh = tape.slice_cols(kk, hd * dh, dh);
            let vh = tape.slice_cols(v, hd * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, attn_mask);
            let probs = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(probs, vh));
        }
        let ctx = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs) };
        let proj = tape.matmul(ctx, bb.wo);
        let mut proj = tape.add_row(proj, bb.bo);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            proj = apply_dropout(tape, proj, model.config.dropout, rng);
        }
        x = tape.add(x, proj);

        // feed-forward sublayer
        let h2 = tape.layer_norm(x, bb.ln2.0, bb.ln2.1);
        let mut ff = model.blocks[bi].mlp.apply(tape, &bb.mlp, h2);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            ff = apply_dropout(tape, ff, model.config.dropout, rng);
        }
        x = tape.add(x, ff);
    }
    let x = tape.layer_norm(x, binding.ln_f.0, binding.ln_f.1);

    // read the token just before each a_t (position 3t+1 in either order)
    let read_rows: Vec<usize> = (0..k).map(|t| 3 * t + 1).collect();
    let read = tape.gather_rows(x, &read_rows);
    let head = model.action_head.apply(tape, &binding.action_head, read);
    let mean = tape.slice_cols(head, 0, model.act_dim);
    let raw_log_std = tape.slice_cols(head, model.act_dim, model.act_dim);
    let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);

    // the return head sees only the raw (normalized) states
    let rtg = model.rtg_head.apply(tape, &binding.rtg_head, states);

    SampleNodes { mean, log_std, rtg }
}

fn apply_dropout(tape: &mut Tape, x: NodeId, p: f64, rng: &mut RngStream) -> NodeId {
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.dims(x);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..r * c).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
    let m = tape.constant(r, c, mask);
    tape.mul(x, m)
}

/// Value-level forward pass over a whole batch (no gradients kept).
pub fn dt_forward(model: &DtModel, batch: &ContextBatch) -> Result<PolicyOutput> {
    if batch.obs_dim != model.obs_dim || batch.act_dim != model.act_dim {
        return Err(Error::Config(format!(
            "batch dims ({}, {}) do not match model dims ({}, {})",
            batch.obs_dim, batch.act_dim, model.obs_dim, model.act_dim
        )));
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    let mut out = PolicyOutput {
        batch: batch.batch,
        k: batch.k,
        act_dim: model.act_dim,
        mean: Vec::with_capacity(batch.batch * batch.k * model.act_dim),
        log_std: Vec::with_capacity(batch.batch * batch.k * model.act_dim),
        rtg_scaled: Vec::with_capacity(batch.batch * batch.k),
    };
    for b in 0..batch.batch {
        let nodes = forward_sample(model, &mut tape, &binding, batch, b, &mut None);
        out.mean.extend_from_slice(tape.value(nodes.mean));
        out.log_std.extend_from_slice(tape.value(nodes.log_std));
        out.rtg_scaled.extend_from_slice(tape.value(nodes.rtg));
    }
    Ok(out)
}

/// Action mean at the last valid position of sample 0 — the inference path.
pub fn policy_action(model: &DtModel, window: &ContextBatch) -> Result<Vec<f64>> {
    let out = dt_forward(model, window)?;
    let last = (0..window.k)
        .rev()
        .find(|&p| window.valid(0, p))
        .ok_or_else(|| Error::Config("context window has no valid positions".into()))?;
    Ok(out.mean_at(0, last).to_vec())
}

/// Scaled-units return prediction for a raw state, mapped back to returns.
pub fn predict_rtg_state(model: &DtModel, state: &[f64]) -> f64 {
    mlp_eval(&model.rtg_head, &model.norm.apply(state))[0] * model.rtg_scale
}

/// Return-token prediction for the current step of an assembled context:
/// the head is state-wise, so this reads the last valid state.
pub fn predict_rtg(model: &DtModel, window: &ContextBatch) -> Result<f64> {
    let last = (0..window.k)
        .rev()
        .find(|&p| window.valid(0, p))
        .ok_or_else(|| Error::Config("context window has no valid positions".into()))?;
    Ok(predict_rtg_state(model, window.state(0, last)))
}

// ------------------------------------------------------------ value losses

fn for_valid(batch: &ContextBatch, mut f: impl FnMut(usize, usize)) -> usize {
    let mut count = 0;
    for b in 0..batch.batch {
        for pos in 0..batch.k {
            if batch.valid(b, pos) {
                f(b, pos);
                count += 1;
            }
        }
    }
    count
}

/// Mean over valid positions of the squared action-mean error (summed over
/// action dims). An all-masked batch is defined as loss 0.
pub fn loss_dt_mse(out: &PolicyOutput, batch: &ContextBatch) -> f64 {
    let mut total = 0.0;
    let n = for_valid(batch, |b, pos| {
        let mu = out.mean_at(b, pos);
        let a = batch.action(b, pos);
        for d in 0..out.act_dim {
            let e = mu[d] - a[d];
            total += e * e;
        }
    });
    if n == 0 {
        log::warn!("loss_dt_mse on an all-masked batch; defining the loss as 0");
        return 0.0;
    }
    total / n as f64
}

fn nll_at(out: &PolicyOutput, batch: &ContextBatch, b: usize, pos: usize) -> f64 {
    let mu = out.mean_at(b, pos);
    let ls = out.log_std_at(b, pos);
    let a = batch.action(b, pos);
    let mut nll = 0.0;
    for d in 0..out.act_dim {
        let z = (a[d] - mu[d]) / ls[d].exp();
        nll += 0.5 * z * z + ls[d] + 0.5 * LN_2PI;
    }
    nll
}

fn entropy_at(out: &PolicyOutput, b: usize, pos: usize) -> f64 {
    let ls = out.log_std_at(b, pos);
    ls.iter().sum::<f64>() + out.act_dim as f64 * 0.5 * (1.0 + LN_2PI)
}

fn rtg_term_at(
    out: &PolicyOutput,
    batch: &ContextBatch,
    b: usize,
    pos: usize,
    tau_rtg: f64,
    rtg_scale: f64,
) -> f64 {
    let u = batch.rtg(b, pos) / rtg_scale - out.rtg_scaled[b * out.k + pos];
    crate::critic::expectile_loss(u, tau_rtg)
}

/// Gaussian NLL − entropy bonus + expectile regression of the return head,
/// averaged over valid positions. Return residuals are in scaled units.
pub fn loss_rf(
    out: &PolicyOutput,
    batch: &ContextBatch,
    tau_rtg: f64,
    entropy_coef: f64,
    rtg_scale: f64,
) -> f64 {
    let mut total = 0.0;
    let n = for_valid(batch, |b, pos| {
        total += nll_at(out, batch, b, pos) - entropy_coef * entropy_at(out, b, pos)
            + rtg_term_at(out, batch, b, pos, tau_rtg, rtg_scale);
    });
    if n == 0 {
        log::warn!("loss_rf on an all-masked batch; defining the loss as 0");
        return 0.0;
    }
    total / n as f64
}

/// `loss_rf` minus `alpha * E[Q(s, mu)] / E[|Q(s, mu)|]`. The denominator is
/// treated as a constant during training so the term cannot degenerate to a
/// gradient-free ratio; at the value level that distinction is invisible.
pub fn loss_pg(
    out: &PolicyOutput,
    batch: &ContextBatch,
    qnet: &QNet,
    alpha: f64,
    tau_rtg: f64,
    entropy_coef: f64,
    rtg_scale: f64,
) -> f64 {
    let base = loss_rf(out, batch, tau_rtg, entropy_coef, rtg_scale);
    let mut q_sum = 0.0;
    let mut abs_sum = 0.0;
    let n = for_valid(batch, |b, pos| {
        let q = qnet.q(batch.state(b, pos), out.mean_at(b, pos));
        q_sum += q;
        abs_sum += q.abs();
    });
    if n == 0 {
        return base;
    }
    let denom = (abs_sum / n as f64).max(1e-12);
    base - alpha * (q_sum / n as f64) / denom
}

/// One advantage weight: exp((Q(s,a_data) − Q(s,a_policy))/lambda) clipped to
/// [0, 100].
pub fn awac_weight(q_data: f64, q_pi: f64, lambda: f64) -> f64 {
    ((q_data - q_pi) / lambda).exp().min(100.0)
}

/// NLL weighted by clipped exponentiated advantages (weights are constants
/// w.r.t. the policy), plus the entropy and return terms of `loss_rf`.
pub fn loss_awac(
    out: &PolicyOutput,
    batch: &ContextBatch,
    qnet: &QNet,
    lambda: f64,
    tau_rtg: f64,
    entropy_coef: f64,
    rtg_scale: f64,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("awac lambda must be > 0, got {lambda}")));
    }
    let mut total = 0.0;
    let n = for_valid(batch, |b, pos| {
        let s = batch.state(b, pos);
        let w = awac_weight(qnet.q(s, batch.action(b, pos)), qnet.q(s, out.mean_at(b, pos)), lambda);
        total += w * nll_at(out, batch, b, pos) - entropy_coef * entropy_at(out, b, pos)
            + rtg_term_at(out, batch, b, pos, tau_rtg, rtg_scale);
    });
    if n == 0 {
        log::warn!("loss_awac on an all-masked batch; defining the loss as 0");
        return Ok(0.0);
    }
    Ok(total / n as f64)
}

// ------------------------------------------------------------- training

#[derive(Debug, Clone, Default)]
pub struct PolicyTrainLog {
    pub losses: Vec<f64>,
}

/// Critic forward on the tape with frozen parameters: states are constants,
/// the action argument is a live node, so gradients reach the policy through
/// the actions alone.
fn critic_on_tape(
    tape: &mut Tape,
    qnet: &QNet,
    qbinding: &MlpBinding,
    states: NodeId,
    actions: NodeId,
) -> NodeId {
    let sa = tape.concat_cols(&[states, actions]);
    qnet.params.apply(tape, qbinding, sa)
}

/// Minibatch training of the selected objective, plus (in every mode) the
/// expectile return-head term — the head shares no parameters with the
/// action path, so this never changes the action policy's trajectory.
pub fn train_policy(
    dataset: &Dataset,
    config: &DtConfig,
    qnet: Option<&QNet>,
) -> Result<(DtModel, PolicyTrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a policy on an empty dataset".into()));
    }
    match (config.loss_mode.needs_critic(), qnet.is_some()) {
        (true, false) => {
            return Err(Error::Config(format!(
                "loss mode {:?} needs a trained critic",
                config.loss_mode
            )));
        }
        (false, true) => {
            return Err(Error::Config(format!(
                "loss mode {:?} does not use a critic, but one was supplied",
                config.loss_mode
            )));
        }
        _ => {}
    }
    let (obs_dim, act_dim) = dataset.dims()?;
    if let Some(q) = qnet {
        if q.obs_dim != obs_dim || q.act_dim != act_dim {
            return Err(Error::Config(format!(
                "critic dims ({}, {}) do not match dataset dims ({obs_dim}, {act_dim})",
                q.obs_dim, q.act_dim
            )));
        }
    }
    let norm = NormStats::fit(dataset)?;
    let scale = rtg_scale(dataset);
    let rng = RngStream::named("policy", config.seed);
    let mut model = DtModel::init(config, obs_dim, act_dim, norm, scale, &mut rng.child("init"))?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut opt = AdamState::for_params(adam, &model.parameters());
    let mut batches = rng.child("batches");
    let mut dropout = rng.child("dropout");
    let mut log = PolicyTrainLog::default();

    for _ in 0..config.steps {
        let batch = sample_context_batch(dataset, config.k, config.batch, &mut batches)?;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true);
        let qbinding = qnet.map(|q| q.params.bind(&mut tape, false));

        // per-sample forward passes sharing the bound parameters
        let mut dropout_opt: Option<&mut RngStream> =
            if config.dropout > 0.0 { Some(&mut dropout) } else { None };
        let samples: Vec<SampleNodes> = (0..batch.batch)
            .map(|b| forward_sample(&model, &mut tape, &binding, &batch, b, &mut dropout_opt))
            .collect();

        // gather valid positions and assemble the objective
        let mut n_total = 0usize;
        let mut action_acc: Option<NodeId> = None; // mode-specific action term, summed
        let mut entropy_acc: Option<NodeId> = None; // sum of per-position entropies
        let mut rtg_acc: Option<NodeId> = None; // sum of expectile terms
        let mut q_acc: Option<NodeId> = None; // rf_pg: sum of Q(s, mu)
        let mut q_abs_sum = 0.0; // rf_pg: detached |Q| for the denominator
        let add_to = |acc: &mut Option<NodeId>, x: NodeId, tape: &mut Tape| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, x),
                None => x,
            });
        };
        for (b, nodes) in samples.iter().enumerate() {
            let valid: Vec<usize> = (0..batch.k).filter(|&p| batch.valid(b, p)).collect();
            if valid.is_empty() {
                continue;
            }
            let nv = valid.len();
            n_total += nv;
            let mean_v = tape.gather_rows(nodes.mean, &valid);
            let log_std_v = tape.gather_rows(nodes.log_std, &valid);
            let rtg_v = tape.gather_rows(nodes.rtg, &valid);
            let mut target_vals = Vec::with_capacity(nv * act_dim);
            for &p in &valid {
                target_vals.extend_from_slice(batch.action(b, p));
            }
            let targets = tape.constant(nv, act_dim, target_vals);
            let rtg_targets_scaled: Vec<f64> =
                valid.iter().map(|&p| batch.rtg(b, p) / model.rtg_scale).collect();
            let rtg_targets = tape.constant(nv, 1, rtg_targets_scaled);

            // return-head expectile term (all modes)
            let u = tape.sub(rtg_targets, rtg_v);
            let e = tape.expectile(u, config.tau_rtg);
            let e_sum = tape.sum(e);
            add_to(&mut rtg_acc, e_sum, &mut tape);

            match config.loss_mode {
                LossMode::DtMse => {
                    let d = tape.sub(mean_v, targets);
                    let sq = tape.mul(d, d);
                    let s = tape.sum(sq);
                    add_to(&mut action_acc, s, &mut tape);
                }
                LossMode::RfNll | LossMode::RfPg | LossMode::RfAwac => {
                    let sigma = tape.exp(log_std_v);
                    let diff = tape.sub(targets, mean_v);
                    let z = tape.div(diff, sigma);
                    let zz = tape.mul(z, z);
                    if config.loss_mode == LossMode::RfAwac {
                        // per-position NLL rows, weighted by detached
                        // advantage factors
                        let ones = tape.constant(act_dim, 1, vec![1.0; act_dim]);
                        let zz_rows = tape.matmul(zz, ones);
                        let zz_half = tape.scale(zz_rows, 0.5);
                        let ls_rows = tape.matmul(log_std_v, ones);
                        let base = tape.add(zz_half, ls_rows);
                        let nll_rows =
                            tape.add_scalar(base, act_dim as f64 * 0.5 * LN_2PI);
                        let q = qnet.expect("validated above");
                        let mean_vals = tape.value(mean_v).to_vec();
                        let weights: Vec<f64> = valid
                            .iter()
                            .enumerate()
                            .map(|(row, &p)| {
                                let s = batch.state(b, p);
                                let mu = &mean_vals[row * act_dim..(row + 1) * act_dim];
                                awac_weight(
                                    q.q(s, batch.action(b, p)),
                                    q.q(s, mu),
                                    config.lambda,
                                )
                            })
                            .collect();
                        let w = tape.constant(nv, 1, weights);
                        let weighted = tape.mul(nll_rows, w);
                        let s = tape.sum(weighted);
                        add_to(&mut action_acc, s, &mut tape);
                    } else {
                        let zz_sum = tape.sum(zz);
                        let zz_half = tape.scale(zz_sum, 0.5);
                        let ls_sum = tape.sum(log_std_v);
                        let base = tape.add(zz_half, ls_sum);
                        let nll = tape.add_scalar(base, nv as f64 * act_dim as f64 * 0.5 * LN_2PI);
                        add_to(&mut action_acc, nll, &mut tape);
                    }
                    if config.loss_mode == LossMode::RfPg {
                        let q = qnet.expect("validated above");
                        let qb = qbinding.as_ref().expect("bound above");
                        // states enter the critic under the critic's own
                        // normalization, exactly as in QNet::q
                        let mut sv = Vec::with_capacity(nv * obs_dim);
                        for &p in &valid {
                            sv.extend(q.norm.apply(batch.state(b, p)));
                        }
                        let q_states = tape.constant(nv, obs_dim, sv);
                        let q_out = critic_on_tape(&mut tape, q, qb, q_states, mean_v);
                        let q_sum = tape.sum(q_out);
                        add_to(&mut q_acc, q_sum, &mut tape);
                        for v in tape.value(q_out) {
                            q_abs_sum += v.abs();
                        }
                    }
                    // entropy bonus: sum(log_std) + const per position
                    let h_sum = tape.sum(log_std_v);
                    let h = tape.add_scalar(
                        h_sum,
                        nv as f64 * act_dim as f64 * 0.5 * (1.0 + LN_2PI),
                    );
                    add_to(&mut entropy_acc, h, &mut tape);
                }
            }
        }
        assert!(n_total > 0, "sampler produced an all-masked batch");
        let inv_n = 1.0 / n_total as f64;
        let action_term = action_acc.expect("batch has valid positions");
        let mut loss = tape.scale(action_term, inv_n);
        if let Some(h) = entropy_acc {
            let h_term = tape.scale(h, -config.entropy_coef * inv_n);
            loss = tape.add(loss, h_term);
        }
        if let Some(q_sum) = q_acc {
            let denom = (q_abs_sum * inv_n).max(1e-12);
            let q_term = tape.scale(q_sum, -config.alpha * inv_n / denom);
            loss = tape.add(loss, q_term);
        }
        let rtg_term = tape.scale(rtg_acc.expect("batch has valid positions"), inv_n);
        loss = tape.add(loss, rtg_term);

        log.losses.push(tape.value(loss)[0]);
        let grads = tape.backward(loss)?;
        let mut params = model.parameters_mut();
        adam_param_step(&mut params, &binding.grads(&grads), &mut opt);
    }
    Ok((model, log))
}

// ------------------------------------------------------------ checkpoints

#[derive(Serialize, Deserialize)]
struct PolicySidecar {
    config: DtConfig,
    obs_dim: usize,
    act_dim: usize,
    norm: NormStats,
    rtg_scale: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

impl DtModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = pack_mlp("state_embed", &self.state_embed);
        tensors.extend(pack_mlp("rtg_embed", &self.rtg_embed));
        tensors.extend(pack_mlp("action_embed", &self.action_embed));
        tensors.push(NamedTensor { name: "timestep_embed".into(), tensor: self.timestep_embed.clone() });
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            let single = |name: &str, t: &Tensor| NamedTensor {
                name: format!("{p}.{name}"),
                tensor: t.clone(),
            };
            tensors.push(single("ln1.gain", &b.ln1_gain));
            tensors.push(single("ln1.bias", &b.ln1_bias));
            tensors.push(single("wq", &b.wq));
            tensors.push(single("bq", &b.bq));
            tensors.push(single("wk", &b.wk));
            tensors.push(single("bk", &b.bk));
            tensors.push(single("wv", &b.wv));
            tensors.push(single("bv", &b.bv));
            tensors.push(single("wo", &b.wo));
            tensors.push(single("bo", &b.bo));
            tensors.push(single("ln2.gain", &b.ln2_gain));
            tensors.push(single("ln2.bias", &b.ln2_bias));
            tensors.extend(pack_mlp(&format!("{p}.mlp"), &b.mlp));
        }
        tensors.push(NamedTensor { name: "ln_f.gain".into(), tensor: self.ln_f_gain.clone() });
        tensors.push(NamedTensor { name: "ln_f.bias".into(), tensor: self.ln_f_bias.clone() });
        tensors.extend(pack_mlp("action_head", &self.action_head));
        tensors.extend(pack_mlp("rtg_head", &self.rtg_head));
        save_tensors(path, &tensors)?;
        let sidecar = PolicySidecar {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            norm: self.norm.clone(),
            rtg_scale: self.rtg_scale,
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DtModel> {
        let tensors = load_tensors(path)?;
        let raw = std::fs::read_to_string(sidecar_path(path))?;
        let sc: PolicySidecar = serde_json::from_str(&raw)?;
        let single = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.clone())
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("checkpoint is missing tensor {name:?}"),
                })
        };
        let mut blocks = Vec::with_capacity(sc.config.n_layers);
        for i in 0..sc.config.n_layers {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1_gain: single(&format!("{p}.ln1.gain"))?,
                ln1_bias: single(&format!("{p}.ln1.bias"))?,
                wq: single(&format!("{p}.wq"))?,
                bq: single(&format!("{p}.bq"))?,
                wk: single(&format!("{p}.wk"))?,
                bk: single(&format!("{p}.bk"))?,
                wv: single(&format!("{p}.wv"))?,
                bv: single(&format!("{p}.bv"))?,
                wo: single(&format!("{p}.wo"))?,
                bo: single(&format!("{p}.bo"))?,
                ln2_gain: single(&format!("{p}.ln2.gain"))?,
                ln2_bias: single(&format!("{p}.ln2.bias"))?,
                mlp: unpack_mlp(&format!("{p}.mlp"), &tensors, Activation::Gelu)?,
            });
        }
        Ok(DtModel {
            obs_dim: sc.obs_dim,
            act_dim: sc.act_dim,
            norm: sc.norm,
            rtg_scale: sc.rtg_scale,
            state_embed: unpack_mlp("state_embed", &tensors, Activation::Gelu)?,
            rtg_embed: unpack_mlp("rtg_embed", &tensors, Activation::Gelu)?,
            action_embed: unpack_mlp("action_embed", &tensors, Activation::Gelu)?,
            timestep_embed: single("timestep_embed")?,
            blocks,
            ln_f_gain: single("ln_f.gain")?,
            ln_f_bias: single("ln_f.bias")?,
            action_head: unpack_mlp("action_head", &tensors, Activation::Gelu)?,
            rtg_head: unpack_mlp("rtg_head", &tensors, Activation::Gelu)?,
            config: sc.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bandit_dataset, stitch_dataset, StitchState};

    fn tiny_config() -> DtConfig {
        DtConfig {
            k: 3,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            max_timestep: 16,
            rtg_hidden: vec![8],
            ..DtConfig::default()
        }
    }

    fn tiny_model(obs_dim: usize, act_dim: usize, seed: u64) -> DtModel {
        let mut rng = RngStream::named("tiny-model", seed);
        DtModel::init(&tiny_config(), obs_dim, act_dim, NormStats::identity(obs_dim), 1.0, &mut rng)
            .unwrap()
    }

    fn random_batch(obs_dim: usize, act_dim: usize, b: usize, k: usize, seed: u64) -> ContextBatch {
        let mut rng = RngStream::named("batch", seed);
        let mut batch = ContextBatch::empty(b, k, obs_dim, act_dim);
        for s in 0..b {
            // in multi-sample batches, leave the first slot of sample 0
            // padded to exercise masking (padded rows themselves compute
            // unread garbage, so single-sample tests stay fully valid)
            let pad = if s == 0 && b > 1 && k > 1 { 1 } else { 0 };
            for pos in 0..k {
                let slot = s * k + pos;
                if pos < pad {
                    continue;
                }
                for d in 0..obs_dim {
                    batch.states[slot * obs_dim + d] = rng.uniform_in(-1.0, 1.0);
                }
                for d in 0..act_dim {
                    batch.actions[slot * act_dim + d] = rng.uniform_in(-1.0, 1.0);
                }
                batch.rtgs[slot] = rng.uniform_in(-1.0, 1.0);
                batch.timesteps[slot] = pos - pad;
                batch.mask[slot] = 1.0;
            }
        }
        batch
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = tiny_config();
        assert!(ok.validate().is_ok());
        assert!(DtConfig { k: 0, ..ok.clone() }.validate().is_err());
        assert!(DtConfig { embed_dim: 15, ..ok.clone() }.validate().is_err());
        assert!(DtConfig { alpha: -1.0, ..ok.clone() }.validate().is_err());
        assert!(DtConfig { lambda: 0.0, ..ok.clone() }.validate().is_err());
        assert!(DtConfig { tau_rtg: 1.0, ..ok.clone() }.validate().is_err());
        assert!(DtConfig { dropout: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn binding_order_matches_parameter_order() {
        let model = tiny_model(3, 2, 1);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true);
        let params = model.parameters();
        assert_eq!(binding.order.len(), params.len());
        for (id, p) in binding.order.iter().zip(&params) {
            assert_eq!(tape.dims(*id), p.dims2(), "shape mismatch in binding order");
            assert_eq!(tape.value(*id), &p.values[..]);
        }
    }

    #[test]
    fn zeroed_action_head_gives_zero_mean_and_constant_log_std() {
        let mut model = tiny_model(2, 2, 2);
        for t in [&mut model.action_head.weights[0], &mut model.action_head.biases[0]] {
            for v in &mut t.values {
                *v = 0.0;
            }
        }
        let batch = random_batch(2, 2, 2, 3, 3);
        let out = dt_forward(&model, &batch).unwrap();
        for v in &out.mean {
            assert_eq!(*v, 0.0);
        }
        for v in &out.log_std {
            assert_eq!(*v, 0.0); // clamp(0) = 0
        }
    }

    #[test]
    fn future_tokens_cannot_influence_earlier_actions() {
        let model = tiny_model(3, 1, 4);
        let batch = random_batch(3, 1, 1, 4, 5);
        let base = dt_forward(&model, &batch).unwrap();
        // perturb everything at the last position: state, action, rtg
        let mut fut = batch.clone();
        let last = 3usize;
        fut.states[last * 3..(last + 1) * 3].copy_from_slice(&[9.0, -9.0, 4.0]);
        fut.actions[last] = -0.123;
        fut.rtgs[last] = 77.0;
        let out = dt_forward(&model, &fut).unwrap();
        for pos in 0..3 {
            for d in 0..1 {
                let a = base.mean_at(0, pos)[d];
                let b = out.mean_at(0, pos)[d];
                assert_eq!(a.to_bits(), b.to_bits(), "position {pos} changed");
                let a = base.log_std_at(0, pos)[d];
                let b = out.log_std_at(0, pos)[d];
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // and the current action token never affects its own prediction
        let mut cur = batch.clone();
        cur.actions[last] = 123.0;
        let out = dt_forward(&model, &cur).unwrap();
        let a = base.mean_at(0, last)[0];
        let b = out.mean_at(0, last)[0];
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn padded_slots_never_change_valid_outputs() {
        let model = tiny_model(2, 1, 6);
        let batch = random_batch(2, 1, 2, 3, 7); // sample 0 has slot 0 padded
        let base = dt_forward(&model, &batch).unwrap();
        let mut poked = batch.clone();
        poked.states[0] = 1e6;
        poked.states[1] = -3.5;
        poked.actions[0] = 0.77;
        poked.rtgs[0] = -123.0;
        // timesteps in padded slots are also irrelevant
        poked.timesteps[0] = 9;
        let out = dt_forward(&model, &poked).unwrap();
        for pos in 1..3 {
            let a = base.mean_at(0, pos)[0];
            let b = out.mean_at(0, pos)[0];
            assert_eq!(a.to_bits(), b.to_bits(), "valid position {pos} changed");
        }
        // the untouched second sample is bitwise stable too
        for pos in 0..3 {
            let a = base.mean_at(1, pos)[0];
            let b = out.mean_at(1, pos)[0];
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn k1_output_depends_only_on_current_tokens() {
        let model = tiny_model(2, 1, 8);
        let mut a = ContextBatch::empty(1, 1, 2, 1);
        a.states.copy_from_slice(&[0.3, -0.4]);
        a.rtgs[0] = 0.5;
        a.timesteps[0] = 0;
        a.mask[0] = 1.0;
        let mut b = a.clone();
        b.actions[0] = -0.9; // current-step action slot is a placeholder
        let oa = dt_forward(&model, &a).unwrap();
        let ob = dt_forward(&model, &b).unwrap();
        assert_eq!(oa.mean[0].to_bits(), ob.mean[0].to_bits());
        assert_eq!(oa.log_std[0].to_bits(), ob.log_std[0].to_bits());
    }

    #[test]
    fn both_token_orders_run_and_differ() {
        let cfg = tiny_config();
        let mut rng = RngStream::named("order", 1);
        let m1 = DtModel::init(&cfg, 2, 1, NormStats::identity(2), 1.0, &mut rng).unwrap();
        let mut m2 = m1.clone();
        m2.config.token_order = TokenOrder::RtgStateAction;
        let batch = random_batch(2, 1, 1, 3, 11);
        let o1 = dt_forward(&m1, &batch).unwrap();
        let o2 = dt_forward(&m2, &batch).unwrap();
        assert!(o1.mean.iter().all(|v| v.is_finite()));
        assert!(o2.mean.iter().all(|v| v.is_finite()));
        // same weights, swapped token roles: outputs should genuinely differ
        assert!(o1.mean.iter().zip(&o2.mean).any(|(a, b)| a != b));
    }

    fn handmade_output(batch: &ContextBatch, seed: u64) -> PolicyOutput {
        let mut rng = RngStream::named("fake-out", seed);
        let n = batch.batch * batch.k;
        PolicyOutput {
            batch: batch.batch,
            k: batch.k,
            act_dim: batch.act_dim,
            mean: (0..n * batch.act_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
            log_std: (0..n * batch.act_dim).map(|_| rng.uniform_in(-2.0, 1.0)).collect(),
            rtg_scaled: (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        }
    }

    #[test]
    fn mse_matches_hand_computed_cases() {
        let batch = random_batch(2, 2, 3, 2, 21);
        // exact predictions -> 0
        let mut out = handmade_output(&batch, 1);
        for b in 0..batch.batch {
            for pos in 0..batch.k {
                let base = (b * batch.k + pos) * batch.act_dim;
                out.mean[base..base + 2].copy_from_slice(batch.action(b, pos));
            }
        }
        assert_eq!(loss_dt_mse(&out, &batch), 0.0);
        // off by constant c in every dim -> c^2 * act_dim
        let c = 0.3;
        for v in &mut out.mean {
            *v += c;
        }
        let loss = loss_dt_mse(&out, &batch);
        assert!((loss - c * c * 2.0).abs() < 1e-12, "loss {loss}");
        // all-masked batch -> 0 by definition
        let empty = ContextBatch::empty(2, 2, 2, 2);
        assert_eq!(loss_dt_mse(&out, &empty), 0.0);
    }

    #[test]
    fn rf_loss_gaussian_constant_and_half_mse_rtg() {
        let batch = random_batch(1, 2, 2, 2, 22);
        let mut out = handmade_output(&batch, 2);
        // mean = target, log_std = 0, rtg prediction exact
        for b in 0..batch.batch {
            for pos in 0..batch.k {
                let base = (b * batch.k + pos) * batch.act_dim;
                out.mean[base..base + 2].copy_from_slice(batch.action(b, pos));
                out.log_std[base] = 0.0;
                out.log_std[base + 1] = 0.0;
                out.rtg_scaled[b * batch.k + pos] = batch.rtg(b, pos);
            }
        }
        // entropy_coef 0: only the NLL constant remains, 0.5*act*ln(2pi)
        let loss = loss_rf(&out, &batch, 0.5, 0.0, 1.0);
        let expect = 0.5 * 2.0 * LN_2PI;
        assert!((loss - expect).abs() < 1e-12, "loss {loss} expect {expect}");

        // tau 0.5 turns the return term into half-MSE of the residual
        for (i, v) in out.rtg_scaled.iter_mut().enumerate() {
            *v = batch.rtgs[i] - 0.4; // residual 0.4 everywhere
        }
        let loss = loss_rf(&out, &batch, 0.5, 0.0, 1.0);
        let expect = 0.5 * 2.0 * LN_2PI + 0.5 * 0.4 * 0.4;
        assert!((loss - expect).abs() < 1e-12, "loss {loss} expect {expect}");
    }

    fn frozen_qnet(obs_dim: usize, act_dim: usize, seed: u64) -> QNet {
        let mut rng = RngStream::named("frozen-q", seed);
        QNet {
            params: MlpParams::init(&[obs_dim + act_dim, 12, 1], Activation::Gelu, &mut rng)
                .unwrap(),
            norm: NormStats::identity(obs_dim),
            obs_dim,
            act_dim,
        }
    }

    #[test]
    fn pg_at_alpha_zero_is_rf() {
        let batch = random_batch(2, 1, 4, 3, 23);
        let out = handmade_output(&batch, 3);
        let q = frozen_qnet(2, 1, 5);
        let rf = loss_rf(&out, &batch, 0.7, 0.1, 2.0);
        let pg = loss_pg(&out, &batch, &q, 0.0, 0.7, 0.1, 2.0);
        assert!((rf - pg).abs() < 1e-12);
    }

    #[test]
    fn pg_normalization_on_a_constant_critic() {
        let batch = random_batch(2, 1, 4, 2, 24);
        let out = handmade_output(&batch, 4);
        // critic with zero weights and bias c: Q == c everywhere
        let mut q = frozen_qnet(2, 1, 6);
        for t in q.params.parameters_mut() {
            for v in &mut t.values {
                *v = 0.0;
            }
        }
        let last = q.params.biases.len() - 1;
        q.params.biases[last].values[0] = 3.5;
        let rf = loss_rf(&out, &batch, 0.7, 0.1, 1.0);
        let pg = loss_pg(&out, &batch, &q, 2.0, 0.7, 0.1, 1.0);
        // E[Q]/E[|Q|] = 1 exactly, so pg = rf - alpha
        assert!((pg - (rf - 2.0)).abs() < 1e-12);
        // negative constant flips the sign
        q.params.biases[last].values[0] = -3.5;
        let pg = loss_pg(&out, &batch, &q, 2.0, 0.7, 0.1, 1.0);
        assert!((pg - (rf + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn awac_weight_identities() {
        assert_eq!(awac_weight(1.0, 1.0, 0.5), 1.0);
        let lam = 0.7;
        let w = awac_weight(lam * std::f64::consts::LN_2, 0.0, lam);
        assert!((w - 2.0).abs() < 1e-12);
        // clipping engages past lambda * ln(100)
        let w = awac_weight(100.0, 0.0, 1.0);
        assert_eq!(w, 100.0);
        assert!(awac_weight(-100.0, 0.0, 1.0) >= 0.0);
    }

    #[test]
    fn awac_with_unit_weights_reduces_to_rf() {
        let batch = random_batch(2, 1, 4, 2, 25);
        let out = handmade_output(&batch, 5);
        // constant critic: Q(s, a_data) == Q(s, mu) so every weight is 1
        let mut q = frozen_qnet(2, 1, 7);
        for t in q.params.parameters_mut() {
            for v in &mut t.values {
                *v = 0.0;
            }
        }
        let rf = loss_rf(&out, &batch, 0.7, 0.1, 1.0);
        let aw = loss_awac(&out, &batch, &q, 1.0, 0.7, 0.1, 1.0).unwrap();
        assert!((rf - aw).abs() < 1e-12);
        assert!(loss_awac(&out, &batch, &q, 0.0, 0.7, 0.1, 1.0).is_err());
    }

    // Train-path tape losses must agree with the plain value-level functions.
    #[test]
    fn tape_losses_match_value_losses() {
        let obs_dim = 2;
        let act_dim = 2;
        let model = tiny_model(obs_dim, act_dim, 30);
        let q = frozen_qnet(obs_dim, act_dim, 31);
        let batch = random_batch(obs_dim, act_dim, 3, 3, 32);
        let out = dt_forward(&model, &batch).unwrap();
        let tau = 0.8;
        let coef = 0.1;
        let scale = model.rtg_scale;

        for mode in [LossMode::DtMse, LossMode::RfNll, LossMode::RfPg, LossMode::RfAwac] {
            let expected = match mode {
                LossMode::DtMse => {
                    // the training objective adds the (parameter-disjoint)
                    // return term in every mode
                    let rtg: f64 = {
                        let mut total = 0.0;
                        let n = for_valid(&batch, |b, pos| {
                            total += rtg_term_at(&out, &batch, b, pos, tau, scale);
                        });
                        total / n as f64
                    };
                    loss_dt_mse(&out, &batch) + rtg
                }
                LossMode::RfNll => loss_rf(&out, &batch, tau, coef, scale),
                LossMode::RfPg => loss_pg(&out, &batch, &q, 0.5, tau, coef, scale),
                LossMode::RfAwac => loss_awac(&out, &batch, &q, 0.9, tau, coef, scale).unwrap(),
            };
            let got = tape_loss_for_test(&model, &batch, mode, Some(&q), tau, coef, 0.5, 0.9);
            let err = (got - expected).abs() / expected.abs().max(1.0);
            assert!(err < 1e-9, "{mode:?}: tape {got} vs value {expected}");
        }
    }

    /// Replay of the train loop's loss assembly for one batch, returning the
    /// loss value without taking a step.
    fn tape_loss_for_test(
        model: &DtModel,
        batch: &ContextBatch,
        mode: LossMode,
        qnet: Option<&QNet>,
        tau_rtg: f64,
        entropy_coef: f64,
        alpha: f64,
        lambda: f64,
    ) -> f64 {
        let mut cfg = model.config.clone();
        cfg.loss_mode = mode;
        cfg.tau_rtg = tau_rtg;
        cfg.entropy_coef = entropy_coef;
        cfg.alpha = alpha;
        cfg.lambda = lambda;
        let mut m = model.clone();
        m.config = cfg;
        loss_on_tape(&m, batch, qnet)
    }

    #[test]
    fn pg_q_term_gradient_matches_finite_differences() {
        // Two-parameter toy head: mean = w*s + b feeding the frozen critic.
        // The Q-term gradient w.r.t. (w, b) must match central differences.
        let q = frozen_qnet(1, 1, 40);
        let states = [0.3, -0.7, 0.9];
        let term = |w: f64, bias: f64| -> f64 {
            let mut q_sum = 0.0;
            let mut abs_sum = 0.0;
            for &s in &states {
                let mu = w * s + bias;
                let qv = q.q(&[s], &[mu]);
                q_sum += qv;
                abs_sum += qv.abs();
            }
            let denom = (abs_sum / states.len() as f64).max(1e-12);
            // detached denominator: FD must hold it fixed, matching training
            -(q_sum / states.len() as f64) / denom
        };
        let (w0, b0) = (0.4, -0.2);
        // tape version
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::scalar(w0).with_grad());
        let bias = tape.leaf(&Tensor::scalar(b0).with_grad());
        let qb = q.params.bind(&mut tape, false);
        let s_node = tape.constant(3, 1, states.to_vec());
        let ws = tape.matmul(s_node, w);
        let ones = tape.constant(3, 1, vec![1.0; 3]);
        let b_col = tape.matmul(ones, bias);
        let mu = tape.add(ws, b_col);
        let q_out = critic_on_tape(&mut tape, &q, &qb, s_node, mu);
        let abs_mean = tape.value(q_out).iter().map(|v| v.abs()).sum::<f64>() / 3.0;
        let q_sum = tape.sum(q_out);
        let loss = tape.scale(q_sum, -1.0 / (3.0 * abs_mean.max(1e-12)));
        let grads = tape.backward(loss).unwrap();
        let gw = grads.wrt(w).unwrap()[0];
        let gb = grads.wrt(bias).unwrap()[0];
        // finite differences with the denominator frozen at (w0, b0)
        let h = 1e-5;
        let denom0 = {
            let mut abs_sum = 0.0;
            for &s in &states {
                abs_sum += q.q(&[s], &[w0 * s + b0]).abs();
            }
            (abs_sum / 3.0).max(1e-12)
        };
        let frozen = |w: f64, bias: f64| -> f64 {
            let mut q_sum = 0.0;
            for &s in &states {
                q_sum += q.q(&[s], &[w * s + bias]);
            }
            -(q_sum / 3.0) / denom0
        };
        let fw = (frozen(w0 + h, b0) - frozen(w0 - h, b0)) / (2.0 * h);
        let fb = (frozen(w0, b0 + h) - frozen(w0, b0 - h)) / (2.0 * h);
        assert!((gw - fw).abs() / fw.abs().max(1e-8) < 1e-3, "dw: {gw} vs {fw}");
        assert!((gb - fb).abs() / fb.abs().max(1e-8) < 1e-3, "db: {gb} vs {fb}");
        // sanity: the unfrozen term differs (the ratio moves with the denom),
        // confirming the detachment actually matters
        assert!(term(w0, b0).is_finite());
    }

    #[test]
    fn trunk_parameter_gradients_match_finite_differences() {
        let obs_dim = 2;
        let act_dim = 1;
        let mut model = tiny_model(obs_dim, act_dim, 50);
        let batch = random_batch(obs_dim, act_dim, 2, 3, 51);
        let tau = 0.7;
        let coef = 0.05;
        model.config.loss_mode = LossMode::RfNll;
        model.config.tau_rtg = tau;
        model.config.entropy_coef = coef;

        let grads = loss_grads_on_tape(&model, &batch, None);
        let n_params = model.parameters().len();
        assert_eq!(grads.len(), n_params);

        // probe a spread of parameters in every tensor
        let mut rng = RngStream::named("fd-probe", 52);
        for ti in 0..n_params {
            let len = model.parameters()[ti].values.len();
            let pi = rng.below(len as u64) as usize;
            let h = 1e-5;
            let orig = model.parameters()[ti].values[pi];
            model.parameters_mut()[ti].values[pi] = orig + h;
            let up = loss_on_tape(&model, &batch, None);
            model.parameters_mut()[ti].values[pi] = orig - h;
            let down = loss_on_tape(&model, &batch, None);
            model.parameters_mut()[ti].values[pi] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[ti][pi];
            let err = (an - fd).abs() / fd.abs().max(1e-6);
            assert!(err < 2e-4, "tensor {ti} elem {pi}: analytic {an} vs fd {fd}");
        }
    }

    /// Build the training loss for one batch and return its value.
    fn loss_on_tape(model: &DtModel, batch: &ContextBatch, qnet: Option<&QNet>) -> f64 {
        let (loss, tape, _) = build_loss(model, batch, qnet);
        tape.value(loss)[0]
    }

    /// Training loss value and parameter gradients for one batch.
    fn loss_grads_on_tape(
        model: &DtModel,
        batch: &ContextBatch,
        qnet: Option<&QNet>,
    ) -> Vec<Vec<f64>> {
        let (loss, mut tape, binding) = build_loss(model, batch, qnet);
        let grads = tape.backward(loss).unwrap();
        binding
            .grads(&grads)
            .into_iter()
            .zip(model.parameters())
            .map(|(g, p)| g.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.values.len()]))
            .collect()
    }

    fn build_loss(
        model: &DtModel,
        batch: &ContextBatch,
        qnet: Option<&QNet>,
    ) -> (NodeId, Tape, DtBinding) {
        // mirrors train_policy's inner loop; kept in a test so the production
        // loop stays a single code path
        let cfg = &model.config;
        let act_dim = model.act_dim;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, true);
        let qbinding = qnet.map(|q| q.params.bind(&mut tape, false));
        let samples: Vec<SampleNodes> = (0..batch.batch)
            .map(|b| forward_sample(model, &mut tape, &binding, batch, b, &mut None))
            .collect();
        let mut n_total = 0usize;
        let mut action_acc: Option<NodeId> = None;
        let mut entropy_acc: Option<NodeId> = None;
        let mut rtg_acc: Option<NodeId> = None;
        let mut q_acc: Option<NodeId> = None;
        let mut q_abs_sum = 0.0;
        let add_to = |acc: &mut Option<NodeId>, x: NodeId, tape: &mut Tape| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, x),
                None => x,
            });
        };
        for (b, nodes) in samples.iter().enumerate() {
            let valid: Vec<usize> = (0..batch.k).filter(|&p| batch.valid(b, p)).collect();
            if valid.is_empty() {
                continue;
            }
            let nv = valid.len();
            n_total += nv;
            let mean_v = tape.gather_rows(nodes.mean, &valid);
            let log_std_v = tape.gather_rows(nodes.log_std, &valid);
            let rtg_v = tape.gather_rows(nodes.rtg, &valid);
            let mut target_vals = Vec::with_capacity(nv * act_dim);
            for &p in &valid {
                target_vals.extend_from_slice(batch.action(b, p));
            }
            let targets = tape.constant(nv, act_dim, target_vals);
            let rtg_t: Vec<f64> = valid.iter().map(|&p| batch.rtg(b, p) / model.rtg_scale).collect();
            let rtg_targets = tape.constant(nv, 1, rtg_t);
            let u = tape.sub(rtg_targets, rtg_v);
            let e = tape.expectile(u, cfg.tau_rtg);
            let e_sum = tape.sum(e);
            add_to(&mut rtg_acc, e_sum, &mut tape);
            match cfg.loss_mode {
                LossMode::DtMse => {
                    let d = tape.sub(mean_v, targets);
                    let sq = tape.mul(d, d);
                    let s = tape.sum(sq);
                    add_to(&mut action_acc, s, &mut tape);
                }
                _ => {
                    let sigma = tape.exp(log_std_v);
                    let diff = tape.sub(targets, mean_v);
                    let z = tape.div(diff, sigma);
                    let zz = tape.mul(z, z);
                    if cfg.loss_mode == LossMode::RfAwac {
                        let ones = tape.constant(act_dim, 1, vec![1.0; act_dim]);
                        let zz_rows = tape.matmul(zz, ones);
                        let zz_half = tape.scale(zz_rows, 0.5);
                        let ls_rows = tape.matmul(log_std_v, ones);
                        let base = tape.add(zz_half, ls_rows);
                        let nll_rows = tape.add_scalar(base, act_dim as f64 * 0.5 * LN_2PI);
                        let q = qnet.unwrap();
                        let mean_vals = tape.value(mean_v).to_vec();
                        let weights: Vec<f64> = valid
                            .iter()
                            .enumerate()
                            .map(|(row, &p)| {
                                let s = batch.state(b, p);
                                let mu = &mean_vals[row * act_dim..(row + 1) * act_dim];
                                awac_weight(q.q(s, batch.action(b, p)), q.q(s, mu), cfg.lambda)
                            })
                            .collect();
                        let w = tape.constant(nv, 1, weights);
                        let weighted = tape.mul(nll_rows, w);
                        let s = tape.sum(weighted);
                        add_to(&mut action_acc, s, &mut tape);
                    } else {
                        let zz_sum = tape.sum(zz);
                        let zz_half = tape.scale(zz_sum, 0.5);
                        let ls_sum = tape.sum(log_std_v);
                        let base = tape.add(zz_half, ls_sum);
                        let nll = tape.add_scalar(base, nv as f64 * act_dim as f64 * 0.5 * LN_2PI);
                        add_to(&mut action_acc, nll, &mut tape);
                    }
                    if cfg.loss_mode == LossMode::RfPg {
                        let q = qnet.unwrap();
                        let qb = qbinding.as_ref().unwrap();
                        let mut sv = Vec::with_capacity(nv * model.obs_dim);
                        for &p in &valid {
                            sv.extend(q.norm.apply(batch.state(b, p)));
                        }
                        let q_states = tape.constant(nv, model.obs_dim, sv);
                        let q_out = critic_on_tape(&mut tape, q, qb, q_states, mean_v);
                        let q_sum = tape.sum(q_out);
                        add_to(&mut q_acc, q_sum, &mut tape);
                        for v in tape.value(q_out) {
                            q_abs_sum += v.abs();
                        }
                    }
                    let h_sum = tape.sum(log_std_v);
                    let h = tape
                        .add_scalar(h_sum, nv as f64 * act_dim as f64 * 0.5 * (1.0 + LN_2PI));
                    add_to(&mut entropy_acc, h, &mut tape);
                }
            }
        }
        let inv_n = 1.0 / n_total as f64;
        let mut loss = tape.scale(action_acc.unwrap(), inv_n);
        if let Some(h) = entropy_acc {
            let h_term = tape.scale(h, -cfg.entropy_coef * inv_n);
            loss = tape.add(loss, h_term);
        }
        if let Some(q_sum) = q_acc {
            let denom = (q_abs_sum * inv_n).max(1e-12);
            let q_term = tape.scale(q_sum, -cfg.alpha * inv_n / denom);
            loss = tape.add(loss, q_term);
        }
        let rtg_term = tape.scale(rtg_acc.unwrap(), inv_n);
        loss = tape.add(loss, rtg_term);
        (loss, tape, binding)
    }

    fn small_train_config(mode: LossMode, steps: usize) -> DtConfig {
        DtConfig {
            k: 1,
            n_layers: 1,
            n_heads: 1,
            embed_dim: 16,
            loss_mode: mode,
            steps,
            batch: 16,
            lr: 1e-3,
            max_timestep: 8,
            rtg_hidden: vec![8],
            seed: 3,
            ..DtConfig::default()
        }
    }

    #[test]
    fn training_decreases_the_loss() {
        let mut rng = RngStream::new(60);
        let data = bandit_dataset(400, &mut rng);
        let (_, log) =
            train_policy(&data, &small_train_config(LossMode::DtMse, 300), None).unwrap();
        let w = log.losses.len() / 10;
        let head: f64 = log.losses[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = log.losses[log.losses.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut rng = RngStream::new(61);
        let data = bandit_dataset(200, &mut rng);
        let cfg = small_train_config(LossMode::RfNll, 30);
        let (m1, l1) = train_policy(&data, &cfg, None).unwrap();
        let (m2, l2) = train_policy(&data, &cfg, None).unwrap();
        assert_eq!(l1.losses.len(), l2.losses.len());
        for (a, b) in l1.losses.iter().zip(&l2.losses) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in m1.parameters().iter().zip(m2.parameters()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn dropout_training_stays_deterministic_and_finite() {
        let mut rng = RngStream::new(62);
        let data = bandit_dataset(200, &mut rng);
        let cfg = DtConfig { dropout: 0.1, ..small_train_config(LossMode::RfNll, 25) };
        let (_, l1) = train_policy(&data, &cfg, None).unwrap();
        let (_, l2) = train_policy(&data, &cfg, None).unwrap();
        for (a, b) in l1.losses.iter().zip(&l2.losses) {
            assert!(a.is_finite());
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn critic_requirement_is_two_sided() {
        let mut rng = RngStream::new(63);
        let data = bandit_dataset(100, &mut rng);
        let q = frozen_qnet(1, 1, 64);
        let pg = small_train_config(LossMode::RfPg, 10);
        assert!(train_policy(&data, &pg, None).is_err());
        assert!(train_policy(&data, &pg, Some(&q)).is_ok());
        let nll = small_train_config(LossMode::RfNll, 10);
        assert!(train_policy(&data, &nll, Some(&q)).is_err());
        assert!(train_policy(&data, &nll, None).is_ok());
    }

    #[test]
    fn rtg_head_learns_branch_expectiles() {
        let mut rng = RngStream::new(65);
        let data = stitch_dataset(200, &mut rng).unwrap();
        let cfg = DtConfig {
            tau_rtg: 0.9,
            ..small_train_config(LossMode::RfNll, 700)
        };
        let (model, _) = train_policy(&data, &cfg, None).unwrap();
        // s3 sees returns {0, 100} with equal mass: the 0.9-expectile is 90
        let at_s3 = predict_rtg_state(&model, &StitchState::S3.one_hot());
        assert!(at_s3 >= 80.0, "predicted return at the merge state: {at_s3}");
        // s2 only ever leads to return 0
        let at_s2 = predict_rtg_state(&model, &StitchState::S2.one_hot());
        assert!(at_s2 <= 10.0, "predicted return at the poor start: {at_s2}");
        // untrained model still yields finite predictions
        let fresh = tiny_model(5, 1, 66);
        assert!(predict_rtg_state(&fresh, &StitchState::S3.one_hot()).is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut rng = RngStream::new(67);
        let data = bandit_dataset(100, &mut rng);
        let (model, _) = train_policy(&data, &small_train_config(LossMode::RfNll, 20), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        model.save(&path).unwrap();
        let loaded = DtModel::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.rtg_scale, model.rtg_scale);
        let batch = random_batch(1, 1, 2, 1, 68);
        let a = dt_forward(&model, &batch).unwrap();
        let b = dt_forward(&loaded, &batch).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
