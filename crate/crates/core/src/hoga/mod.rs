//! Surrogate refinement from query feedback.
//!
//! Every probe the attack sends yields a tuple `(X', X, P'_T, P_T)`: the
//! image before and after a small perturbation and the victim's probability
//! for the true class at both. Two losses pull the surrogate towards the
//! victim:
//!
//! - the forward loss matches the surrogate's class probability `S_T(X)` to
//!   the observed `P_T`;
//! - the backward loss matches the surrogate's directional derivative
//!   `∇_X log S_T(X) · (X' − X)` to the observed log-probability change
//!   scaled by the compensation factor γ.
//!
//! The backward loss contains a gradient, so its parameter gradient needs a
//! second differentiation pass through the surrogate.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::nets::Model;
use crate::{Graph, Tensor};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;
/// Summed `|Δ log P|` below this leaves γ unchanged.
pub const GAMMA_DENOM_FLOOR: f64 = 1e-12;

pub fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// One probe: perturbed image, image it was derived from, and the victim's
/// true-class probability at each.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTuple {
    pub x_post: Tensor,
    pub x_pre: Tensor,
    pub p_post: f64,
    pub p_pre: f64,
    pub label: usize,
}

/// Fixed-capacity tuple store, emptied after each training step.
#[derive(Clone, Debug)]
pub struct Buffer {
    entries: Vec<QueryTuple>,
    capacity: usize,
}

impl Buffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return contract("buffer capacity must be at least 1");
        }
        Ok(Self {
            entries: Vec::with_capacity(capacity),
            capacity,
        })
    }

    /// Append a tuple; returns true when the buffer is now full.
    pub fn push(&mut self, t: QueryTuple) -> Result<bool> {
        if self.is_full() {
            return contract("buffer is full; run a step and clear it first");
        }
        if t.x_post.shape() != t.x_pre.shape() {
            return Err(Error::Shape {
                op: "buffer push",
                left: t.x_post.shape().to_vec(),
                right: t.x_pre.shape().to_vec(),
            });
        }
        self.entries.push(t);
        Ok(self.is_full())
    }

    pub fn entries(&self) -> &[QueryTuple] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Which losses drive the parameter update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// `l_B + λ·l_F`
    #[default]
    Both,
    /// `l_B` alone.
    BackwardOnly,
    /// `λ·l_F` alone.
    ForwardOnly,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Both => "both",
            Objective::BackwardOnly => "backward",
            Objective::ForwardOnly => "forward",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "both" => Ok(Objective::Both),
            "backward" | "bl" => Ok(Objective::BackwardOnly),
            "forward" | "fl" => Ok(Objective::ForwardOnly),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

/// Learner state carried across steps (and across images in a campaign).
#[derive(Clone, Debug, PartialEq)]
pub struct HogaState {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    /// When false γ stays at its initial value.
    pub adaptive_gamma: bool,
    pub objective: Objective,
    pub steps: u64,
}

impl HogaState {
    pub fn new(gamma0: f64, lambda: f64, lr: f64) -> Result<Self> {
        let s = Self {
            gamma: gamma0,
            lambda,
            lr,
            adaptive_gamma: true,
            objective: Objective::Both,
            steps: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return contract(format!("gamma must be finite and positive, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return contract(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return contract(format!("learning rate must be non-negative, got {}", self.lr));
        }
        Ok(())
    }

    /// Momentum update of γ from one batch of predicted and observed changes.
    /// Returns the new γ (unchanged when the batch carries no signal).
    pub fn update_gamma(&mut self, pred: &[f64], log_post: &[f64], log_pre: &[f64]) -> Result<f64> {
        if let Some(e) = estimate_gamma(pred, log_post, log_pre)? {
            self.gamma = blend_gamma(self.gamma, e);
        }
        Ok(self.gamma)
    }
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return contract(format!("{what}: empty batch"));
    }
    if a != b {
        return Err(Error::Shape {
            op: what,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

/// `mean((S_T − P_T)²)`
pub fn forward_loss(s: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths("forward loss", s.len(), p.len())?;
    Ok(s.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64)
}

/// `mean((pred − γ·(log P' − log P))²)` where `pred` is the surrogate's
/// directional derivative per tuple.
pub fn backward_loss(pred: &[f64], log_post: &[f64], log_pre: &[f64], gamma: f64) -> Result<f64> {
    check_lengths("backward loss", pred.len(), log_post.len())?;
    check_lengths("backward loss", pred.len(), log_pre.len())?;
    let sum: f64 = pred
        .iter()
        .zip(log_post.iter().zip(log_pre))
        .map(|(d, (a, b))| (d - gamma * (a - b)).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `Σ|pred| / Σ|log P' − log P|`, or `None` when the denominator vanishes.
pub fn estimate_gamma(pred: &[f64], log_post: &[f64], log_pre: &[f64]) -> Result<Option<f64>> {
    check_lengths("gamma estimate", pred.len(), log_post.len())?;
    check_lengths("gamma estimate", pred.len(), log_pre.len())?;
    let num: f64 = pred.iter().map(|v| v.abs()).sum();
    let den: f64 = log_post.iter().zip(log_pre).map(|(a, b)| (a - b).abs()).sum();
    if !(den >= GAMMA_DENOM_FLOOR) || !num.is_finite() {
        return Ok(None);
    }
    let e = num / den;
    Ok((e > 0.0).then_some(e))
}

/// `0.9·γ + 0.1·estimate`
pub fn blend_gamma(gamma: f64, estimate: f64) -> f64 {
    0.9 * gamma + 0.1 * estimate
}

/// What one step saw, measured before the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub backward_loss: f64,
    pub forward_loss: f64,
    /// Directional derivatives `∇_X log S_T · Δ` per tuple.
    pub pred: Vec<f64>,
    pub gamma: f64,
}

/// Stacked view of a tuple batch.
struct Batch {
    pre: Tensor,
    delta: Tensor,
    labels: Vec<usize>,
    p_pre: Vec<f64>,
    log_post: Vec<f64>,
    log_pre: Vec<f64>,
}

fn stack_batch(tuples: &[QueryTuple]) -> Result<Batch> {
    if tuples.is_empty() {
        return contract("cannot train on an empty buffer");
    }
    let pre: Vec<&Tensor> = tuples.iter().map(|t| &t.x_pre).collect();
    let deltas = tuples
        .iter()
        .map(|t| t.x_post.sub(&t.x_pre))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        pre: Tensor::stack(&pre)?,
        delta: Tensor::stack(&deltas.iter().collect::<Vec<_>>())?,
        labels: tuples.iter().map(|t| t.label).collect(),
        p_pre: tuples.iter().map(|t| t.p_pre).collect(),
        log_post: tuples.iter().map(|t| safe_ln(t.p_post)).collect(),
        log_pre: tuples.iter().map(|t| safe_ln(t.p_pre)).collect(),
    })
}

/// The training objective and its parameter gradients for one batch, without
/// touching the model or γ.
pub fn losses_and_grads(
    surrogate: &Model,
    tuples: &[QueryTuple],
    state: &HogaState,
) -> Result<(StepReport, Vec<Tensor>)> {
    let b = stack_batch(tuples)?;
    let n = tuples.len();
    let d = b.pre.len() / n;
    let mut g = Graph::new();
    let params = surrogate.bind(&mut g, true);
    let x = g.leaf(b.pre, true);
    let logits = surrogate.forward(&mut g, x, &params)?;
    let ls = g.log_softmax(logits)?;
    let lt = g.gather(ls, &b.labels)?;

    let st = g.exp(lt);
    let p_obs = g.constant(Tensor::from_vec(b.p_pre));
    let l_f = g.mse(st, p_obs)?;

    // samples are independent, so d(Σ log S_T)/dX holds each tuple's own
    // input gradient in its batch slot
    let total_lt = g.sum(lt);
    let gs = g.grad_as_node(total_lt, x)?;
    let delta = g.constant(b.delta);
    let prod = g.mul(gs, delta)?;
    let flat = g.reshape(prod, &[n, d])?;
    let pred = g.row_sum(flat)?;
    let target: Vec<f64> = b
        .log_post
        .iter()
        .zip(&b.log_pre)
        .map(|(a, p)| state.gamma * (a - p))
        .collect();
    let target = g.constant(Tensor::from_vec(target));
    let l_b = g.mse(pred, target)?;

    let root = match state.objective {
        Objective::Both => {
            let wf = g.scale(l_f, state.lambda);
            g.add(l_b, wf)?
        }
        Objective::BackwardOnly => l_b,
        Objective::ForwardOnly => g.scale(l_f, state.lambda),
    };
    let report = StepReport {
        backward_loss: g.value(l_b).item(),
        forward_loss: g.value(l_f).item(),
        pred: g.value(pred).data().to_vec(),
        gamma: state.gamma,
    };
    let grads = g.backward(root, &params)?;
    Ok((report, grads))
}

/// One learning step on a full buffer: losses with the current γ, then the γ
/// update, then one SGD step on the surrogate. The caller clears the buffer.
pub fn step(surrogate: &mut Model, buffer: &Buffer, state: &mut HogaState) -> Result<StepReport> {
    if !buffer.is_full() {
        return contract(format!(
            "step needs a full buffer ({} of {})",
            buffer.len(),
            buffer.capacity()
        ));
    }
    step_on(surrogate, buffer.entries(), state)
}

/// [`step`] on an arbitrary non-empty batch.
pub fn step_on(surrogate: &mut Model, tuples: &[QueryTuple], state: &mut HogaState) -> Result<StepReport> {
    state.validate()?;
    let (report, grads) = losses_and_grads(surrogate, tuples, state)?;
    if state.adaptive_gamma {
        let log_post: Vec<f64> = tuples.iter().map(|t| safe_ln(t.p_post)).collect();
        let log_pre: Vec<f64> = tuples.iter().map(|t| safe_ln(t.p_pre)).collect();
        state.update_gamma(&report.pred, &log_post, &log_pre)?;
    }
    if grads.iter().all(Tensor::all_finite) {
        surrogate.sgd_step(&grads, state.lr)?;
    } else {
        log::warn!("skipping surrogate update with non-finite gradients");
    }
    state.steps += 1;
    Ok(report)
}
