//! Score-based greedy attacks under an l2 budget.
//!
//! All variants share one loop: start from the clean image, propose a
//! candidate, pay one oracle query for it, keep it only if the margin loss
//! strictly drops, stop at the first misclassification or when the query
//! budget runs out.
//!
//! | variant     | proposals                                                        |
//! |-------------|------------------------------------------------------------------|
//! | `simba`     | ±ε on single pixels, visited in random order                     |
//! | `simba_plus`| ±ε smoothed stamps at pixels drawn from a surrogate gradient map  |
//! | `simba_pp`  | as `simba_plus`, plus a surrogate transfer step every `n_q` rounds|
//! | `leba`      | as `simba_pp`, and in train mode every probe also trains the surrogate |

mod engine;
mod loss;
mod sampler;
mod timi;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::hoga::{HogaState, Objective};
use crate::tensor::gaussian_kernel;
use crate::Tensor;

pub use engine::{leba, simba, simba_plus, simba_pp};
pub use loss::{attack_loss, clip_l2, project_l2, surrogate_loss_grad};
pub use sampler::{sample_perturbation, stamp, CoordinateSampler};
pub use timi::timi;

/// Whether LeBA updates its surrogate while attacking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Test => "test",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Mode::Train),
            "test" => Ok(Mode::Test),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Query step size in pixel units.
    pub epsilon: f64,
    /// l2 budget around the clean image.
    pub zeta: f64,
    /// Run a transfer step every `n_q` rounds (starting at round 0);
    /// `None` never runs one.
    pub n_q: Option<usize>,
    /// Iterations per transfer step.
    pub n_t: usize,
    /// Momentum of the transfer step.
    pub mu: f64,
    /// Step of each transfer iteration; defaults to `zeta / n_t`.
    pub epsilon_t: Option<f64>,
    /// Gaussian kernel `(size, sigma)` used both to smooth surrogate
    /// gradients and to shape probes.
    pub kernel: (usize, f64),
    pub buffer_size: usize,
    pub lambda: f64,
    pub gamma0: f64,
    pub max_queries: u64,
    pub mode: Mode,
    pub seed: u64,
    /// SGD learning rate of the surrogate update.
    pub hoga_lr: f64,
    pub adaptive_gamma: bool,
    pub objective: Objective,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            zeta: 4.0,
            n_q: Some(20),
            n_t: 10,
            mu: 0.9,
            epsilon_t: None,
            kernel: (5, 1.5),
            buffer_size: 24,
            lambda: 0.01,
            gamma0: 3.0,
            max_queries: 2000,
            mode: Mode::Train,
            seed: 0,
            hoga_lr: 1e-3,
            adaptive_gamma: true,
            objective: Objective::Both,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.epsilon) {
            return contract(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !pos(self.zeta) {
            return contract(format!("zeta must be positive, got {}", self.zeta));
        }
        if self.n_q == Some(0) {
            return contract("n_q must be at least 1");
        }
        if self.n_t == 0 {
            return contract("n_t must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return contract(format!("mu must lie in [0, 1), got {}", self.mu));
        }
        if let Some(e) = self.epsilon_t {
            if !pos(e) {
                return contract(format!("epsilon_t must be positive, got {e}"));
            }
        }
        if self.buffer_size == 0 {
            return contract("buffer_size must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return contract(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !pos(self.gamma0) {
            return contract(format!("gamma0 must be positive, got {}", self.gamma0));
        }
        if self.max_queries == 0 {
            return contract("max_queries must be at least 1");
        }
        if !(self.hoga_lr >= 0.0 && self.hoga_lr.is_finite()) {
            return contract(format!("hoga_lr must be non-negative, got {}", self.hoga_lr));
        }
        gaussian_kernel(self.kernel.0, self.kernel.1)?;
        Ok(())
    }

    pub fn kernel_tensor(&self) -> Result<Tensor> {
        gaussian_kernel(self.kernel.0, self.kernel.1)
    }

    pub fn transfer_step(&self) -> f64 {
        self.epsilon_t.unwrap_or(self.zeta / self.n_t as f64)
    }

    /// Fresh surrogate-learning state from this config.
    pub fn hoga_state(&self) -> Result<HogaState> {
        let mut s = HogaState::new(self.gamma0, self.lambda, self.hoga_lr)?;
        s.adaptive_gamma = self.adaptive_gamma;
        s.objective = self.objective;
        Ok(s)
    }
}

/// What produced a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// The clean image.
    Init,
    /// A ±ε probe.
    Probe,
    /// The result of a transfer step.
    Transfer,
}

/// One query of an attack run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based query index within the run.
    pub query: u64,
    /// Margin loss of the queried image.
    pub loss: f64,
    pub accepted: bool,
    pub kind: QueryKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub success: bool,
    pub queries: u64,
    pub x_adv: Tensor,
    pub l2_dist: f64,
    /// Margin loss at `x_adv`.
    pub loss: f64,
    pub trace: Vec<TraceEntry>,
    /// Surrogate updates made during the run (LeBA train mode only).
    pub hoga_steps: u64,
}
