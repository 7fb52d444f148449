//! The black-box boundary around a victim model.
//!
//! An attacker only ever sees [`ScoreOracle`]: send an image, get the full
//! class-probability vector back and pay one query. Neither parameters nor
//! gradients cross this interface.

mod adv_train;
mod defense;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::nets::Model;
use crate::Tensor;

pub use adv_train::{adversarial_train, fgsm_accuracy, fgsm_examples};
pub use defense::DefenseSpec;
pub use wire::{serve, spawn_server, RemoteOracle, ServerHandle};

use defense::Defense;

/// One query's answer.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResponse {
    pub probs: Vec<f64>,
    /// Value of the oracle's counter after this query (1 for the first).
    pub query_index: u64,
}

/// Score-only access to a classifier.
pub trait ScoreOracle {
    /// Evaluate one `[C, H, W]` image. Costs exactly one query on success;
    /// refused queries (budget, malformed input) cost nothing.
    fn query(&self, x: &Tensor) -> Result<OracleResponse>;

    /// Queries answered so far.
    fn queries_used(&self) -> u64;
}

/// Query limit and usage snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryBudget {
    pub max_queries: u64,
    pub used: u64,
}

/// A local victim behind a metered, optionally defended, score interface.
#[derive(Debug)]
pub struct MeteredOracle {
    victim: Arc<Model>,
    defense: Defense,
    max_queries: u64,
    used: AtomicU64,
}

impl MeteredOracle {
    pub fn new(victim: Arc<Model>, max_queries: u64) -> Self {
        Self {
            victim,
            defense: Defense::None,
            max_queries,
            used: AtomicU64::new(0),
        }
    }

    /// Wrap `victim` so `spec` is applied to every query before the forward
    /// pass. The transform is invisible to the caller.
    pub fn wrap_defense(victim: Arc<Model>, spec: &DefenseSpec, max_queries: u64) -> Result<Self> {
        Ok(Self {
            defense: Defense::compile(spec)?,
            ..Self::new(victim, max_queries)
        })
    }

    pub fn budget(&self) -> QueryBudget {
        QueryBudget {
            max_queries: self.max_queries,
            used: self.used.load(Ordering::SeqCst),
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.victim.spec().input_shape
    }

    pub fn classes(&self) -> usize {
        self.victim.spec().classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = self.victim.spec().input_dims();
        if x.shape() != dims {
            return Err(Error::Shape {
                op: "oracle query",
                left: x.shape().to_vec(),
                right: dims.to_vec(),
            });
        }
        if !x.all_finite() {
            return contract("oracle query contains non-finite pixels");
        }
        Ok(())
    }
}

impl ScoreOracle for MeteredOracle {
    fn query(&self, x: &Tensor) -> Result<OracleResponse> {
        self.check_input(x)?;
        let max = self.max_queries;
        let index = self
            .used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| (u < max).then_some(u + 1))
            .map_err(|used| Error::BudgetExceeded { used })?
            + 1;
        let probs = self.victim.predict(&self.defense.apply(x)?)?;
        Ok(OracleResponse {
            probs: probs.into_data(),
            query_index: index,
        })
    }

    fn queries_used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }
}
