use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hoga::{self, Buffer, HogaState, QueryTuple};
use crate::nets::Model;
use crate::oracle::ScoreOracle;
use crate::tensor::smooth;
use crate::Tensor;

use super::loss::{attack_loss, clip_l2, surrogate_loss_grad};
use super::sampler::{stamp, CoordinateSampler};
use super::timi::timi;
use super::{AttackConfig, AttackResult, Mode, QueryKind, TraceEntry};

enum Guide<'a> {
    None,
    Frozen(&'a Model),
    Learning {
        model: &'a mut Model,
        state: &'a mut HogaState,
        buffer: Buffer,
    },
}

impl Guide<'_> {
    fn model(&self) -> Option<&Model> {
        match self {
            Guide::None => None,
            Guide::Frozen(m) => Some(m),
            Guide::Learning { model, .. } => Some(model),
        }
    }
}

struct Run<'a, O: ScoreOracle + ?Sized> {
    oracle: &'a O,
    x: &'a Tensor,
    y: usize,
    cfg: &'a AttackConfig,
    x_adv: Tensor,
    p_y: f64,
    loss: f64,
    queries: u64,
    out_of_budget: bool,
    trace: Vec<TraceEntry>,
}

struct Answer {
    loss: f64,
    p_y: f64,
}

impl<O: ScoreOracle + ?Sized> Run<'_, O> {
    /// One paid query; `None` once the budget is spent.
    fn query(&mut self, cand: &Tensor, kind: QueryKind) -> Result<Option<Answer>> {
        if self.queries >= self.cfg.max_queries {
            self.out_of_budget = true;
            return Ok(None);
        }
        let r = match self.oracle.query(cand) {
            Ok(r) => r,
            Err(Error::BudgetExceeded { .. }) => {
                self.out_of_budget = true;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        self.queries += 1;
        let loss = attack_loss(&r.probs, self.y)?;
        self.trace.push(TraceEntry {
            query: self.queries,
            loss,
            accepted: false,
            kind,
        });
        Ok(Some(Answer {
            loss,
            p_y: r.probs[self.y],
        }))
    }

    /// Keep `cand` if it strictly lowers the loss.
    fn offer(&mut self, cand: Tensor, a: &Answer) -> bool {
        if a.loss < self.loss {
            self.x_adv = cand;
            self.loss = a.loss;
            self.p_y = a.p_y;
            if let Some(t) = self.trace.last_mut() {
                t.accepted = true;
            }
            true
        } else {
            false
        }
    }

    fn done(&self) -> bool {
        self.out_of_budget || self.loss < 0.0
    }

    fn finish(self, hoga_steps: u64) -> Result<AttackResult> {
        Ok(AttackResult {
            success: self.loss < 0.0,
            queries: self.queries,
            l2_dist: self.x_adv.distance_l2(self.x)?,
            x_adv: self.x_adv,
            loss: self.loss,
            trace: self.trace,
            hoga_steps,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flavor {
    /// Single pixels in random order, no surrogate.
    Simba,
    /// Surrogate-guided probes; transfer steps when `n_q` is set.
    Guided,
}

fn run<O: ScoreOracle + ?Sized>(
    x: &Tensor,
    y: usize,
    oracle: &O,
    mut guide: Guide<'_>,
    cfg: &AttackConfig,
    flavor: Flavor,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run = Run {
        oracle,
        x,
        y,
        cfg,
        x_adv: x.clone(),
        p_y: 0.0,
        loss: f64::INFINITY,
        queries: 0,
        out_of_budget: false,
        trace: Vec::new(),
    };
    let Some(a) = run.query(x, QueryKind::Init)? else {
        return run.finish(0);
    };
    run.offer(x.clone(), &a);

    let kernel = match flavor {
        Flavor::Simba => Tensor::ones(&[1, 1]),
        Flavor::Guided => cfg.kernel_tensor()?,
    };
    let transfer_every = match flavor {
        Flavor::Simba => None,
        Flavor::Guided => cfg.n_q,
    };
    let mut sampler = match (flavor, transfer_every, guide.model()) {
        (Flavor::Simba, ..) | (_, _, None) => CoordinateSampler::permutation(x.len()),
        // replaced by the transfer step's map in round 0
        (_, Some(_), Some(_)) => CoordinateSampler::Uniform(x.len()),
        (_, None, Some(m)) => {
            let (_, grad) = surrogate_loss_grad(m, x, y)?;
            CoordinateSampler::from_map(&smooth(&grad, &kernel)?)
        }
    };
    let mut hoga_steps = 0;

    let mut round = 0usize;
    while !run.done() {
        match (transfer_every, guide.model()) {
            (Some(n_q), Some(m)) if round % n_q == 0 => {
                let (cand, map) = timi(m, &run.x_adv, x, y, cfg)?;
                sampler = CoordinateSampler::from_map(&map);
                if let Some(a) = run.query(&cand, QueryKind::Transfer)? {
                    run.offer(cand, &a);
                }
            }
            _ => {
                let coord = sampler.draw(&mut rng);
                let delta = stamp(x.shape(), coord, &kernel)?;
                for alpha in [cfg.epsilon, -cfg.epsilon] {
                    let step = run.x_adv.zip_map(&delta, "probe", |a, d| a + alpha * d)?;
                    let cand = clip_l2(&step, x, cfg.zeta)?;
                    let Some(a) = run.query(&cand, QueryKind::Probe)? else {
                        break;
                    };
                    if let Guide::Learning { model, state, buffer } = &mut guide {
                        let full = buffer.push(QueryTuple {
                            x_post: cand.clone(),
                            x_pre: run.x_adv.clone(),
                            p_post: a.p_y,
                            p_pre: run.p_y,
                            label: y,
                        })?;
                        if full {
                            hoga::step(model, buffer, state)?;
                            buffer.clear();
                            hoga_steps += 1;
                        }
                    }
                    if run.offer(cand, &a) {
                        break;
                    }
                }
            }
        }
        round += 1;
    }
    run.finish(hoga_steps)
}

/// Random-order single-pixel probes; no surrogate.
pub fn simba<O: ScoreOracle + ?Sized>(x: &Tensor, y: usize, oracle: &O, cfg: &AttackConfig) -> Result<AttackResult> {
    run(x, y, oracle, Guide::None, cfg, Flavor::Simba)
}

/// Probes drawn from the surrogate's smoothed gradient map at the clean
/// image, computed once. Ignores `cfg.n_q`.
pub fn simba_plus<O: ScoreOracle + ?Sized>(
    x: &Tensor,
    y: usize,
    oracle: &O,
    surrogate: &Model,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig { n_q: None, ..cfg.clone() };
    run(x, y, oracle, Guide::Frozen(surrogate), &cfg, Flavor::Guided)
}

/// Guided probes interleaved with transfer steps every `cfg.n_q` rounds,
/// the first at round 0. With `n_q = None` this is [`simba_plus`].
pub fn simba_pp<O: ScoreOracle + ?Sized>(
    x: &Tensor,
    y: usize,
    oracle: &O,
    surrogate: &Model,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run(x, y, oracle, Guide::Frozen(surrogate), cfg, Flavor::Guided)
}

/// [`simba_pp`] whose surrogate, in [`Mode::Train`], learns from every probe:
/// each one is buffered and a full buffer triggers one surrogate update.
/// The buffer starts empty for every image; `surrogate` and `state` carry
/// over between calls. In [`Mode::Test`] nothing is updated.
pub fn leba<O: ScoreOracle + ?Sized>(
    x: &Tensor,
    y: usize,
    oracle: &O,
    surrogate: &mut Model,
    cfg: &AttackConfig,
    state: &mut HogaState,
) -> Result<AttackResult> {
    let guide = match cfg.mode {
        Mode::Test => Guide::Frozen(surrogate),
        Mode::Train => Guide::Learning {
            model: surrogate,
            state,
            buffer: Buffer::new(cfg.buffer_size)?,
        },
    };
    run(x, y, oracle, guide, cfg, Flavor::Guided)
}
