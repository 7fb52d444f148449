//! Running one attack variant over an attack set, repeatedly.

use std::cell::Cell;
use std::fs;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::{leba, simba, simba_plus, simba_pp, AttackConfig, AttackResult, Mode, TraceEntry};
use crate::error::{contract, io_err, Error, Result};
use crate::hoga::HogaState;
use crate::nets::{load_model, save_weights, Model};
use crate::oracle::{DefenseSpec, MeteredOracle, OracleResponse, RemoteOracle, ScoreOracle};
use crate::Tensor;

use super::config::{ExperimentConfig, Variant};
use super::dataset::{attack_set, load_dataset, split_paths, AttackSet};
use super::metrics::{metrics, MetricsRow};
use super::report::{emit_report, save_adversarial};

/// Where victim scores come from.
#[derive(Clone, Debug)]
pub enum OracleSource {
    /// A fresh metered oracle (budget = `max_queries`) per image.
    Local { victim: Arc<Model>, defense: DefenseSpec },
    /// One connection per repeat to a running oracle server.
    Remote(String),
}

/// One attacked image, as logged to the JSON-lines trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub variant: String,
    pub repeat: usize,
    /// Seed of this image's attack rng.
    pub seed: u64,
    /// Index of the image in its dataset split.
    pub image: usize,
    pub label: usize,
    pub success: bool,
    pub queries: u64,
    pub l2_dist: f64,
    pub loss: f64,
    pub hoga_steps: u64,
    pub trace: Vec<TraceEntry>,
}

/// Results of one pass over the attack set.
#[derive(Clone, Debug)]
pub struct RepeatOutcome {
    pub row: MetricsRow,
    pub records: Vec<ImageRecord>,
    pub adversarial: Vec<Tensor>,
    /// The surrogate after the pass (changed only by `leba_train`).
    pub surrogate: Option<Model>,
    /// Final γ for LeBA variants.
    pub gamma: Option<f64>,
}

/// Results of a whole experiment.
#[derive(Clone, Debug)]
pub struct Campaign {
    /// One row per repeat, then the pooled row.
    pub rows: Vec<MetricsRow>,
    pub records: Vec<ImageRecord>,
    pub repeats: Vec<RepeatOutcome>,
}

/// Attack-rng seed for image `index` under repeat seed `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counts answered queries and the span of server counter values seen.
struct Tally<'a, O: ?Sized> {
    inner: &'a O,
    answered: Cell<u64>,
    first: Cell<Option<u64>>,
    last: Cell<u64>,
}

impl<'a, O: ScoreOracle + ?Sized> Tally<'a, O> {
    fn new(inner: &'a O) -> Self {
        Self {
            inner,
            answered: Cell::new(0),
            first: Cell::new(None),
            last: Cell::new(0),
        }
    }

    fn span(&self) -> u64 {
        self.first.get().map_or(0, |f| self.last.get() - f + 1)
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for Tally<'_, O> {
    fn query(&self, x: &Tensor) -> Result<OracleResponse> {
        let r = self.inner.query(x)?;
        self.answered.set(self.answered.get() + 1);
        if self.first.get().is_none() {
            self.first.set(Some(r.query_index));
        }
        self.last.set(r.query_index);
        Ok(r)
    }

    fn queries_used(&self) -> u64 {
        self.answered.get()
    }
}

struct Attacker {
    variant: Variant,
    cfg: AttackConfig,
    surrogate: Option<Model>,
    state: HogaState,
}

impl Attacker {
    fn attack<O: ScoreOracle + ?Sized>(&mut self, x: &Tensor, y: usize, oracle: &O) -> Result<AttackResult> {
        let sur = || {
            self.surrogate
                .as_ref()
                .ok_or_else(|| Error::Config(format!("variant {} needs a surrogate", self.variant)))
        };
        match self.variant {
            Variant::Simba => simba(x, y, oracle, &self.cfg),
            Variant::SimbaPlus => simba_plus(x, y, oracle, sur()?, &self.cfg),
            Variant::SimbaPp => simba_pp(x, y, oracle, sur()?, &self.cfg),
            Variant::LebaTrain | Variant::LebaTest => {
                let s = self
                    .surrogate
                    .as_mut()
                    .ok_or_else(|| Error::Config(format!("variant {} needs a surrogate", self.variant)))?;
                leba(x, y, oracle, s, &self.cfg, &mut self.state)
            }
        }
    }
}

/// Attack every image of `set` once with repeat seed `seed`.
///
/// Checks after each image that the attack's query count equals what the
/// oracle metered.
pub fn run_repeat(
    source: &OracleSource,
    surrogate: Option<&Model>,
    set: &AttackSet,
    variant: Variant,
    attack: &AttackConfig,
    seed: u64,
    repeat: usize,
) -> Result<RepeatOutcome> {
    let mode = if variant == Variant::LebaTest { Mode::Test } else { Mode::Train };
    let mut attacker = Attacker {
        variant,
        cfg: AttackConfig { mode, ..attack.clone() },
        surrogate: surrogate.cloned(),
        state: attack.hoga_state()?,
    };
    let remote = match source {
        OracleSource::Remote(addr) => Some(RemoteOracle::connect(addr.as_str())?),
        OracleSource::Local { .. } => None,
    };
    let mut records = Vec::with_capacity(set.len());
    let mut adversarial = Vec::with_capacity(set.len());
    for (k, (x, &y)) in set.images.iter().zip(&set.labels).enumerate() {
        let index = set.indices[k];
        attacker.cfg.seed = image_seed(seed, index);
        let result = match (source, &remote) {
            (OracleSource::Local { victim, defense }, _) => {
                let oracle = MeteredOracle::wrap_defense(victim.clone(), defense, attack.max_queries)?;
                let r = attacker.attack(x, y, &oracle);
                let r = r.map_err(|e| Error::Image { index, source: Box::new(e) })?;
                if r.queries != oracle.queries_used() {
                    return contract(format!(
                        "image {index}: attack reports {} queries, oracle metered {}",
                        r.queries,
                        oracle.queries_used()
                    ));
                }
                r
            }
            (OracleSource::Remote(_), Some(client)) => {
                let tally = Tally::new(client);
                let r = attacker.attack(x, y, &tally);
                let r = r.map_err(|e| Error::Image { index, source: Box::new(e) })?;
                if r.queries != tally.queries_used() {
                    return contract(format!(
                        "image {index}: attack reports {} queries, {} were answered",
                        r.queries,
                        tally.queries_used()
                    ));
                }
                if tally.span() != r.queries {
                    log::warn!("image {index}: server counter advanced by {} for {} queries (shared server?)", tally.span(), r.queries);
                }
                r
            }
            (OracleSource::Remote(_), None) => unreachable!("client connected above"),
        };
        records.push(ImageRecord {
            variant: variant.to_string(),
            repeat,
            seed: attacker.cfg.seed,
            image: index,
            label: y,
            success: result.success,
            queries: result.queries,
            l2_dist: result.l2_dist,
            loss: result.loss,
            hoga_steps: result.hoga_steps,
            trace: result.trace,
        });
        adversarial.push(result.x_adv);
    }
    let outcomes: Vec<(bool, u64)> = records.iter().map(|r| (r.success, r.queries)).collect();
    let is_leba = matches!(variant, Variant::LebaTrain | Variant::LebaTest);
    Ok(RepeatOutcome {
        row: metrics(variant.name(), Some(seed), &outcomes, attack.max_queries),
        records,
        adversarial,
        gamma: is_leba.then_some(attacker.state.gamma),
        surrogate: attacker.surrogate,
    })
}

/// Run `repeats` passes with seeds `seed, seed + 1, …`. Every pass starts
/// from the same surrogate weights. Returns per-repeat rows plus the pooled
/// row.
pub fn run_campaign(
    source: &OracleSource,
    surrogate: Option<&Model>,
    set: &AttackSet,
    variant: Variant,
    attack: &AttackConfig,
    seed: u64,
    repeats: usize,
) -> Result<Campaign> {
    if repeats == 0 {
        return contract("repeats must be at least 1");
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut outs = Vec::new();
    for r in 0..repeats {
        let out = run_repeat(source, surrogate, set, variant, attack, seed + r as u64, r)?;
        log::info!(
            "{variant} seed {}: asr {:.4} avg_q' {:.2}",
            seed + r as u64,
            out.row.asr,
            out.row.avg_q_prime
        );
        rows.push(out.row.clone());
        records.extend(out.records.iter().cloned());
        outs.push(out);
    }
    let pooled: Vec<(bool, u64)> = records.iter().map(|r| (r.success, r.queries)).collect();
    rows.push(metrics(variant.name(), None, &pooled, attack.max_queries));
    Ok(Campaign {
        rows,
        records,
        repeats: outs,
    })
}

/// Load data and models named by `cfg` and run the campaign in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Campaign> {
    cfg.validate()?;
    let (images, labels) = split_paths(&cfg.data_dir, &cfg.split);
    let data = load_dataset(images, labels, cfg.classes, None)?;
    let victim = Arc::new(load_model(&cfg.victim)?);
    let surrogate = match (&cfg.surrogate, cfg.variant.needs_surrogate()) {
        (Some(p), true) => Some(load_model(p)?),
        _ => None,
    };
    let set = attack_set(&victim, &data, cfg.skip, cfg.n_images)?;
    if set.is_empty() {
        return contract("attack set is empty");
    }
    let source = match &cfg.remote {
        Some(addr) => OracleSource::Remote(addr.clone()),
        None => OracleSource::Local {
            victim,
            defense: cfg.defense.clone(),
        },
    };
    run_campaign(
        &source,
        surrogate.as_ref(),
        &set,
        cfg.variant,
        &cfg.attack_config(),
        cfg.seed,
        cfg.repeats,
    )
}

/// [`run_experiment`], then write the report, the effective config, learned
/// surrogates (`leba_train`) and optionally adversarial images to
/// `cfg.out_dir`.
pub fn run_and_report(cfg: &ExperimentConfig) -> Result<Campaign> {
    let campaign = run_experiment(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(io_err(&path))?;
    emit_report(&campaign.rows, &campaign.records, dir)?;
    for (r, out) in campaign.repeats.iter().enumerate() {
        if cfg.variant == Variant::LebaTrain {
            if let Some(s) = &out.surrogate {
                save_weights(s, dir.join(format!("surrogate_{}_r{r}.w", cfg.variant)))?;
            }
        }
        if cfg.save_images {
            save_adversarial(dir, cfg.variant.name(), r, &out.adversarial)?;
        }
    }
    Ok(campaign)
}
