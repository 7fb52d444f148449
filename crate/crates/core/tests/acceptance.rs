//! Runs every acceptance criterion once and prints one PASS/FAIL line each.
//! With `LEBA_ACCEPT_STRICT=1` the process exits non-zero if any criterion
//! fails; otherwise failures are reported but do not fail `cargo test`.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use leba_core::attack::{clip_l2, stamp, AttackConfig};
use leba_core::harness::{
    attack_set, avgq_convert, desk_attack, load_splits, metrics, run_campaign, run_repeat, train_models, AttackSet,
    Campaign, MetricsRow, OracleSource, RepeatOutcome, TrainPlan, TrainedModels, Variant,
};
use leba_core::hoga::{blend_gamma, HogaState, Objective};
use leba_core::nets::{init_model, LabeledDataset, Model, ModelSpec};
use leba_core::oracle::{spawn_server, DefenseSpec, MeteredOracle, RemoteOracle, ScoreOracle};
use leba_core::tensor::gaussian_kernel;
use leba_core::{Graph, NodeId, Result, Tensor};
use rand::Rng;

const SEED: u64 = 1;
const REPEATS: usize = 3;
const N_IMAGES: usize = 200;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

struct Bench {
    models: TrainedModels,
    test: LabeledDataset,
    s1: AttackSet,
    s2: AttackSet,
    attack: AttackConfig,
    /// Every metrics row produced, for the AVG.Q conversion check.
    rows: Vec<MetricsRow>,
    pp_s1: Option<Campaign>,
    leba_s1: Option<Campaign>,
}

impl Bench {
    fn new() -> Result<Self> {
        let models = train_models(&TrainPlan {
            data_dir: data_dir(),
            ..TrainPlan::default()
        })?;
        let (_, test) = load_splits(&data_dir(), 10)?;
        let s1 = attack_set(&models.victim.model, &test, 0, N_IMAGES)?;
        let after = s1.indices.last().map_or(0, |i| i + 1);
        let s2 = attack_set(&models.victim.model, &test, after, N_IMAGES)?;
        println!(
            "# victim test acc {:.3}, surrogate test acc {:.3}, |S1| = {}, |S2| = {}",
            models.victim.test_acc,
            models.surrogate.test_acc,
            s1.len(),
            s2.len()
        );
        Ok(Self {
            models,
            test,
            s1,
            s2,
            attack: AttackConfig {
                max_queries: 2000,
                ..desk_attack()
            },
            rows: Vec::new(),
            pp_s1: None,
            leba_s1: None,
        })
    }

    fn victim(&self) -> Arc<Model> {
        Arc::new(self.models.victim.model.clone())
    }

    fn local(&self) -> OracleSource {
        OracleSource::Local {
            victim: self.victim(),
            defense: DefenseSpec::None,
        }
    }

    fn run(
        &mut self,
        source: &OracleSource,
        set: &AttackSet,
        variant: Variant,
        attack: &AttackConfig,
        surrogate: Option<&Model>,
    ) -> Result<Campaign> {
        let sur = surrogate.unwrap_or(&self.models.surrogate.model);
        let c = run_campaign(source, Some(sur), set, variant, attack, SEED, REPEATS)?;
        self.rows.extend(c.rows.iter().cloned());
        Ok(c)
    }

    fn desk(&mut self, variant: Variant) -> Result<Campaign> {
        let (source, set, attack) = (self.local(), self.s1.clone(), self.attack.clone());
        self.run(&source, &set, variant, &attack, None)
    }
}

fn pooled(c: &Campaign) -> &MetricsRow {
    c.rows.last().expect("pooled row")
}

/// Relative gap `(hi − lo) / hi`.
fn gap(lo: f64, hi: f64) -> f64 {
    (hi - lo) / hi
}

// ---- criteria ---------------------------------------------------------------

fn c1_first_order() -> Result<Verdict> {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let cases = primitives();
    for (k, c) in cases.iter().enumerate() {
        worst = worst.max(gradcheck(&c.inputs, 1e-5, &squared_readout(c, k as u64)));
    }
    let mut r = rng(21);
    let mlp = init_model(&ModelSpec::mlp(&[6, 5], (1, 4, 4), 4, 1))?;
    let cnn = init_model(&ModelSpec::tiny_cnn(&[2, 3], 3, (1, 8, 8), 4, 2))?;
    for (m, shape) in [(&mlp, [2, 1, 4, 4]), (&cnn, [2, 1, 8, 8])] {
        let x = rand_tensor(&mut r, &shape, 0.0, 1.0);
        let f = |g: &mut Graph, ids: &[NodeId]| log_target(m, g, ids[0], &ids[1..], &[1, 3]);
        worst = worst.max(gradcheck(&model_inputs(m, &x), 1e-5, &f));
    }
    worst = worst.max(gradcheck(&composite_inputs(6), 1e-5, &composite));
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 30.0,
        format!("max rel err {worst:.2e} over {} primitives + 3 nets, {secs:.1} s", cases.len()),
    )
}

fn c2_high_order() -> Result<Verdict> {
    let t = Instant::now();
    let mut r = rng(22);
    let mlp = init_model(&ModelSpec::mlp(&[6], (1, 4, 4), 3, 4))?;
    let cnn = init_model(&ModelSpec::tiny_cnn(&[2, 3], 3, (1, 6, 6), 3, 5))?;
    let mut errs = Vec::new();
    for (m, shape) in [(&mlp, [2, 1, 4, 4]), (&cnn, [2, 1, 6, 6])] {
        let x = rand_tensor(&mut r, &shape, 0.0, 1.0);
        let dir = rand_tensor(&mut r, &shape, -1.0, 1.0);
        let f = |g: &mut Graph, ids: &[NodeId]| log_target(m, g, ids[0], &ids[1..], &[0, 2]);
        errs.push(double_gradcheck(&model_inputs(m, &x), &dir, 1e-4, &f));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        errs.iter().all(|&e| e < 1e-3) && secs < 60.0,
        format!("rel err mlp {:.2e}, tinycnn {:.2e}, {secs:.1} s", errs[0], errs[1]),
    )
}

fn c3_taylor(b: &Bench) -> Result<Verdict> {
    let victim = &b.models.victim.model;
    let (ks, sigma) = b.attack.kernel;
    let kernel = gaussian_kernel(ks, sigma)?;
    let scales = [1e-2, 5e-3, 2.5e-3];
    let mut sums = [0.0; 3];
    let mut r = rng(23);
    for i in 0..50 {
        let x = b.test.image(i)?;
        let y = b.test.labels()[i];
        let coord = r.gen_range(0..x.len());
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let delta = stamp(x.shape(), coord, &kernel)?.scale(sign);
        let g = victim.grad_input(&x, y)?;
        let lp0 = victim.log_probs(&x)?.data()[y];
        for (k, s) in scales.iter().enumerate() {
            let step = delta.scale(*s);
            let lp = victim.log_probs(&x.add(&step)?)?.data()[y];
            sums[k] += (g.dot(&step)? - (lp - lp0)).abs();
        }
    }
    let ratios = [sums[0] / sums[1], sums[1] / sums[2]];
    verdict(
        ratios.iter().all(|q| (3.2..=4.8).contains(q)),
        format!(
            "mean residuals {:.3e} {:.3e} {:.3e}, ratios {:.3} {:.3}",
            sums[0] / 50.0,
            sums[1] / 50.0,
            sums[2] / 50.0,
            ratios[0],
            ratios[1]
        ),
    )
}

fn c4_clip() -> Result<Verdict> {
    let mut r = rng(24);
    let zeta = 4.0;
    let (mut feasible, mut idem, mut interior) = (true, 0.0f64, true);
    for _ in 0..10_000 {
        let x = rand_tensor(&mut r, &[1, 6, 6], 0.0, 1.0);
        let spread = r.gen_range(0.1..3.0);
        let adv = x.add(&rand_tensor(&mut r, &[1, 6, 6], -spread, spread))?;
        let c = clip_l2(&adv, &x, zeta)?;
        feasible &= c.sub(&x)?.norm_l2() <= zeta * (1.0 + 1e-9);
        feasible &= c.data().iter().all(|v| (0.0..=1.0).contains(v));
        let cc = clip_l2(&c, &x, zeta)?;
        idem = idem.max(cc.sub(&c)?.data().iter().fold(0.0, |m, v| m.max(v.abs())));
        let inside = x.add(&rand_tensor(&mut r, &[1, 6, 6], -0.05, 0.05))?.clamp(0.0, 1.0);
        interior &= clip_l2(&inside, &x, zeta)? == inside;
    }
    verdict(
        feasible && idem <= 1e-12 && interior,
        format!("10^4 pairs: feasible {feasible}, idempotence err {idem:.1e}, interior identity {interior}"),
    )
}

fn c5_gamma() -> Result<Verdict> {
    let mut r = rng(25);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mut s = HogaState::new(r.gen_range(0.1..10.0), 0.01, 0.0)?;
        for _ in 0..50 {
            let n = r.gen_range(1..30);
            let pred: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let post: Vec<f64> = (0..n).map(|_| r.gen_range(-6.0..0.0)).collect();
            let pre: Vec<f64> = (0..n).map(|_| r.gen_range(-6.0..0.0)).collect();
            let num: f64 = pred.iter().map(|v| v.abs()).sum();
            let den: f64 = post.iter().zip(&pre).map(|(a, b)| (a - b).abs()).sum();
            let want = 0.9 * s.gamma + 0.1 * num / den;
            worst = worst.max((s.update_gamma(&pred, &post, &pre)? - want).abs());
        }
    }
    let fixed = blend_gamma(3.0, 3.0) == 3.0;
    let mut geometric = true;
    let (g0, e) = (7.5, 2.0);
    let mut g = g0;
    for k in 1..=100 {
        g = blend_gamma(g, e);
        geometric &= (g - (e + 0.9f64.powi(k) * (g0 - e))).abs() < 1e-12;
    }
    verdict(
        worst < 1e-12 && fixed && geometric,
        format!("max update err {worst:.1e} over 10^4 updates, fixed point {fixed}, geometric {geometric}"),
    )
}

fn same_runs(a: &RepeatOutcome, b: &RepeatOutcome) -> bool {
    a.adversarial == b.adversarial
        && a.records.iter().zip(&b.records).all(|(p, q)| {
            (p.trace.as_slice(), p.queries, p.success, p.loss.to_bits(), p.l2_dist.to_bits())
                == (q.trace.as_slice(), q.queries, q.success, q.loss.to_bits(), q.l2_dist.to_bits())
        })
}

fn c6_reductions(b: &Bench) -> Result<Verdict> {
    let set = AttackSet {
        indices: b.s1.indices[..100].to_vec(),
        images: b.s1.images[..100].to_vec(),
        labels: b.s1.labels[..100].to_vec(),
    };
    let sur = Some(&b.models.surrogate.model);
    let src = b.local();
    let run = |v, a: &AttackConfig| run_repeat(&src, sur, &set, v, a, SEED, 0);
    let test = run(Variant::LebaTest, &b.attack)?;
    let pp = run(Variant::SimbaPp, &b.attack)?;
    let no_transfer = AttackConfig {
        n_q: None,
        ..b.attack.clone()
    };
    let pp0 = run(Variant::SimbaPp, &no_transfer)?;
    let plus = run(Variant::SimbaPlus, &b.attack)?;
    let (first, second) = (same_runs(&test, &pp), same_runs(&pp0, &plus));
    verdict(
        first && second,
        format!("100 images: leba_test == simba_pp {first}, simba_pp(no transfer) == simba_plus {second}"),
    )
}

fn c7_metering(b: &Bench) -> Result<Verdict> {
    // run_repeat refuses to finish if an attack's query count differs from
    // the oracle counter, so every campaign in this run already checked it
    let mut r = rng(27);
    let local = MeteredOracle::new(b.victim(), 1000);
    let server = spawn_server("127.0.0.1:0", Arc::new(MeteredOracle::new(b.victim(), 1000)))?;
    let remote = RemoteOracle::connect(server.local_addr())?;
    let mut equal = true;
    for i in 0..1000 {
        let x = b.test.image(i % b.test.len())?;
        let x = x.add(&rand_tensor(&mut r, x.shape(), -0.1, 0.1))?.clamp(0.0, 1.0);
        equal &= local.query(&x)? == remote.query(&x)?;
    }
    let counters = (local.queries_used(), remote.queries_used());
    server.shutdown()?;
    verdict(
        equal && counters == (1000, 1000),
        format!("1000 probes bitwise equal {equal}, counters {counters:?}; per-image counts checked in every campaign"),
    )
}

fn c8_ordering(b: &mut Bench) -> Result<Verdict> {
    let mut q = Vec::new();
    let mut asr = Vec::new();
    for v in [Variant::LebaTrain, Variant::SimbaPp, Variant::SimbaPlus, Variant::Simba] {
        let c = b.desk(v)?;
        q.push(pooled(&c).avg_q_prime);
        asr.push(pooled(&c).asr);
        match v {
            Variant::LebaTrain => b.leba_s1 = Some(c),
            Variant::SimbaPp => b.pp_s1 = Some(c),
            _ => {}
        }
    }
    let gaps = [gap(q[0], q[1]), gap(q[1], q[2]), gap(q[2], q[3])];
    let pass = gaps.iter().all(|&g| g >= 0.05) && asr[0] >= asr[1] && asr[1] >= asr[2];
    verdict(
        pass,
        format!(
            "AVG.Q' leba {:.1} < pp {:.1} < plus {:.1} < simba {:.1} (gaps {:.1}% {:.1}% {:.1}%), ASR {:.3} {:.3} {:.3} {:.3}",
            q[0],
            q[1],
            q[2],
            q[3],
            100.0 * gaps[0],
            100.0 * gaps[1],
            100.0 * gaps[2],
            asr[0],
            asr[1],
            asr[2],
            asr[3]
        ),
    )
}

fn c9_transfer(b: &mut Bench) -> Result<Verdict> {
    let trained = match b.leba_s1.take() {
        Some(c) => c,
        None => b.desk(Variant::LebaTrain)?,
    };
    let src = b.local();
    let mut outcomes = Vec::new();
    for (r, out) in trained.repeats.iter().enumerate() {
        let learned = out.surrogate.as_ref().expect("leba_train returns its surrogate");
        let o = run_repeat(&src, Some(learned), &b.s2, Variant::LebaTest, &b.attack, SEED + r as u64, r)?;
        outcomes.extend(o.records.iter().map(|x| (x.success, x.queries)));
        b.rows.push(o.row);
    }
    b.leba_s1 = Some(trained);
    let test = metrics("leba_test", None, &outcomes, b.attack.max_queries);
    b.rows.push(test.clone());
    let (s2, attack) = (b.s2.clone(), b.attack.clone());
    let pp = b.run(&src, &s2, Variant::SimbaPp, &attack, None)?;
    let (lt, pq) = (test.avg_q_prime, pooled(&pp).avg_q_prime);
    verdict(
        gap(lt, pq) >= 0.03,
        format!("S2: leba_test {lt:.1} vs simba_pp {pq:.1} (gap {:.1}%)", 100.0 * gap(lt, pq)),
    )
}

fn c10_ablation(b: &mut Bench) -> Result<Verdict> {
    let none = match &b.pp_s1 {
        Some(c) => pooled(c).avg_q_prime,
        None => pooled(&b.desk(Variant::SimbaPp)?).avg_q_prime,
    };
    let adaptive = match &b.leba_s1 {
        Some(c) => pooled(c).avg_q_prime,
        None => pooled(&b.desk(Variant::LebaTrain)?).avg_q_prime,
    };
    let mut arm = |f: &dyn Fn(&mut AttackConfig)| -> Result<f64> {
        let mut a = b.attack.clone();
        f(&mut a);
        let (src, set) = (b.local(), b.s1.clone());
        Ok(pooled(&b.run(&src, &set, Variant::LebaTrain, &a, None)?).avg_q_prime)
    };
    let bl = arm(&|a| a.objective = Objective::BackwardOnly)?;
    let fl = arm(&|a| a.objective = Objective::ForwardOnly)?;
    let fixed = arm(&|a| a.adaptive_gamma = false)?;
    let pass = bl <= fl && fl <= none && adaptive <= 1.05 * fixed;
    verdict(
        pass,
        format!("BL {bl:.1} <= FL {fl:.1} <= none {none:.1}; adaptive γ {adaptive:.1} vs fixed {fixed:.1}"),
    )
}

fn c11_conversion(b: &Bench) -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for r in b.rows.iter().filter(|r| r.asr > 0.0) {
        let q = avgq_convert(r.avg_q_prime, r.asr, b.attack.max_queries)?;
        worst = worst.max((q - r.avg_q).abs());
        checked += 1;
    }
    let published = avgq_convert(302.3, 0.994, 10_000)?;
    verdict(
        worst < 1e-9 && (published - 243.8).abs() <= 0.5,
        format!("{checked} rows, max |AVG.Q − converted| {worst:.1e}; (302.3, 0.994, 10000) → {published:.2}"),
    )
}

/// Images of `set` the defended oracle still classifies correctly.
fn defended_set(victim: &Arc<Model>, defense: &DefenseSpec, set: &AttackSet) -> Result<AttackSet> {
    let o = MeteredOracle::wrap_defense(victim.clone(), defense, u64::MAX)?;
    let mut out = AttackSet::default();
    for k in 0..set.len() {
        let p = Tensor::from_vec(o.query(&set.images[k])?.probs);
        if p.argmax() == set.labels[k] {
            out.indices.push(set.indices[k]);
            out.images.push(set.images[k].clone());
            out.labels.push(set.labels[k]);
        }
    }
    Ok(out)
}

fn c12_defenses(b: &mut Bench) -> Result<Verdict> {
    let quant = DefenseSpec::Quantize { levels: 16 };
    let qset = defended_set(&b.victim(), &quant, &b.s1)?;
    let qsrc = OracleSource::Local {
        victim: b.victim(),
        defense: quant,
    };
    let (robust, _) = b.models.robust.clone().expect("plan trains a robust victim");
    let rset = attack_set(&robust.model, &b.test, 0, N_IMAGES)?;
    let rsrc = OracleSource::Local {
        victim: Arc::new(robust.model),
        defense: DefenseSpec::None,
    };
    let attack = b.attack.clone();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, src, set) in [("quantize16", &qsrc, &qset), ("fgsm-trained", &rsrc, &rset)] {
        let l = b.run(src, set, Variant::LebaTrain, &attack, None)?;
        let p = b.run(src, set, Variant::SimbaPlus, &attack, None)?;
        let (l, p) = (pooled(&l).clone(), pooled(&p).clone());
        pass &= l.asr >= p.asr && l.avg_q_prime < p.avg_q_prime;
        parts.push(format!(
            "{name} (n={}): leba ASR {:.3} AVG.Q' {:.1} vs plus ASR {:.3} AVG.Q' {:.1}",
            set.len(),
            l.asr,
            l.avg_q_prime,
            p.asr,
            p.avg_q_prime
        ));
    }
    verdict(pass, parts.join("; "))
}

fn report(id: usize, name: &str, v: Result<Verdict>, took: Duration) -> bool {
    let (pass, detail) = match v {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "{} {id:>2} {name}: {detail} [{:.0} s]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    pass
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; list mode prints
    // nothing so test discovery stays cheap.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let (mut passed, mut total) = (0, 0);
    let mut timed = |id, name, f: &mut dyn FnMut() -> Result<Verdict>| {
        let t = Instant::now();
        let v = f();
        total += 1;
        passed += usize::from(report(id, name, v, t.elapsed()));
    };
    timed(1, "autodiff first order", &mut c1_first_order);
    timed(2, "mixed second derivatives", &mut c2_high_order);
    timed(4, "clip projection", &mut c4_clip);
    timed(5, "gamma update", &mut c5_gamma);
    let mut bench = match Bench::new() {
        Ok(b) => b,
        Err(e) => {
            println!("FAIL    desk fixtures: {e}");
            std::process::exit(1);
        }
    };
    timed(3, "first-order Taylor consistency", &mut || c3_taylor(&bench));
    timed(6, "reduction identities", &mut || c6_reductions(&bench));
    timed(7, "query metering", &mut || c7_metering(&bench));
    timed(8, "desk ordering", &mut || c8_ordering(&mut bench));
    timed(9, "learned surrogate transfers", &mut || c9_transfer(&mut bench));
    timed(10, "ablation directions", &mut || c10_ablation(&mut bench));
    timed(12, "defenses", &mut || c12_defenses(&mut bench));
    timed(11, "AVG.Q conversion", &mut || c11_conversion(&bench));
    println!("# {passed}/{total} criteria pass");
    let strict = std::env::var("LEBA_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < total {
        std::process::exit(1);
    }
}
