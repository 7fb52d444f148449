use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use leba_core::harness::{
    metrics, metrics_csv, read_traces, run_and_report, save_models, train_models, ExperimentConfig,
    ImageRecord, MetricsRow, TrainPlan, KEYS, OUT_DIR_ENV,
};
use leba_core::nets::{load_model, Arch};
use leba_core::oracle::{serve, wire::DEFAULT_FRAME_TIMEOUT, DefenseSpec, MeteredOracle};

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

fn cli() -> Command {
    let plan = TrainPlan::default();
    let out_help = format!("output directory [default: ${OUT_DIR_ENV} or ./runs]");
    let train = Command::new("train-models")
        .about("Train the victim, the surrogate and the adversarially trained victim")
        .arg(Arg::new("data-dir").long("data-dir").default_value("data"))
        .arg(Arg::new("out-dir").long("out-dir").default_value("models"))
        .arg(Arg::new("victim-arch").long("victim-arch").default_value(plan.victim_arch.to_string()))
        .arg(Arg::new("victim-epochs").long("victim-epochs").default_value(plan.victim_epochs.to_string()))
        .arg(Arg::new("victim-lr").long("victim-lr").default_value(plan.victim_lr.to_string()))
        .arg(Arg::new("surrogate-arch").long("surrogate-arch").default_value(plan.surrogate_arch.to_string()))
        .arg(Arg::new("surrogate-epochs").long("surrogate-epochs").default_value(plan.surrogate_epochs.to_string()))
        .arg(Arg::new("surrogate-lr").long("surrogate-lr").default_value(plan.surrogate_lr.to_string()))
        .arg(Arg::new("batch").long("batch").default_value(plan.batch.to_string()))
        .arg(
            Arg::new("fgsm-eps")
                .long("fgsm-eps")
                .help("FGSM step for the adversarially trained victim, or `none`")
                .default_value("0.1"),
        );
    let attack = Command::new("attack")
        .about("Run an attack campaign and write metrics.csv / traces.jsonl")
        .arg(Arg::new("config").long("config").short('c').help("key = value config file"))
        .args(KEYS.iter().map(|k| {
            let a = Arg::new(*k).long(flag(k)).value_name("VALUE");
            if *k == "out_dir" {
                a.help(out_help.clone())
            } else {
                a
            }
        }));
    let serve_cmd = Command::new("serve-oracle")
        .about("Serve a victim model over the binary score protocol")
        .arg(Arg::new("victim").long("victim").default_value("models/victim.w"))
        .arg(Arg::new("addr").long("addr").default_value("127.0.0.1:7878"))
        .arg(Arg::new("defense").long("defense").default_value("none"))
        .arg(Arg::new("max-queries").long("max-queries").default_value(u64::MAX.to_string()));
    let report = Command::new("report")
        .about("Recompute metrics from one or more run directories")
        .arg(Arg::new("dirs").num_args(1..).required(true).action(ArgAction::Append))
        .arg(Arg::new("out").long("out").help("write the CSV here instead of stdout"));
    Command::new("leba")
        .about("Score-based black-box attacks with a learnable surrogate")
        .subcommand_required(true)
        .subcommand(train)
        .subcommand(attack)
        .subcommand(serve_cmd)
        .subcommand(report)
}

fn get<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = m.get_one::<String>(name).with_context(|| format!("missing --{name}"))?;
    v.parse().map_err(|e| anyhow::anyhow!("--{name} {v}: {e}"))
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let fgsm: String = get(m, "fgsm-eps")?;
    let plan = TrainPlan {
        data_dir: get(m, "data-dir")?,
        victim_arch: get::<Arch>(m, "victim-arch")?,
        victim_epochs: get(m, "victim-epochs")?,
        victim_lr: get(m, "victim-lr")?,
        surrogate_arch: get::<Arch>(m, "surrogate-arch")?,
        surrogate_epochs: get(m, "surrogate-epochs")?,
        surrogate_lr: get(m, "surrogate-lr")?,
        batch: get(m, "batch")?,
        fgsm_eps: match fgsm.as_str() {
            "none" => None,
            s => Some(s.parse().context("--fgsm-eps")?),
        },
        ..TrainPlan::default()
    };
    let models = train_models(&plan)?;
    let out: PathBuf = get(m, "out-dir")?;
    for p in save_models(&models, &out)? {
        println!("wrote {}", p.display());
    }
    println!("victim     test accuracy {:.4}", models.victim.test_acc);
    println!("surrogate  test accuracy {:.4}", models.surrogate.test_acc);
    if let (Some((r, robust)), Some(plain)) = (&models.robust, models.plain_fgsm_acc) {
        println!("adv victim test accuracy {:.4}, fgsm accuracy {robust:.4} (plain victim {plain:.4})", r.test_acc);
    }
    Ok(())
}

fn attack_cmd(m: &ArgMatches) -> Result<()> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    let campaign = run_and_report(&cfg)?;
    print!("{}", metrics_csv(&campaign.rows));
    eprintln!("report written to {}", cfg.out_dir.display());
    Ok(())
}

fn serve_cmd(m: &ArgMatches) -> Result<()> {
    let victim = Arc::new(load_model(get::<PathBuf>(m, "victim")?)?);
    let defense: DefenseSpec = get(m, "defense")?;
    let oracle = Arc::new(MeteredOracle::wrap_defense(victim, &defense, get(m, "max-queries")?)?);
    let addr: String = get(m, "addr")?;
    let listener = std::net::TcpListener::bind(&addr).with_context(|| format!("bind {addr}"))?;
    eprintln!("serving on {}", listener.local_addr()?);
    serve(listener, oracle, DEFAULT_FRAME_TIMEOUT, Arc::new(AtomicBool::new(false)))?;
    Ok(())
}

fn run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(dir.join("config.txt"))
        .with_context(|| format!("{}: no readable config.txt", dir.display()))
}

fn report_cmd(m: &ArgMatches) -> Result<()> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    for dir in m.get_many::<String>("dirs").into_iter().flatten() {
        let dir = Path::new(dir);
        let cfg = run_config(dir)?;
        let budget = cfg.attack.max_queries;
        let records = read_traces(&dir.join("traces.jsonl"))?;
        if records.is_empty() {
            bail!("{}: no traces", dir.display());
        }
        let mut repeats: Vec<usize> = records.iter().map(|r| r.repeat).collect();
        repeats.sort_unstable();
        repeats.dedup();
        let outcome = |r: &ImageRecord| (r.success, r.queries);
        let variant = records[0].variant.clone();
        for rep in repeats {
            let mine: Vec<&ImageRecord> = records.iter().filter(|r| r.repeat == rep).collect();
            let o: Vec<(bool, u64)> = mine.iter().map(|r| outcome(r)).collect();
            rows.push(metrics(&variant, Some(cfg.seed + rep as u64), &o, budget));
        }
        let all: Vec<(bool, u64)> = records.iter().map(outcome).collect();
        rows.push(metrics(&variant, None, &all, budget));
    }
    let csv = metrics_csv(&rows);
    match m.get_one::<String>("out") {
        Some(p) => fs::write(p, csv).with_context(|| format!("write {p}"))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let m = cli().get_matches();
    match m.subcommand() {
        Some(("train-models", s)) => train_cmd(s),
        Some(("attack", s)) => attack_cmd(s),
        Some(("serve-oracle", s)) => serve_cmd(s),
        Some(("report", s)) => report_cmd(s),
        _ => unreachable!("subcommand required"),
    }
}
