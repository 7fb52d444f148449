//! Success rate and query statistics, and the metrics CSV.

use std::fmt::Write as _;

use crate::error::{contract, Error, Result};

/// Summary of one repeat (or, with `seed = None`, of all repeats pooled).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub n: usize,
    pub asr: f64,
    /// Mean queries over successful images (NaN when there are none).
    pub avg_q: f64,
    /// Mean queries over all images, failures counted at the budget.
    pub avg_q_prime: f64,
}

/// `(success, queries)` per image → row. Failures count as `budget` queries.
pub fn metrics(variant: &str, seed: Option<u64>, outcomes: &[(bool, u64)], budget: u64) -> MetricsRow {
    let n = outcomes.len();
    let wins: Vec<u64> = outcomes.iter().filter(|o| o.0).map(|o| o.1).collect();
    let all: u64 = outcomes.iter().map(|&(s, q)| if s { q } else { budget }).sum();
    let mean = |sum: u64, k: usize| if k == 0 { f64::NAN } else { sum as f64 / k as f64 };
    MetricsRow {
        variant: variant.into(),
        seed,
        n,
        asr: mean(wins.len() as u64, n),
        avg_q: mean(wins.iter().sum(), wins.len()),
        avg_q_prime: mean(all, n),
    }
}

/// Mean queries over successes from the failure-padded mean:
/// `(AVG.Q' − (1 − ASR)·budget) / ASR`.
pub fn avgq_convert(avg_q_prime: f64, asr: f64, budget: u64) -> Result<f64> {
    if !(asr > 0.0 && asr <= 1.0) {
        return contract(format!("success rate must be in (0, 1], got {asr}"));
    }
    Ok((avg_q_prime - (1.0 - asr) * budget as f64) / asr)
}

pub const CSV_HEADER: &str = "variant,seed,n,asr,avg_q,avg_q_prime";

/// Six significant digits, shortest form.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else { v.to_string() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{seed},{},{},{},{}",
            r.variant,
            r.n,
            sig6(r.asr),
            sig6(r.avg_q),
            sig6(r.avg_q_prime)
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("metrics CSV has an unexpected header".into()));
    }
    let bad = |n: usize| Error::Config(format!("metrics CSV line {}: malformed", n + 2));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let [variant, seed, count, asr, q, qp] = f[..] else {
                return Err(bad(n));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n));
            Ok(MetricsRow {
                variant: variant.into(),
                seed: match seed {
                    "all" => None,
                    s => Some(s.parse().map_err(|_| bad(n))?),
                },
                n: count.parse().map_err(|_| bad(n))?,
                asr: num(asr)?,
                avg_q: num(q)?,
                avg_q_prime: num(qp)?,
            })
        })
        .collect()
}
