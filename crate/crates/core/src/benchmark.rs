//! Success, force-safety and harmful-force metrics over episode traces, and
//! comparison tables across planners and conditions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::runtime::EpisodeTrace;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

/// Required share of safe states, in percent, for the two safety levels.
pub const SAFE_PERCENT: u64 = 95;
pub const SUB_SAFE_PERCENT: u64 = 80;

/// Successful episodes per threshold whose states stay below it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub threshold: f64,
    pub num_safe: usize,
    pub num_sub_safe: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub planner: String,
    pub pool: String,
    pub condition: String,
    pub episodes: usize,
    pub num_success: usize,
    pub thresholds: Vec<ThresholdCounts>,
    pub average_harmful_force: f64,
}

impl MetricReport {
    pub fn success_rate(&self) -> f64 {
        self.num_success as f64 / self.episodes.max(1) as f64
    }

    /// `(SaR-95, SaR-80)` at threshold index `i`; `None` without successes.
    pub fn safety_rates(&self, i: usize) -> (Option<f64>, Option<f64>) {
        let c = &self.thresholds[i];
        rates(c.num_safe, c.num_sub_safe, self.num_success)
    }

    /// Safety rates at a given threshold value, if it was evaluated.
    pub fn safety_rates_at(&self, threshold: f64) -> Option<(Option<f64>, Option<f64>)> {
        self.thresholds
            .iter()
            .position(|c| c.threshold == threshold)
            .map(|i| self.safety_rates(i))
    }
}

fn rates(safe: usize, sub_safe: usize, success: usize) -> (Option<f64>, Option<f64>) {
    if success == 0 {
        (None, None)
    } else {
        let n = success as f64;
        (Some(safe as f64 / n), Some(sub_safe as f64 / n))
    }
}

/// Whether at least `percent`% of `forces` lie strictly below `threshold`.
pub fn share_below(forces: &[f64], threshold: f64, percent: u64) -> bool {
    let below = forces.iter().filter(|&&f| f < threshold).count() as u64;
    below * 100 >= percent * forces.len() as u64
}

/// Fraction of traces that reach the success angle.
pub fn success_rate(traces: &[EpisodeTrace]) -> f64 {
    let ok = traces.iter().filter(|t| t.succeeded()).count();
    ok as f64 / traces.len().max(1) as f64
}

/// `(SaR-95, SaR-80)` at threshold `f`, over successful traces only.
pub fn safety_rates(traces: &[EpisodeTrace], threshold: f64) -> (Option<f64>, Option<f64>) {
    let mut acc = MetricAccumulator::new(&[threshold]);
    traces.iter().for_each(|t| acc.push(t));
    let c = acc.counts[0];
    rates(c.num_safe, c.num_sub_safe, acc.num_success)
}

/// Mean harmful force pooled over every tick of every trace.
pub fn average_harmful_force(traces: &[EpisodeTrace]) -> f64 {
    let mut acc = MetricAccumulator::new(&[]);
    traces.iter().for_each(|t| acc.push(t));
    acc.average_harmful_force()
}

/// Single-pass metric accumulation; traces need not be kept in memory.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    episodes: usize,
    num_success: usize,
    counts: Vec<ThresholdCounts>,
    harmful_sum: f64,
    ticks: usize,
}

impl MetricAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            episodes: 0,
            num_success: 0,
            counts: thresholds
                .iter()
                .map(|&threshold| ThresholdCounts {
                    threshold,
                    num_safe: 0,
                    num_sub_safe: 0,
                })
                .collect(),
            harmful_sum: 0.0,
            ticks: 0,
        }
    }

    pub fn push(&mut self, trace: &EpisodeTrace) {
        self.episodes += 1;
        for t in &trace.ticks {
            self.harmful_sum += t.force.harmful;
        }
        self.ticks += trace.ticks.len();
        if !trace.succeeded() {
            return;
        }
        self.num_success += 1;
        let states = trace.state_harmful_forces();
        for c in &mut self.counts {
            if share_below(&states, c.threshold, SAFE_PERCENT) {
                c.num_safe += 1;
            }
            if share_below(&states, c.threshold, SUB_SAFE_PERCENT) {
                c.num_sub_safe += 1;
            }
        }
    }

    pub fn average_harmful_force(&self) -> f64 {
        if self.ticks == 0 {
            0.0
        } else {
            self.harmful_sum / self.ticks as f64
        }
    }

    pub fn finish(&self, planner: &str, pool: &str, condition: &str) -> MetricReport {
        MetricReport {
            planner: planner.to_string(),
            pool: pool.to_string(),
            condition: condition.to_string(),
            episodes: self.episodes,
            num_success: self.num_success,
            thresholds: self.counts.clone(),
            average_harmful_force: self.average_harmful_force(),
        }
    }
}

pub fn evaluate(
    traces: &[EpisodeTrace],
    thresholds: &[f64],
    planner: &str,
    pool: &str,
    condition: &str,
) -> MetricReport {
    let mut acc = MetricAccumulator::new(thresholds);
    traces.iter().for_each(|t| acc.push(t));
    acc.finish(planner, pool, condition)
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// Comparison table as CSV. Rows share the threshold list of the first row.
pub fn report_csv(rows: &[MetricReport]) -> String {
    let mut out = format!("# safediff-report {REPORT_FORMAT_VERSION}\n");
    out.push_str("planner,pool,condition,episodes,successes,SuR,AHF");
    if let Some(first) = rows.first() {
        for c in &first.thresholds {
            write!(out, ",SaR95@{0},SaR80@{0}", c.threshold).unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{:.4},{:.4}",
            r.planner,
            r.pool,
            r.condition,
            r.episodes,
            r.num_success,
            r.success_rate(),
            r.average_harmful_force
        )
        .unwrap();
        for i in 0..r.thresholds.len() {
            let (a, b) = r.safety_rates(i);
            write!(out, ",{},{}", fmt_rate(a), fmt_rate(b)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Comparison table as aligned text with rates in percent.
pub fn report_text(rows: &[MetricReport]) -> String {
    let pct = |r: Option<f64>| r.map_or_else(|| "  n/a".to_string(), |v| format!("{:5.1}", 100.0 * v));
    let mut out = String::new();
    write!(out, "{:<10} {:<7} {:<10} {:>5} {:>6} {:>7}", "planner", "pool", "condition", "n", "SuR%", "AHF[N]").unwrap();
    if let Some(first) = rows.first() {
        for c in &first.thresholds {
            write!(out, " {:>13}", format!("SaR95/80@{}", c.threshold)).unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{:<10} {:<7} {:<10} {:>5} {:>6.1} {:>7.3}",
            r.planner,
            r.pool,
            r.condition,
            r.episodes,
            100.0 * r.success_rate(),
            r.average_harmful_force
        )
        .unwrap();
        for i in 0..r.thresholds.len() {
            let (a, b) = r.safety_rates(i);
            write!(out, " {:>13}", format!("{}/{}", pct(a).trim(), pct(b).trim())).unwrap();
        }
        out.push('\n');
    }
    out
}
