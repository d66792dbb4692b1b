//! Metrics and diagnostics: AUCROC (rank statistic, ties counted half),
//! AUCPR (average-precision step convention), per-onset drift response,
//! throughput measurement, and the JSONL trace format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MeterError, Result};

/// AUCROC as the Mann–Whitney rank statistic:
/// P(score_pos > score_neg) + ½·P(equal), via a single sort with averaged
/// tie ranks.
pub fn aucroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MeterError::UndefinedMetric(
            "AUCROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied group shares the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// AUCPR under the average-precision convention: a descending-score sweep
/// over unique thresholds, AP = Σ (R_k − R_{k−1})·P_k.
pub fn aucpr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    if n_pos == 0 {
        return Err(MeterError::UndefinedMetric(
            "AUCPR needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            seen += 1;
            if labels[idx] == 1 {
                tp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

fn check_aligned(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MeterError::shape("metrics", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MeterError::UndefinedMetric("no scored instances".into()));
    }
    Ok(())
}

/// One per-step line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub score: f64,
    pub u: f64,
    pub route: String,
    pub update: bool,
    pub version: u64,
}

/// Offline-update line appended to the same trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub event: String,
    pub step: usize,
    pub version: u64,
    pub s: f64,
    pub mu_e_before: f64,
    pub mu_e_after: f64,
}

impl UpdateEvent {
    pub fn new(step: usize, version: u64, s: f64, mu_e_before: f64, mu_e_after: f64) -> Self {
        UpdateEvent {
            event: "update".into(),
            step,
            version,
            s,
            mu_e_before,
            mu_e_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceLine {
    Update(UpdateEvent),
    Decision(TraceRecord),
}

pub fn write_trace(path: &Path, lines: &[TraceLine]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        serde_json::to_writer(&mut f, line)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceLine>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Deterministic half of the run report; identical under trace replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aucroc: Option<f64>,
    pub aucpr: Option<f64>,
    /// Why the ranking metrics are absent, when they are.
    pub metric_error: Option<String>,
    pub n_scored: usize,
    pub n_anomalies: usize,
    pub static_routes: usize,
    pub dynamic_routes: usize,
    pub updates: usize,
}

/// Full run metrics: the deterministic report plus wall-clock measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub throughput: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub peak_rss_bytes: Option<u64>,
}

/// Builds the deterministic report from trace lines and per-step labels
/// (aligned with the decision records; `None` entries are unlabeled).
pub fn compute_report(lines: &[TraceLine], labels: &[Option<u8>]) -> Result<MetricsReport> {
    let decisions: Vec<&TraceRecord> = lines
        .iter()
        .filter_map(|l| match l {
            TraceLine::Decision(d) => Some(d),
            TraceLine::Update(_) => None,
        })
        .collect();
    let updates = lines.len() - decisions.len();
    if labels.len() != decisions.len() {
        return Err(MeterError::shape(
            "compute_report labels",
            decisions.len(),
            labels.len(),
        ));
    }

    let static_routes = decisions.iter().filter(|d| d.route == "static").count();
    let dynamic_routes = decisions.len() - static_routes;

    let mut scores = Vec::new();
    let mut ys = Vec::new();
    for (d, l) in decisions.iter().zip(labels) {
        if let Some(y) = l {
            scores.push(d.score);
            ys.push(*y);
        }
    }
    let n_anomalies = ys.iter().filter(|y| **y == 1).count();

    let (aucroc_v, aucpr_v, metric_error) = if scores.is_empty() {
        (None, None, Some("no labeled instances".to_string()))
    } else {
        match (aucroc(&scores, &ys), aucpr(&scores, &ys)) {
            (Ok(a), Ok(p)) => (Some(a), Some(p), None),
            (a, p) => {
                let msg = a.err().or(p.err()).map(|e| e.to_string());
                (None, None, msg)
            }
        }
    };

    Ok(MetricsReport {
        aucroc: aucroc_v,
        aucpr: aucpr_v,
        metric_error,
        n_scored: decisions.len(),
        n_anomalies,
        static_routes,
        dynamic_routes,
        updates,
    })
}

/// Per-onset drift diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub onset: usize,
    pub mean_u_before: f64,
    pub mean_u_after: f64,
    /// Steps from the onset to the first uncertainty above the live gate.
    pub detection_delay: Option<usize>,
    /// Steps from the onset to the first published update.
    pub update_lag: Option<usize>,
}

/// Evaluates each drift onset over a ±2·ΔL horizon. The live μ_e timeline is
/// reconstructed from the update events, starting at `mu_e_initial`.
pub fn drift_response(
    lines: &[TraceLine],
    onsets: &[usize],
    delta_l: usize,
    mu_e_initial: f64,
) -> Vec<OnsetReport> {
    let mut decisions: Vec<&TraceRecord> = Vec::new();
    let mut updates: Vec<&UpdateEvent> = Vec::new();
    for l in lines {
        match l {
            TraceLine::Decision(d) => decisions.push(d),
            TraceLine::Update(u) => updates.push(u),
        }
    }
    decisions.sort_by_key(|d| d.t);
    updates.sort_by_key(|u| u.step);

    // mu_e at step t: initial value until the first update at or before t
    let mu_e_at = |t: usize| -> f64 {
        let mut v = mu_e_initial;
        for u in &updates {
            if u.step <= t {
                v = u.mu_e_after;
            } else {
                break;
            }
        }
        v
    };

    let horizon = 2 * delta_l;
    onsets
        .iter()
        .map(|&onset| {
            let before: Vec<f64> = decisions
                .iter()
                .filter(|d| d.t < onset && d.t + horizon >= onset)
                .map(|d| d.u)
                .collect();
            let after: Vec<f64> = decisions
                .iter()
                .filter(|d| d.t >= onset && d.t < onset + horizon)
                .map(|d| d.u)
                .collect();
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let detection_delay = decisions
                .iter()
                .find(|d| d.t >= onset && d.u > mu_e_at(d.t))
                .map(|d| d.t - onset);
            let update_lag = updates
                .iter()
                .find(|u| u.step >= onset)
                .map(|u| u.step - onset);
            OnsetReport {
                onset,
                mean_u_before: mean(&before),
                mean_u_after: mean(&after),
                detection_delay,
                update_lag,
            }
        })
        .collect()
}

/// Instances per second for a closure that processes `count` instances.
/// Returns (rate, wall seconds).
pub fn measure_throughput<F: FnOnce()>(count: usize, f: F) -> (f64, f64) {
    let start = std::time::Instant::now();
    f();
    let secs = start.elapsed().as_secs_f64().max(1e-12);
    (count as f64 / secs, secs)
}

/// Peak resident set size from /proc/self/status, best-effort; falls back to
/// the current RSS where the high-water mark is unavailable.
pub fn peak_rss_bytes() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    let parse = |prefix: &str| {
        text.lines().find_map(|line| {
            let rest = line.strip_prefix(prefix)?;
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            Some(kb * 1024)
        })
    };
    parse("VmHWM:").or_else(|| parse("VmRSS:"))
}
