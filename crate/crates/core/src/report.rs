//! Aggregates finished runs into a per-task, per-method table (mean ± std
//! over seeds) with the pairwise deltas that show whether each mechanism
//! helped: sps1−plain, sps2−sps1, and each PTP variant against its base.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::error::{KdError, Result};

#[derive(Debug, Deserialize)]
struct SummaryRow {
    task: String,
    sps_mode: String,
    ptp_scheme: String,
    seed: u64,
    test_acc: f64,
    test_f1: Option<f64>,
}

impl SummaryRow {
    fn method(&self) -> String {
        if self.ptp_scheme == "none" {
            self.sps_mode.clone()
        } else {
            format!("{}+ptp-{}", self.sps_mode, self.ptp_scheme)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodStats {
    pub method: String,
    pub seeds: Vec<u64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_f1: Option<f64>,
    pub std_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBlock {
    pub task: String,
    pub methods: Vec<MethodStats>,
    /// (label, accuracy difference of means)
    pub deltas: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub tasks: Vec<TaskBlock>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; a single run reports 0.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Sort key: plain < sps1 < sps2, non-PTP before PTP variants.
fn method_rank(method: &str) -> (u8, u8, String) {
    let has_ptp = u8::from(method.contains("+ptp-"));
    let base = method.split('+').next().unwrap_or(method);
    let mode_rank = match base {
        "plain" => 0,
        "sps1" => 1,
        "sps2" => 2,
        _ => 3,
    };
    (has_ptp, mode_rank, method.to_string())
}

pub fn report(run_dirs: &[impl AsRef<Path>]) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(KdError::Data("no run directories given".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let dir = dir.as_ref();
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            KdError::Data(format!("{}: missing or unreadable summary.json: {e}", dir.display()))
        })?;
        let row: SummaryRow = serde_json::from_str(&text).map_err(|e| {
            KdError::Data(format!("{}: malformed summary.json: {e}", dir.display()))
        })?;
        rows.push(row);
    }

    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<&SummaryRow>>> = BTreeMap::new();
    for row in &rows {
        grouped
            .entry(row.task.clone())
            .or_default()
            .entry(row.method())
            .or_default()
            .push(row);
    }

    let mut tasks = Vec::new();
    for (task, methods_map) in grouped {
        let mut methods: Vec<MethodStats> = methods_map
            .into_iter()
            .map(|(method, rows)| {
                let accs: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
                let f1s: Vec<f64> = rows.iter().filter_map(|r| r.test_f1).collect();
                let (mean_f1, std_f1) = if f1s.len() == rows.len() {
                    (Some(mean(&f1s)), Some(std_dev(&f1s)))
                } else {
                    (None, None)
                };
                MethodStats {
                    method,
                    seeds: rows.iter().map(|r| r.seed).collect(),
                    mean_acc: mean(&accs),
                    std_acc: std_dev(&accs),
                    mean_f1,
                    std_f1,
                }
            })
            .collect();
        methods.sort_by_key(|m| method_rank(&m.method));

        let acc_of = |name: &str| methods.iter().find(|m| m.method == name).map(|m| m.mean_acc);
        let mut deltas = Vec::new();
        if let (Some(a), Some(b)) = (acc_of("sps1"), acc_of("plain")) {
            deltas.push(("sps1 - plain".to_string(), a - b));
        }
        if let (Some(a), Some(b)) = (acc_of("sps2"), acc_of("sps1")) {
            deltas.push(("sps2 - sps1".to_string(), a - b));
        }
        for m in &methods {
            if let Some((base, _)) = m.method.split_once("+ptp-") {
                if let Some(base_acc) = acc_of(base) {
                    deltas.push((format!("{} - {base}", m.method), m.mean_acc - base_acc));
                }
            }
        }
        tasks.push(TaskBlock { task, methods, deltas });
    }
    Ok(ReportTable { tasks })
}

impl fmt::Display for ReportTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in &self.tasks {
            writeln!(f, "task: {}", block.task)?;
            writeln!(
                f,
                "  {:<28} {:>6} {:>16} {:>16}",
                "method", "seeds", "acc (mean±std)", "f1 (mean±std)"
            )?;
            for m in &block.methods {
                let f1 = match (m.mean_f1, m.std_f1) {
                    (Some(mf), Some(sf)) => format!("{mf:.4}±{sf:.4}"),
                    _ => "-".to_string(),
                };
                writeln!(
                    f,
                    "  {:<28} {:>6} {:>16} {:>16}",
                    m.method,
                    m.seeds.len(),
                    format!("{:.4}±{:.4}", m.mean_acc, m.std_acc),
                    f1
                )?;
            }
            for (label, delta) in &block.deltas {
                writeln!(f, "  delta {label}: {delta:+.4}")?;
            }
        }
        Ok(())
    }
}
