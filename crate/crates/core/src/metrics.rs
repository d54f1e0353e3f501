//! Dice, peak-based forgetting rate, and the stage×task results matrix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::logistic;

pub const REPORT_VERSION: u32 = 1;

/// `sigmoid(logit) > 0.5`, the single binarization used everywhere.
pub fn binarize(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| if logistic(z) > 0.5 { 1.0 } else { 0.0 }).collect()
}

/// `2|P∩G| / (|P| + |G|)` over binary masks; two empty masks score 1.
pub fn dice(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("dice: {} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as u8 as f64;
        p += a as u8 as f64;
        g += b as u8 as f64;
    }
    if p + g == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (p + g))
}

/// Test Dice after each training stage; row `s` holds tasks `0..=s`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub tasks: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl ResultsMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        ResultsMatrix { tasks, rows: Vec::new() }
    }

    /// Appends the stage that follows training task `rows.len()`.
    pub fn push_stage(&mut self, row: Vec<f64>) -> Result<()> {
        let stage = self.rows.len();
        if row.len() != stage + 1 {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} needs {} entries, got {}",
                stage + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("Dice {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, stage: usize) -> Option<&[f64]> {
        self.rows.get(stage).map(|r| r.as_slice())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage).and_then(|r| r.get(task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Rebuilds a matrix from `(stage, task, dice)` triples in any order.
    pub fn from_entries(tasks: Vec<String>, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let stages = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let mut rows: Vec<Vec<Option<f64>>> = (0..stages).map(|s| vec![None; s + 1]).collect();
        for &(s, t, d) in entries {
            let slot = rows[s]
                .get_mut(t)
                .ok_or_else(|| Error::Format(format!("task {t} evaluated before it was trained (stage {s})")))?;
            *slot = Some(d);
        }
        let mut m = ResultsMatrix::new(tasks);
        for (s, r) in rows.into_iter().enumerate() {
            let row = r
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Format(format!("stage {s} is incomplete")))?;
            m.push_stage(row)?;
        }
        Ok(m)
    }
}

/// Unweighted mean of `R[stage][i]` for `i <= stage`.
pub fn avg_dice(m: &ResultsMatrix, stage: usize) -> Result<f64> {
    let row = m.row(stage).ok_or_else(|| Error::Empty(format!("stage {stage} not completed")))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// One entry per task except the last; `None` when that task's peak is 0.
    pub per_task: Vec<Option<f64>>,
    pub average: f64,
}

/// Peak-based forgetting in percent, `(peak − final) / peak × 100`, peak taken over stages
/// `s >= i`. The last task is excluded.
pub fn forgetting_rate(m: &ResultsMatrix) -> Result<Forgetting> {
    let stages = m.stages();
    if stages < 2 {
        return Err(Error::Empty("forgetting rate needs at least two completed tasks".into()));
    }
    let last = stages - 1;
    let mut per_task = Vec::with_capacity(last);
    let mut defined = Vec::new();
    for i in 0..last {
        let peak = (i..stages).map(|s| m.rows[s][i]).fold(f64::NEG_INFINITY, f64::max);
        if peak <= 0.0 {
            log::warn!("task {i} never scored above zero; forgetting undefined");
            per_task.push(None);
            continue;
        }
        let fr = (peak - m.rows[last][i]) / peak * 100.0;
        per_task.push(Some(fr));
        defined.push(fr);
    }
    let average = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(Forgetting { per_task, average })
}

pub fn to_csv(m: &ResultsMatrix) -> String {
    let mut out = String::from("stage,task,dice\n");
    for (s, row) in m.rows.iter().enumerate() {
        for (t, d) in row.iter().enumerate() {
            // {:?} prints the shortest string that parses back to the same f64
            out.push_str(&format!("{s},{t},{d:?}\n"));
        }
    }
    out
}

pub fn parse_csv(tasks: Vec<String>, text: &str) -> Result<ResultsMatrix> {
    let mut lines = text.lines();
    if lines.next() != Some("stage,task,dice") {
        return Err(Error::Format("metrics.csv header must be `stage,task,dice`".into()));
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("metrics.csv line {}: `{line}`", n + 2));
        let mut parts = line.split(',');
        let s = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let t = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let d = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        entries.push((s, t, d));
    }
    ResultsMatrix::from_entries(tasks, &entries)
}

/// Everything `summary.json` holds besides what is derived from the matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportExtras {
    pub mode: String,
    pub seed: u64,
    pub param_counts: Vec<crate::adapters::ParamCount>,
    pub allocations: Vec<serde_json::Value>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub tasks: Vec<String>,
    pub avg_dice: f64,
    pub avg_fr: f64,
    pub per_task_fr: Vec<Option<f64>>,
    pub final_dice: Vec<f64>,
    #[serde(flatten)]
    pub extras: ReportExtras,
}

pub fn summarize(m: &ResultsMatrix, extras: ReportExtras) -> Result<Summary> {
    let last = m.stages().checked_sub(1).ok_or_else(|| Error::Empty("no completed stages".into()))?;
    let fr = if m.stages() >= 2 {
        forgetting_rate(m)?
    } else {
        Forgetting {
            per_task: vec![],
            average: 0.0,
        }
    };
    Ok(Summary {
        version: REPORT_VERSION,
        tasks: m.tasks.clone(),
        avg_dice: avg_dice(m, last)?,
        avg_fr: fr.average,
        per_task_fr: fr.per_task,
        final_dice: m.rows[last].clone(),
        extras,
    })
}

/// Writes `metrics.csv` and `summary.json` into `dir`. Nothing is written for an empty matrix.
pub fn emit_report(m: &ResultsMatrix, extras: ReportExtras, dir: &Path) -> Result<Summary> {
    let summary = summarize(m, extras)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), to_csv(m))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Rebuilds `summary.json` from a finished run directory's `metrics.csv`.
pub fn regenerate_report(dir: &Path) -> Result<Summary> {
    let old: Summary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let m = parse_csv(old.tasks.clone(), &fs::read_to_string(dir.join("metrics.csv"))?)?;
    emit_report(&m, old.extras, dir)
}
