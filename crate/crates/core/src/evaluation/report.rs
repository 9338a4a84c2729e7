use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsReport};

/// Strategy label of rows scored with the subject-independent model.
pub const SI_STRATEGY: &str = "SI";

/// One row of the per-snapshot report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject: String,
    pub night: u32,
    /// Empty for rows scored with the subject-independent model.
    pub alpha: Option<f64>,
    pub strategy: String,
    /// 0 for the subject-independent model.
    pub snapshot_epoch: usize,
    pub acc: f64,
    pub kappa: f64,
    pub mf1: f64,
    pub sens: f64,
    pub spec: f64,
    pub n_epochs: u64,
}

impl ReportRow {
    pub fn new(
        subject: &str,
        night: u32,
        alpha: Option<f64>,
        strategy: &str,
        snapshot_epoch: usize,
        m: &MetricsReport,
    ) -> Self {
        Self {
            subject: subject.to_string(),
            night,
            alpha,
            strategy: strategy.to_string(),
            snapshot_epoch,
            acc: m.accuracy,
            kappa: m.kappa,
            mf1: m.macro_f1,
            sens: m.sensitivity,
            spec: m.specificity,
            n_epochs: m.n_epochs,
        }
    }

    fn metric(&self, name: &str) -> f64 {
        match name {
            "acc" => self.acc,
            "kappa" => self.kappa,
            "mf1" => self.mf1,
            "sens" => self.sens,
            _ => self.spec,
        }
    }
}

pub const METRIC_NAMES: [&str; 5] = ["acc", "kappa", "mf1", "sens", "spec"];

pub fn write_report_csv<W: Write>(writer: W, rows: &[ReportRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))?;
    Ok(())
}

pub fn read_report_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>, EvalError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| EvalError::Csv(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateGroup {
    /// Accuracy before personalization below β.
    GroupA,
    /// Accuracy before personalization equal to or above β.
    GroupB,
}

pub const DEFAULT_BETA: f64 = 0.77;

pub fn personalization_gate(accuracy_before: f64, beta: f64) -> Result<GateGroup, EvalError> {
    for (name, v) in [("accuracy_before", accuracy_before), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::OutOfRange { name, value: v });
        }
    }
    Ok(if accuracy_before < beta { GateGroup::GroupA } else { GateGroup::GroupB })
}

/// Population mean and standard deviation (divide by `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub alpha: f64,
    pub metric: String,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub snapshot_epoch: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub subject: String,
    pub strategy: String,
    pub alpha: f64,
    /// Accuracy used by the gate (first night when available).
    pub gate_accuracy: f64,
    pub before: f64,
    pub after: f64,
    pub improvement: f64,
    pub group: GateGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub strategy: String,
    pub alpha: f64,
    pub group: GateGroup,
    pub n: usize,
    pub mean_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub beta: f64,
    pub final_epoch: usize,
    pub table: Vec<TableRow>,
    /// Keyed `"{strategy}|alpha={alpha}"`; the first point (epoch 0) is the
    /// subject-independent model.
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub scatter: Vec<ScatterPoint>,
    pub groups: Vec<GroupSummary>,
}

pub fn curve_key(strategy: &str, alpha: f64) -> String {
    format!("{strategy}|alpha={alpha}")
}

type RunKey = (String, u64);

/// Aggregates per-snapshot rows into the study tables. "Before" is the
/// subject-independent model on the second night; "after" is the final
/// snapshot. Gate groups use the subject-independent first-night accuracy
/// when present, otherwise the second-night accuracy.
pub fn experiment_report(rows: &[ReportRow], beta: f64) -> Result<StudyReport, EvalError> {
    personalization_gate(0.0, beta)?;
    let mut si_test: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    let mut si_train: BTreeMap<&str, &ReportRow> = BTreeMap::new();
    let mut runs: BTreeMap<RunKey, BTreeMap<&str, BTreeMap<usize, &ReportRow>>> = BTreeMap::new();
    let test_night = rows.iter().map(|r| r.night).max().ok_or(EvalError::NoRuns)?;
    for r in rows {
        match r.alpha {
            None => {
                let map = if r.night == test_night { &mut si_test } else { &mut si_train };
                map.insert(&r.subject, r);
            }
            Some(a) => {
                runs.entry((r.strategy.clone(), a.to_bits()))
                    .or_default()
                    .entry(&r.subject)
                    .or_default()
                    .insert(r.snapshot_epoch, r);
            }
        }
    }
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }

    let mut grid: Option<BTreeSet<usize>> = None;
    for ((strategy, _), subjects) in &runs {
        for (subject, snaps) in subjects {
            let epochs: BTreeSet<usize> = snaps.keys().copied().collect();
            match &grid {
                None => grid = Some(epochs),
                Some(g) if *g != epochs => {
                    return Err(EvalError::InconsistentGrid(format!(
                        "subject {subject} ({strategy}) has snapshots {epochs:?}, others {g:?}"
                    )))
                }
                _ => {}
            }
            if !si_test.contains_key(subject) {
                return Err(EvalError::Mismatch(format!("no subject-independent score for subject {subject}")));
            }
        }
    }
    let grid = grid.expect("at least one run");
    let final_epoch = *grid.iter().next_back().expect("non-empty grid");

    let mut report = StudyReport {
        beta,
        final_epoch,
        table: Vec::new(),
        curves: BTreeMap::new(),
        scatter: Vec::new(),
        groups: Vec::new(),
    };
    for ((strategy, alpha_bits), subjects) in &runs {
        let alpha = f64::from_bits(*alpha_bits);
        for metric in METRIC_NAMES {
            let before: Vec<f64> = subjects.keys().map(|s| si_test[s].metric(metric)).collect();
            let after: Vec<f64> = subjects.values().map(|snaps| snaps[&final_epoch].metric(metric)).collect();
            let (before_mean, before_std) = mean_std(&before);
            let (after_mean, after_std) = mean_std(&after);
            report.table.push(TableRow {
                strategy: strategy.clone(),
                alpha,
                metric: metric.to_string(),
                before_mean,
                before_std,
                after_mean,
                after_std,
            });
        }
        let mut curve = Vec::new();
        let before: Vec<f64> = subjects.keys().map(|s| si_test[s].acc).collect();
        let (mean_acc, std_acc) = mean_std(&before);
        curve.push(CurvePoint { snapshot_epoch: 0, mean_acc, std_acc });
        for &epoch in &grid {
            let accs: Vec<f64> = subjects.values().map(|snaps| snaps[&epoch].acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            curve.push(CurvePoint { snapshot_epoch: epoch, mean_acc, std_acc });
        }
        report.curves.insert(curve_key(strategy, alpha), curve);

        let mut by_group: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for (subject, snaps) in subjects {
            let before = si_test[subject].acc;
            let after = snaps[&final_epoch].acc;
            let gate_accuracy = si_train.get(subject).map_or(before, |r| r.acc);
            let group = personalization_gate(gate_accuracy, beta)?;
            by_group.entry(group as u8).or_default().push(after - before);
            report.scatter.push(ScatterPoint {
                subject: subject.to_string(),
                strategy: strategy.clone(),
                alpha,
                gate_accuracy,
                before,
                after,
                improvement: after - before,
                group,
            });
        }
        for (group, improvements) in [(GateGroup::GroupA, 0u8), (GateGroup::GroupB, 1u8)]
            .map(|(g, k)| (g, by_group.remove(&k).unwrap_or_default()))
        {
            report.groups.push(GroupSummary {
                strategy: strategy.clone(),
                alpha,
                group,
                n: improvements.len(),
                mean_improvement: mean_std(&improvements).0,
            });
        }
    }
    Ok(report)
}

/// Table of mean ± std per metric, before and after personalization.
pub fn format_table(report: &StudyReport) -> String {
    let mut out = format!(
        "{:<12} {:>5} {:>6} {:>17} {:>17}\n",
        "strategy", "alpha", "metric", "before", "after"
    );
    for r in &report.table {
        let pct = r.metric != "kappa";
        let fmt = |m: f64, s: f64| {
            if pct {
                format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
            } else {
                format!("{:.3} ± {:.3}", m, s)
            }
        };
        out.push_str(&format!(
            "{:<12} {:>5} {:>6} {:>17} {:>17}\n",
            r.strategy,
            r.alpha,
            r.metric,
            fmt(r.before_mean, r.before_std),
            fmt(r.after_mean, r.after_std)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(subject: &str, night: u32, alpha: Option<f64>, strategy: &str, epoch: usize, acc: f64) -> ReportRow {
        ReportRow {
            subject: subject.into(),
            night,
            alpha,
            strategy: strategy.into(),
            snapshot_epoch: epoch,
            acc,
            kappa: acc,
            mf1: acc,
            sens: acc,
            spec: acc,
            n_epochs: 100,
        }
    }

    #[test]
    fn gate_rule() {
        assert_eq!(personalization_gate(0.70, 0.77).unwrap(), GateGroup::GroupA);
        assert_eq!(personalization_gate(0.77, 0.77).unwrap(), GateGroup::GroupB);
        assert_eq!(personalization_gate(0.0, 0.0).unwrap(), GateGroup::GroupB);
        assert!(personalization_gate(1.2, 0.77).is_err());
    }

    #[test]
    fn two_subject_means_use_population_std() {
        let rows = vec![
            row("a", 2, None, SI_STRATEGY, 0, 0.6),
            row("b", 2, None, SI_STRATEGY, 0, 0.8),
            row("a", 2, Some(0.4), "All", 5, 0.7),
            row("b", 2, Some(0.4), "All", 5, 0.9),
        ];
        let rep = experiment_report(&rows, 0.77).unwrap();
        let acc = rep.table.iter().find(|r| r.metric == "acc").unwrap();
        assert!((acc.after_mean - 0.8).abs() < 1e-12 && (acc.after_std - 0.1).abs() < 1e-12);
        assert_eq!(rep.curves["All|alpha=0.4"].len(), 2);
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let rows = vec![
            row("a", 2, None, SI_STRATEGY, 0, 0.6),
            row("b", 2, None, SI_STRATEGY, 0, 0.8),
            row("a", 2, Some(0.4), "All", 5, 0.7),
            row("b", 2, Some(0.4), "All", 10, 0.9),
        ];
        assert!(matches!(experiment_report(&rows, 0.77), Err(EvalError::InconsistentGrid(_))));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("a", 2, None, SI_STRATEGY, 0, 0.6), row("a", 2, Some(0.2), "All", 5, 0.7)];
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject,night,alpha,strategy,snapshot_epoch,acc,kappa,mf1,sens,spec,n_epochs\n"));
        assert_eq!(read_report_csv(buf.as_slice()).unwrap(), rows);
    }
}
