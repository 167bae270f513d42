//! Confusion counts, precision/recall/F1 and cross-configuration tables.
//!
//! Conventions: precision is 0 when `tp + fp = 0`, recall is 0 when
//! `tp + fn = 0`, F1 is 0 when `precision + recall = 0`; such classes are
//! flagged in the report. Macro values are unweighted means of per-class
//! values (macro F1 is the mean of per-class F1). Micro values come from the
//! pooled counts. Reports hold percentages; rounding to two decimals happens
//! only when rendering.

use std::collections::HashMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::decision::{DecisionConfig, DecisionRecord};
use crate::error::{Error, Result};
use crate::ingestion::{LabelMatrix, LabelSchema};
use crate::riskcontrol::{FalseNegativeRate, PredictionSet, SetLoss};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n: u64,
    pub classes: Vec<Counts>,
}

impl ClassCounts {
    pub fn pooled(&self) -> Counts {
        let mut total = Counts::default();
        for c in &self.classes {
            total.add(c);
        }
        total
    }
}

fn align<'a>(
    case_ids: impl Iterator<Item = &'a str>,
    labels: &'a LabelMatrix,
) -> Result<Vec<&'a [u8]>> {
    let index: HashMap<&str, usize> = labels
        .case_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut seen = vec![false; labels.n()];
    let mut rows = Vec::with_capacity(labels.n());
    for id in case_ids {
        let &i = index
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("case {id:?} has no ground-truth labels")))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Alignment(format!("case {id:?} appears twice")));
        }
        rows.push(labels.row(i));
    }
    if rows.len() != labels.n() {
        return Err(Error::Alignment(format!(
            "{} decided cases vs {} labelled cases",
            rows.len(),
            labels.n()
        )));
    }
    Ok(rows)
}

pub fn count_confusion(decisions: &[DecisionRecord], labels: &LabelMatrix) -> Result<ClassCounts> {
    let rows = align(decisions.iter().map(|d| d.case_id.as_str()), labels)?;
    let mut classes = vec![Counts::default(); labels.k()];
    for (d, truth) in decisions.iter().zip(rows) {
        if d.decisions.len() != labels.k() {
            return Err(Error::SchemaMismatch(format!(
                "decision for {:?} has {} classes, labels have {}",
                d.case_id,
                d.decisions.len(),
                labels.k()
            )));
        }
        for ((c, &pred), &y) in classes.iter_mut().zip(&d.decisions).zip(truth) {
            match (pred, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
    }
    Ok(ClassCounts {
        n: decisions.len() as u64,
        classes,
    })
}

/// Precision, recall and F1 as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(c: &Counts) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }

    fn percent(self) -> Self {
        Self {
            precision: self.precision * 100.0,
            recall: self.recall * 100.0,
            f1: self.f1 * 100.0,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub counts: Counts,
    /// Percentages.
    pub metrics: Prf,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: Option<DecisionConfig>,
    pub reviewer_id: String,
    pub n_cases: u64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub micro: Prf,
    pub empirical_fnr: Option<f64>,
}

impl MetricReport {
    /// Everything except identity fields, for comparing two configurations.
    pub fn same_metrics(&self, other: &MetricReport) -> bool {
        self.n_cases == other.n_cases
            && self.per_class == other.per_class
            && self.macro_avg == other.macro_avg
            && self.micro == other.micro
            && self.empirical_fnr == other.empirical_fnr
    }
}

pub fn compute_metrics(counts: &ClassCounts, schema: &LabelSchema) -> Result<MetricReport> {
    if counts.classes.len() != schema.k() {
        return Err(Error::SchemaMismatch(format!(
            "{} count rows for {} classes",
            counts.classes.len(),
            schema.k()
        )));
    }
    let per_class: Vec<ClassMetrics> = counts
        .classes
        .iter()
        .zip(schema.names())
        .map(|(c, name)| ClassMetrics {
            label: name.clone(),
            counts: *c,
            metrics: Prf::from_counts(c).percent(),
            precision_undefined: c.tp + c.fp == 0,
            recall_undefined: c.tp + c.fn_ == 0,
        })
        .collect();
    let k = per_class.len().max(1) as f64;
    let mean = |f: fn(&Prf) -> f64| per_class.iter().map(|c| f(&c.metrics)).sum::<f64>() / k;
    Ok(MetricReport {
        config: None,
        reviewer_id: String::new(),
        n_cases: counts.n,
        macro_avg: Prf {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        micro: Prf::from_counts(&counts.pooled()).percent(),
        per_class,
        empirical_fnr: None,
    })
}

fn mean_fnr<'a>(
    cases: impl Iterator<Item = (&'a str, Vec<usize>)> + Clone,
    labels: &LabelMatrix,
) -> Result<f64> {
    let rows = align(cases.clone().map(|(id, _)| id), labels)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = cases
        .zip(&rows)
        .map(|((_, members), truth)| FalseNegativeRate.evaluate(&members, truth))
        .sum();
    Ok(total / rows.len() as f64)
}

/// Mean per-case FNR of prediction sets.
pub fn empirical_fnr_of_sets(sets: &[PredictionSet], labels: &LabelMatrix) -> Result<f64> {
    mean_fnr(sets.iter().map(|s| (s.case_id.as_str(), s.members.clone())), labels)
}

/// Mean per-case FNR of final decisions.
pub fn empirical_fnr_of_decisions(decisions: &[DecisionRecord], labels: &LabelMatrix) -> Result<f64> {
    mean_fnr(decisions.iter().map(|d| (d.case_id.as_str(), d.positives())), labels)
}

/// Counts, metrics and empirical FNR for one configuration's decisions.
pub fn evaluate_decisions(
    decisions: &[DecisionRecord],
    labels: &LabelMatrix,
    schema: &LabelSchema,
) -> Result<MetricReport> {
    let counts = count_confusion(decisions, labels)?;
    let mut report = compute_metrics(&counts, schema)?;
    if let Some(first) = decisions.first() {
        report.config = Some(first.config);
        report.reviewer_id = first.reviewer_id.clone();
        report.empirical_fnr = Some(empirical_fnr_of_decisions(decisions, labels)?);
    }
    Ok(report)
}

/// Column order of the overall table.
pub const OVERALL_COLUMNS: [&str; 6] = [
    "Macro Pr", "Macro Rec", "Macro F1", "Micro Pr", "Micro Rec", "Micro F1",
];

fn overall_values(r: &MetricReport) -> [f64; 6] {
    [
        r.macro_avg.precision,
        r.macro_avg.recall,
        r.macro_avg.f1,
        r.micro.precision,
        r.micro.recall,
        r.micro.f1,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub config: String,
    pub reviewer_id: String,
    pub values: [f64; 6],
    /// Percentage-point difference from the first row.
    pub delta_points: Option<[f64; 6]>,
    /// Relative difference from the first row, in percent; `None` where the
    /// first row's value is 0.
    pub delta_relative: Option<[Option<f64>; 6]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    /// One `[precision, recall, f1]` triple per report.
    pub values: Vec<[f64; 3]>,
    /// Index of the report with the highest F1 for this class, if unique.
    pub best_f1: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub overall: Vec<OverallRow>,
    /// Row index of the best value per overall column, if unique.
    pub best_per_column: Vec<Option<usize>>,
    pub per_class: Vec<ClassRow>,
}

fn unique_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let values: Vec<f64> = values.collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hits = values.iter().enumerate().filter(|(_, &v)| v == max);
    let first = hits.next().map(|(i, _)| i);
    if hits.next().is_some() || values.len() < 2 {
        None
    } else {
        first
    }
}

fn row_name(r: &MetricReport) -> String {
    r.config
        .map(|c| c.display_name().to_string())
        .unwrap_or_else(|| "-".to_string())
}

pub fn compare_configs(reports: &[MetricReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::EmptyInput("no reports to compare".into()))?;
    let base = overall_values(first);
    let overall: Vec<OverallRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let values = overall_values(r);
            let (delta_points, delta_relative) = if i == 0 {
                (None, None)
            } else {
                let mut points = [0.0; 6];
                let mut relative = [None; 6];
                for c in 0..6 {
                    points[c] = values[c] - base[c];
                    relative[c] = (base[c] != 0.0).then(|| points[c] / base[c] * 100.0);
                }
                (Some(points), Some(relative))
            };
            OverallRow {
                config: row_name(r),
                reviewer_id: r.reviewer_id.clone(),
                values,
                delta_points,
                delta_relative,
            }
        })
        .collect();
    let best_per_column = (0..6)
        .map(|c| unique_argmax(overall.iter().map(|row| row.values[c])))
        .collect();
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(k, class)| {
            let values: Vec<[f64; 3]> = reports
                .iter()
                .map(|r| {
                    r.per_class
                        .get(k)
                        .map(|m| [m.metrics.precision, m.metrics.recall, m.metrics.f1])
                        .unwrap_or([0.0; 3])
                })
                .collect();
            let best_f1 = unique_argmax(values.iter().map(|v| v[2]));
            ClassRow {
                label: class.label.clone(),
                values,
                best_f1,
            }
        })
        .collect();
    Ok(ComparisonTable {
        columns: OVERALL_COLUMNS.iter().map(|s| s.to_string()).collect(),
        overall,
        best_per_column,
        per_class,
    })
}

fn cell(value: f64, bold: bool) -> String {
    if bold {
        format!("**{value:.2}**")
    } else {
        format!("{value:.2}")
    }
}

fn signed(value: f64) -> String {
    format!("{value:+.2}")
}

/// Markdown rendering: the overall table, the delta tables (when there is more
/// than one report) and the per-class table.
pub fn render_markdown(table: &ComparisonTable) -> String {
    let mut out = String::new();
    out.push_str("## Overall performance\n\n");
    out.push_str("| Config | Model | ");
    out.push_str(&table.columns.join(" | "));
    out.push_str(" |\n|---|---|");
    out.push_str(&"---:|".repeat(table.columns.len()));
    out.push('\n');
    for (i, row) in table.overall.iter().enumerate() {
        let cells: Vec<String> = row
            .values
            .iter()
            .enumerate()
            .map(|(c, &v)| cell(v, table.best_per_column[c] == Some(i)))
            .collect();
        let _ = writeln!(out, "| {} | {} | {} |", row.config, row.reviewer_id, cells.join(" | "));
    }

    if table.overall.len() > 1 {
        let base = &table.overall[0];
        let _ = write!(
            out,
            "\n## Difference from {} (percentage points)\n\n| Config | Model | {} |\n|---|---|{}\n",
            base.config,
            table.columns.join(" | "),
            "---:|".repeat(table.columns.len())
        );
        for row in &table.overall[1..] {
            let cells: Vec<String> = row
                .delta_points
                .expect("non-first rows carry deltas")
                .iter()
                .map(|&d| signed(d))
                .collect();
            let _ = writeln!(out, "| {} | {} | {} |", row.config, row.reviewer_id, cells.join(" | "));
        }
        let _ = write!(
            out,
            "\n## Difference from {} (relative %)\n\n| Config | Model | {} |\n|---|---|{}\n",
            base.config,
            table.columns.join(" | "),
            "---:|".repeat(table.columns.len())
        );
        for row in &table.overall[1..] {
            let cells: Vec<String> = row
                .delta_relative
                .expect("non-first rows carry deltas")
                .iter()
                .map(|d| d.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}%")))
                .collect();
            let _ = writeln!(out, "| {} | {} | {} |", row.config, row.reviewer_id, cells.join(" | "));
        }
    }

    out.push_str("\n## Per-class precision, recall and F1\n\n| Class |");
    for row in &table.overall {
        let _ = write!(out, " {0} Pr | {0} Rec | {0} F1 |", row.config);
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(3 * table.overall.len()));
    out.push('\n');
    for class in &table.per_class {
        let _ = write!(out, "| {} |", class.label);
        for (i, v) in class.values.iter().enumerate() {
            let _ = write!(
                out,
                " {} | {} | {} |",
                cell(v[0], false),
                cell(v[1], false),
                cell(v[2], class.best_f1 == Some(i))
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::Provenance;

    fn record(id: &str, decisions: Vec<u8>) -> DecisionRecord {
        let k = decisions.len();
        DecisionRecord {
            case_id: id.into(),
            decisions,
            provenance: vec![Provenance::SetDirect; k],
            config: DecisionConfig::Crc,
            reviewer_id: "direct".into(),
            defaulted: vec![],
        }
    }

    fn labels(rows: &[Vec<u8>]) -> LabelMatrix {
        let ids = (0..rows.len()).map(|i| format!("c{i}")).collect();
        LabelMatrix::from_rows(ids, rows).unwrap()
    }

    fn ab() -> LabelSchema {
        LabelSchema::new(vec!["A".into(), "B".into()]).unwrap()
    }

    #[test]
    fn perfect_and_complement() {
        let truth = vec![vec![1, 0], vec![0, 1], vec![1, 1]];
        let l = labels(&truth);
        let perfect: Vec<_> = truth.iter().enumerate().map(|(i, r)| record(&format!("c{i}"), r.clone())).collect();
        let c = count_confusion(&perfect, &l).unwrap();
        assert!(c.classes.iter().all(|x| x.fp == 0 && x.fn_ == 0));
        let r = compute_metrics(&c, &ab()).unwrap();
        assert_eq!(r.micro, Prf { precision: 100.0, recall: 100.0, f1: 100.0 });
        assert_eq!(r.macro_avg, Prf { precision: 100.0, recall: 100.0, f1: 100.0 });

        let flipped: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(i, r)| record(&format!("c{i}"), r.iter().map(|y| 1 - y).collect()))
            .collect();
        let c = count_confusion(&flipped, &l).unwrap();
        assert!(c.classes.iter().all(|x| x.tp == 0 && x.tn == 0));
        assert!(c.classes.iter().all(|x| x.total() == 3));
    }

    #[test]
    fn pooled_micro_hand_case() {
        // A: tp=1 fp=1 fn=0, B: tp=0 fp=0 fn=1 -> pooled tp=1 fp=1 fn=1
        let counts = ClassCounts {
            n: 2,
            classes: vec![
                Counts { tp: 1, fp: 1, fn_: 0, tn: 0 },
                Counts { tp: 0, fp: 0, fn_: 1, tn: 1 },
            ],
        };
        let r = compute_metrics(&counts, &ab()).unwrap();
        assert_eq!(r.micro.precision, 50.0);
        assert_eq!(r.micro.recall, 50.0);
        assert_eq!(r.micro.f1, 50.0);
        assert!(r.per_class[1].precision_undefined);
        assert_eq!(r.per_class[1].metrics, Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
    }

    #[test]
    fn alignment_errors() {
        let l = labels(&[vec![1, 0], vec![0, 1]]);
        let err = count_confusion(&[record("c0", vec![1, 0])], &l).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        let err = count_confusion(&[record("c0", vec![1, 0]), record("zz", vec![0, 0])], &l).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        let err = count_confusion(&[record("c0", vec![1, 0]), record("c0", vec![0, 0])], &l).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn fnr_of_sets() {
        let l = labels(&[vec![1, 1], vec![0, 1]]);
        let full: Vec<_> = (0..2)
            .map(|i| PredictionSet { case_id: format!("c{i}"), members: vec![0, 1], lambda_used: 1.0 })
            .collect();
        assert_eq!(empirical_fnr_of_sets(&full, &l).unwrap(), 0.0);
        let empty: Vec<_> = (0..2)
            .map(|i| PredictionSet { case_id: format!("c{i}"), members: vec![], lambda_used: 0.0 })
            .collect();
        assert_eq!(empirical_fnr_of_sets(&empty, &l).unwrap(), 1.0);
    }

    fn report(config: DecisionConfig, micro_f1: f64) -> MetricReport {
        MetricReport {
            config: Some(config),
            reviewer_id: "m".into(),
            n_cases: 1,
            per_class: vec![],
            macro_avg: Prf { precision: 10.0, recall: 20.0, f1: 30.0 },
            micro: Prf { precision: 0.0, recall: 50.0, f1: micro_f1 },
            empirical_fnr: None,
        }
    }

    #[test]
    fn deltas_against_first_report() {
        let t = compare_configs(&[report(DecisionConfig::Crc, 36.05), report(DecisionConfig::Confguide, 50.76)])
            .unwrap();
        let d = t.overall[1].delta_points.unwrap();
        assert_eq!(format!("{:+.2}", d[5]), "+14.71");
        assert_eq!(d[0], 0.0);
        let rel = t.overall[1].delta_relative.unwrap();
        assert!(rel[3].is_none());
        assert!((rel[5].unwrap() - 14.71 / 36.05 * 100.0).abs() < 1e-9);
        assert_eq!(t.best_per_column[5], Some(1));
        assert_eq!(t.best_per_column[0], None);
        let md = render_markdown(&t);
        assert!(md.contains("+14.71"));
        assert!(md.contains("**50.76**"));
    }

    #[test]
    fn single_report_has_no_deltas() {
        let t = compare_configs(&[report(DecisionConfig::Crc, 36.05)]).unwrap();
        assert!(t.overall[0].delta_points.is_none());
        assert!(!render_markdown(&t).contains("Difference"));
        assert!(compare_configs(&[]).is_err());
    }
}
