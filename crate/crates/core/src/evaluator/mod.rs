//! Confusion matrices, metrics and fixed-width reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{Inference, Model};
use crate::msfa::AttentionConfig;
use crate::trainer::Checkpoint;

/// Training-set sizes of the published per-class tables.
pub const TABLE_COUNTS: [usize; 6] = [20, 30, 40, 60, 80, 100];

pub const THREE_CLASS_ROWS: [&str; 3] = ["Bulk Carrier", "Container Ship", "Tanker"];
pub const SIX_CLASS_ROWS: [&str; 6] = ["Bulk Carrier", "Container Ship", "Tanker", "Cargo", "Fishing", "General Cargo"];

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix { classes, counts: vec![0; k * k] }
    }

    pub fn from_counts(classes: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let k = classes.len();
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim(format!("confusion matrix must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { classes, counts: rows.concat() })
    }

    pub fn from_predictions(classes: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!("{} labels, {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.k();
        if truth >= k || predicted >= k {
            return Err(Error::dim(format!("class ({truth}, {predicted}) outside {k}")));
        }
        self.counts[truth * k + predicted] += 1;
        Ok(())
    }

    /// Elementwise sum of two tallies over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Config("merging confusion matrices over different classes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k() + predicted]
    }

    pub fn row_total(&self, k: usize) -> u64 {
        (0..self.k()).map(|j| self.get(k, j)).sum()
    }

    pub fn col_total(&self, k: usize) -> u64 {
        (0..self.k()).map(|i| self.get(i, k)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.get(i, i)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("class,{}\n", self.classes.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        for i in 0..self.k() {
            let cells: Vec<String> = (0..self.k()).map(|j| self.get(i, j).to_string()).collect();
            writeln!(out, "{},{}", csv_field(&self.classes[i]), cells.join(",")).expect("write to string");
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// Test samples per true class.
    pub support: Vec<u64>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Classes never predicted; their precision is reported as 0.
    pub precision_undefined: Vec<bool>,
    pub macro_recall: f64,
    pub macro_precision: f64,
    /// Harmonic mean of macro precision and macro recall.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let k = cm.k();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall: Vec<f64> = (0..k).map(|i| ratio(cm.get(i, i), cm.row_total(i))).collect();
    let precision: Vec<f64> = (0..k).map(|i| ratio(cm.get(i, i), cm.col_total(i))).collect();
    let macro_recall = recall.iter().sum::<f64>() / k as f64;
    let macro_precision = precision.iter().sum::<f64>() / k as f64;
    let macro_f1 = if macro_recall + macro_precision == 0.0 {
        0.0
    } else {
        2.0 * macro_precision * macro_recall / (macro_precision + macro_recall)
    };
    Ok(EvalReport {
        classes: cm.classes.clone(),
        support: (0..k).map(|i| cm.row_total(i)).collect(),
        recall,
        precision,
        precision_undefined: (0..k).map(|i| cm.col_total(i) == 0).collect(),
        macro_recall,
        macro_precision,
        macro_f1,
        accuracy: cm.trace() as f64 / total as f64,
        total,
    })
}

/// Outcome of running a model over a test split.
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub inference: Inference<f32>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Eval-mode predictions for every test sample of `manifest`, whose classes
/// must be exactly `classes` in the same order.
pub fn evaluate(
    model: &Model<f32>,
    classes: &[String],
    manifest: &Manifest,
    attention: Option<&AttentionConfig>,
) -> Result<Evaluation> {
    if manifest.classes() != classes {
        return Err(Error::Config(format!(
            "class-set mismatch: model knows {:?}, manifest has {:?}",
            classes,
            manifest.classes()
        )));
    }
    let test = manifest.load_split::<f32>(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("manifest has no test samples".into()));
    }
    let inference = model.infer(&test.all()?, attention)?;
    let confusion = ConfusionMatrix::from_predictions(classes.to_vec(), &test.labels, &inference.predicted())?;
    Ok(Evaluation {
        confusion,
        inference,
        ids: test.ids,
        labels: test.labels,
    })
}

/// Loads a manifest in the class order of a checkpoint. The two class sets
/// must agree.
pub fn manifest_for(checkpoint: &Checkpoint, path: &Path) -> Result<Manifest> {
    let found = Manifest::load(path)?;
    let mut a = found.classes().to_vec();
    let mut b = checkpoint.meta.classes.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(Error::Config(format!(
            "class-set mismatch: checkpoint knows {:?}, manifest has {:?}",
            checkpoint.meta.classes,
            found.classes()
        )));
    }
    Manifest::load_with_classes(path, &checkpoint.meta.classes)
}

/// A rate as a percentage rounded half-up to two decimals, in hundredths.
pub fn hundredths_of_percent(rate: f64) -> u64 {
    // Rates are ratios of counts, so a value within 1e-7 of a rounding tie
    // is a tie that floating point has nudged downwards.
    (rate * 10_000.0 + 0.5 + 1e-7).floor() as u64
}

pub fn format_percent(rate: f64) -> String {
    let h = hundredths_of_percent(rate);
    format!("{}.{:02}%", h / 100, h % 100)
}

/// Row layout of a per-class table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    ThreeClass,
    SixClass,
    /// Any other class list, in the given order.
    Custom(Vec<String>),
}

impl Layout {
    pub fn rows(&self) -> Vec<String> {
        match self {
            Layout::ThreeClass => THREE_CLASS_ROWS.iter().map(|s| s.to_string()).collect(),
            Layout::SixClass => SIX_CLASS_ROWS.iter().map(|s| s.to_string()).collect(),
            Layout::Custom(rows) => rows.clone(),
        }
    }

    /// The fixed layout for a class list when one matches, else `Custom`.
    pub fn for_classes(classes: &[String]) -> Self {
        let mut sorted = classes.to_vec();
        sorted.sort();
        for layout in [Layout::ThreeClass, Layout::SixClass] {
            let mut rows = layout.rows();
            rows.sort();
            if rows == sorted {
                return layout;
            }
        }
        Layout::Custom(classes.to_vec())
    }
}

const CLASS_WIDTH: usize = 16;
const CELL_WIDTH: usize = 8;

/// Per-class recall table keyed by training samples per class, with an
/// `Average` row (overall accuracy) and a `Macro Recall` row. Standard
/// training counts without a report are listed in a notice.
pub fn render_report(reports: &BTreeMap<usize, EvalReport>, layout: &Layout) -> Result<String> {
    let rows = layout.rows();
    let index = row_index(reports, &rows)?;
    let columns: Vec<usize> = reports.keys().copied().collect();
    let mut out = String::new();
    writeln!(
        out,
        "Recognition Performance of {} Classes with Different Number of Training Samples",
        rows.len()
    )
    .expect("write to string");
    let rule = |out: &mut String, ch: char| {
        let width = CLASS_WIDTH + columns.len() * (CELL_WIDTH + 3);
        out.extend(std::iter::repeat_n(ch, width));
        out.push('\n');
    };
    rule(&mut out, '=');
    write!(out, "{:<CLASS_WIDTH$}", "Class").expect("write to string");
    for c in &columns {
        write!(out, " | {c:>CELL_WIDTH$}").expect("write to string");
    }
    out.push('\n');
    rule(&mut out, '-');
    let line = |out: &mut String, label: &str, cell: &dyn Fn(&EvalReport, usize) -> f64, col: &[usize]| {
        write!(out, "{label:<CLASS_WIDTH$}").expect("write to string");
        for (i, c) in col.iter().enumerate() {
            write!(out, " | {:>CELL_WIDTH$}", format_percent(cell(&reports[c], i))).expect("write to string");
        }
        out.push('\n');
    };
    for (r, name) in rows.iter().enumerate() {
        let map: Vec<usize> = columns.iter().map(|c| index[c][r]).collect();
        line(&mut out, name, &|rep, i| rep.recall[map[i]], &columns);
    }
    rule(&mut out, '-');
    line(&mut out, "Average", &|rep, _| rep.accuracy, &columns);
    line(&mut out, "Macro Recall", &|rep, _| rep.macro_recall, &columns);
    rule(&mut out, '=');
    out.push_str("Average is overall accuracy; Macro Recall is the unweighted mean of class recalls.\n");
    let missing: Vec<String> = TABLE_COUNTS
        .iter()
        .filter(|c| !reports.contains_key(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        writeln!(out, "No report for {} training samples per class; column omitted.", missing.join(", "))
            .expect("write to string");
    }
    Ok(out)
}

/// Maps every layout row to the report's class position.
fn row_index(reports: &BTreeMap<usize, EvalReport>, rows: &[String]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to render".into()));
    }
    let mut index = BTreeMap::new();
    for (&count, rep) in reports {
        let mut sorted_rows = rows.to_vec();
        let mut sorted_classes = rep.classes.clone();
        sorted_rows.sort();
        sorted_classes.sort();
        if sorted_rows != sorted_classes {
            return Err(Error::Config(format!(
                "report for {count} samples covers {:?}, layout expects {:?}",
                rep.classes, rows
            )));
        }
        let map = rows
            .iter()
            .map(|r| rep.classes.iter().position(|c| c == r).expect("same set"))
            .collect();
        index.insert(count, map);
    }
    Ok(index)
}

/// The per-class table as CSV: `class,count_20,...` with percentages.
pub fn report_csv(reports: &BTreeMap<usize, EvalReport>, layout: &Layout) -> Result<String> {
    let rows = layout.rows();
    let index = row_index(reports, &rows)?;
    let header: Vec<String> = reports.keys().map(|c| format!("count_{c}")).collect();
    let mut out = format!("class,{}\n", header.join(","));
    let pct = |r: f64| {
        let h = hundredths_of_percent(r);
        format!("{}.{:02}", h / 100, h % 100)
    };
    for (r, name) in rows.iter().enumerate() {
        let cells: Vec<String> = reports.iter().map(|(c, rep)| pct(rep.recall[index[c][r]])).collect();
        writeln!(out, "{},{}", csv_field(name), cells.join(",")).expect("write to string");
    }
    for (label, f) in [
        ("Average", (|r: &EvalReport| r.accuracy) as fn(&EvalReport) -> f64),
        ("Macro Recall", |r: &EvalReport| r.macro_recall),
    ] {
        let cells: Vec<String> = reports.values().map(|rep| pct(f(rep))).collect();
        writeln!(out, "{label},{}", cells.join(",")).expect("write to string");
    }
    Ok(out)
}

/// One-line-per-model summary: recall, precision, F1 and accuracy.
pub fn render_summary(rows: &[(String, &EvalReport)]) -> String {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!(
        "{:<name_width$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$}\n",
        "Method", "Recall", "Precision", "F1", "Acc"
    );
    let mut notes = Vec::new();
    for (name, rep) in rows {
        writeln!(
            out,
            "{name:<name_width$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$} | {:>CELL_WIDTH$}",
            format_percent(rep.macro_recall),
            format_percent(rep.macro_precision),
            format_percent(rep.macro_f1),
            format_percent(rep.accuracy)
        )
        .expect("write to string");
        for (k, _) in rep.precision_undefined.iter().enumerate().filter(|(_, &u)| u) {
            notes.push(format!("{name}: {} was never predicted; its precision counts as 0.", rep.classes[k]));
        }
    }
    for n in notes {
        writeln!(out, "* {n}").expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests;
