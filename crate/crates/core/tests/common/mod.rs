use std::collections::BTreeMap;

use msaw::evaluator::{self, ConfusionMatrix, EvalReport};

pub const GOLDEN_3CLASS: &str = include_str!("../golden/report_3class.txt");

/// Fixed confusion matrices behind the golden 3-class report.
pub fn golden_reports() -> BTreeMap<usize, EvalReport> {
    let classes: Vec<String> = evaluator::THREE_CLASS_ROWS.iter().map(|s| s.to_string()).collect();
    evaluator::TABLE_COUNTS
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let d = i as u64;
            let rows = vec![
                vec![30 + d, 8 - d, 2],
                vec![6 - d / 2, 31 + d, 3 - d / 3],
                vec![4, 5 - d / 2, 31 + d],
            ];
            let cm = ConfusionMatrix::from_counts(classes.clone(), &rows).unwrap();
            (count, evaluator::metrics(&cm).unwrap())
        })
        .collect()
}

