//! Paired training runs that switch off one component at a time.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::awc::Weighting;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalReport};
use crate::msfa::separation_gap;
use crate::trainer::{self, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    /// λ1 = 0.
    NoAttention,
    /// Fixed 1/3 scale weights instead of the predictor.
    UniformWeights,
    /// Head sees only the weighted scale vectors.
    NoFinalConcat,
    /// No attention loss and uniform weights together.
    Baseline,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoAttention,
        AblationMode::UniformWeights,
        AblationMode::NoFinalConcat,
        AblationMode::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoAttention => "no-attention",
            AblationMode::UniformWeights => "uniform-weights",
            AblationMode::NoFinalConcat => "no-final-concat",
            AblationMode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// The configuration of this arm; everything else stays as given.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        if matches!(self, AblationMode::NoAttention | AblationMode::Baseline) {
            cfg.loss_weights.lambda_att = 0.0;
        }
        if matches!(self, AblationMode::UniformWeights | AblationMode::Baseline) {
            cfg.model.weighting = Weighting::Uniform;
        }
        if self == AblationMode::NoFinalConcat {
            cfg.model.final_concat = false;
        }
        cfg
    }
}

/// Outcome of one trained and evaluated arm.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub mode: AblationMode,
    pub seed: u64,
    pub report: EvalReport,
    /// Mean over scales of the held-out intra- minus inter-class cosine.
    pub separation_gap: Option<f64>,
    /// Largest deviation of any logged training weight row from summing to 1.
    pub weight_row_error: f64,
}

/// Trains `mode` with `seed` and evaluates on the test split. With an
/// `out_dir`, the run's logs and checkpoint go to `out_dir/{mode}/seed{seed}`.
pub fn run_arm(
    manifest: &Manifest,
    cfg: &TrainConfig,
    mode: AblationMode,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ArmResult> {
    let mut cfg = mode.apply(cfg);
    cfg.seed = seed;
    let dir = out_dir.map(|d| d.join(mode.name()).join(format!("seed{seed}")));
    let fit = trainer::fit(manifest, &cfg, dir.as_deref())?;
    let eval = evaluator::evaluate(&fit.model, manifest.classes(), manifest, Some(&cfg.attention))?;
    let report = evaluator::metrics(&eval.confusion)?;
    let mut gaps = Vec::new();
    for (vectors, degenerate) in &eval.inference.vectors {
        if let Some(g) = separation_gap(vectors, degenerate, &eval.labels)? {
            gaps.push(g);
        }
    }
    let separation_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    let weight_row_error = fit
        .steps
        .iter()
        .map(|s| (s.losses.mean_weights.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(ArmResult {
        mode,
        seed,
        report,
        separation_gap,
        weight_row_error,
    })
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub mode: AblationMode,
    pub runs: usize,
    pub accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
    pub separation_gap: (f64, f64),
}

/// Seed-averaged statistics per mode, in first-seen order.
pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut modes: Vec<AblationMode> = Vec::new();
    for r in results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let runs: Vec<&ArmResult> = results.iter().filter(|r| r.mode == mode).collect();
            let col = |f: &dyn Fn(&ArmResult) -> Option<f64>| {
                mean_sd(&runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            ArmSummary {
                mode,
                runs: runs.len(),
                accuracy: col(&|r| Some(r.report.accuracy)),
                macro_f1: col(&|r| Some(r.report.macro_f1)),
                separation_gap: col(&|r| r.separation_gap),
            }
        })
        .collect()
}

/// `ablation.csv`: one row per mode with seed-averaged means and standard
/// deviations.
pub fn ablation_csv(summaries: &[ArmSummary]) -> String {
    let mut out =
        String::from("mode,runs,accuracy_mean,accuracy_sd,macro_f1_mean,macro_f1_sd,gap_mean,gap_sd\n");
    for s in summaries {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.mode.name(),
            s.runs,
            s.accuracy.0,
            s.accuracy.1,
            s.macro_f1.0,
            s.macro_f1.1,
            s.separation_gap.0,
            s.separation_gap.1
        )
        .expect("write to string");
    }
    out
}

/// `runs.csv`: one row per trained arm.
pub fn runs_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("mode,seed,accuracy,macro_recall,macro_precision,macro_f1,separation_gap\n");
    for r in results {
        let gap = r.separation_gap.map_or(String::new(), |g| format!("{g:.6}"));
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{gap}",
            r.mode.name(),
            r.seed,
            r.report.accuracy,
            r.report.macro_recall,
            r.report.macro_precision,
            r.report.macro_f1
        )
        .expect("write to string");
    }
    out
}

pub fn write_outputs(dir: &Path, results: &[ArmResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("ablation.csv", ablation_csv(&summarize(results))), ("runs.csv", runs_csv(results))] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
