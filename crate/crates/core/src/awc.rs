//! Adaptive-weighted classification: a learned score per pyramid scale,
//! softmax-normalized into per-image scale weights, weighted fusion with the
//! final deep feature, and a linear classification head.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::params::{insert_batch_norm, Init, ParamStore, Role};
use crate::pyramid::{PyramidFeatures, NUM_SCALES};
use crate::tensor::{Real, Tensor};

/// How the per-scale weights are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Learned FC + BN score per scale, softmax across scales.
    #[default]
    Adaptive,
    /// Fixed 1/3 per scale.
    Uniform,
}

/// Coefficients of the composite loss `λ1·L_att + λ2·L_recg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_att: f64,
    pub lambda_recg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_att: 0.5,
            lambda_recg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_att) || !ok(self.lambda_recg) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {} and {}",
                self.lambda_att, self.lambda_recg
            )));
        }
        if self.lambda_att == 0.0 && self.lambda_recg == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Shape of the classifier that follows the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeadShape {
    pub channels: usize,
    pub final_dim: usize,
    pub classes: usize,
    pub weighting: Weighting,
    pub final_concat: bool,
}

impl HeadShape {
    pub fn fused_width(&self) -> usize {
        NUM_SCALES * self.channels + if self.final_concat { self.final_dim } else { 0 }
    }
}

pub(crate) fn build_params<T: Real>(shape: &HeadShape, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let mut init = Init { rng };
    if shape.weighting == Weighting::Adaptive {
        for k in 1..=NUM_SCALES {
            store.insert(
                format!("awc.scale{k}.fc.weight"),
                Role::Weight,
                init.fan_in(&[shape.channels, 1], shape.channels, 1.0),
            );
            store.insert(format!("awc.scale{k}.fc.bias"), Role::Weight, Tensor::zeros(&[1]));
            insert_batch_norm(store, &format!("awc.scale{k}.bn"), 1);
        }
    }
    let width = shape.fused_width();
    store.insert(
        "awc.head.weight",
        Role::Weight,
        init.fan_in(&[width, shape.classes], width, 1.0),
    );
    store.insert("awc.head.bias", Role::Weight, Tensor::zeros(&[shape.classes]));
}

/// Spatial average of every scale: `[N, c]` per scale.
pub fn scale_vectors<T: Real>(g: &mut Graph<T>, pyr: &PyramidFeatures) -> Result<Vec<Var>> {
    pyr.scales.iter().map(|&s| g.global_avg_pool(s)).collect()
}

/// `[N, 3]` softmax weights from one FC + BN score per scale.
pub(crate) fn predict_weights<T: Real>(ctx: &mut Ctx<'_, T>, fvs: &[Var]) -> Result<Var> {
    let mut scores = Vec::with_capacity(fvs.len());
    for (k, &fv) in fvs.iter().enumerate() {
        let p = format!("awc.scale{}", k + 1);
        let w = ctx.bound.var(&format!("{p}.fc.weight"))?;
        let b = ctx.bound.var(&format!("{p}.fc.bias"))?;
        let s = ctx.g.linear(fv, w, b)?;
        scores.push(ctx.batch_norm(s, &format!("{p}.bn"))?);
    }
    let scores = ctx.g.concat_cols(&scores)?;
    ctx.g.softmax(scores)
}

/// Constant `[N, 3]` weights of exactly 1/3.
pub fn uniform_weights<T: Real>(g: &mut Graph<T>, n: usize) -> Var {
    let third = T::ONE / T::from_f64(NUM_SCALES as f64);
    g.constant(Tensor::full(&[n, NUM_SCALES], third))
}

/// Multiplies scale `k` of image `n` by `weights[n, k]`; the final feature is
/// passed through untouched.
pub fn apply_weights<T: Real>(g: &mut Graph<T>, pyr: &PyramidFeatures, weights: Var) -> Result<PyramidFeatures> {
    let scales = pyr
        .scales
        .iter()
        .enumerate()
        .map(|(k, &s)| g.scale_by_column(s, weights, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(PyramidFeatures {
        scales,
        final_feature: pyr.final_feature,
    })
}

/// Logits and class probabilities of the fused feature.
#[derive(Clone, Copy, Debug)]
pub struct Classified {
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
}

/// GAP every weighted scale, concatenate with the final feature and classify.
pub(crate) fn fuse_and_classify<T: Real>(
    ctx: &mut Ctx<'_, T>,
    weighted: &PyramidFeatures,
    final_concat: bool,
) -> Result<Classified> {
    let mut parts = scale_vectors(ctx.g, weighted)?;
    if final_concat {
        parts.push(weighted.final_feature);
    }
    let fused = ctx.g.concat_cols(&parts)?;
    let w = ctx.bound.var("awc.head.weight")?;
    let b = ctx.bound.var("awc.head.bias")?;
    let logits = ctx.g.linear(fused, w, b)?;
    let probs = ctx.g.softmax(logits)?;
    Ok(Classified { fused, logits, probs })
}

/// Mean cross-entropy of the labelled class.
pub fn recognition_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    g.nll_mean(probs, labels)
}

/// Class indices from one-hot rows, rejecting anything else.
pub fn labels_from_one_hot<T: Real>(one_hot: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = one_hot.dims2()?;
    one_hot
        .data()
        .chunks(k)
        .enumerate()
        .map(|(row, r)| {
            let ones: Vec<usize> = (0..k).filter(|&j| r[j] == T::ONE).collect();
            let zeros = r.iter().filter(|&&v| v == T::ZERO).count();
            match ones.as_slice() {
                [j] if zeros == k - 1 => Ok(*j),
                _ => Err(Error::Contract(format!("label row {row} is not one-hot"))),
            }
        })
        .collect()
}

/// Cross-entropy against one-hot targets.
pub fn recognition_loss_one_hot<T: Real>(g: &mut Graph<T>, probs: Var, one_hot: &Tensor<T>) -> Result<Var> {
    let labels = labels_from_one_hot(one_hot)?;
    g.nll_mean(probs, &labels)
}

/// `λ1·L_att + λ2·L_recg`, evaluated left to right from zero.
pub fn total_loss<T: Real>(g: &mut Graph<T>, att: Var, recg: Var, lw: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[att, recg], &[lw.lambda_att, lw.lambda_recg])
}

/// The same sum on plain values, bit-identical to [`total_loss`].
pub fn combine_losses<T: Real>(att: T, recg: T, lw: &LossWeights) -> T {
    crate::autodiff::weighted_scalar_sum(&[att, recg], &[lw.lambda_att, lw.lambda_recg])
}

/// Writes `id,w1,w2,w3,predicted,true` rows.
pub fn write_weights_csv(
    path: &Path,
    ids: &[String],
    weights: &Tensor<f64>,
    predicted: &[usize],
    truth: &[usize],
) -> Result<()> {
    let (n, k) = weights.dims2()?;
    if ids.len() != n || predicted.len() != n || truth.len() != n {
        return Err(Error::dim("weights dump: row counts differ"));
    }
    let mut buf = Vec::new();
    let header: Vec<String> = (1..=k).map(|i| format!("w{i}")).collect();
    writeln!(buf, "id,{},predicted,true", header.join(",")).expect("write to vec");
    for (i, row) in weights.data().chunks(k).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(buf, "{},{},{},{}", ids[i], cells.join(","), predicted[i], truth[i]).expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_weight_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::new(vec![2, 3], vec![2.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap(), false);
        let w = g.softmax(s).unwrap();
        let w = g.value(w).data();
        assert!((w[0] - 0.78699).abs() < 1e-4 && (w[1] - 0.10651).abs() < 1e-4);
        assert!(w[3..].iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_weights_are_a_third() {
        let mut g = Graph::<f64>::new();
        let w = uniform_weights(&mut g, 4);
        assert!(g.value(w).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn apply_weights_is_elementwise() {
        let mut g = Graph::<f64>::new();
        let scales: Vec<Var> = (0..3)
            .map(|k| g.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| (i + k) as f64 * 0.3 - 1.0), true))
            .collect();
        let final_feature = g.leaf(Tensor::from_fn(&[2, 5], |i| i as f64), true);
        let pyr = PyramidFeatures { scales: scales.clone(), final_feature };
        let w = g.leaf(Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.0, 1.0, 0.0]).unwrap(), true);
        let out = apply_weights(&mut g, &pyr, w).unwrap();
        let wd = g.value(w).data().to_vec();
        for k in 0..3 {
            let (inp, res) = (g.value(scales[k]).data(), g.value(out.scales[k]).data());
            for (i, (&a, &b)) in inp.iter().zip(res).enumerate() {
                assert!((b - wd[(i / 8) * 3 + k] * a).abs() < 1e-12);
            }
        }
        assert!(g.value(out.scales[0]).data()[8..].iter().all(|&x| x == 0.0));
        assert_eq!(out.final_feature, final_feature);
    }

    #[test]
    fn scale_vectors_pool_space() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::full(&[3, 16, 32, 32], 0.75), false);
        let pyr = PyramidFeatures { scales: vec![s, s, s], final_feature: s };
        let fvs = scale_vectors(&mut g, &pyr).unwrap();
        assert_eq!(g.value(fvs[0]).shape(), &[3, 16]);
        assert!(g.value(fvs[0]).data().iter().all(|&x| x == 0.75));
    }

    #[test]
    fn recognition_loss_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(
            Tensor::new(vec![3, 3], vec![1.0 / 3.0; 3].into_iter().chain([0.5, 0.25, 0.25, 0.0, 1.0, 0.0]).collect()).unwrap(),
            false,
        );
        let l = recognition_loss(&mut g, p, &[1, 0, 1]).unwrap();
        let expected = (3f64.ln() + 2f64.ln() + 0.0) / 3.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let uniform = g.leaf(Tensor::full(&[1, 3], 1.0 / 3.0), false);
        let l = recognition_loss(&mut g, uniform, &[2]).unwrap();
        assert!((g.value(l).item() - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn one_hot_contract() {
        let ok = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(labels_from_one_hot(&ok).unwrap(), vec![1, 0]);
        let soft = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(labels_from_one_hot(&soft), Err(Error::Contract(_))));
        let two = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(labels_from_one_hot(&two), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        let lw = LossWeights { lambda_att: 1.0, lambda_recg: 1.0 };
        assert!((combine_losses(0.6f64, 1.1, &lw) - 1.7).abs() < 1e-15);
        let lw0 = LossWeights { lambda_att: 0.0, lambda_recg: 2.0 };
        assert_eq!(combine_losses(123.0f64, 1.1, &lw0), 2.0 * 1.1);
        let lw2 = LossWeights { lambda_att: 0.5, lambda_recg: 0.0 };
        assert_eq!(combine_losses(0.8f64, 7.0, &lw2), 0.4);

        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(0.3711f32), true);
        let r = g.leaf(Tensor::scalar(1.0987f32), true);
        let l = total_loss(&mut g, a, r, &LossWeights::default()).unwrap();
        assert_eq!(g.value(l).item().to_bits(), combine_losses(0.3711f32, 1.0987, &LossWeights::default()).to_bits());
    }

    #[test]
    fn total_loss_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(f64::NAN), true);
        let r = g.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(total_loss(&mut g, a, r, &LossWeights::default()), Err(Error::Numeric { .. })));
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_att: 0.0, lambda_recg: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda_att: -1.0, lambda_recg: 1.0 }.validate().is_err());
    }
}
