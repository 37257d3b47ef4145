//! Triplet batches, SGD with momentum, the epoch loop and checkpoints.

mod checkpoint;

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC};

use crate::autodiff::Graph;
use crate::awc::{self, LossWeights};
use crate::data::balance::{self, Draw};
use crate::data::{Images, Manifest, Split};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{argmax_rows, Model, ModelConfig};
use crate::msfa::{AttentionConfig, Triplet};
use crate::params::Role;
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    /// Fractions of the epoch budget after which the rate is multiplied by
    /// `factor`.
    pub milestones: Vec<f64>,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            factor: 0.1,
            milestones: vec![0.6, 0.85],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub triplets_per_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: LrDecay,
    pub loss_weights: LossWeights,
    pub attention: AttentionConfig,
    /// Draws per class and epoch; `None` uses the largest class size.
    pub target_per_class: Option<usize>,
    /// Random flips and shifts on every draw.
    pub augment: bool,
    pub bn_momentum: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            triplets_per_batch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: LrDecay::default(),
            loss_weights: LossWeights::default(),
            attention: AttentionConfig::default(),
            target_per_class: None,
            augment: false,
            bn_momentum: 0.1,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.triplets_per_batch == 0 {
            return bad("triplets_per_batch must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} must lie in [0, 1]", self.bn_momentum));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return bad(format!("lr_decay.factor {} must lie in (0, 1]", self.lr_decay.factor));
        }
        if self.lr_decay.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_decay milestones must lie in [0, 1]".into());
        }
        if self.target_per_class == Some(0) {
            return bad("target_per_class must be >= 1".into());
        }
        self.loss_weights.validate()?;
        self.attention.validate()?;
        self.model.validate()
    }

    /// Learning rate during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_decay
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_decay.factor.powi(passed as i32)
    }

    /// Optimizer steps in an epoch of `draws` balanced samples.
    pub fn steps_per_epoch(&self, draws: usize) -> usize {
        draws.div_ceil(3 * self.triplets_per_batch)
    }
}

/// `T` triplets flattened into a `[3T, 1, H, W]` batch: rows `3t`, `3t+1`,
/// `3t+2` hold the anchor, positive and negative of triplet `t`.
#[derive(Clone, Debug)]
pub struct TripletBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub triplets: Vec<Triplet>,
    /// Source draws, in batch order.
    pub draws: Vec<Draw>,
}

/// Picks the draws of `T` triplets from an epoch list. The anchor class is
/// uniform over classes with two or more draws, the negative class uniform
/// over the remaining classes, members uniform within their class.
pub fn sample_triplets(epoch_list: &[Draw], t: usize, seed: u64, step: u64) -> Result<Vec<Draw>> {
    let classes = epoch_list.iter().map(|d| d.label + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, d) in epoch_list.iter().enumerate() {
        members[d.label].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&k| !members[k].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Data("attention loss requires ≥ 2 classes".into()));
    }
    let anchors: Vec<usize> = present.iter().copied().filter(|&k| members[k].len() >= 2).collect();
    if anchors.is_empty() {
        return Err(Error::Data("triplets need a class with at least 2 samples".into()));
    }
    let mut rng = rng::stream(seed, rng::TRIPLETS, step);
    let mut out = Vec::with_capacity(3 * t);
    for _ in 0..t {
        let i = anchors[rng.random_range(0..anchors.len())];
        let others: Vec<usize> = present.iter().copied().filter(|&k| k != i).collect();
        let j = others[rng.random_range(0..others.len())];
        let pool = &members[i];
        let a = rng.random_range(0..pool.len());
        let p = (a + 1 + rng.random_range(0..pool.len() - 1)) % pool.len();
        let n = members[j][rng.random_range(0..members[j].len())];
        out.extend([epoch_list[pool[a]], epoch_list[pool[p]], epoch_list[n]]);
    }
    Ok(out)
}

impl<T: Real> TripletBatch<T> {
    /// Materializes triplet draws (as returned by [`sample_triplets`]).
    pub fn gather(images: &Images<T>, draws: Vec<Draw>) -> Result<Self> {
        if draws.is_empty() || draws.len() % 3 != 0 {
            return Err(Error::dim(format!("{} draws do not form triplets", draws.len())));
        }
        let chips = balance::gather(images, &draws);
        let item = chips[0].shape().to_vec();
        let mut data = Vec::with_capacity(chips.len() * chips[0].numel());
        for c in &chips {
            data.extend_from_slice(c.data());
        }
        let mut shape = vec![chips.len()];
        shape.extend(item);
        let triplets = (0..draws.len() / 3)
            .map(|t| Triplet {
                anchor: 3 * t,
                positive: 3 * t + 1,
                negative: 3 * t + 2,
            })
            .collect();
        Ok(TripletBatch {
            images: Tensor::new(shape, data)?,
            labels: draws.iter().map(|d| d.label).collect(),
            triplets,
            draws,
        })
    }
}

/// Loss breakdown of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses<T> {
    pub total: T,
    pub att: T,
    pub recg: T,
    /// Correct training-mode predictions in the batch.
    pub correct: usize,
    /// Batch-mean scale weights.
    pub mean_weights: [T; 3],
}

/// Momentum buffers, one per weight tensor.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(model: &Model<T>) -> Self {
        Optimizer {
            velocity: model
                .params
                .iter()
                .map(|p| (p.role == Role::Weight).then(|| vec![T::ZERO; p.value.numel()]))
                .collect(),
        }
    }
}

fn tag_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} at step {step}"),
        },
        other => other,
    }
}

/// Gradients of the total loss for one batch, without touching the model.
/// Returns them per store position alongside the losses.
pub fn compute_gradients<T: Real>(
    model: &Model<T>,
    batch: &TripletBatch<T>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<Option<Tensor<T>>>, StepLosses<T>, Vec<(String, crate::autodiff::BatchStats<T>)>)> {
    let tag = tag_step(step);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let fwd = model.forward(&mut g, &bound, x, Mode::Train).map_err(&tag)?;
    // With λ1 = 0 the attention term is still reported but must not shape
    // any gradient, so it is evaluated on detached features.
    let scales: Vec<_> = if cfg.loss_weights.lambda_att == 0.0 {
        fwd.pyramid.scales.iter().map(|&s| g.detach(s)).collect()
    } else {
        fwd.pyramid.scales.clone()
    };
    let vectors = scales
        .iter()
        .map(|&s| g.principal_vectors(s, &cfg.attention))
        .collect::<Result<Vec<_>>>()
        .map_err(&tag)?;
    let att = g
        .attention_loss(&vectors, &batch.triplets, &batch.labels, &cfg.attention)
        .map_err(&tag)?;
    let recg = awc::recognition_loss(&mut g, fwd.classified.probs, &batch.labels).map_err(&tag)?;
    let total = awc::total_loss(&mut g, att, recg, &cfg.loss_weights).map_err(&tag)?;
    g.backward(total).map_err(&tag)?;

    let predicted = argmax_rows(g.value(fwd.classified.probs));
    let w = g.value(fwd.weights);
    let n = batch.labels.len();
    let mut mean_weights = [T::ZERO; 3];
    for row in w.data().chunks(3) {
        for (m, &v) in mean_weights.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean_weights.iter_mut().for_each(|m| *m /= T::from_f64(n as f64));
    let losses = StepLosses {
        total: g.value(total).item(),
        att: g.value(att).item(),
        recg: g.value(recg).item(),
        correct: predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count(),
        mean_weights,
    };
    let mut grads = vec![None; model.params.len()];
    for (pos, var) in bound.weights() {
        grads[pos] = g.grad(var);
    }
    Ok((grads, losses, fwd.bn_stats))
}

/// One SGD-with-momentum update: `v ← μ·v + g`, `p ← p − η·v`.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &TripletBatch<T>,
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
) -> Result<StepLosses<T>> {
    let (grads, losses, stats) = compute_gradients(model, batch, cfg, step)?;
    let mu = T::from_f64(cfg.momentum);
    let eta = T::from_f64(lr);
    for ((p, v), g) in model.params.iter_mut().zip(&mut opt.velocity).zip(grads) {
        let (Some(v), Some(g)) = (v.as_mut(), g) else { continue };
        for ((x, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = mu * *vi + gi;
            *x -= eta * *vi;
        }
        if !p.value.all_finite() {
            return Err(Error::Numeric {
                op: format!("update of {} at step {step}", p.name),
            });
        }
    }
    model.update_running_stats(&stats, cfg.bn_momentum)?;
    Ok(losses)
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub att_loss: f64,
    pub recg_loss: f64,
    pub train_acc: f64,
}

/// One row of the per-step log; losses are exact working-precision values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog<T> {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses<T>,
}

pub struct FitOutput {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog<f32>>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const CHECKPOINT: &str = "model.ckpt";

/// Trains in single precision on the manifest's train split. With an
/// `out_dir`, writes the logs and the final checkpoint there.
pub fn fit(manifest: &Manifest, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutput> {
    let mut cfg = cfg.clone();
    cfg.model.num_classes = manifest.num_classes();
    cfg.validate()?;
    let images = manifest.load_split::<f32>(Split::Train)?;
    if images.is_empty() {
        return Err(Error::Data("manifest has no train samples".into()));
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(&model);
    let counts = manifest.class_counts(Split::Train);
    let target = cfg.target_per_class.unwrap_or_else(|| counts.iter().copied().max().unwrap_or(0));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let draws = balance::balance_resample(
            &images.labels,
            manifest.classes(),
            target,
            cfg.seed,
            epoch as u64,
            cfg.augment,
        )?;
        let lr = cfg.learning_rate_at(epoch);
        let n_steps = cfg.steps_per_epoch(draws.len());
        let (mut total, mut att, mut recg, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for _ in 0..n_steps {
            let picked = sample_triplets(&draws, cfg.triplets_per_batch, cfg.seed, step)?;
            let batch = TripletBatch::gather(&images, picked)?;
            let losses = train_step(&mut model, &mut opt, &batch, &cfg, lr, step)?;
            total += losses.total.as_f64();
            att += losses.att.as_f64();
            recg += losses.recg.as_f64();
            correct += losses.correct;
            seen += batch.labels.len();
            steps.push(StepLog { step, epoch, lr, losses });
            step += 1;
        }
        let k = n_steps.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            total_loss: total / k,
            att_loss: att / k,
            recg_loss: recg / k,
            train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
        });
    }
    let checkpoint = Checkpoint::from_model(
        &model,
        CheckpointMeta {
            model: cfg.model.clone(),
            train: cfg.clone(),
            classes: manifest.classes().to_vec(),
            train_counts: counts.clone(),
            epoch: cfg.epochs,
        },
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_epoch_log(&dir.join(TRAIN_LOG), &epochs)?;
        write_step_log(&dir.join(STEP_LOG), &steps)?;
        checkpoint.save(&dir.join(CHECKPOINT))?;
    }
    Ok(FitOutput {
        model,
        checkpoint,
        epochs,
        steps,
    })
}

pub fn write_epoch_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut buf = b"epoch,total_loss,att_loss,recg_loss,train_acc\n".to_vec();
    for r in rows {
        writeln!(
            buf,
            "{},{},{},{},{}",
            r.epoch, r.total_loss, r.att_loss, r.recg_loss, r.train_acc
        )
        .expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Losses are printed in shortest round-trip form, so parsing a row gives
/// back the exact single-precision values.
pub fn write_step_log(path: &Path, rows: &[StepLog<f32>]) -> Result<()> {
    let mut buf = b"step,epoch,lr,total_loss,att_loss,recg_loss,w1,w2,w3\n".to_vec();
    for r in rows {
        let l = &r.losses;
        let [w1, w2, w3] = l.mean_weights;
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, l.total, l.att, l.recg, w1, w2, w3
        )
        .expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
