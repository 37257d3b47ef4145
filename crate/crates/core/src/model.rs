//! The full network: pyramid, scale weighting and classification head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::awc::{self, Classified, HeadShape, Weighting};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::msfa::AttentionConfig;
use crate::params::{Bound, ParamStore};
use crate::pyramid::{self, PyramidConfig, PyramidFeatures};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Images per forward pass during inference.
pub const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub num_classes: usize,
    pub weighting: Weighting,
    /// Concatenate the pooled last-stage feature before the head.
    pub final_concat: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pyramid: PyramidConfig::default(),
            num_classes: 3,
            weighting: Weighting::Adaptive,
            final_concat: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    fn head(&self) -> HeadShape {
        HeadShape {
            channels: self.pyramid.adjusted_channels,
            final_dim: self.pyramid.final_dim(),
            classes: self.num_classes,
            weighting: self.weighting,
            final_concat: self.final_concat,
        }
    }

    /// Freshly initialized parameters for this configuration.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let mut store = ParamStore::new();
        pyramid::build_params(&self.pyramid, &mut store, &mut rng);
        awc::build_params(&self.head(), &mut store, &mut rng);
        Ok(store)
    }
}

/// Graph handles of one forward pass.
pub struct Forward<T> {
    pub pyramid: PyramidFeatures,
    /// `[N, 3]` scale weights.
    pub weights: Var,
    pub classified: Classified,
    /// Batch statistics of every BN layer (training mode only).
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Plain outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    /// `[N, K]`
    pub probs: Tensor<T>,
    /// `[N, 3]`
    pub weights: Tensor<T>,
    /// Per scale: `[N, c, w]` principal vectors and degeneracy flags, when requested.
    pub vectors: Vec<(Tensor<T>, Vec<bool>)>,
}

impl<T: Real> Inference<T> {
    pub fn predicted(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

/// Index of the first maximum of every row.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let k = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(k)
        .map(|r| (0..k).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking every name and shape
    /// against the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = config.init_params::<T>(0)?;
        for p in template.iter() {
            let got = params
                .get(&p.name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != template.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                template.len()
            )));
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Records one forward pass of `images[N,1,S,S]`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, images: Var, mode: Mode) -> Result<Forward<T>> {
        let n = g.value(images).shape().first().copied().unwrap_or(0);
        let mut ctx = Ctx::new(g, &self.params, bound, mode);
        let pyr = pyramid::forward(&self.config.pyramid, &mut ctx, images)?;
        let weights = match self.config.weighting {
            Weighting::Adaptive => {
                let fvs = awc::scale_vectors(ctx.g, &pyr)?;
                awc::predict_weights(&mut ctx, &fvs)?
            }
            Weighting::Uniform => awc::uniform_weights(ctx.g, n),
        };
        let weighted = awc::apply_weights(ctx.g, &pyr, weights)?;
        let classified = awc::fuse_and_classify(&mut ctx, &weighted, self.config.final_concat)?;
        Ok(Forward {
            pyramid: pyr,
            weights,
            classified,
            bn_stats: ctx.stats,
        })
    }

    /// Folds batch statistics into the running estimates:
    /// `r ← (1 − m)·r + m·batch`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        let keep = T::ONE - m;
        for (prefix, s) in stats {
            let correction = if s.count > 1 {
                T::from_f64(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::ONE
            };
            let mean = self.params.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            let var = self.params.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b * correction;
            }
        }
        Ok(())
    }

    /// Eval-mode forward over `images[N,1,S,S]` in chunks, optionally also
    /// extracting principal vectors of every scale.
    pub fn infer(&self, images: &Tensor<T>, attention: Option<&AttentionConfig>) -> Result<Inference<T>> {
        let (n, c, h, w) = images.dims4()?;
        let plane = c * h * w;
        let mut probs = Vec::new();
        let mut weights = Vec::new();
        let mut vectors: Vec<(Vec<T>, Vec<bool>, Vec<usize>)> = Vec::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let len = INFER_CHUNK.min(n - start);
            let chunk = Tensor::new(
                vec![len, c, h, w],
                images.data()[start * plane..(start + len) * plane].to_vec(),
            )?;
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let x = g.constant(chunk);
            let fwd = self.forward(&mut g, &bound, x, Mode::Eval)?;
            probs.extend_from_slice(g.value(fwd.classified.probs).data());
            weights.extend_from_slice(g.value(fwd.weights).data());
            if let Some(cfg) = attention {
                for (k, &s) in fwd.pyramid.scales.iter().enumerate() {
                    let sv = g.principal_vectors(s, cfg)?;
                    if vectors.len() <= k {
                        let shape = g.value(sv.vectors).shape().to_vec();
                        vectors.push((Vec::new(), Vec::new(), shape));
                    }
                    vectors[k].0.extend_from_slice(g.value(sv.vectors).data());
                    vectors[k].1.extend(sv.degenerate);
                }
            }
        }
        let k = self.config.num_classes;
        Ok(Inference {
            probs: Tensor::new(vec![n, k], probs)?,
            weights: Tensor::new(vec![n, pyramid::NUM_SCALES], weights)?,
            vectors: vectors
                .into_iter()
                .map(|(data, flags, shape)| Ok((Tensor::new(vec![n, shape[1], shape[2]], data)?, flags)))
                .collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests;
