//! Per-channel batch normalization.

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{lane_dot, lane_sum, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;

pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Values reduced per channel.
    pub count: usize,
}

struct BatchNorm<T> {
    channels: usize,
    inner: usize,
    count: usize,
    /// 1/√(σ²+ε) per channel.
    inv_std: Vec<T>,
    /// Normalized input x̂.
    xhat: Vec<T>,
    train: bool,
}

impl<T: Real> Function<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        g: &[T],
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let gamma = inputs[1].data();
        let c = self.channels;
        let mut sum_g = vec![T::ZERO; c];
        let mut sum_gx = vec![T::ZERO; c];
        for (i, (gp, xp)) in g.chunks(self.inner).zip(self.xhat.chunks(self.inner)).enumerate() {
            let ch = i % c;
            sum_g[ch] += lane_sum(gp);
            sum_gx[ch] += lane_dot(gp, xp);
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::ZERO; g.len()];
            let m = T::from_f64(self.count as f64);
            for (i, ((dst, gp), xp)) in gx
                .chunks_mut(self.inner)
                .zip(g.chunks(self.inner))
                .zip(self.xhat.chunks(self.inner))
                .enumerate()
            {
                let ch = i % c;
                let scale = gamma[ch] * self.inv_std[ch];
                if self.train {
                    let k = scale / m;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                        *d = k * (m * gv - sum_g[ch] - xv * sum_gx[ch]);
                    }
                } else {
                    for (d, &gv) in dst.iter_mut().zip(gp) {
                        *d = scale * gv;
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

impl<T: Real> Graph<T> {
    /// Batch normalization of `x[N,C,...]` with affine `gamma[C]`, `beta[C]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let count = n * inner;
        let eps = T::from_f64(BN_EPS);
        let xs = self.value(x).data();

        let (mean, var, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(
                        "batch_norm in training mode needs at least 2 samples".into(),
                    ));
                }
                let mut mean = vec![T::ZERO; c];
                for (i, p) in xs.chunks(inner).enumerate() {
                    mean[i % c] += lane_sum(p);
                }
                let m = T::from_f64(count as f64);
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![T::ZERO; c];
                for (i, p) in xs.chunks(inner).enumerate() {
                    let mu = mean[i % c];
                    let centered: Vec<T> = p.iter().map(|&v| v - mu).collect();
                    var[i % c] += lane_dot(&centered, &centered);
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "running statistics have {} entries for {c} channels",
                        mean.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut out = vec![T::ZERO; xs.len()];
        for (i, ((src, xh), o)) in xs
            .chunks(inner)
            .zip(xhat.chunks_mut(inner))
            .zip(out.chunks_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let out = Tensor::new(shape, out)?;
        let var_out = self.push(
            out,
            &[x, gamma, beta],
            BatchNorm {
                channels: c,
                inner,
                count,
                inv_std,
                xhat,
                train,
            },
        )?;
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((var_out, stats))
    }
}
