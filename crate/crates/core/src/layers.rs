//! Shared forward-pass context for the model's layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, ConvSpec, Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
    /// Batch statistics gathered in training mode, keyed by layer prefix.
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, bound: &'a Bound, mode: Mode) -> Self {
        Ctx {
            g,
            store,
            bound,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn conv(&mut self, x: Var, weight: &str, spec: ConvSpec) -> Result<Var> {
        let k = self.bound.var(weight)?;
        self.g.conv2d(x, k, spec)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.bound.var(&format!("{prefix}.gamma"))?;
        let beta = self.bound.var(&format!("{prefix}.beta"))?;
        let (y, stats) = match self.mode {
            Mode::Train => self.g.batch_norm(x, gamma, beta, BnMode::Train)?,
            Mode::Eval => {
                let mean = self.store.get(&format!("{prefix}.running_mean"))?.data();
                let var = self.store.get(&format!("{prefix}.running_var"))?.data();
                self.g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?
            }
        };
        if let Some(stats) = stats {
            self.stats.push((prefix.to_string(), stats));
        }
        Ok(y)
    }
}
