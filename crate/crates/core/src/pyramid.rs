//! In-network feature pyramid: a stem convolution followed by residual stages
//! that each halve the spatial extent, plus 1×1 channel-adjust convolutions
//! that bring every scale to a common channel count.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv2d_output_extent, ConvSpec, Var};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::params::{insert_batch_norm, Init, ParamStore, Role};
use crate::tensor::{Real, Tensor};

/// Number of pyramid scales.
pub const NUM_SCALES: usize = 3;

const STEM: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const DOWN: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const SAME: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const PROJ: ConvSpec = ConvSpec { stride: 2, pad: 0 };
const POINTWISE: ConvSpec = ConvSpec { stride: 1, pad: 0 };

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Square single-channel input extent in pixels.
    pub input_size: usize,
    /// Output channels of each residual stage; the stem uses the first.
    pub stage_channels: Vec<usize>,
    /// Channel count every scale is adjusted to.
    pub adjusted_channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            input_size: 64,
            stage_channels: vec![16, 32, 64],
            adjusted_channels: 16,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "expected {NUM_SCALES} stage channel counts, got {}",
                self.stage_channels.len()
            )));
        }
        if self.adjusted_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.scale_extents().is_none() {
            return Err(Error::Config(format!(
                "input size {} is too small for {NUM_SCALES} stride-2 stages",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial extent of each scale, e.g. `[32, 16, 8]` for a 64-pixel input.
    pub fn scale_extents(&self) -> Option<[usize; NUM_SCALES]> {
        let mut extent = conv2d_output_extent(self.input_size, 3, STEM)?;
        let mut out = [0; NUM_SCALES];
        for slot in &mut out {
            extent = conv2d_output_extent(extent, 3, DOWN)?;
            *slot = extent;
        }
        Some(out)
    }

    /// Width of the final deep feature.
    pub fn final_dim(&self) -> usize {
        self.stage_channels[NUM_SCALES - 1]
    }
}

/// Per-scale adjusted feature maps and the pooled last-stage feature.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    /// `[N, c, h_k, w_k]` for each scale, finest first.
    pub scales: Vec<Var>,
    /// `[N, D]` global average of the last stage output.
    pub final_feature: Var,
}

pub(crate) fn build_params<T: Real>(cfg: &PyramidConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let mut init = Init { rng };
    let stem = cfg.stage_channels[0];
    store.insert("stem.conv.weight", Role::Weight, init.fan_in(&[stem, 1, 3, 3], 9, 2.0));
    insert_batch_norm(store, "stem.bn", stem);

    let mut cin = stem;
    for (k, &cout) in cfg.stage_channels.iter().enumerate() {
        let p = format!("stage{}", k + 1);
        store.insert(
            format!("{p}.conv1.weight"),
            Role::Weight,
            init.fan_in(&[cout, cin, 3, 3], cin * 9, 2.0),
        );
        insert_batch_norm(store, &format!("{p}.bn1"), cout);
        store.insert(
            format!("{p}.conv2.weight"),
            Role::Weight,
            init.fan_in(&[cout, cout, 3, 3], cout * 9, 2.0),
        );
        insert_batch_norm(store, &format!("{p}.bn2"), cout);
        store.insert(
            format!("{p}.proj.weight"),
            Role::Weight,
            init.fan_in(&[cout, cin, 1, 1], cin, 2.0),
        );
        insert_batch_norm(store, &format!("{p}.proj_bn"), cout);
        cin = cout;
    }

    let c = cfg.adjusted_channels;
    for (k, &ck) in cfg.stage_channels.iter().enumerate() {
        let p = format!("adjust{}", k + 1);
        store.insert(format!("{p}.weight"), Role::Weight, init.fan_in(&[c, ck, 1, 1], ck, 2.0));
        store.insert(format!("{p}.bias"), Role::Weight, Tensor::zeros(&[c]));
    }
}

fn residual_stage<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.conv(x, &format!("{prefix}.conv1.weight"), DOWN)?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn1"))?;
    let h = ctx.g.relu(h)?;
    let h = ctx.conv(h, &format!("{prefix}.conv2.weight"), SAME)?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn2"))?;
    let skip = ctx.conv(x, &format!("{prefix}.proj.weight"), PROJ)?;
    let skip = ctx.batch_norm(skip, &format!("{prefix}.proj_bn"))?;
    let sum = ctx.g.add(h, skip)?;
    ctx.g.relu(sum)
}

pub(crate) fn forward<T: Real>(cfg: &PyramidConfig, ctx: &mut Ctx<'_, T>, images: Var) -> Result<PyramidFeatures> {
    let (_, c, h, w) = ctx.g.value(images).dims4()?;
    if c != 1 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::dim(format!(
            "expected images of shape [N,1,{0},{0}], got [N,{c},{h},{w}]",
            cfg.input_size
        )));
    }
    let x = ctx.conv(images, "stem.conv.weight", STEM)?;
    let x = ctx.batch_norm(x, "stem.bn")?;
    let mut x = ctx.g.relu(x)?;

    let mut scales = Vec::with_capacity(NUM_SCALES);
    for k in 1..=NUM_SCALES {
        x = residual_stage(ctx, x, &format!("stage{k}"))?;
        let adj = ctx.conv(x, &format!("adjust{k}.weight"), POINTWISE)?;
        let bias = ctx.bound.var(&format!("adjust{k}.bias"))?;
        let adj = ctx.g.add_channel_bias(adj, bias)?;
        scales.push(ctx.g.relu(adj)?);
    }
    let final_feature = ctx.g.global_avg_pool(x)?;
    Ok(PyramidFeatures {
        scales,
        final_feature,
    })
}
