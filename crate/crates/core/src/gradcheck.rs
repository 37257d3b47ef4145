//! Finite-difference verification of analytic gradients.
//!
//! Every check compares the tape's gradient against a central difference
//! `(f(x+h) − f(x−h)) / 2h` evaluated on freshly built graphs. Coordinates
//! whose perturbed passes land on a different branch (ReLU mask, hinge
//! activity, pivot choice) are skipped; the derivative is not defined across
//! a kink.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rand::SeedableRng;

use crate::autodiff::{BnMode, ConvSpec, Graph, Var};
use crate::awc::{self, LossWeights};
use crate::error::Result;
use crate::layers::Mode;
use crate::model::{Model, ModelConfig};
use crate::msfa::{AttentionConfig, Triplet};
use crate::pyramid::PyramidConfig;
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn merge(&mut self, other: &CheckOutcome) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many distinct coordinates per input, drawn at random.
    Sample(usize),
}

/// Checks the gradient of `build(graph, inputs) -> scalar` with respect to
/// every input tensor.
pub fn check_scalar_fn<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    step: f64,
    coords: Coords,
    rng: &mut ChaCha8Rng,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.branch_signature().expect("tracking on")))
    };

    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let base_sig = g.branch_signature().expect("tracking on");
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("inputs are parameters"))
        .collect();
    drop(g);

    let mut outcome = CheckOutcome {
        name: name.to_string(),
        ..Default::default()
    };
    let mut values = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let n = values[t].numel();
        let picked: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample(k) if k >= n => (0..n).collect(),
            Coords::Sample(k) => {
                let mut idx = sample(rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in picked {
            let orig = values[t].data()[i];
            // Fourth-order central stencil.
            let mut f = [0.0; 4];
            let mut same_branches = true;
            for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                values[t].data_mut()[i] = orig + k * step;
                let (v, sig) = eval(&values)?;
                *slot = v;
                same_branches &= sig == base_sig;
            }
            values[t].data_mut()[i] = orig;
            if !same_branches {
                outcome.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            outcome.max_rel_error = outcome.max_rel_error.max(err);
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

/// Uniform random tensor on `[lo, hi)`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Finite-difference step for the elementary-op suite.
pub const OP_STEP: f64 = 1e-3;
/// Step for checks through the power-iteration PCA.
pub const PIPELINE_STEP: f64 = 1e-4;

/// Weighted reduction `Σ out ⊙ R` so every output coordinate matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

/// Every differentiable primitive on random double-precision inputs.
pub fn elementary_ops(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        check_scalar_fn(name, inputs, OP_STEP, Coords::All, &mut check_rng, f).map(|o| out.push(o))
    };
    let x4 = random_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        run(&format!("conv2d s{stride} p{pad}"), &[x4.clone(), k.clone()], &|g, v| {
            let y = g.conv2d(v[0], v[1], ConvSpec::new(stride, pad))?;
            project(g, y, 1)
        })?;
    }
    let k1 = random_tensor(&mut rng, &[3, 2, 1, 1], -1.0, 1.0);
    run("conv2d 1x1", &[x4.clone(), k1], &|g, v| {
        let y = g.conv2d(v[0], v[1], ConvSpec::new(1, 0))?;
        project(g, y, 2)
    })?;
    let gamma = random_tensor(&mut rng, &[2], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[2], -0.5, 0.5);
    run("batch_norm train", &[x4.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
        project(g, y, 3)
    })?;
    run("batch_norm eval", &[x4.clone(), gamma, beta], &|g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &[0.1, -0.2], var: &[0.5, 2.0] })?;
        project(g, y, 4)
    })?;
    let x2 = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[5], -1.0, 1.0);
    run("linear", &[x2.clone(), w.clone(), b], &|g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        project(g, y, 5)
    })?;
    run("matmul", &[x2.clone(), w], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 12)
    })?;
    run("softmax", &[x2.clone()], &|g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 6)
    })?;
    run("global_avg_pool", &[x4.clone()], &|g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 7)
    })?;
    run("relu", &[x4.clone()], &|g, v| {
        let y = g.relu(v[0])?;
        project(g, y, 8)
    })?;
    let other = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    run("concat_cols", &[x2.clone(), other], &|g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        project(g, y, 9)
    })?;
    let wts = random_tensor(&mut rng, &[2, 3], 0.1, 1.0);
    run("scale_by_column", &[x4.clone(), wts], &|g, v| {
        let y = g.scale_by_column(v[0], v[1], 1)?;
        project(g, y, 10)
    })?;
    run("nll_mean", &[x2.clone()], &|g, v| {
        let p = g.softmax(v[0])?;
        g.nll_mean(p, &[0, 2, 1, 2])
    })?;
    let ch_bias = random_tensor(&mut rng, &[2], -1.0, 1.0);
    run("add_channel_bias", &[x4.clone(), ch_bias], &|g, v| {
        let y = g.add_channel_bias(v[0], v[1])?;
        project(g, y, 11)
    })?;
    let y2 = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    run("add, mul, scale", &[x2, y2], &|g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[0])?;
        let y = g.scale(p, -0.7)?;
        g.mean(y)
    })?;
    let s1 = random_tensor(&mut rng, &[1], -1.0, 1.0);
    let s2 = random_tensor(&mut rng, &[1], -1.0, 1.0);
    run("weighted_sum", &[s1, s2], &|g, v| g.weighted_sum(&[v[0], v[1]], &[0.5, 1.0]))?;
    Ok(out)
}

/// Small network used by the pipeline check: 24-pixel inputs give
/// 12, 6 and 3-pixel scales.
pub fn pipeline_model_config() -> ModelConfig {
    ModelConfig {
        pyramid: PyramidConfig {
            input_size: 24,
            stage_channels: vec![4, 6, 8],
            adjusted_channels: 3,
        },
        ..ModelConfig::default()
    }
}

/// Coordinates perturbed per weight tensor in the pipeline check.
pub const PIPELINE_COORDS: usize = 6;

/// Total training loss of one random triplet, differentiated through the
/// pyramid, the unrolled PCA, the attention hinge and the weighted head,
/// with respect to a sample of every weight and of the images.
pub fn full_pipeline(seed: u64) -> Result<CheckOutcome> {
    let config = pipeline_model_config();
    let model = Model::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.pyramid.input_size;
    let images = random_tensor(&mut rng, &[3, 1, s, s], 0.0, 1.0);
    let (a, n) = (rng.random_range(0..3), rng.random_range(1..3));
    let labels = vec![a, a, (a + n) % 3];
    let triplets = [Triplet { anchor: 0, positive: 1, negative: 2 }];
    // A large margin keeps the hinge active so the attention path is checked.
    let attention = AttentionConfig { margin: 2.5, ..AttentionConfig::default() };
    let weights = LossWeights::default();
    let mut inputs = model.params.weight_values();
    inputs.push(images);
    let mut check_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut outcome = check_scalar_fn(
        "full pipeline",
        &inputs,
        PIPELINE_STEP,
        Coords::Sample(PIPELINE_COORDS),
        &mut check_rng,
        |g, v| {
            let (x, w) = v.split_last().expect("images are last");
            let bound = model.params.bind_vars(w)?;
            let fwd = model.forward(g, &bound, *x, Mode::Train)?;
            let vectors = fwd
                .pyramid
                .scales
                .iter()
                .map(|&s| g.principal_vectors(s, &attention))
                .collect::<Result<Vec<_>>>()?;
            let att = g.attention_loss(&vectors, &triplets, &labels, &attention)?;
            let recg = awc::recognition_loss(g, fwd.classified.probs, &labels)?;
            awc::total_loss(g, att, recg, &weights)
        },
    )?;
    outcome.name = format!("full pipeline, seed {seed}");
    Ok(outcome)
}
