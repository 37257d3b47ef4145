use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{lane_dot, lane_sum, Real, Tensor};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

struct Add;
impl<T: Real> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct Mul;
impl<T: Real> Function<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct Scale(f64);
impl<T: Real> Function<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = T::from_f64(self.0);
        vec![Some(g.iter().map(|&g| g * c).collect())]
    }
}

struct Sum;
impl<T: Real> Function<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct Relu;
impl<T: Real> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                .collect(),
        )]
    }
}

struct MatMul {
    n: usize,
    d: usize,
    m: usize,
}
impl<T: Real> Function<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, d, m) = (self.n, self.d, self.m);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| {
            // g [n,m] · bᵀ [m,d]
            let mut out = vec![T::ZERO; n * d];
            T::gemm(n, m, d, T::ONE, g, m as isize, 1, b, 1, m as isize, T::ZERO, &mut out);
            out
        });
        let gb = needs[1].then(|| {
            // aᵀ [d,n] · g [n,m]
            let mut out = vec![T::ZERO; d * m];
            T::gemm(d, n, m, T::ONE, a, 1, d as isize, g, m as isize, 1, T::ZERO, &mut out);
            out
        });
        vec![ga, gb]
    }
}

struct AddRowBias {
    cols: usize,
}
impl<T: Real> Function<T> for AddRowBias {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gb = needs[1].then(|| {
            let mut out = vec![T::ZERO; self.cols];
            for row in g.chunks(self.cols) {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
            out
        });
        vec![needs[0].then(|| g.to_vec()), gb]
    }
}

struct AddChannelBias {
    channels: usize,
    inner: usize,
}
impl<T: Real> Function<T> for AddChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gb = needs[1].then(|| {
            let mut out = vec![T::ZERO; self.channels];
            for (i, plane) in g.chunks(self.inner).enumerate() {
                out[i % self.channels] += lane_sum(plane);
            }
            out
        });
        vec![needs[0].then(|| g.to_vec()), gb]
    }
}

struct Softmax {
    k: usize,
}
impl<T: Real> Function<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::ZERO; g.len()];
        for ((gx, g), y) in gx
            .chunks_mut(self.k)
            .zip(g.chunks(self.k))
            .zip(out.data().chunks(self.k))
        {
            let dot = g.iter().zip(y).fold(T::ZERO, |a, (&g, &y)| a + g * y);
            for i in 0..self.k {
                gx[i] = y[i] * (g[i] - dot);
            }
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgPool {
    spatial: usize,
}
impl<T: Real> Function<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv = T::ONE / T::from_f64(self.spatial as f64);
        let mut gx = Vec::with_capacity(g.len() * self.spatial);
        for &v in g {
            gx.extend(std::iter::repeat_n(v * inv, self.spatial));
        }
        vec![Some(gx)]
    }
}

struct ConcatCols {
    rows: usize,
    widths: Vec<usize>,
}
impl<T: Real> Function<T> for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            out.push(need.then(|| {
                (0..self.rows)
                    .flat_map(|r| g[r * total + offset..r * total + offset + w].iter().copied())
                    .collect()
            }));
            offset += w;
        }
        out
    }
}

struct ScaleByColumn {
    rows: usize,
    inner: usize,
    k: usize,
    col: usize,
}
impl<T: Real> Function<T> for ScaleByColumn {
    fn name(&self) -> &'static str {
        "scale_by_column"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let gx = needs[0].then(|| {
            let mut gx = g.to_vec();
            for (n, row) in gx.chunks_mut(self.inner).enumerate() {
                let s = w[n * self.k + self.col];
                row.iter_mut().for_each(|v| *v *= s);
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::ZERO; self.rows * self.k];
            for n in 0..self.rows {
                let span = n * self.inner..(n + 1) * self.inner;
                gw[n * self.k + self.col] = lane_dot(&g[span.clone()], &x[span]);
            }
            gw
        });
        vec![gx, gw]
    }
}

struct NllMean {
    k: usize,
    labels: Vec<usize>,
}
impl<T: Real> Function<T> for NllMean {
    fn name(&self) -> &'static str {
        "nll_mean"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0].data();
        let floor = T::from_f64(PROB_FLOOR);
        let inv_n = T::ONE / T::from_f64(self.labels.len() as f64);
        let mut gp = vec![T::ZERO; p.len()];
        for (n, &y) in self.labels.iter().enumerate() {
            let q = p[n * self.k + y];
            if q > floor {
                gp[n * self.k + y] = -g[0] * inv_n / q;
            }
        }
        vec![Some(gp)]
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}
impl<T: Real> Function<T> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Vec<T>>> {
        self.weights
            .iter()
            .zip(needs)
            .map(|(&w, &need)| need.then(|| vec![g[0] * T::from_f64(w)]))
            .collect()
    }
}

/// Combines scalars as `Σ wᵢ·xᵢ`, evaluated left to right in working precision.
pub fn weighted_scalar_sum<T: Real>(values: &[T], weights: &[f64]) -> T {
    values
        .iter()
        .zip(weights)
        .fold(T::ZERO, |acc, (&v, &w)| acc + T::from_f64(w) * v)
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, &[a, b], Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, &[a, b], Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f64(c);
        let out = self.value(a).map(|v| v * k);
        self.push(out, &[a], Scale(c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let mask: Vec<bool> = self.value(a).data().iter().map(|&v| v > T::ZERO).collect();
        self.record_branch(&mask);
        self.push(out, &[a], Relu)
    }

    /// `[n,d] · [d,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (d2, m) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::dim(format!(
                "matmul: inner extents {d} and {d2} disagree"
            )));
        }
        let mut out = vec![T::ZERO; n * m];
        T::gemm(
            n,
            d,
            m,
            T::ONE,
            self.value(a).data(),
            d as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::ZERO,
            &mut out,
        );
        let out = Tensor::new(vec![n, m], out)?;
        self.push(out, &[a, b], MatMul { n, d, m })
    }

    /// Adds `bias[m]` to every row of `x[n,m]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.value(x).dims2()?;
        if self.value(bias).shape() != [m] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {m} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            row.iter_mut().zip(&b).for_each(|(v, &b)| *v += b);
        }
        self.push(out, &[x, bias], AddRowBias { cols: m })
    }

    /// Affine map `x·weight + bias` with `x[n,d]`, `weight[d,m]`, `bias[m]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row_bias(y, bias)
    }

    /// Adds `bias[C]` to every channel plane of `x[N,C,...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || self.value(bias).shape() != [shape[1]] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not fit input {shape:?}",
                self.value(bias).shape()
            )));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(inner).enumerate() {
            let v = b[i % channels];
            plane.iter_mut().for_each(|x| *x += v);
        }
        self.push(out, &[x, bias], AddChannelBias { channels, inner })
    }

    /// Softmax along the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_last_axis(self.value(x))?;
        let k = *out.shape().last().expect("rank >= 1");
        self.push(out, &[x], Softmax { k })
    }

    /// Spatial mean of `[N,C,H,W]`, giving `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let spatial = h * w;
        let inv = T::ONE / T::from_f64(spatial as f64);
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| lane_sum(p) * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.push(out, &[x], GlobalAvgPool { spatial })
    }

    /// Concatenates `[N, dᵢ]` blocks along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim(format!("concat: row counts {rows} and {r} differ")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(out, parts, ConcatCols { rows, widths })
    }

    /// Multiplies sample `n` of `x[N,...]` by the scalar `weights[n, col]`.
    pub fn scale_by_column(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let rows = self.value(x).shape()[0];
        let (wr, k) = self.value(weights).dims2()?;
        if wr != rows || col >= k {
            return Err(Error::dim(format!(
                "weights {:?} cannot scale column {col} of a batch of {rows}",
                self.value(weights).shape()
            )));
        }
        let inner = self.value(x).numel() / rows;
        let w = self.value(weights).data().to_vec();
        let mut out = self.value(x).clone();
        for (n, row) in out.data_mut().chunks_mut(inner).enumerate() {
            let s = w[n * k + col];
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, &[x, weights], ScaleByColumn { rows, inner, k, col })
    }

    /// Mean negative log-likelihood of the labelled class, with probabilities
    /// floored at [`PROB_FLOOR`].
    pub fn nll_mean(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(probs).dims2()?;
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let p = self.value(probs).data();
        let floor = T::from_f64(PROB_FLOOR);
        let clamped: Vec<bool> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p[i * k + y] <= floor)
            .collect();
        let total = labels
            .iter()
            .enumerate()
            .fold(T::ZERO, |acc, (i, &y)| acc - p[i * k + y].max(floor).ln());
        let out = Tensor::scalar(total / T::from_f64(n as f64));
        self.record_branch(&clamped);
        self.push(
            out,
            &[probs],
            NllMean {
                k,
                labels: labels.to_vec(),
            },
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[Var], weights: &[f64]) -> Result<Var> {
        if parts.len() != weights.len() || parts.is_empty() {
            return Err(Error::Contract("weighted_sum needs one weight per term".into()));
        }
        let mut values = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !t.is_scalar() {
                return Err(Error::dim(format!("weighted_sum term has shape {:?}", t.shape())));
            }
            values.push(t.item());
        }
        let out = Tensor::scalar(weighted_scalar_sum(&values, weights));
        self.push(
            out,
            parts,
            WeightedSum {
                weights: weights.to_vec(),
            },
        )
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let w = 1.0 / parts.len() as f64;
        self.weighted_sum(parts, &vec![w; parts.len()])
    }
}

/// Softmax along the trailing axis of a plain tensor.
pub fn softmax_last_axis<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax of a rank-0 tensor"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}
