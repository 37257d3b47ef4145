//! Multi-scale feature attention.
//!
//! Every channel map of every image is reduced to a principal feature vector:
//! the dominant eigenvector of the column covariance of the `h × w` map (rows
//! are spatial samples of `w`-dimensional profiles). Triplets of images then
//! contribute a cosine-margin hinge `max(neg1 + neg2 + ψ − pos, 0)` per channel
//! and scale, averaged over channels, scales and triplets.
//!
//! The eigenvector is found by power iteration from the all-ones start vector.
//! Before iterating, the covariance is raised to the power `2^squarings` by
//! repeated trace-normalized squaring, which sharpens the spectral gap without
//! changing the eigenvectors. All of it is unrolled on the tape.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{lane_dot as dot, Real, Tensor};

/// Relative covariance energy below which a map counts as constant.
pub const DEGENERATE_RATIO: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Margin ψ between same-class and cross-class similarity.
    pub margin: f64,
    /// Normalized power-iteration steps.
    pub power_iterations: usize,
    /// Trace-normalized squarings of the covariance before iterating.
    pub squarings: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            margin: 0.5,
            power_iterations: 20,
            squarings: 6,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        if self.power_iterations == 0 {
            return Err(Error::Config("power_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Splits `[N, c, h, w]` into `c` groups, each holding the `[h, w]` map of
/// every image for that channel.
pub fn group_by_channel<T: Real>(feats: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
    let (n, c, h, w) = feats.dims4()?;
    let plane = h * w;
    Ok((0..c)
        .map(|ch| {
            (0..n)
                .map(|img| {
                    let start = (img * c + ch) * plane;
                    Tensor::new(vec![h, w], feats.data()[start..start + plane].to_vec())
                        .expect("plane shape")
                })
                .collect()
        })
        .collect())
}

/// Inverse of [`group_by_channel`].
pub fn ungroup<T: Real>(groups: &[Vec<Tensor<T>>]) -> Result<Tensor<T>> {
    let c = groups.len();
    let n = groups.first().map_or(0, Vec::len);
    let (h, w) = groups
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::Contract("no maps to regroup".into()))?
        .dims2()?;
    let mut data = vec![T::ZERO; n * c * h * w];
    for (ch, group) in groups.iter().enumerate() {
        if group.len() != n {
            return Err(Error::dim("groups hold different image counts"));
        }
        for (img, map) in group.iter().enumerate() {
            let start = (img * c + ch) * h * w;
            data[start..start + h * w].copy_from_slice(map.data());
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

/// Unit principal vector of one map.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalVector<T> {
    pub vector: Vec<T>,
    /// The map had no variance; `vector` is the start vector.
    pub degenerate: bool,
}

/// Forward record of one principal-vector extraction, kept for backward.
struct PcaTrace<T> {
    h: usize,
    w: usize,
    centered: Vec<T>,
    /// `M_0 = G / tr G`, then `M_i = M_{i-1}² / tr(M_{i-1}²)`.
    mats: Vec<Vec<T>>,
    /// Unnormalized matrices `G, M_0², M_1², ...`.
    raw: Vec<Vec<T>>,
    /// Traces of `raw`.
    traces: Vec<T>,
    /// `v_0 .. v_K`.
    iterates: Vec<Vec<T>>,
    /// `‖M v_{k-1}‖` for `k = 1..=K`.
    norms: Vec<T>,
    sign: T,
    pivot: usize,
    degenerate: bool,
}

impl<T: Real> PcaTrace<T> {
    fn output(&self) -> Vec<T> {
        let v = self.iterates.last().expect("start vector");
        v.iter().map(|&x| x * self.sign).collect()
    }
}

fn start_vector<T: Real>(w: usize) -> Vec<T> {
    vec![T::ONE / T::from_f64(w as f64).sqrt(); w]
}

fn trace<T: Real>(m: &[T], w: usize) -> T {
    (0..w).fold(T::ZERO, |acc, i| acc + m[i * w + i])
}

fn square<T: Real>(m: &[T], w: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w * w];
    T::gemm(w, w, w, T::ONE, m, w as isize, 1, m, w as isize, 1, T::ZERO, &mut out);
    out
}

fn matvec<T: Real>(m: &[T], v: &[T], w: usize, transpose: bool) -> Vec<T> {
    if transpose {
        let mut out = vec![T::ZERO; w];
        for (row, &vi) in m.chunks(w).zip(v) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x * vi);
        }
        out
    } else {
        m.chunks(w).map(|row| dot(row, v)).collect()
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

fn pca_forward<T: Real>(a: &[T], h: usize, w: usize, cfg: &AttentionConfig) -> PcaTrace<T> {
    let start = start_vector::<T>(w);
    let degenerate_trace = |centered: Vec<T>| PcaTrace {
        h,
        w,
        centered,
        mats: Vec::new(),
        raw: Vec::new(),
        traces: Vec::new(),
        iterates: vec![start.clone()],
        norms: Vec::new(),
        sign: T::ONE,
        pivot: 0,
        degenerate: true,
    };

    let inv_h = T::ONE / T::from_f64(h as f64);
    let mut centered = a.to_vec();
    for j in 0..w {
        let mean = (0..h).fold(T::ZERO, |acc, i| acc + a[i * w + j]) * inv_h;
        for i in 0..h {
            centered[i * w + j] -= mean;
        }
    }
    let mut gram = vec![T::ZERO; w * w];
    T::gemm(
        w, h, w, T::ONE, &centered, 1, w as isize, &centered, w as isize, 1, T::ZERO, &mut gram,
    );
    let energy = dot(a, a);
    let t0 = trace(&gram, w);
    if !(t0 > T::from_f64(DEGENERATE_RATIO) * energy) {
        return degenerate_trace(centered);
    }

    let mut raw = vec![gram];
    let mut traces = vec![t0];
    let mut mats = vec![raw[0].iter().map(|&x| x / t0).collect::<Vec<T>>()];
    for _ in 0..cfg.squarings {
        let p = square(mats.last().expect("seeded"), w);
        let t = trace(&p, w);
        mats.push(p.iter().map(|&x| flush(x / t)).collect());
        raw.push(p);
        traces.push(t);
    }

    let m = mats.last().expect("seeded");
    let tiny = T::min_positive_value().sqrt();
    let mut iterates = vec![start.clone()];
    let mut norms = Vec::with_capacity(cfg.power_iterations);
    for _ in 0..cfg.power_iterations {
        let u = matvec(m, iterates.last().expect("seeded"), w, false);
        let n = norm(&u);
        if !(n > tiny) {
            return degenerate_trace(centered);
        }
        iterates.push(u.iter().map(|&x| x / n).collect());
        norms.push(n);
    }

    let v = iterates.last().expect("seeded");
    let mut pivot = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    let sign = if v[pivot] < T::ZERO { -T::ONE } else { T::ONE };
    PcaTrace {
        h,
        w,
        centered,
        mats,
        raw,
        traces,
        iterates,
        norms,
        sign,
        pivot,
        degenerate: false,
    }
}

/// Gradient of `Σ g_out · fp` with respect to the map.
fn pca_backward<T: Real>(tr: &PcaTrace<T>, g_out: &[T]) -> Vec<T> {
    let (h, w) = (tr.h, tr.w);
    if tr.degenerate {
        return vec![T::ZERO; h * w];
    }
    let m = tr.mats.last().expect("non-degenerate");

    // Power iterations. The rank-one updates gM += gu·v_prevᵀ are gathered
    // into one product.
    let steps = tr.iterates.len() - 1;
    let mut gus = vec![T::ZERO; w * steps];
    let mut prevs = vec![T::ZERO; w * steps];
    let mut gv: Vec<T> = g_out.iter().map(|&g| g * tr.sign).collect();
    // The carried adjoint shrinks by the spectral ratio each step; once it is
    // below rounding relative to the output gradient the remaining terms are
    // negligible (and would otherwise decay into subnormals).
    let cutoff = norm(&gv) * T::epsilon() * T::epsilon();
    for k in (1..=steps).rev() {
        if norm(&gv) <= cutoff {
            break;
        }
        let v = &tr.iterates[k];
        let along = dot(v, &gv);
        let n = tr.norms[k - 1];
        let gu: Vec<T> = gv.iter().zip(v).map(|(&g, &x)| (g - x * along) / n).collect();
        for i in 0..w {
            gus[i * steps + k - 1] = gu[i];
            prevs[i * steps + k - 1] = tr.iterates[k - 1][i];
        }
        gv = matvec(m, &gu, w, true);
    }
    let mut gm = vec![T::ZERO; w * w];
    T::gemm(
        w, steps, w, T::ONE, &gus, steps as isize, 1, &prevs, 1, steps as isize, T::ZERO, &mut gm,
    );

    // Every matrix below the power iterations is a symmetric function of the
    // symmetric Gram matrix, so only the symmetric part of each gradient
    // matters. With S symmetric, the backward of P = M² is S·M + (S·M)ᵀ.
    symmetrize(&mut gm, w);
    for i in (1..tr.mats.len()).rev() {
        let gp = normalize_backward(&gm, &tr.raw[i], tr.traces[i], w);
        let mut sm = vec![T::ZERO; w * w];
        T::gemm(w, w, w, T::ONE, &gp, w as isize, 1, &tr.mats[i - 1], w as isize, 1, T::ZERO, &mut sm);
        for a in 0..w {
            for b in 0..=a {
                let v = flush(sm[a * w + b] + sm[b * w + a]);
                gm[a * w + b] = v;
                gm[b * w + a] = v;
            }
        }
    }
    let gg = normalize_backward(&gm, &tr.raw[0], tr.traces[0], w);

    // G = XᵀX with symmetric gG  →  gX = 2·X·gG
    let mut gx = vec![T::ZERO; h * w];
    let two = T::ONE + T::ONE;
    T::gemm(h, w, w, two, &tr.centered, w as isize, 1, &gg, w as isize, 1, T::ZERO, &mut gx);

    // Column centering.
    let inv_h = T::ONE / T::from_f64(h as f64);
    for j in 0..w {
        let mean = (0..h).fold(T::ZERO, |acc, i| acc + gx[i * w + j]) * inv_h;
        for i in 0..h {
            gx[i * w + j] -= mean;
        }
    }
    gx
}

/// Zeroes magnitudes below the smallest normal number.
fn flush<T: Real>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::ZERO
    } else {
        x
    }
}

fn symmetrize<T: Real>(m: &mut [T], w: usize) {
    let half = T::from_f64(0.5);
    for a in 0..w {
        for b in 0..a {
            let v = (m[a * w + b] + m[b * w + a]) * half;
            m[a * w + b] = v;
            m[b * w + a] = v;
        }
    }
}

/// Backward of `Y = P / tr(P)`.
fn normalize_backward<T: Real>(gy: &[T], p: &[T], t: T, w: usize) -> Vec<T> {
    let inner = dot(gy, p);
    let diag = inner / (t * t);
    let mut gp: Vec<T> = gy.iter().map(|&g| g / t).collect();
    for i in 0..w {
        gp[i * w + i] -= diag;
    }
    gp
}

/// Principal vector of a single `[h, w]` map.
pub fn principal_vector<T: Real>(map: &Tensor<T>, cfg: &AttentionConfig) -> Result<PrincipalVector<T>> {
    let (h, w) = map.dims2()?;
    if h < 2 {
        return Err(Error::dim(format!("principal vector needs h >= 2, got {h}")));
    }
    let trace = pca_forward(map.data(), h, w, cfg);
    Ok(PrincipalVector {
        vector: trace.output(),
        degenerate: trace.degenerate,
    })
}

struct PrincipalVectors<T> {
    traces: Vec<PcaTrace<T>>,
}

impl<T: Real> Function<T> for PrincipalVectors<T> {
    fn name(&self) -> &'static str {
        "principal_vectors"
    }

    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut out = Vec::with_capacity(self.traces.len() * self.traces.first().map_or(0, |t| t.h * t.w));
        for (tr, go) in self.traces.iter().zip(g.chunks(self.traces[0].w)) {
            out.extend(pca_backward(tr, go));
        }
        vec![Some(out)]
    }
}

/// Principal vectors of every channel map on the tape.
#[derive(Clone, Debug)]
pub struct ScaleVectors {
    /// `[N, c, w]` unit vectors.
    pub vectors: Var,
    /// Row-major `[N, c]` degeneracy flags.
    pub degenerate: Vec<bool>,
}

impl<T: Real> Graph<T> {
    /// Extracts `[N, c, w]` principal vectors from `[N, c, h, w]` feature maps.
    pub fn principal_vectors(&mut self, feats: Var, cfg: &AttentionConfig) -> Result<ScaleVectors> {
        let (n, c, h, w) = self.value(feats).dims4()?;
        if h < 2 {
            return Err(Error::dim(format!("principal vectors need h >= 2, got {h}")));
        }
        let data = self.value(feats).data();
        let traces: Vec<PcaTrace<T>> = data.chunks(h * w).map(|m| pca_forward(m, h, w, cfg)).collect();
        let mut out = Vec::with_capacity(n * c * w);
        let mut degenerate = Vec::with_capacity(n * c);
        let mut branches = Vec::with_capacity(n * c);
        for tr in &traces {
            out.extend(tr.output());
            degenerate.push(tr.degenerate);
            branches.push((tr.degenerate, tr.pivot, tr.sign > T::ZERO));
        }
        self.record_branch(&branches);
        let vectors = self.push(
            Tensor::new(vec![n, c, w], out)?,
            &[feats],
            PrincipalVectors { traces },
        )?;
        Ok(ScaleVectors { vectors, degenerate })
    }
}

/// Cosine of the angle between two non-zero vectors.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::ZERO || nb == T::ZERO {
        return Err(Error::Contract("cosine similarity of a zero vector is undefined".into()));
    }
    let dot = a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + x * y);
    Ok(dot / (na * nb))
}

/// Attention hinge for one channel of one triplet.
pub fn hinge(pos: f64, neg1: f64, neg2: f64, margin: f64) -> f64 {
    (neg1 + neg2 + margin - pos).max(0.0)
}

/// Row indices of one triplet inside a batch: two same-class images and one
/// image of another class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn check(&self, labels: &[usize]) -> Result<()> {
        let get = |i: usize| {
            labels
                .get(i)
                .copied()
                .ok_or_else(|| Error::Contract(format!("triplet row {i} outside batch of {}", labels.len())))
        };
        let (a, p, n) = (get(self.anchor)?, get(self.positive)?, get(self.negative)?);
        if a != p {
            return Err(Error::Contract(format!(
                "triplet anchor and positive have classes {a} and {p}"
            )));
        }
        if a == n {
            return Err(Error::Contract(format!(
                "triplet negative shares class {a} with its anchor"
            )));
        }
        Ok(())
    }
}

/// Gradient of `sim(x, y)` with respect to `x`, scaled by `s` and added to `out`.
fn add_sim_grad<T: Real>(x: &[T], y: &[T], sim: T, s: T, out: &mut [T]) {
    let (nx, ny) = (norm(x), norm(y));
    for i in 0..x.len() {
        out[i] += s * (y[i] / ny - sim * x[i] / nx) / nx;
    }
}

struct AttentionHinge {
    c: usize,
    w: usize,
    triplets: Vec<Triplet>,
    /// Per `(triplet, channel)`: whether the hinge was active.
    active: Vec<bool>,
}

impl<T: Real> Function<T> for AttentionHinge {
    fn name(&self) -> &'static str {
        "attention_hinge"
    }

    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Vec<T>>> {
        let fp = inputs[0].data();
        let (c, w) = (self.c, self.w);
        let scale = g[0] / T::from_f64((self.triplets.len() * c) as f64);
        let mut grad = vec![T::ZERO; fp.len()];
        for (t, tri) in self.triplets.iter().enumerate() {
            for ch in 0..c {
                if !self.active[t * c + ch] {
                    continue;
                }
                let at = |row: usize| (row * c + ch) * w;
                let (ia, ip, in_) = (at(tri.anchor), at(tri.positive), at(tri.negative));
                let (a, p, n) = (&fp[ia..ia + w], &fp[ip..ip + w], &fp[in_..in_ + w]);
                let pos = cosine_sim(a, p).expect("checked in forward");
                let neg1 = cosine_sim(a, n).expect("checked in forward");
                let neg2 = cosine_sim(p, n).expect("checked in forward");
                let mut ga = vec![T::ZERO; w];
                let mut gp = vec![T::ZERO; w];
                let mut gn = vec![T::ZERO; w];
                add_sim_grad(a, p, pos, -scale, &mut ga);
                add_sim_grad(p, a, pos, -scale, &mut gp);
                add_sim_grad(a, n, neg1, scale, &mut ga);
                add_sim_grad(n, a, neg1, scale, &mut gn);
                add_sim_grad(p, n, neg2, scale, &mut gp);
                add_sim_grad(n, p, neg2, scale, &mut gn);
                for (dst, src) in [(ia, ga), (ip, gp), (in_, gn)] {
                    grad[dst..dst + w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        vec![Some(grad)]
    }
}

impl<T: Real> Graph<T> {
    /// Mean hinge over triplets and channels of one scale. Channels where any
    /// of the three maps is degenerate contribute zero.
    pub fn attention_hinge(
        &mut self,
        scale: &ScaleVectors,
        triplets: &[Triplet],
        labels: &[usize],
        margin: f64,
    ) -> Result<Var> {
        let (n, c, w) = match *self.value(scale.vectors).shape() {
            [n, c, w] => (n, c, w),
            ref s => return Err(Error::dim(format!("principal vectors have shape {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} images", labels.len())));
        }
        if triplets.is_empty() {
            return Err(Error::Contract("attention loss needs at least one triplet".into()));
        }
        for t in triplets {
            t.check(labels)?;
        }
        let fp = self.value(scale.vectors).data();
        let mut total = T::ZERO;
        let mut active = Vec::with_capacity(triplets.len() * c);
        for tri in triplets {
            for ch in 0..c {
                let degenerate = [tri.anchor, tri.positive, tri.negative]
                    .iter()
                    .any(|&r| scale.degenerate[r * c + ch]);
                if degenerate {
                    active.push(false);
                    continue;
                }
                let vec_of = |row: usize| &fp[(row * c + ch) * w..(row * c + ch + 1) * w];
                let pos = cosine_sim(vec_of(tri.anchor), vec_of(tri.positive))?;
                let neg1 = cosine_sim(vec_of(tri.anchor), vec_of(tri.negative))?;
                let neg2 = cosine_sim(vec_of(tri.positive), vec_of(tri.negative))?;
                let z = neg1 + neg2 + T::from_f64(margin) - pos;
                let on = z > T::ZERO;
                if on {
                    total += z;
                }
                active.push(on);
            }
        }
        let value = total / T::from_f64((triplets.len() * c) as f64);
        self.record_branch(&active);
        self.push(
            Tensor::scalar(value),
            &[scale.vectors],
            AttentionHinge {
                c,
                w,
                triplets: triplets.to_vec(),
                active,
            },
        )
    }

    /// Attention loss over all scales: per-scale hinge means, averaged.
    pub fn attention_loss(
        &mut self,
        scales: &[ScaleVectors],
        triplets: &[Triplet],
        labels: &[usize],
        cfg: &AttentionConfig,
    ) -> Result<Var> {
        let terms = scales
            .iter()
            .map(|s| self.attention_hinge(s, triplets, labels, cfg.margin))
            .collect::<Result<Vec<_>>>()?;
        self.mean_of(&terms)
    }
}

/// Pairwise cosine similarities of one channel's vectors across images.
/// Degenerate entries yield `NaN` rows and columns.
pub fn similarity_matrix<T: Real>(vectors: &Tensor<T>, degenerate: &[bool], channel: usize) -> Result<Vec<Vec<f64>>> {
    let (n, c, w) = match *vectors.shape() {
        [n, c, w] => (n, c, w),
        ref s => return Err(Error::dim(format!("principal vectors have shape {s:?}"))),
    };
    if channel >= c {
        return Err(Error::dim(format!("channel {channel} of {c}")));
    }
    let v = |i: usize| &vectors.data()[(i * c + channel) * w..(i * c + channel + 1) * w];
    let mut out = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        for j in 0..n {
            if !degenerate[i * c + channel] && !degenerate[j * c + channel] {
                out[i][j] = cosine_sim(v(i), v(j))?.as_f64();
            }
        }
    }
    Ok(out)
}

/// Writes a similarity matrix as CSV with sample ids as header and first column.
pub fn write_similarity_csv(path: &Path, ids: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    let header: Vec<&str> = std::iter::once("id").chain(ids.iter().map(String::as_str)).collect();
    writeln!(buf, "{}", header.join(",")).expect("write to vec");
    for (id, row) in ids.iter().zip(matrix) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(buf, "{id},{}", cells.join(",")).expect("write to vec");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Mean intra-class minus mean inter-class cosine of principal vectors,
/// averaged over channels that have both kinds of non-degenerate pairs.
pub fn separation_gap<T: Real>(vectors: &Tensor<T>, degenerate: &[bool], labels: &[usize]) -> Result<Option<f64>> {
    let c = match *vectors.shape() {
        [_, c, _] => c,
        ref s => return Err(Error::dim(format!("principal vectors have shape {s:?}"))),
    };
    let mut gaps = Vec::new();
    for ch in 0..c {
        let sims = similarity_matrix(vectors, degenerate, ch)?;
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..labels.len() {
            for j in i + 1..labels.len() {
                let s = sims[i][j];
                if s.is_nan() {
                    continue;
                }
                if labels[i] == labels[j] {
                    intra += s;
                    n_intra += 1;
                } else {
                    inter += s;
                    n_inter += 1;
                }
            }
        }
        if n_intra > 0 && n_inter > 0 {
            gaps.push(intra / n_intra as f64 - inter / n_inter as f64);
        }
    }
    Ok((!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64))
}
