//! 2-D convolution via im2col and GEMM, zero padding only.

use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec { stride, pad }
    }
}

/// `floor((extent + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv2d_output_extent(extent: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = extent + 2 * spec.pad;
    (spec.stride >= 1 && kernel >= 1 && kernel <= padded).then(|| (padded - kernel) / spec.stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 stride-1 unpadded convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox·s + j − p` lies
    /// inside the image.
    fn valid_columns(&self, j: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.pad);
        let lo = if j >= p { 0 } else { (p - j).div_ceil(s) };
        let hi = if self.w + p > j {
            self.wo.min((self.w + p - j).div_ceil(s))
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (s, p) = (self.spec.stride, self.spec.pad);
        let npos = self.positions();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let (lo, hi) = self.valid_columns(j);
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * npos..][..npos];
                    for oy in 0..self.ho {
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        let y = oy * s + i;
                        if y < p || y - p >= self.h || lo == hi {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[(y - p) * self.w..(y - p + 1) * self.w];
                        dst[..lo].fill(T::ZERO);
                        dst[hi..].fill(T::ZERO);
                        let first = lo * s + j - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let (s, p) = (self.spec.stride, self.spec.pad);
        let npos = self.positions();
        for c in 0..self.c {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let (lo, hi) = self.valid_columns(j);
                    if lo == hi {
                        continue;
                    }
                    let row = &cols[((c * self.kh + i) * self.kw + j) * npos..][..npos];
                    for oy in 0..self.ho {
                        let y = oy * s + i;
                        if y < p || y - p >= self.h {
                            continue;
                        }
                        let dst = &mut plane[(y - p) * self.w..(y - p + 1) * self.w];
                        let src = &row[oy * self.wo + lo..oy * self.wo + hi];
                        let first = lo * s + j - p;
                        if s == 1 {
                            dst[first..first + hi - lo].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        } else {
                            for (d, &v) in dst[first..].iter_mut().step_by(s).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d<T> {
    geo: Geometry,
    /// Forward im2col buffers of every sample, kept when the kernel needs a
    /// gradient (empty for pointwise convolutions).
    cols: Vec<T>,
}

impl<T: Real> Function<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        g: &[T],
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let geo = self.geo;
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let (patch, npos) = (geo.patch(), geo.positions());
        let in_len = geo.c * geo.h * geo.w;
        let out_len = geo.f * npos;

        let mut gx = needs[0].then(|| vec![T::ZERO; x.len()]);
        let mut gk = needs[1].then(|| vec![T::ZERO; k.len()]);
        let mut gcols = vec![T::ZERO; if needs[0] { patch * npos } else { 0 }];

        for n in 0..geo.n {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let gn = &g[n * out_len..(n + 1) * out_len];
            if let Some(gk) = gk.as_mut() {
                let colsn: &[T] = if geo.is_pointwise() {
                    xn
                } else {
                    &self.cols[n * patch * npos..(n + 1) * patch * npos]
                };
                // gk[f, patch] += g[f, pos] · colsᵀ[pos, patch]
                T::gemm(
                    geo.f, npos, patch, T::ONE, gn, npos as isize, 1, colsn, 1, npos as isize,
                    T::ONE, gk,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                if geo.is_pointwise() {
                    // gx[c, pos] = kᵀ[c, f] · g[f, pos]
                    T::gemm(
                        patch, geo.f, npos, T::ONE, k, 1, patch as isize, gn, npos as isize, 1,
                        T::ZERO, gxn,
                    );
                } else {
                    T::gemm(
                        patch, geo.f, npos, T::ONE, k, 1, patch as isize, gn, npos as isize, 1,
                        T::ZERO, &mut gcols,
                    );
                    geo.col2im_add(&gcols, gxn);
                }
            }
        }
        vec![gx, gk]
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `input[N,C,H,W]` with `kernel[F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (f, kc, kh, kw) = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::Contract("conv2d: stride must be at least 1".into()));
        }
        let (Some(ho), Some(wo)) = (
            conv2d_output_extent(h, kh, spec),
            conv2d_output_extent(w, kw, spec),
        ) else {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {})",
                spec.pad
            )));
        };
        let geo = Geometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let (patch, npos) = (geo.patch(), geo.positions());
        let in_len = c * h * w;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::ZERO; n * f * npos];
        let keep = self.requires_grad(kernel) && !geo.is_pointwise();
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::ZERO; if keep { n } else { 1 } * patch * npos]
        };
        for (idx, (xn, on)) in x.chunks(in_len).zip(out.chunks_mut(f * npos)).enumerate() {
            let colsn: &[T] = if geo.is_pointwise() {
                xn
            } else {
                let slot = if keep { idx } else { 0 };
                let buf = &mut cols[slot * patch * npos..(slot + 1) * patch * npos];
                geo.im2col(xn, buf);
                buf
            };
            T::gemm(
                f, patch, npos, T::ONE, k, patch as isize, 1, colsn, npos as isize, 1, T::ZERO, on,
            );
        }
        if !keep {
            cols = Vec::new();
        }
        let out = Tensor::new(vec![n, f, ho, wo], out)?;
        self.push(out, &[input, kernel], Conv2d { geo, cols })
    }
}
