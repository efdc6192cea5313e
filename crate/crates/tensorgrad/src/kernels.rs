//! Raw forward/backward kernels on contiguous NCHW buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn l(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one sample (`c×h×w`) into a `k×l` column matrix.
pub(crate) fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let l = g.l();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a `k×l` column-gradient matrix back onto one sample, accumulating.
pub(crate) fn col2im_add<F: Scalar>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let l = g.l();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of the whole batch; returns output and the stacked columns.
pub(crate) fn conv_forward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
) -> (Vec<F>, Vec<F>) {
    let (k, l) = (g.k(), g.l());
    let mut cols = vec![F::zero(); g.n * k * l];
    let mut out = vec![F::zero(); g.n * g.o * l];
    let in_size = g.c * g.h * g.w;
    for s in 0..g.n {
        let cs = &mut cols[s * k * l..(s + 1) * k * l];
        im2col(g, &x[s * in_size..(s + 1) * in_size], cs);
        let os = &mut out[s * g.o * l..(s + 1) * g.o * l];
        F::gemm(g.o, k, l, F::one(), w, (k as isize, 1), cs, (l as isize, 1), F::zero(), os, (l as isize, 1));
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                os[o * l..(o + 1) * l].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub(crate) fn conv_backward<F: Scalar>(
    g: &ConvGeom,
    cols: &[F],
    w: &[F],
    dout: &[F],
    need: (bool, bool, bool),
) -> ConvGrads<F> {
    let (k, l) = (g.k(), g.l());
    let in_size = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![F::zero(); g.n * in_size]);
    let mut dw = need.1.then(|| vec![F::zero(); g.o * k]);
    let mut db = need.2.then(|| vec![F::zero(); g.o]);
    let mut dcols = if need.0 { vec![F::zero(); k * l] } else { Vec::new() };
    for s in 0..g.n {
        let ds = &dout[s * g.o * l..(s + 1) * g.o * l];
        let cs = &cols[s * k * l..(s + 1) * k * l];
        if let Some(dw) = dw.as_mut() {
            F::gemm(g.o, l, k, F::one(), ds, (l as isize, 1), cs, (1, l as isize), F::one(), dw, (k as isize, 1));
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                let sum: f64 = ds[o * l..(o + 1) * l].iter().map(|v| v.as_f64()).sum();
                *acc += F::from_f64(sum);
            }
        }
        if let Some(dx) = dx.as_mut() {
            F::gemm(k, g.o, l, F::one(), w, (1, k as isize), ds, (l as isize, 1), F::zero(), &mut dcols, (l as isize, 1));
            col2im_add(g, &dcols, &mut dx[s * in_size..(s + 1) * in_size]);
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling; `argmax` holds the flat input index chosen for each output.
pub(crate) fn maxpool_forward<F: Scalar>(g: &PoolGeom, x: &[F]) -> (Vec<F>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn gap_forward<F: Scalar>(planes: usize, area: usize, x: &[F]) -> Vec<F> {
    (0..planes)
        .map(|p| {
            let sum: f64 = x[p * area..(p + 1) * area].iter().map(|v| v.as_f64()).sum();
            F::from_f64(sum / area as f64)
        })
        .collect()
}

/// Row-wise log-softmax accumulated in f64.
pub(crate) fn log_softmax_rows<F: Scalar>(z: &[F], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(cols) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|v| v.as_f64() - lse));
    }
    out
}
