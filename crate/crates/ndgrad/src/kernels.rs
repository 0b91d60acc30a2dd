//! Plain slice kernels shared by forward and backward passes. Reductions
//! accumulate in f64.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn to_real<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
    }
    out
}

/// `[m,n] x [k,n]^T -> [m,k]`.
pub(crate) fn matmul_bt<A: Real, B: Real>(a: &[A], b: &[B], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        }
    }
    out
}

/// `[m,k]^T x [m,n] -> [k,n]`.
pub(crate) fn matmul_at<A: Real, B: Real>(a: &[A], b: &[B], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
    }
    out
}

#[inline]
fn in_range(pos: isize, len: usize) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        None
    }
}

/// Cross-correlation. `w` is `[c_out, c_in, kh, kw]`.
pub(crate) fn conv2d<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0f64; g.c_out * g.oh * g.ow];
    for o in 0..g.c_out {
        let plane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        if let Some(b) = bias {
            let bv = b[o].as_f64();
            plane.iter_mut().for_each(|v| *v = bv);
        }
        for c in 0..g.c_in {
            let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.c_in + c) * g.kh + ky) * g.kw + kx].as_f64();
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let Some(iy) = in_range((oy * g.stride + ky) as isize - g.pad as isize, g.h)
                        else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(ix) =
                                in_range((ox * g.stride + kx) as isize - g.pad as isize, g.w)
                            {
                                plane[oy * g.ow + ox] += wv * xin[iy * g.w + ix].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d`]: returns (dx, dw, db).
pub(crate) fn conv2d_backward<T: Real, D: Real>(
    x: &[T],
    w: &[T],
    dout: &[D],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0f64; g.c_in * g.h * g.w];
    let mut dw = vec![0.0f64; g.c_out * g.c_in * g.kh * g.kw];
    let mut db = vec![0.0f64; g.c_out];
    for o in 0..g.c_out {
        let dplane = &dout[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        db[o] = dplane.iter().map(|v| v.as_f64()).sum();
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((o * g.c_in + c) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx].as_f64();
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(iy) = in_range((oy * g.stride + ky) as isize - g.pad as isize, g.h)
                        else {
                            continue;
                        };
                        for ox in 0..g.ow {
                            if let Some(ix) =
                                in_range((ox * g.stride + kx) as isize - g.pad as isize, g.w)
                            {
                                let d = dplane[oy * g.ow + ox].as_f64();
                                let xi = (c * g.h + iy) * g.w + ix;
                                acc += d * x[xi].as_f64();
                                dx[xi] += d * wv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution. `w` is `[c_in, c_out, kh, kw]`, i.e. the weight
/// layout of the forward convolution it is the adjoint of.
pub(crate) fn conv2d_transpose<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let mut out = vec![0.0f64; g.c_out * g.oh * g.ow];
    if let Some(b) = bias {
        for o in 0..g.c_out {
            let bv = b[o].as_f64();
            out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow].iter_mut().for_each(|v| *v = bv);
        }
    }
    for c in 0..g.c_in {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let xv = x[(c * g.h + iy) * g.w + ix].as_f64();
                if xv == 0.0 {
                    continue;
                }
                for o in 0..g.c_out {
                    for ky in 0..g.kh {
                        let Some(oy) = in_range((iy * g.stride + ky) as isize - g.pad as isize, g.oh)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(ox) =
                                in_range((ix * g.stride + kx) as isize - g.pad as isize, g.ow)
                            {
                                let wv = w[((c * g.c_out + o) * g.kh + ky) * g.kw + kx].as_f64();
                                out[(o * g.oh + oy) * g.ow + ox] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d_transpose`]: returns (dx, dw, db).
pub(crate) fn conv2d_transpose_backward<T: Real, D: Real>(
    x: &[T],
    w: &[T],
    dout: &[D],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0f64; g.c_in * g.h * g.w];
    let mut dw = vec![0.0f64; g.c_in * g.c_out * g.kh * g.kw];
    let mut db = vec![0.0f64; g.c_out];
    for o in 0..g.c_out {
        db[o] = dout[o * g.oh * g.ow..(o + 1) * g.oh * g.ow].iter().map(|v| v.as_f64()).sum();
    }
    for c in 0..g.c_in {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let xi = (c * g.h + iy) * g.w + ix;
                let xv = x[xi].as_f64();
                let mut acc = 0.0;
                for o in 0..g.c_out {
                    for ky in 0..g.kh {
                        let Some(oy) = in_range((iy * g.stride + ky) as isize - g.pad as isize, g.oh)
                        else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(ox) =
                                in_range((ix * g.stride + kx) as isize - g.pad as isize, g.ow)
                            {
                                let widx = ((c * g.c_out + o) * g.kh + ky) * g.kw + kx;
                                let d = dout[(o * g.oh + oy) * g.ow + ox].as_f64();
                                acc += d * w[widx].as_f64();
                                dw[widx] += d * xv;
                            }
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    (dx, dw, db)
}

/// Masked, numerically stable softmax of one row, computed in f64. Masked
/// entries are exactly zero. Returns `None` if no entry is valid.
pub(crate) fn softmax_row<T: Real>(row: &[T], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        if valid(i) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out = vec![0.0f64; row.len()];
    let mut total = 0.0;
    for (i, v) in row.iter().enumerate() {
        if valid(i) {
            let e = (v.as_f64() - max).exp();
            out[i] = e;
            total += e;
        }
    }
    for v in &mut out {
        *v /= total;
    }
    Some(out)
}

/// Masked log-softmax of one row; masked entries are reported as 0.
pub(crate) fn log_softmax_row<T: Real>(row: &[T], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        if valid(i) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let total: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, v)| (v.as_f64() - max).exp())
        .sum();
    let lse = max + total.ln();
    Some(
        row.iter()
            .enumerate()
            .map(|(i, v)| if valid(i) { v.as_f64() - lse } else { 0.0 })
            .collect(),
    )
}
