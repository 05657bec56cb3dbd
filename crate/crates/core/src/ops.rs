//! Forward kernels and the adjoint kernels the tape replays.
//!
//! Every kernel widens its inputs to f64, accumulates there, and narrows the
//! result. Forward kernels report their multiply-accumulates to
//! [`crate::counter`]; adjoint kernels do not.

use crate::counter::tally;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn narrow<T: Scalar>(shape: Shape, data: Vec<f64>, op: &'static str) -> Result<Tensor<T>> {
    Tensor::from_parts(shape, data.into_iter().map(T::narrow).collect()).ensure_finite(op)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

// ── Matrix products ──────────────────────────────────────────────────

/// `a [p x q] * b [q x r]` over the matrix views.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = (a.shape().rows(), a.shape().cols());
    let r = b.shape().cols();
    if b.shape().rows() != q {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    tally(p * q * r);
    let out = matmul_raw(&a.widened(), &b.widened(), p, q, r);
    narrow(Shape::matrix(p, r), out, "matmul")
}

/// `aᵀ b` where `a` is `[q x p]` and `b` is `[q x r]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (q, p) = (a.shape().rows(), a.shape().cols());
    let r = b.shape().cols();
    if b.shape().rows() != q {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    tally(p * q * r);
    let out = matmul_tn_raw(&a.widened(), &b.widened(), q, p, r);
    narrow(Shape::matrix(p, r), out, "matmul_tn")
}

/// `a bᵀ` where `a` is `[p x q]` and `b` is `[r x q]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = (a.shape().rows(), a.shape().cols());
    let r = b.shape().rows();
    if b.shape().cols() != q {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    tally(p * q * r);
    let out = matmul_nt_raw(&a.widened(), &b.widened(), p, q, r);
    narrow(Shape::matrix(p, r), out, "matmul_nt")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn matmul_tn_raw(a: &[f64], b: &[f64], q: usize, p: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let row = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

fn matmul_nt_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            out[i * r + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (p, q) = (a.shape().rows(), a.shape().cols());
    let d = a.data();
    let mut out = Vec::with_capacity(p * q);
    for j in 0..q {
        for i in 0..p {
            out.push(d[i * q + j]);
        }
    }
    Tensor::from_parts(Shape::matrix(q, p), out)
}

// ── Layout ───────────────────────────────────────────────────────────

/// `[1, C, H, W]` to the `[H*W x C]` pixel-major matrix.
pub fn unfold<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if n != 1 {
        return Err(Error::invalid("unfold", format!("expects one batch element, got {n}")));
    }
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(hw * c);
    for p in 0..hw {
        for ch in 0..c {
            out.push(d[ch * hw + p]);
        }
    }
    Ok(Tensor::from_parts(Shape::matrix(hw, c), out))
}

/// `[H*W x C]` back to `[1, C, H, W]`.
pub fn fold<T: Scalar>(m: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (hw, c) = (m.shape().rows(), m.shape().cols());
    if hw != h * w {
        return Err(Error::Shape {
            op: "fold",
            lhs: m.shape(),
            rhs: Shape::new(1, c, h, w),
        });
    }
    let d = m.data();
    let mut out = Vec::with_capacity(hw * c);
    for ch in 0..c {
        for p in 0..hw {
            out.push(d[p * c + ch]);
        }
    }
    Ok(Tensor::from_parts(Shape::new(1, c, h, w), out))
}

// ── Convolutions ─────────────────────────────────────────────────────

/// Per-pixel channel map. `w` is `[C_in x C_out]`, `bias` has `C_out` values.
pub fn conv1x1<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.shape().0;
    let (cin, cout) = (w.shape().rows(), w.shape().cols());
    if c != cin {
        return Err(Error::Shape {
            op: "conv1x1",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape {
                op: "conv1x1 bias",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
    }
    let hw = h * wd;
    tally(n * hw * cin * cout);
    let xd = x.widened();
    let wt = w.widened();
    let mut out = vec![0.0; n * cout * hw];
    for b in 0..n {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            if let Some(bias) = bias {
                plane.fill(bias.data()[co].widen());
            }
            for ci in 0..cin {
                let wv = wt[ci * cout + co];
                let src = &xd[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for (o, &v) in plane.iter_mut().zip(src) {
                    *o += wv * v;
                }
            }
        }
    }
    narrow(Shape::new(n, cout, h, wd), out, "conv1x1")
}

pub(crate) fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, cin, h, wd] = x.shape().0;
    let cout = w.shape().cols();
    let hw = h * wd;
    let xd = x.widened();
    let wt = w.widened();
    let gd = g.widened();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for b in 0..n {
        for co in 0..cout {
            let gp = &gd[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            gb[co] += gp.iter().sum::<f64>();
            for ci in 0..cin {
                let xp = &xd[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                gw[ci * cout + co] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                let wv = wt[ci * cout + co];
                let gxp = &mut gx[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for (o, &v) in gxp.iter_mut().zip(gp) {
                    *o += wv * v;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape(), gx.into_iter().map(T::narrow).collect()),
        Tensor::from_parts(w.shape(), gw.into_iter().map(T::narrow).collect()),
        Tensor::from_parts(Shape::matrix(1, cout), gb.into_iter().map(T::narrow).collect()),
    )
}

/// Output extent of a 3x3 window.
pub fn conv3x3_extent(input: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(3).map(|v| v / stride + 1)
}

/// Valid output range `[lo, hi)` for kernel tap `k` along one axis.
fn tap_range(k: usize, stride: usize, padding: usize, input: usize, output: usize) -> (usize, usize) {
    // input index = o * stride + k - padding must lie in [0, input)
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if input + padding > k {
        ((input + padding - k - 1) / stride + 1).min(output)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 3x3 cross-correlation with zero padding. `w` is `[C_out, C_in, 3, 3]`.
pub fn conv3x3<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, wcin, kh, kw] = w.shape().0;
    if wcin != cin || kh != 3 || kw != 3 {
        return Err(Error::Shape {
            op: "conv3x3",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    if !(1..=2).contains(&stride) || padding > 1 {
        return Err(Error::invalid(
            "conv3x3",
            format!("unsupported stride {stride} / padding {padding}"),
        ));
    }
    let (ho, wo) = match (
        conv3x3_extent(h, stride, padding),
        conv3x3_extent(wd, stride, padding),
    ) {
        (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
        _ => {
            return Err(Error::invalid(
                "conv3x3",
                format!("input {h}x{wd} too small for padding {padding}"),
            ))
        }
    };
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape {
                op: "conv3x3 bias",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
    }
    let xd = x.widened();
    let wt = w.widened();
    let mut out = vec![0.0; n * cout * ho * wo];
    let mut macs = 0;
    for b in 0..n {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[co].widen());
            }
            for ci in 0..cin {
                let src = &xd[(b * cin + ci) * h * wd..(b * cin + ci + 1) * h * wd];
                for ky in 0..3 {
                    let (ylo, yhi) = tap_range(ky, stride, padding, h, ho);
                    for kx in 0..3 {
                        let (xlo, xhi) = tap_range(kx, stride, padding, wd, wo);
                        let wv = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                        macs += (yhi - ylo) * (xhi - xlo);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let srow = &src[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let ix0 = xlo + kx - padding;
                                for (o, &v) in orow[xlo..xhi]
                                    .iter_mut()
                                    .zip(&srow[ix0..ix0 + (xhi - xlo)])
                                {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    orow[ox] += wv * srow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    tally(macs);
    narrow(Shape::new(n, cout, ho, wo), out, "conv3x3")
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub(crate) fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, cin, h, wd] = x.shape().0;
    let cout = w.shape().n();
    let [_, _, ho, wo] = g.shape().0;
    let xd = x.widened();
    let wt = w.widened();
    let gd = g.widened();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..n {
        for co in 0..cout {
            let gp = &gd[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            gb[co] += gp.iter().sum::<f64>();
            for ci in 0..cin {
                let src = &xd[(b * cin + ci) * h * wd..(b * cin + ci + 1) * h * wd];
                let gsrc = &mut gx[(b * cin + ci) * h * wd..(b * cin + ci + 1) * h * wd];
                for ky in 0..3 {
                    let (ylo, yhi) = tap_range(ky, stride, padding, h, ho);
                    for kx in 0..3 {
                        let (xlo, xhi) = tap_range(kx, stride, padding, wd, wo);
                        let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let grow = &gp[oy * wo..(oy + 1) * wo];
                            for ox in xlo..xhi {
                                let ix = iy * wd + ox * stride + kx - padding;
                                acc += grow[ox] * src[ix];
                                gsrc[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape(), gx.into_iter().map(T::narrow).collect()),
        Tensor::from_parts(w.shape(), gw.into_iter().map(T::narrow).collect()),
        Tensor::from_parts(Shape::matrix(1, cout), gb.into_iter().map(T::narrow).collect()),
    )
}

// ── Elementwise ──────────────────────────────────────────────────────

/// `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::narrow(logistic(v.widen())))
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    tally(a.numel());
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(x.widen(), y.widen()))
        .collect();
    narrow(a.shape(), out, op)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    tally(a.numel());
    narrow(a.shape(), a.data().iter().map(|v| v.widen() * s).collect(), "scale")
}

/// Multiplies row `i` of the matrix view by `v[i]`.
pub fn scale_rows<T: Scalar>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = (m.shape().rows(), m.shape().cols());
    if v.numel() != p {
        return Err(Error::Shape {
            op: "scale_rows",
            lhs: m.shape(),
            rhs: v.shape(),
        });
    }
    tally(p * q);
    let md = m.data();
    let vd = v.data();
    let mut out = Vec::with_capacity(p * q);
    for i in 0..p {
        let s = vd[i].widen();
        out.extend(md[i * q..(i + 1) * q].iter().map(|x| x.widen() * s));
    }
    narrow(m.shape(), out, "scale_rows")
}

/// Multiplies column `j` of the matrix view by `v[j]`.
pub fn scale_cols<T: Scalar>(m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = (m.shape().rows(), m.shape().cols());
    if v.numel() != q {
        return Err(Error::Shape {
            op: "scale_cols",
            lhs: m.shape(),
            rhs: v.shape(),
        });
    }
    tally(p * q);
    let vd = v.widened();
    let out = m
        .data()
        .iter()
        .enumerate()
        .map(|(k, x)| x.widen() * vd[k % q])
        .collect();
    narrow(m.shape(), out, "scale_cols")
}

/// Column sums of the matrix view as a `[1 x q]` row (a product with the ones vector).
pub fn col_sum<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (p, q) = (m.shape().rows(), m.shape().cols());
    tally(p * q);
    let mut acc = vec![0.0; q];
    for row in m.data().chunks_exact(q.max(1)).take(p) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.widen();
        }
    }
    Tensor::from_parts(Shape::matrix(1, q), acc.into_iter().map(T::narrow).collect())
}

/// `(d + eps)^(-1/2)` elementwise.
pub fn inv_sqrt_eps<T: Scalar>(d: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let out = d.data().iter().map(|v| 1.0 / (v.widen() + eps).sqrt()).collect();
    narrow(d.shape(), out, "inv_sqrt")
}

/// Spatial mean per `(n, c)`, giving `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let hw = (h * w).max(1);
    // mean as first + mean deviation, exact for constant planes
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| {
            let first = plane[0].widen();
            let dev: f64 = plane.iter().map(|v| v.widen() - first).sum();
            T::narrow(first + dev / hw as f64)
        })
        .collect();
    Tensor::from_parts(Shape::new(n, c, 1, 1), out)
}

// ── Resampling ───────────────────────────────────────────────────────

/// 2x2 max pooling, stride 2, ceil mode. Returns the pooled tensor and, per
/// output element, the flat input offset that won (first maximum in scan
/// order).
pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape().0;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    tally(x.numel());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let k = base + iy * w + ix;
                        if d[k] > d[best] {
                            best = k;
                        }
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_parts(Shape::new(n, c, ho, wo), out), arg)
}

/// Smallest gap between the winner and a runner-up over all 2x2 windows
/// with more than one element; infinite when there is no such window.
pub fn max_pool2x2_gap<T: Scalar>(x: &Tensor<T>) -> f64 {
    let [n, c, h, w] = x.shape().0;
    let d = x.data();
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..h.div_ceil(2) {
            for ox in 0..w.div_ceil(2) {
                let mut vals = Vec::with_capacity(4);
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        vals.push(d[base + iy * w + ix].widen());
                    }
                }
                if vals.len() > 1 {
                    vals.sort_by(|a, b| b.total_cmp(a));
                    gap = gap.min(vals[0] - vals[1]);
                }
            }
        }
    }
    gap
}

/// Source index pair and weight of the upper neighbour for one output coordinate.
fn bilinear_taps(dst: usize, src_extent: usize, dst_extent: usize) -> (usize, usize, f64) {
    let ratio = src_extent as f64 / dst_extent as f64;
    let s = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src_extent - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_extent - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling on half-pixel centers.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if th < h || tw < w || h == 0 || w == 0 {
        return Err(Error::invalid(
            "upsample",
            format!("target {th}x{tw} smaller than source {h}x{w}"),
        ));
    }
    let rows: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th)).collect();
    let cols: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw)).collect();
    // three lerps per output element; constants pass through exactly
    tally(3 * n * c * th * tw);
    let d = x.widened();
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, e) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + fx * (b - a);
                let bottom = c + fx * (e - c);
                out.push(top + fy * (bottom - top));
            }
        }
    }
    narrow(Shape::new(n, c, th, tw), out, "upsample")
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(g: &Tensor<T>, src: Shape) -> Tensor<T> {
    let [n, c, h, w] = src.0;
    let [_, _, th, tw] = g.shape().0;
    let rows: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th)).collect();
    let cols: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw)).collect();
    let gd = g.widened();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        let gp = &gd[plane * th * tw..(plane + 1) * th * tw];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let gv = gp[oy * tw + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                dst[y0 * w + x1] += (1.0 - fy) * fx * gv;
                dst[y1 * w + x0] += fy * (1.0 - fx) * gv;
                dst[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
    Tensor::from_parts(src, out.into_iter().map(T::narrow).collect())
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Mean per-pixel cross entropy of `logits [N, K, H, W]` against class
/// indices laid out as `[N, H, W]`. Also returns the softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [n, k, h, w] = logits.shape().0;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} labels for {} pixels", labels.len(), n * hw),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let d = logits.widened();
    let mut probs = vec![0.0; d.len()];
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let at = |cls: usize| (b * k + cls) * hw + p;
            let max = (0..k).map(|cls| d[at(cls)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|cls| (d[at(cls)] - max).exp()).sum();
            let lse = max + z.ln();
            for cls in 0..k {
                probs[at(cls)] = (d[at(cls)] - lse).exp();
            }
            total += lse - d[at(labels[b * hw + p])];
        }
    }
    let loss = total / (n * hw) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn rand_t(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = lcg(seed);
        Tensor::from_fn(shape, |_| r())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = rand_t(Shape::matrix(3, 4), 1);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let a = Tensor::<f64>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::<f64>::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &v).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let a = rand_t(Shape::matrix(7, 5), 2);
        let b = rand_t(Shape::matrix(5, 3), 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-12 * s.abs().max(1e-300));
            }
        }
        let tn = matmul_tn(&transpose(&a), &b).unwrap();
        let nt = matmul_nt(&a, &transpose(&b)).unwrap();
        assert!(c.max_rel_diff(&tn) < 1e-14);
        assert!(c.max_rel_diff(&nt) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_mentions_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(Shape::matrix(2, 3)), &Tensor::zeros(Shape::matrix(2, 3)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 1, 2, 3]"), "{err}");
    }

    #[test]
    fn conv1x1_cases() {
        let x = rand_t(Shape::new(1, 4, 3, 3), 4);
        assert_eq!(conv1x1(&x, &Tensor::identity(4), None).unwrap(), x);

        let zero = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let w = rand_t(Shape::matrix(2, 3), 5);
        let bias = Tensor::<f64>::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv1x1(&zero, &w, Some(&bias)).unwrap();
        for co in 0..3 {
            for p in 0..4 {
                assert_eq!(y.data()[co * 4 + p], bias.data()[co]);
            }
        }
        assert_eq!(conv1x1(&zero, &w, None).unwrap(), Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(conv1x1(&x, &w, None).is_err());

        let w = rand_t(Shape::matrix(4, 2), 6);
        let y = conv1x1(&x, &w, None).unwrap();
        for co in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let dot: f64 = (0..4).map(|ci| x.get([0, ci, yy, xx]) * w.at(ci, co)).sum();
                    assert!((y.get([0, co, yy, xx]) - dot).abs() < 1e-14);
                }
            }
        }
        let via_matmul = fold(&matmul(&unfold(&x).unwrap(), &w).unwrap(), 3, 3).unwrap();
        assert_eq!(via_matmul, y);
    }

    fn conv3x3_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape().0;
        let cout = w.shape().n();
        let ho = (h + 2 * pad - 3) / stride + 1;
        let wo = (wd + 2 * pad - 3) / stride + 1;
        Tensor::from_fn(Shape::new(n, cout, ho, wo), |[b, co, oy, ox]| {
            let mut s = 0.0;
            for ci in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.get([b, ci, iy as usize, ix as usize]) * w.get([co, ci, ky, kx]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv3x3_cases() {
        let x = rand_t(Shape::new(1, 1, 5, 4), 7);
        let delta = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, y, x]| {
            if y == 1 && x == 1 {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(conv3x3(&x, &delta, None, 1, 1).unwrap(), x);

        let c = Tensor::<f64>::full(Shape::new(1, 2, 5, 5), 1.5);
        let w = rand_t(Shape::new(1, 2, 3, 3), 8);
        let y = conv3x3(&c, &w, None, 1, 1).unwrap();
        let total: f64 = w.data().iter().sum();
        assert!((y.get([0, 0, 2, 2]) - 1.5 * total).abs() < 1e-14);

        for (stride, pad, h, wd) in [(1, 1, 6, 5), (2, 1, 7, 6), (1, 0, 5, 5), (2, 0, 8, 7)] {
            let x = rand_t(Shape::new(2, 3, h, wd), 9 + h as u64);
            let w = rand_t(Shape::new(4, 3, 3, 3), 10);
            let got = conv3x3(&x, &w, None, stride, pad).unwrap();
            let want = conv3x3_direct(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_rel_diff(&want) < 1e-12);
        }
        let tiny = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(conv3x3(&tiny, &Tensor::zeros(Shape::new(1, 1, 3, 3)), None, 1, 0).is_err());
        assert!(conv3x3(&x, &Tensor::zeros(Shape::new(1, 1, 3, 3)), None, 3, 1).is_err());
    }

    #[test]
    fn pointwise_cases() {
        let x = Tensor::<f64>::matrix(1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(&Tensor::<f64>::scalar(0.0)).data(), &[0.5]);
        let c = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |[n, c, _, _]| (n * 3 + c) as f64 * 0.25);
        let g = global_avg_pool(&c);
        assert_eq!(g.shape(), Shape::new(2, 3, 1, 1));
        for (i, v) in g.data().iter().enumerate() {
            assert_eq!(*v, i as f64 * 0.25);
        }
    }

    #[test]
    fn max_pool_ceil_mode() {
        let x = Tensor::<f64>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2x2(&x).0.data(), &[4.0]);
        let mut s = Shape::new(1, 1, 97, 97);
        for want in [49, 25, 13] {
            let (y, _) = max_pool2x2(&Tensor::<f64>::full(s, 2.0));
            assert_eq!(y.shape(), Shape::new(1, 1, want, want));
            assert!(y.data().iter().all(|&v| v == 2.0));
            s = y.shape();
        }
        // ties go to the first element in scan order
        let t = Tensor::<f64>::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(max_pool2x2(&t).1, vec![0]);
    }

    #[test]
    fn upsample_cases() {
        let c = Tensor::<f64>::full(Shape::new(1, 2, 3, 2), 0.7);
        let u = upsample_bilinear(&c, 7, 5).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.7));
        let one = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 3.0);
        assert!(upsample_bilinear(&one, 4, 3).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(upsample_bilinear(&c, 2, 5).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 5, 3, 3));
        let (loss, _) = cross_entropy(&logits, &[1; 18]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&logits, &[5; 18]).is_err());
    }
}
