//! Raw slice kernels behind the differentiable ops. Layout is NCHW throughout;
//! every convolution is stride 1 with zero "same" padding.

use crate::tensor::Scalar;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Output index range `[lo, hi)` along one axis for kernel tap `t` with padding `p`;
/// the matching input index is `o + t - p`.
#[inline]
fn tap_range(len: usize, t: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(t).min(len);
    let hi = (len + p).saturating_sub(t).min(len);
    (lo, hi.max(lo))
}

/// out += correlate(inp, ker) for one k×k plane pair.
fn plane_correlate<T: Scalar>(out: &mut [T], inp: &[T], ker: &[T], h: usize, w: usize, k: usize) {
    let p = k / 2;
    for ky in 0..k {
        let (y0, y1) = tap_range(h, ky, p);
        for kx in 0..k {
            let wv = ker[ky * k + kx];
            if wv == T::zero() {
                continue;
            }
            let (x0, x1) = tap_range(w, kx, p);
            if x0 >= x1 {
                continue;
            }
            let ix0 = x0 + kx - p;
            let span = x1 - x0;
            for oy in y0..y1 {
                let iy = oy + ky - p;
                axpy(
                    &mut out[oy * w + x0..oy * w + x0 + span],
                    wv,
                    &inp[iy * w + ix0..iy * w + ix0 + span],
                );
            }
        }
    }
}

/// dinp += transpose-correlate(dout, ker) for one plane pair.
fn plane_correlate_input_grad<T: Scalar>(
    dinp: &mut [T],
    dout: &[T],
    ker: &[T],
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    for ky in 0..k {
        let (y0, y1) = tap_range(h, ky, p);
        for kx in 0..k {
            let wv = ker[ky * k + kx];
            let (x0, x1) = tap_range(w, kx, p);
            if x0 >= x1 {
                continue;
            }
            let ix0 = x0 + kx - p;
            let span = x1 - x0;
            for oy in y0..y1 {
                let iy = oy + ky - p;
                axpy(
                    &mut dinp[iy * w + ix0..iy * w + ix0 + span],
                    wv,
                    &dout[oy * w + x0..oy * w + x0 + span],
                );
            }
        }
    }
}

/// dker += correlation of dout with inp for one plane pair.
fn plane_kernel_grad<T: Scalar>(
    dker: &mut [T],
    dout: &[T],
    inp: &[T],
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    for ky in 0..k {
        let (y0, y1) = tap_range(h, ky, p);
        for kx in 0..k {
            let (x0, x1) = tap_range(w, kx, p);
            if x0 >= x1 {
                continue;
            }
            let ix0 = x0 + kx - p;
            let span = x1 - x0;
            let mut acc = T::zero();
            for oy in y0..y1 {
                let iy = oy + ky - p;
                acc += dot(
                    &dout[oy * w + x0..oy * w + x0 + span],
                    &inp[iy * w + ix0..iy * w + ix0 + span],
                );
            }
            dker[ky * k + kx] += acc;
        }
    }
}

/// Geometry of a batched NCHW convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, d: ConvDims) -> Vec<T> {
    let plane = d.plane();
    let kk = d.kernel * d.kernel;
    let mut out = vec![T::zero(); d.batch * d.c_out * plane];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * plane..(b + 1) * d.c_in * plane];
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * plane..(b * d.c_out + co + 1) * plane];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..d.c_in {
                let xin = &xb[ci * plane..(ci + 1) * plane];
                let ker = &weight[(co * d.c_in + ci) * kk..(co * d.c_in + ci + 1) * kk];
                if d.kernel == 1 {
                    axpy(o, ker[0], xin);
                } else {
                    plane_correlate(o, xin, ker, d.height, d.width, d.kernel);
                }
            }
        }
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    d: ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = d.plane();
    let kk = d.kernel * d.kernel;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = &dout[(b * d.c_out + co) * plane..(b * d.c_out + co + 1) * plane];
            db[co] += g.iter().copied().sum::<T>();
            for ci in 0..d.c_in {
                let off = (b * d.c_in + ci) * plane;
                let widx = (co * d.c_in + ci) * kk;
                let xin = &x[off..off + plane];
                if d.kernel == 1 {
                    axpy(&mut dx[off..off + plane], weight[widx], g);
                    dw[widx] += dot(g, xin);
                } else {
                    plane_correlate_input_grad(
                        &mut dx[off..off + plane],
                        g,
                        &weight[widx..widx + kk],
                        d.height,
                        d.width,
                        d.kernel,
                    );
                    plane_kernel_grad(&mut dw[widx..widx + kk], g, xin, d.height, d.width, d.kernel);
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel k×k convolution; `weight` is `[C, k, k]`, `d.c_out == d.c_in`.
pub fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], d: ConvDims) -> Vec<T> {
    let plane = d.plane();
    let kk = d.kernel * d.kernel;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let off = (b * d.c_in + c) * plane;
            plane_correlate(
                &mut out[off..off + plane],
                &x[off..off + plane],
                &weight[c * kk..(c + 1) * kk],
                d.height,
                d.width,
                d.kernel,
            );
        }
    }
    out
}

/// Returns (dx, dweight).
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    d: ConvDims,
) -> (Vec<T>, Vec<T>) {
    let plane = d.plane();
    let kk = d.kernel * d.kernel;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let off = (b * d.c_in + c) * plane;
            let g = &dout[off..off + plane];
            plane_correlate_input_grad(
                &mut dx[off..off + plane],
                g,
                &weight[c * kk..(c + 1) * kk],
                d.height,
                d.width,
                d.kernel,
            );
            plane_kernel_grad(
                &mut dw[c * kk..(c + 1) * kk],
                g,
                &x[off..off + plane],
                d.height,
                d.width,
                d.kernel,
            );
        }
    }
    (dx, dw)
}

/// `c[m×n] = a[m×k] · b[k×n]` for one matrix pair.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(row, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    c
}

/// Transposes an `m×n` matrix.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Softmax over the middle axis of an `outer × len × inner` view.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] /= s;
            }
        }
    }
    y
}

/// Given softmax output `y` and upstream `dy`: dx = y ⊙ (dy − ⟨dy, y⟩) per slice.
pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - s);
            }
        }
    }
    dx
}

/// Per-channel statistics saved by a train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Train-mode batch normalization over (B, H, W) per channel, biased variance.
pub fn batchnorm_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let count = T::from_usize(batch * plane).expect("count fits");
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            s += x[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for &xi in &x[off..off + plane] {
                v += (xi - m) * (xi - m);
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        y,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns (dx, dgamma, dbeta) for train-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    saved: &BnSaved<T>,
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(batch * plane).expect("count fits");
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            let scale = gamma[c] * saved.inv_std[c] / count;
            for i in off..off + plane {
                dx[i] = scale * (count * dy[i] - dbeta[c] - saved.xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2 stride-2 max pooling; returns (output, flat argmax index into `x`).
/// Ties resolve to the first element in row-major window order.
pub fn maxpool2x2<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn upsample_nearest2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xo in 0..ow {
                dx[p * h * w + (y / 2) * w + xo / 2] += dy[p * oh * ow + y * ow + xo];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_ranges_cover_valid_outputs() {
        // k=3, p=1 over length 4
        assert_eq!(tap_range(4, 0, 1), (1, 4));
        assert_eq!(tap_range(4, 1, 1), (0, 4));
        assert_eq!(tap_range(4, 2, 1), (0, 3));
        // kernel wider than the image
        assert_eq!(tap_range(1, 0, 2), (1, 1));
        assert_eq!(tap_range(1, 2, 2), (0, 1));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        let y = softmax(&x, 2, 3, 1);
        assert!((y[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((y[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn maxpool_first_tie_wins() {
        let (out, arg) = maxpool2x2(&[5.0f64, 5.0, 5.0, 5.0], 1, 2, 2);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }
}
