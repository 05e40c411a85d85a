//! Dense 2D kernels for the side-output network: convolution, pooling,
//! bilinear resampling and their adjoints.
//!
//! Everything is generic over the scalar so the training path runs in `f32`
//! while the finite-difference gradient check runs the identical code in
//! `f64`.

/// Scalar used by the network kernels.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Channel-major feature map: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            ch,
            h,
            w,
            data: vec![F::ZERO; ch * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[F] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Shifted row accumulation: `dst[y][x] += k * src[y + dy - 1][x + dx - 1]`
/// over the in-bounds overlap, for planes of identical size. This is the
/// inner step of same-padding 3x3 convolution and of its data adjoint.
#[inline]
fn shifted_axpy<F: Real>(dst: &mut [F], src: &[F], h: usize, w: usize, dy: isize, dx: isize, k: F) {
    let y_dst_start = (-dy).max(0) as usize;
    let y_dst_end = (h as isize - dy).min(h as isize) as usize;
    let x_dst_start = (-dx).max(0) as usize;
    let x_dst_end = (w as isize - dx).min(w as isize) as usize;
    if x_dst_start >= x_dst_end {
        return;
    }
    for y in y_dst_start..y_dst_end {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w + x_dst_start..y * w + x_dst_end];
        let srow = &src[sy * w + (x_dst_start as isize + dx) as usize
            ..sy * w + (x_dst_end as isize + dx) as usize];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d += k * s;
        }
    }
}

/// Dot product of `a[y][x]` with `b[y + dy - 1][x + dx - 1]` over the
/// in-bounds overlap; used for convolution weight gradients.
#[inline]
fn shifted_dot<F: Real>(a: &[F], b: &[F], h: usize, w: usize, dy: isize, dx: isize) -> F {
    let y_start = (-dy).max(0) as usize;
    let y_end = (h as isize - dy).min(h as isize) as usize;
    let x_start = (-dx).max(0) as usize;
    let x_end = (w as isize - dx).min(w as isize) as usize;
    let mut acc = F::ZERO;
    if x_start >= x_end {
        return acc;
    }
    for y in y_start..y_end {
        let sy = (y as isize + dy) as usize;
        let arow = &a[y * w + x_start..y * w + x_end];
        let brow = &b[sy * w + (x_start as isize + dx) as usize..sy * w + (x_end as isize + dx) as usize];
        for (&av, &bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
    }
    acc
}

/// Same-padding 3x3 convolution followed by tanh.
///
/// Weight layout: `w[((o * in_ch + i) * 3 + dy) * 3 + dx]`, bias per output
/// channel.
pub fn conv3x3_tanh<F: Real>(
    in_ch: usize,
    out_ch: usize,
    weights: &[F],
    bias: &[F],
    input: &FeatureMap<F>,
) -> FeatureMap<F> {
    debug_assert_eq!(in_ch, input.ch);
    debug_assert_eq!(weights.len(), out_ch * in_ch * 9);
    let (h, w) = (input.h, input.w);
    let n = h * w;
    let mut out = FeatureMap::zeros(out_ch, h, w);
    for o in 0..out_ch {
        let plane = &mut out.data[o * n..(o + 1) * n];
        plane.fill(bias[o]);
        for i in 0..in_ch {
            let src = input.plane(i);
            let base = (o * in_ch + i) * 9;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    let k = weights[base + (dy * 3 + dx) as usize];
                    shifted_axpy(plane, src, h, w, dy - 1, dx - 1, k);
                }
            }
        }
        for v in plane.iter_mut() {
            *v = v.tanh();
        }
    }
    out
}

/// Backward pass of [`conv3x3_tanh`].
///
/// `grad_out` is the gradient at the post-tanh output, `output` the forward
/// post-tanh activations, `input` the forward input. Accumulates weight and
/// bias gradients into `grad_w` / `grad_b` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_tanh_backward<F: Real>(
    in_ch: usize,
    out_ch: usize,
    weights: &[F],
    input: &FeatureMap<F>,
    output: &FeatureMap<F>,
    grad_out: &FeatureMap<F>,
    grad_w: &mut [F],
    grad_b: &mut [F],
) -> FeatureMap<F> {
    let (h, w) = (input.h, input.w);
    let mut grad_in = FeatureMap::zeros(in_ch, h, w);
    // gradient at pre-activation: g * (1 - tanh^2)
    let mut grad_pre = FeatureMap::zeros(out_ch, h, w);
    for c in 0..out_ch {
        let gp = grad_pre.plane_mut(c);
        let go = grad_out.plane(c);
        let act = output.plane(c);
        for ((g, &a), &up) in gp.iter_mut().zip(act).zip(go) {
            *g = up * (F::ONE - a * a);
        }
    }
    let n = h * w;
    for o in 0..out_ch {
        let gpre = grad_pre.plane(o);
        let mut bsum = F::ZERO;
        for &g in gpre {
            bsum += g;
        }
        grad_b[o] += bsum;
        for i in 0..in_ch {
            let src = input.plane(i);
            let base = (o * in_ch + i) * 9;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    // weight grad: correlate pre-activation grad with input
                    grad_w[base + (dy * 3 + dx) as usize] +=
                        shifted_dot(gpre, src, h, w, dy - 1, dx - 1);
                }
            }
            // data grad: full correlation with flipped kernel
            let gin = &mut grad_in.data[i * n..(i + 1) * n];
            for dy in 0..3isize {
                for dx in 0..3isize {
                    let k = weights[base + (dy * 3 + dx) as usize];
                    shifted_axpy(gin, gpre, h, w, 1 - dy, 1 - dx, k);
                }
            }
        }
    }
    grad_in
}

/// 1x1 side head: collapses channels into one activation plane.
pub fn side_head_forward<F: Real>(w: &[F], b: F, input: &FeatureMap<F>) -> Vec<F> {
    let n = input.h * input.w;
    let mut out = vec![b; n];
    for (c, &k) in w.iter().enumerate() {
        let src = input.plane(c);
        for (o, &s) in out.iter_mut().zip(src) {
            *o += k * s;
        }
    }
    out
}

/// Backward pass of [`side_head_forward`]; returns the input gradient and
/// accumulates the head's weight/bias gradients.
pub fn side_head_backward<F: Real>(
    w: &[F],
    input: &FeatureMap<F>,
    grad_out: &[F],
    grad_w: &mut [F],
    grad_b: &mut F,
) -> FeatureMap<F> {
    let mut grad_in = FeatureMap::zeros(input.ch, input.h, input.w);
    let mut bsum = F::ZERO;
    for &g in grad_out {
        bsum += g;
    }
    *grad_b += bsum;
    for c in 0..input.ch {
        let src = input.plane(c);
        let mut dot = F::ZERO;
        for (&g, &s) in grad_out.iter().zip(src) {
            dot += g * s;
        }
        grad_w[c] += dot;
        let k = w[c];
        let gin = grad_in.plane_mut(c);
        for (gi, &g) in gin.iter_mut().zip(grad_out) {
            *gi = k * g;
        }
    }
    grad_in
}

/// 2x2 average pooling; both spatial dims must be even.
pub fn avg_pool2<F: Real>(input: &FeatureMap<F>) -> FeatureMap<F> {
    debug_assert!(input.h % 2 == 0 && input.w % 2 == 0);
    let (oh, ow) = (input.h / 2, input.w / 2);
    let quarter = F::from_f64(0.25);
    let mut out = FeatureMap::zeros(input.ch, oh, ow);
    for c in 0..input.ch {
        let src = input.plane(c);
        let w = input.w;
        let dst = out.plane_mut(c);
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each pooled gradient over its 2x2 window.
pub fn avg_pool2_backward<F: Real>(grad_out: &FeatureMap<F>) -> FeatureMap<F> {
    let (h, w) = (grad_out.h * 2, grad_out.w * 2);
    let quarter = F::from_f64(0.25);
    let mut grad_in = FeatureMap::zeros(grad_out.ch, h, w);
    for c in 0..grad_out.ch {
        let src = grad_out.plane(c);
        let ow = grad_out.w;
        let dst = grad_in.plane_mut(c);
        for y in 0..grad_out.h {
            for x in 0..ow {
                let g = src[y * ow + x] * quarter;
                let i = 2 * y * w + 2 * x;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    grad_in
}

/// Interpolation stencil for one output coordinate of a bilinear upsample.
#[inline]
fn lerp_coords(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Fixed bilinear upsampling of a single plane by an integer factor.
pub fn upsample_bilinear<F: Real>(src: &[F], h: usize, w: usize, factor: usize) -> Vec<F> {
    if factor == 1 {
        return src.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![F::ZERO; oh * ow];
    let xc: Vec<(usize, usize, f64)> = (0..ow).map(|x| lerp_coords(x, factor, w)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = lerp_coords(y, factor, h);
        let wy0 = F::from_f64(1.0 - fy);
        let wy1 = F::from_f64(fy);
        let r0 = &src[y0 * w..y0 * w + w];
        let r1 = &src[y1 * w..y1 * w + w];
        let orow = &mut out[y * ow..(y + 1) * ow];
        for (x, &(x0, x1, fx)) in xc.iter().enumerate() {
            let wx0 = F::from_f64(1.0 - fx);
            let wx1 = F::from_f64(fx);
            orow[x] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward<F: Real>(
    grad_out: &[F],
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<F> {
    if factor == 1 {
        return grad_out.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(grad_out.len(), oh * ow);
    let mut grad_in = vec![F::ZERO; h * w];
    let xc: Vec<(usize, usize, f64)> = (0..ow).map(|x| lerp_coords(x, factor, w)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = lerp_coords(y, factor, h);
        let wy0 = F::from_f64(1.0 - fy);
        let wy1 = F::from_f64(fy);
        let grow = &grad_out[y * ow..(y + 1) * ow];
        for (x, &(x0, x1, fx)) in xc.iter().enumerate() {
            let g = grow[x];
            let wx0 = F::from_f64(1.0 - fx);
            let wx1 = F::from_f64(fx);
            grad_in[y0 * w + x0] += wy0 * wx0 * g;
            grad_in[y0 * w + x1] += wy0 * wx1 * g;
            grad_in[y1 * w + x0] += wy1 * wx0 * g;
            grad_in[y1 * w + x1] += wy1 * wx1 * g;
        }
    }
    grad_in
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid<F: Real>(a: F) -> F {
    let x = a.to_f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    F::from_f64(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_roundtrip_is_adjoint() {
        // <pool(x), y> == <x, pool^T(y)> for random-ish planes
        let mut x = FeatureMap::<f64>::zeros(1, 4, 4);
        let mut y = FeatureMap::<f64>::zeros(1, 2, 2);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        for (i, v) in y.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.73).cos();
        }
        let px = avg_pool2(&x);
        let pty = avg_pool2_backward(&y);
        let lhs: f64 = px.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&pty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_is_adjoint() {
        let h = 3;
        let w = 4;
        let f = 2;
        let src: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.11).sin()).collect();
        let dst: Vec<f64> = (0..h * w * f * f).map(|i| (i as f64 * 0.29).cos()).collect();
        let up = upsample_bilinear(&src, h, w, f);
        let down = upsample_bilinear_backward(&dst, h, w, f);
        let lhs: f64 = up.iter().zip(&dst).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(&down).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let src = vec![0.7f64; 6];
        let up = upsample_bilinear(&src, 2, 3, 4);
        assert_eq!(up.len(), 8 * 12);
        for v in up {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut w = vec![0.0f64; 9];
        w[4] = 10.0; // center tap
        let mut input = FeatureMap::zeros(1, 3, 3);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let out = conv3x3_tanh(1, 1, &w, &[0.0], &input);
        for (o, i) in out.data.iter().zip(&input.data) {
            assert!((o - (10.0 * i).tanh()).abs() < 1e-12);
        }
    }
}
