//! Dense numeric kernels with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same network runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Activations
//! are laid out channel-major: a feature map is `(channels, height, width)`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Floating-point scalar usable by the network.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C ← alpha·A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(
                    a.len() >= span(m, k, rsa, csa)
                        && b.len() >= span(k, n, rsb, csb)
                        && c.len() >= span(m, n, rsc, csc),
                    "gemm operand too short"
                );
                // SAFETY: the assert above bounds every strided access.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }
}

/// 2D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfold `(c, h, w)` into `(c·k·k, ho·wo)` columns.
pub fn im2col<T: Real>(input: &[T], h: usize, w: usize, s: &ConvShape) -> (Vec<T>, usize, usize) {
    let (ho, wo) = s.out_dims(h, w);
    let k = s.kernel;
    let mut cols = vec![T::zero(); s.patch() * ho * wo];
    for c in 0..s.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Fold columns back, accumulating overlaps into `out` of shape `(c, h, w)`.
pub fn col2im<T: Real>(cols: &[T], h: usize, w: usize, s: &ConvShape, out: &mut [T]) {
    let (ho, wo) = s.out_dims(h, w);
    let k = s.kernel;
    for c in 0..s.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output of a convolution forward pass; `cols` is kept for backward.
pub struct ConvOut<T> {
    pub out: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub cols: Vec<T>,
}

/// `weight` is `(c_out, c_in·k·k)`, `bias` is `(c_out)`.
pub fn conv2d<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    s: &ConvShape,
) -> ConvOut<T> {
    debug_assert_eq!(input.len(), s.c_in * h * w);
    let (cols, ho, wo) = im2col(input, h, w, s);
    let n = ho * wo;
    let p = s.patch();
    let mut out = vec![T::zero(); s.c_out * n];
    for (c, chunk) in out.chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[c]);
    }
    T::gemm(
        s.c_out,
        p,
        n,
        T::one(),
        weight,
        p as isize,
        1,
        &cols,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    ConvOut {
        out,
        h: ho,
        w: wo,
        cols,
    }
}

/// Accumulates weight and bias gradients; returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    d_out: &[T],
    cols: &[T],
    h: usize,
    w: usize,
    weight: &[T],
    s: &ConvShape,
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = s.out_dims(h, w);
    let n = ho * wo;
    let p = s.patch();
    // dW += dY · colsᵀ
    T::gemm(
        s.c_out,
        n,
        p,
        T::one(),
        d_out,
        n as isize,
        1,
        cols,
        1,
        n as isize,
        T::one(),
        d_weight,
        p as isize,
        1,
    );
    for (c, chunk) in d_out.chunks(n).enumerate() {
        d_bias[c] += chunk.iter().copied().sum::<T>();
    }
    if !need_input_grad {
        return None;
    }
    // dcols = Wᵀ · dY
    let mut d_cols = vec![T::zero(); p * n];
    T::gemm(
        p,
        s.c_out,
        n,
        T::one(),
        weight,
        1,
        p as isize,
        d_out,
        n as isize,
        1,
        T::zero(),
        &mut d_cols,
        n as isize,
        1,
    );
    let mut d_in = vec![T::zero(); s.c_in * h * w];
    col2im(&d_cols, h, w, s, &mut d_in);
    Some(d_in)
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zero the gradient wherever the forward output was clamped.
pub fn relu_backward_inplace<T: Real>(d: &mut [T], out: &[T]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `y = x·Wᵀ + b` for `rows` inputs; `weight` is `(out, in)`.
pub fn linear<T: Real>(x: &[T], rows: usize, weight: &[T], bias: &[T], d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d_out];
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(bias);
    }
    T::gemm(
        rows,
        d_in,
        d_out,
        T::one(),
        x,
        d_in as isize,
        1,
        weight,
        1,
        d_in as isize,
        T::one(),
        &mut y,
        d_out as isize,
        1,
    );
    y
}

/// Accumulates `dW`, `db`; returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    rows: usize,
    weight: &[T],
    d_in: usize,
    d_out: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    T::gemm(
        d_out,
        rows,
        d_in,
        T::one(),
        dy,
        1,
        d_out as isize,
        x,
        d_in as isize,
        1,
        T::one(),
        d_weight,
        d_in as isize,
        1,
    );
    for r in 0..rows {
        for (b, &g) in d_bias.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); rows * d_in];
    T::gemm(
        rows,
        d_out,
        d_in,
        T::one(),
        dy,
        d_out as isize,
        1,
        weight,
        d_in as isize,
        1,
        T::zero(),
        &mut dx,
        d_in as isize,
        1,
    );
    dx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Smooth L1 with unit transition: `0.5 d²` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}

pub fn smooth_l1_grad<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

/// Parameters of one LSTM layer: gates ordered input, forget, cell, output.
pub struct LstmWeights<'a, T> {
    /// `(4·hidden, input)`
    pub w_x: &'a [T],
    /// `(4·hidden, hidden)`
    pub w_h: &'a [T],
    /// `(4·hidden)`
    pub b: &'a [T],
    pub input: usize,
    pub hidden: usize,
}

/// Per-step activations kept for backpropagation through time.
pub struct LstmTrace<T> {
    /// `(steps, hidden)`
    pub h: Vec<T>,
    pub c: Vec<T>,
    /// Post-activation gates `(steps, 4·hidden)`.
    pub gates: Vec<T>,
    pub steps: usize,
}

/// Runs an LSTM over `(steps, input)` starting from zero state.
pub fn lstm_forward<T: Real>(x: &[T], steps: usize, p: &LstmWeights<T>) -> LstmTrace<T> {
    let hd = p.hidden;
    let mut z_all = linear(x, steps, p.w_x, p.b, p.input, 4 * hd);
    let mut h = vec![T::zero(); steps * hd];
    let mut c = vec![T::zero(); steps * hd];
    for t in 0..steps {
        let z = &mut z_all[t * 4 * hd..(t + 1) * 4 * hd];
        if t > 0 {
            let h_prev = &h[(t - 1) * hd..t * hd];
            T::gemm(
                1,
                hd,
                4 * hd,
                T::one(),
                h_prev,
                hd as isize,
                1,
                p.w_h,
                1,
                hd as isize,
                T::one(),
                z,
                4 * hd as isize,
                1,
            );
        }
        for j in 0..hd {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[hd + j]);
            let g_g = z[2 * hd + j].tanh();
            let o_g = sigmoid(z[3 * hd + j]);
            z[j] = i_g;
            z[hd + j] = f_g;
            z[2 * hd + j] = g_g;
            z[3 * hd + j] = o_g;
            let c_prev = if t > 0 { c[(t - 1) * hd + j] } else { T::zero() };
            let ct = f_g * c_prev + i_g * g_g;
            c[t * hd + j] = ct;
            h[t * hd + j] = o_g * ct.tanh();
        }
    }
    LstmTrace {
        h,
        c,
        gates: z_all,
        steps,
    }
}

/// Backpropagation through time. `dh` is the loss gradient w.r.t. every
/// step's hidden output `(steps, hidden)`. Accumulates weight gradients and
/// returns the gradient w.r.t. the inputs `(steps, input)`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward<T: Real>(
    x: &[T],
    trace: &LstmTrace<T>,
    dh: &[T],
    p: &LstmWeights<T>,
    d_wx: &mut [T],
    d_wh: &mut [T],
    d_b: &mut [T],
) -> Vec<T> {
    let hd = p.hidden;
    let steps = trace.steps;
    let mut dz_all = vec![T::zero(); steps * 4 * hd];
    let mut dh_next = vec![T::zero(); hd];
    let mut dc_next = vec![T::zero(); hd];
    for t in (0..steps).rev() {
        let g = &trace.gates[t * 4 * hd..(t + 1) * 4 * hd];
        let mut dh_t: Vec<T> = dh[t * hd..(t + 1) * hd].to_vec();
        for j in 0..hd {
            dh_t[j] += dh_next[j];
        }
        let dz = &mut dz_all[t * 4 * hd..(t + 1) * 4 * hd];
        for j in 0..hd {
            let (i_g, f_g, g_g, o_g) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let ct = trace.c[t * hd + j];
            let tc = ct.tanh();
            let c_prev = if t > 0 { trace.c[(t - 1) * hd + j] } else { T::zero() };
            let dc = dh_t[j] * o_g * (T::one() - tc * tc) + dc_next[j];
            let d_o = dh_t[j] * tc;
            let d_i = dc * g_g;
            let d_f = dc * c_prev;
            let d_g = dc * i_g;
            dc_next[j] = dc * f_g;
            dz[j] = d_i * i_g * (T::one() - i_g);
            dz[hd + j] = d_f * f_g * (T::one() - f_g);
            dz[2 * hd + j] = d_g * (T::one() - g_g * g_g);
            dz[3 * hd + j] = d_o * o_g * (T::one() - o_g);
        }
        // dh_{t-1} = W_hᵀ dz_t
        dh_next.iter_mut().for_each(|v| *v = T::zero());
        if t > 0 {
            T::gemm(
                1,
                4 * hd,
                hd,
                T::one(),
                dz,
                4 * hd as isize,
                1,
                p.w_h,
                hd as isize,
                1,
                T::zero(),
                &mut dh_next,
                hd as isize,
                1,
            );
            // dW_h += dz_tᵀ h_{t-1}
            let h_prev = &trace.h[(t - 1) * hd..t * hd];
            T::gemm(
                4 * hd,
                1,
                hd,
                T::one(),
                dz,
                1,
                1,
                h_prev,
                hd as isize,
                1,
                T::one(),
                d_wh,
                hd as isize,
                1,
            );
        }
    }
    linear_backward(&dz_all, x, steps, p.w_x, p.input, 4 * hd, d_wx, d_b)
}

/// Bilinear sample positions and weights for one ROI-align output cell.
#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    wt: [f64; 4],
}

fn bilinear_tap(fy: f64, fx: f64, hf: usize, wf: usize) -> Tap {
    let fy = fy.clamp(0.0, (hf - 1) as f64);
    let fx = fx.clamp(0.0, (wf - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(hf - 1);
    let x1 = (x0 + 1).min(wf - 1);
    let ly = fy - y0 as f64;
    let lx = fx - x0 as f64;
    Tap {
        idx: [y0 * wf + x0, y0 * wf + x1, y1 * wf + x0, y1 * wf + x1],
        wt: [
            (1.0 - ly) * (1.0 - lx),
            (1.0 - ly) * lx,
            ly * (1.0 - lx),
            ly * lx,
        ],
    }
}

/// Sampling plan of a pooled ROI, shared by forward and backward.
pub struct RoiAlignPlan {
    taps: Vec<Tap>,
}

/// ROI align with one bilinear sample at the center of each of the
/// `pool × pool` bins. `roi` is `(x1, y1, x2, y2)` in image pixels.
pub fn roi_align_plan(roi: [f64; 4], stride: f64, hf: usize, wf: usize, pool: usize) -> RoiAlignPlan {
    let [x1, y1, x2, y2] = roi;
    let (fx1, fy1) = (x1 / stride - 0.5, y1 / stride - 0.5);
    let bw = ((x2 - x1) / stride).max(1e-6) / pool as f64;
    let bh = ((y2 - y1) / stride).max(1e-6) / pool as f64;
    let mut taps = Vec::with_capacity(pool * pool);
    for py in 0..pool {
        for px in 0..pool {
            let fy = fy1 + (py as f64 + 0.5) * bh;
            let fx = fx1 + (px as f64 + 0.5) * bw;
            taps.push(bilinear_tap(fy, fx, hf, wf));
        }
    }
    RoiAlignPlan { taps }
}

/// Pool `(c, hf, wf)` features into `(c, pool, pool)`.
pub fn roi_align<T: Real>(features: &[T], channels: usize, hf: usize, wf: usize, plan: &RoiAlignPlan) -> Vec<T> {
    let cells = plan.taps.len();
    let mut out = vec![T::zero(); channels * cells];
    let wts: Vec<[T; 4]> = plan
        .taps
        .iter()
        .map(|t| t.wt.map(T::of))
        .collect();
    for c in 0..channels {
        let f = &features[c * hf * wf..(c + 1) * hf * wf];
        let o = &mut out[c * cells..(c + 1) * cells];
        for (i, tap) in plan.taps.iter().enumerate() {
            let w = &wts[i];
            o[i] = w[0] * f[tap.idx[0]] + w[1] * f[tap.idx[1]] + w[2] * f[tap.idx[2]] + w[3] * f[tap.idx[3]];
        }
    }
    out
}

pub fn roi_align_backward<T: Real>(
    d_out: &[T],
    channels: usize,
    hf: usize,
    wf: usize,
    plan: &RoiAlignPlan,
    d_features: &mut [T],
) {
    let cells = plan.taps.len();
    let wts: Vec<[T; 4]> = plan
        .taps
        .iter()
        .map(|t| t.wt.map(T::of))
        .collect();
    for c in 0..channels {
        let df = &mut d_features[c * hf * wf..(c + 1) * hf * wf];
        let g = &d_out[c * cells..(c + 1) * cells];
        for (i, tap) in plan.taps.iter().enumerate() {
            for q in 0..4 {
                df[tap.idx[q]] += wts[i][q] * g[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference gradient of a scalar function of one buffer.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + eps;
                let up = f(&x);
                x[i] = orig - eps;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num / den.max(1e-12) < 1e-6, "relative error {}", num / den);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape { c_in: 2, c_out: 3, kernel: 3, stride: 2, pad: 1 };
        let (h, w) = (5, 6);
        let x = rand_vec(2 * h * w, &mut rng);
        let wt = rand_vec(3 * s.patch(), &mut rng);
        let b = rand_vec(3, &mut rng);
        let out = conv2d(&x, h, w, &wt, &b, &s);
        assert_eq!((out.h, out.w), (3, 3));
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += wt[co * 18 + ci * 9 + ky * 3 + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - out.out[(co * 3 + oy) * 3 + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { c_in: 2, c_out: 2, kernel: 3, stride: 1, pad: 1 };
        let (h, w) = (4, 4);
        let x = rand_vec(2 * h * w, &mut rng);
        let wt = rand_vec(2 * s.patch(), &mut rng);
        let b = rand_vec(2, &mut rng);
        let probe = rand_vec(2 * h * w, &mut rng);
        let loss = |x: &[f64], wt: &[f64]| -> f64 {
            conv2d(x, h, w, wt, &b, &s).out.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let fwd = conv2d(&x, h, w, &wt, &b, &s);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 2];
        let dx = conv2d_backward(&probe, &fwd.cols, h, w, &wt, &s, &mut dw, &mut db, true).unwrap();
        assert_close(&dx, &numeric_grad(&|x| loss(x, &wt), &x));
        assert_close(&dw, &numeric_grad(&|wt| loss(&x, wt), &wt));
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, din, dout) = (3, 4, 5);
        let x = rand_vec(rows * din, &mut rng);
        let wt = rand_vec(dout * din, &mut rng);
        let b = rand_vec(dout, &mut rng);
        let probe = rand_vec(rows * dout, &mut rng);
        let loss = |x: &[f64], wt: &[f64]| -> f64 {
            linear(x, rows, wt, &b, din, dout).iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; dout];
        let dx = linear_backward(&probe, &x, rows, &wt, din, dout, &mut dw, &mut db);
        assert_close(&dx, &numeric_grad(&|x| loss(x, &wt), &x));
        assert_close(&dw, &numeric_grad(&|wt| loss(&x, wt), &wt));
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (steps, din, hd) = (3, 2, 3);
        let x = rand_vec(steps * din, &mut rng);
        let wx = rand_vec(4 * hd * din, &mut rng);
        let wh = rand_vec(4 * hd * hd, &mut rng);
        let b = rand_vec(4 * hd, &mut rng);
        let probe = rand_vec(steps * hd, &mut rng);
        let loss = |x: &[f64], wx: &[f64], wh: &[f64]| -> f64 {
            let p = LstmWeights { w_x: wx, w_h: wh, b: &b, input: din, hidden: hd };
            lstm_forward(x, steps, &p).h.iter().zip(&probe).map(|(a, q)| a * q).sum()
        };
        let p = LstmWeights { w_x: &wx, w_h: &wh, b: &b, input: din, hidden: hd };
        let tr = lstm_forward(&x, steps, &p);
        let (mut dwx, mut dwh, mut db) = (vec![0.0; wx.len()], vec![0.0; wh.len()], vec![0.0; b.len()]);
        let dx = lstm_backward(&x, &tr, &probe, &p, &mut dwx, &mut dwh, &mut db);
        assert_close(&dx, &numeric_grad(&|x| loss(x, &wx, &wh), &x));
        assert_close(&dwx, &numeric_grad(&|w| loss(&x, w, &wh), &wx));
        assert_close(&dwh, &numeric_grad(&|w| loss(&x, &wx, w), &wh));
    }

    #[test]
    fn roi_align_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, hf, wf) = (2, 5, 6);
        let f = rand_vec(c * hf * wf, &mut rng);
        let plan = roi_align_plan([13.0, 7.5, 61.0, 49.0], 16.0, hf, wf, 7);
        let out = roi_align(&f, c, hf, wf, &plan);
        let probe = rand_vec(out.len(), &mut rng);
        let mut df = vec![0.0; f.len()];
        roi_align_backward(&probe, c, hf, wf, &plan, &mut df);
        // Linear map: <A f, p> = <f, Aᵀ p>.
        let lhs: f64 = out.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.iter().zip(&df).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_spot_values() {
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 0.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > 0.999);
    }
}
