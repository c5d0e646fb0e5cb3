//! Dense row-major tensors and the primitive numeric kernels everything else is
//! built from.
//!
//! Every op is a pure function of its inputs and allocates its output. Outputs
//! are scanned for NaN/Inf and a [`Error::NonFinite`] is returned instead of
//! letting non-finite values travel further.

use std::fmt::{Debug, Display};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// `sqrt(2 / pi)`, used by the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian bytes of the value narrowed to f32 (checkpoint encoding).
    fn to_f32_le(self) -> [u8; 4] {
        (self.as_f64() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        // no short circuit: the fold vectorizes
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

/// Accumulates multiply-accumulate counts for ops that accept it.
///
/// A disabled counter ignores every `add`; numerics never depend on it.
#[derive(Debug, Default)]
pub struct MacCounter {
    enabled: bool,
    macs: AtomicU64,
}

impl MacCounter {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            macs: AtomicU64::new(0),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    #[inline]
    pub fn add(&self, macs: u64) {
        if self.enabled {
            self.macs.fetch_add(macs, Ordering::Relaxed);
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.macs.store(0, Ordering::Relaxed);
    }
}

static NO_COUNT: MacCounter = MacCounter {
    enabled: false,
    macs: AtomicU64::new(0),
};

/// A shared disabled counter for callers that do not instrument.
pub fn no_count() -> &'static MacCounter {
    &NO_COUNT
}

/// `C[m,n] = A[m,k] · B[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_counted(a, b, no_count())
}

pub fn matmul_counted<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape,
            b.shape
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm_into(&a.data, &b.data, &mut out, m, k, n);
    counter.add((m * n * k) as u64);
    Tensor::new([m, n], out)?.checked("matmul")
}

/// Row-major GEMM accumulating over `k` in increasing order for each output.
/// Four rows of `A` share each pass over a row of `B`.
#[inline]
fn gemm_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    let mut c_blocks = c.chunks_exact_mut(4 * n);
    let mut a_blocks = a.chunks_exact(4 * k);
    for (c4, a4) in (&mut c_blocks).zip(&mut a_blocks) {
        let (c0, rest) = c4.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for t in 0..k {
            let (a0, a1, a2, a3) = (a4[t], a4[k + t], a4[2 * k + t], a4[3 * k + t]);
            let b_row = &b[t * n..(t + 1) * n];
            for j in 0..n {
                let bj = b_row[j];
                c0[j] = c0[j] + a0 * bj;
                c1[j] = c1[j] + a1 * bj;
                c2[j] = c2[j] + a2 * bj;
                c3[j] = c3[j] + a3 * bj;
            }
        }
    }
    for (c_row, a_row) in c_blocks
        .into_remainder()
        .chunks_exact_mut(n.max(1))
        .zip(a_blocks.remainder().chunks_exact(k.max(1)))
    {
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_it * b_tj;
            }
        }
    }
}

/// Matrix product over the last two axes with a shared operand allowed on
/// either side.
///
/// * `[.., m, k] · [k, n]`: leading axes of the left operand are flattened.
/// * `[m, k] · [b, k, n]`: the left matrix is applied to every batch entry.
/// * `[b, m, k] · [b, k, n]`: batched.
pub fn batched_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let err = || dim_err!("batched_matmul: cannot multiply {:?} by {:?}", a.shape, b.shape);
    match (a.rank(), b.rank()) {
        (ra, 2) if ra >= 2 => {
            let k = a.shape[ra - 1];
            if k != b.shape[0] {
                return Err(err());
            }
            let m: usize = a.shape[..ra - 1].iter().product();
            let n = b.shape[1];
            let mut out = vec![T::zero(); m * n];
            gemm_into(&a.data, &b.data, &mut out, m, k, n);
            counter.add((m * n * k) as u64);
            let mut shape = a.shape[..ra - 1].to_vec();
            shape.push(n);
            Tensor::new(shape, out)?.checked("batched_matmul")
        }
        (2, 3) | (3, 3) => {
            let (batch, k, n) = (b.shape[0], b.shape[1], b.shape[2]);
            let (m, ka) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
            if ka != k || (a.rank() == 3 && a.shape[0] != batch) {
                return Err(err());
            }
            let shared = a.rank() == 2;
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                let a_mat = if shared {
                    &a.data[..]
                } else {
                    &a.data[bi * m * k..(bi + 1) * m * k]
                };
                gemm_into(
                    a_mat,
                    &b.data[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            counter.add((batch * m * n * k) as u64);
            Tensor::new([batch, m, n], out)?.checked("batched_matmul")
        }
        _ => Err(err()),
    }
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(dim_err!("transpose_last2: rank {r} < 2"));
    }
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let batch: usize = x.shape[..r - 2].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x.data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

/// `a + b` where `b`'s shape is a suffix of `a`'s (b is repeated over the
/// leading axes of `a`).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ra = a.rank();
    let rb = b.rank();
    if rb > ra || a.shape[ra - rb..] != b.shape[..] {
        return Err(dim_err!("add: {:?} does not broadcast onto {:?}", b.shape, a.shape));
    }
    let mut data = a.data.clone();
    if !b.data.is_empty() {
        for chunk in data.chunks_exact_mut(b.len()) {
            for (x, &y) in chunk.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }
    Tensor::new(a.shape.clone(), data)?.checked("add")
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)?.checked("mul")
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    a.map(|v| v * c).checked("scale")
}

/// Mean over one axis, which is removed from the shape.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(dim_err!("mean_axis: axis {axis} out of range for {:?}", x.shape));
    }
    let n = x.shape[axis];
    if n == 0 {
        return Err(dim_err!("mean_axis: empty axis {axis} in {:?}", x.shape));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &x.data[(o * n + a) * inner..(o * n + a + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc = *acc + v;
            }
        }
    }
    let inv = T::one() / T::of(n as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Tensor::new(shape, out)?.checked("mean_axis")
}

/// Normalizes each last-axis slice with population variance, then applies
/// `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape.last().unwrap_or(&0);
    if d == 0 {
        return Err(dim_err!("layer_norm: last axis of {:?} is empty", x.shape));
    }
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(dim_err!(
            "layer_norm: gamma {:?} / beta {:?} must both be [{d}]",
            gamma.shape,
            beta.shape
        ));
    }
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, rstd) = moments(src, eps);
        for (k, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
            *o = (v - mean) * rstd * gamma.data[k] + beta.data[k];
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("layer_norm")
}

/// Mean and `1/sqrt(var + eps)` of one slice.
pub(crate) fn moments<T: Scalar>(slice: &[T], eps: f64) -> (T, T) {
    let n = T::of(slice.len() as f64);
    let mean = slice.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = slice
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, T::one() / (var + T::of(eps)).sqrt())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + tanh(inner))
}

/// `1 − 2/(e^{2z} + 1)`; several times faster than the libm `tanh`.
#[inline]
fn tanh<T: Scalar>(z: T) -> T {
    T::one() - T::of(2.0) / ((z + z).exp() + T::one())
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// GELU, tanh approximation:
/// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(gelu_scalar).checked("gelu")
}

/// Softmax over the last axis, max-shifted.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape.last().unwrap_or(&1);
    let mut out = x.data.clone();
    if n > 0 {
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)?.checked("softmax_rows")
}

/// Output extents of a stride-1 correlation, or an error if either is < 1.
pub fn correlation_extent(
    input: (usize, usize),
    kernel: (usize, usize),
    pad: (usize, usize),
) -> Result<(usize, usize)> {
    let ho = (input.0 + 2 * pad.0 + 1) as isize - kernel.0 as isize;
    let wo = (input.1 + 2 * pad.1 + 1) as isize - kernel.1 as isize;
    if ho < 1 || wo < 1 || kernel.0 == 0 || kernel.1 == 0 {
        return Err(dim_err!(
            "cross_correlate_2d: input {input:?}, kernel {kernel:?}, padding {pad:?} give output {ho}x{wo}"
        ));
    }
    Ok((ho as usize, wo as usize))
}

/// Stride-1 2D cross-correlation of every channel plane with one kernel:
/// `out[c,i,j] = Σ_{u,v} kernel[u,v] · input[c, i+u-pad_h, j+v-pad_w]` with
/// zeros outside the input. The kernel is not flipped.
pub fn cross_correlate_2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor<T>> {
    cross_correlate_2d_counted(input, kernel, pad_h, pad_w, no_count())
}

/// As [`cross_correlate_2d`]; only taps that land inside the input are
/// evaluated and counted, so padding costs nothing.
pub fn cross_correlate_2d_counted<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad_h: usize,
    pad_w: usize,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    if input.rank() != 3 || kernel.rank() != 2 {
        return Err(dim_err!(
            "cross_correlate_2d: expected input [c,H,W] and kernel [Kh,Kw], got {:?} and {:?}",
            input.shape,
            kernel.shape
        ));
    }
    let (c, hi, wi) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw) = (kernel.shape[0], kernel.shape[1]);
    let (ho, wo) = correlation_extent((hi, wi), (kh, kw), (pad_h, pad_w))?;
    let mut taps = 0u64;
    for i in 0..ho {
        let rows = (hi + pad_h - i).min(kh).saturating_sub(pad_h.saturating_sub(i));
        for j in 0..wo {
            let cols = (wi + pad_w - j).min(kw).saturating_sub(pad_w.saturating_sub(j));
            taps += (rows * cols) as u64;
        }
    }
    // Channels-last copy so the innermost loop runs over all planes. Each
    // output still accumulates its taps in (u, v) order, the same token
    // order the matrix product uses.
    let mut x_hwc = vec![T::zero(); c * hi * wi];
    for (ch, plane) in input.data.chunks_exact(hi * wi).enumerate() {
        for (cell, &v) in plane.iter().enumerate() {
            x_hwc[cell * c + ch] = v;
        }
    }
    let mut acc = vec![T::zero(); c];
    let mut out = vec![T::zero(); c * ho * wo];
    for i in 0..ho {
        // valid u: 0 <= i + u - pad_h < hi
        let u_lo = pad_h.saturating_sub(i);
        let u_hi = (hi + pad_h - i).min(kh);
        for j in 0..wo {
            let v_lo = pad_w.saturating_sub(j);
            let v_hi = (wi + pad_w - j).min(kw);
            acc.fill(T::zero());
            for u in u_lo..u_hi {
                let p = i + u - pad_h;
                for v in v_lo..v_hi {
                    let kv = kernel.data[u * kw + v];
                    let q = j + v - pad_w;
                    let xs = &x_hwc[(p * wi + q) * c..(p * wi + q + 1) * c];
                    for (a, &xv) in acc.iter_mut().zip(xs) {
                        *a = *a + kv * xv;
                    }
                }
            }
            for (ch, &a) in acc.iter().enumerate() {
                out[(ch * ho + i) * wo + j] = a;
            }
        }
    }
    counter.add(taps * c as u64);
    Tensor::new([c, ho, wo], out)?.checked("cross_correlate_2d")
}

/// `[b, Gh·Gw, d] -> [b·d, Gh, Gw]`; token `t = i·Gw + j` lands at cell `(i, j)`
/// of plane `b·d + channel`.
pub fn grid_fold<T: Scalar>(x: &Tensor<T>, gh: usize, gw: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape[1] != gh * gw {
        return Err(dim_err!(
            "grid_fold: {:?} cannot be folded onto a {gh}x{gw} grid",
            x.shape
        ));
    }
    let (b, n, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for c in 0..d {
                out[(bi * d + c) * n + t] = x.data[(bi * n + t) * d + c];
            }
        }
    }
    Tensor::new([b * d, gh, gw], out)
}

/// Inverse of [`grid_fold`]: `[b·d, Gh, Gw] -> [b, Gh·Gw, d]`.
pub fn grid_unfold<T: Scalar>(g: &Tensor<T>, b: usize, d: usize) -> Result<Tensor<T>> {
    if g.rank() != 3 || g.shape[0] != b * d {
        return Err(dim_err!(
            "grid_unfold: {:?} has {} planes, expected b·d = {b}·{d}",
            g.shape,
            g.shape.first().copied().unwrap_or(0)
        ));
    }
    let n = g.shape[1] * g.shape[2];
    let mut out = vec![T::zero(); g.len()];
    for bi in 0..b {
        for t in 0..n {
            for c in 0..d {
                out[(bi * n + t) * d + c] = g.data[(bi * d + c) * n + t];
            }
        }
    }
    Tensor::new([b, n, d], out)
}

/// `[b, N, h·e] -> [b·h, N, e]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 || heads == 0 || !x.shape[2].is_multiple_of(heads) {
        return Err(dim_err!("split_heads: {:?} into {heads} heads", x.shape));
    }
    let (b, n, dim) = (x.shape[0], x.shape[1], x.shape[2]);
    let e = dim / heads;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                let src = &x.data[(bi * n + t) * dim + h * e..][..e];
                out[((bi * heads + h) * n + t) * e..][..e].copy_from_slice(src);
            }
        }
    }
    Tensor::new([b * heads, n, e], out)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 || heads == 0 || !x.shape[0].is_multiple_of(heads) {
        return Err(dim_err!("merge_heads: {:?} from {heads} heads", x.shape));
    }
    let (bh, n, e) = (x.shape[0], x.shape[1], x.shape[2]);
    let b = bh / heads;
    let dim = heads * e;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..n {
                let src = &x.data[((bi * heads + h) * n + t) * e..][..e];
                out[(bi * n + t) * dim + h * e..][..e].copy_from_slice(src);
            }
        }
    }
    Tensor::new([b, n, dim], out)
}

/// Normal samples via Box–Muller on the run's [`SeededRng`].
pub fn rand_normal<T: Scalar>(
    rng: &mut SeededRng,
    shape: impl Into<Vec<usize>>,
    mean: f64,
    std: f64,
) -> Result<Tensor<T>> {
    if std.is_nan() || std < 0.0 {
        return Err(Error::InvalidArgument(format!("rand_normal: std {std} < 0")));
    }
    Ok(Tensor::from_fn(shape, |_| T::of(mean + std * rng.normal())))
}

/// Normal samples truncated to `[-2·std, 2·std]` by redrawing.
pub fn trunc_normal<T: Scalar>(
    rng: &mut SeededRng,
    shape: impl Into<Vec<usize>>,
    std: f64,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let z = Tensor::<f64>::zeros([3, 3]);
        let any = Tensor::from_fn([3, 3], |i| i as f64 - 4.0);
        assert_eq!(matmul(&z, &any).unwrap(), z);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_counts_macs_without_changing_bits() {
        let mut rng = SeededRng::new(3);
        let a: Tensor<f32> = rand_normal(&mut rng, [5, 7], 0.0, 1.0).unwrap();
        let b: Tensor<f32> = rand_normal(&mut rng, [7, 3], 0.0, 1.0).unwrap();
        let counter = MacCounter::enabled();
        let counted = matmul_counted(&a, &b, &counter).unwrap();
        assert_eq!(counter.macs(), 5 * 7 * 3);
        assert_eq!(counted, matmul(&a, &b).unwrap());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = t(&[1, 1], &[f64::INFINITY]);
        let b = t(&[1, 1], &[0.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn correlate_examples() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let one = t(&[1, 1], &[1.]);
        assert_eq!(cross_correlate_2d(&x, &one, 0, 0).unwrap(), x);

        let mut delta = Tensor::zeros([3, 3]);
        delta.set(&[1, 1], 1.0);
        assert_eq!(cross_correlate_2d(&x, &delta, 1, 1).unwrap(), x);

        let ones = Tensor::full([3, 3], 1.0);
        assert_eq!(
            cross_correlate_2d(&x, &ones, 1, 1).unwrap().data(),
            &[10., 10., 10., 10.]
        );
    }

    #[test]
    fn correlate_is_not_flipped() {
        // kernel with a 1 at (0, 0) picks the up-left neighbour
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let mut k = Tensor::zeros([3, 3]);
        k.set(&[0, 0], 1.0);
        let out = cross_correlate_2d(&x, &k, 1, 1).unwrap();
        assert_eq!(out.data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn correlate_rejects_empty_output() {
        let x = Tensor::<f32>::zeros([1, 2, 2]);
        let k = Tensor::zeros([3, 3]);
        assert!(matches!(
            cross_correlate_2d(&x, &k, 0, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fold_examples() {
        let x = t(&[1, 4, 1], &[1., 2., 3., 4.]);
        let g = grid_fold(&x, 2, 2).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2]);
        assert_eq!(g.data(), &[1., 2., 3., 4.]);
        assert_eq!(grid_unfold(&g, 1, 1).unwrap(), x);

        let x = Tensor::<f32>::zeros([2, 4, 3]);
        assert_eq!(grid_fold(&x, 2, 2).unwrap().shape(), &[6, 2, 2]);
        assert!(grid_fold(&x, 3, 2).is_err());
        assert!(grid_unfold(&grid_fold(&x, 2, 2).unwrap(), 2, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full([4], 1.0);
        let b = Tensor::zeros([4]);
        let c = Tensor::full([2, 4], 3.5);
        assert!(layer_norm(&c, &g, &b, LN_EPS).unwrap().data().iter().all(|&v| v == 0.0));

        let beta = Tensor::full([4], 2.5);
        let x = Tensor::from_fn([3, 4], |i| (i * i) as f64);
        let out = layer_norm(&x, &Tensor::zeros([4]), &beta, LN_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));

        let mut rng = SeededRng::new(11);
        let x: Tensor<f32> = rand_normal(&mut rng, [8, 64], 1.0, 3.0).unwrap();
        let out = layer_norm(&x, &Tensor::full([64], 1.0), &Tensor::zeros([64]), LN_EPS).unwrap();
        for row in out.data().chunks(64) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }

        let empty = Tensor::<f32>::zeros([2, 0]);
        assert!(layer_norm(&empty, &Tensor::zeros([0]), &Tensor::zeros([0]), LN_EPS).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[2], &[0., 0.])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[2], &[1000., 0.])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax_rows(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(20.0f64) - 20.0).abs() < 1e-9);
        assert!(gelu_scalar(-20.0f64).abs() < 1e-9);
        let x = 1.0f64;
        let reference =
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu_scalar(1.0f32) as f64 - reference).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rand_normal_examples() {
        let mut rng = SeededRng::new(1);
        let c: Tensor<f64> = rand_normal(&mut rng, [10], 2.5, 0.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 2.5));

        let a: Tensor<f32> = rand_normal(&mut SeededRng::new(9), [64], 0.0, 1.0).unwrap();
        let b: Tensor<f32> = rand_normal(&mut SeededRng::new(9), [64], 0.0, 1.0).unwrap();
        assert_eq!(a, b);

        let s: Tensor<f64> = rand_normal(&mut SeededRng::new(2), [100_000], 0.0, 1.0).unwrap();
        let n = s.len() as f64;
        let mean = s.sum() / n;
        let sd = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");

        assert!(rand_normal::<f32>(&mut rng, [1], 0.0, -1.0).is_err());
    }

    #[test]
    fn heads_round_trip() {
        let x = Tensor::<f32>::from_fn([2, 3, 8], |i| i as f32);
        let s = split_heads(&x, 4).unwrap();
        assert_eq!(s.shape(), &[8, 3, 2]);
        assert_eq!(s.at(&[1, 0, 1]), x.at(&[0, 0, 3]));
        assert_eq!(merge_heads(&s, 4).unwrap(), x);
    }

    #[test]
    fn add_broadcasts_over_leading_axes() {
        let a = Tensor::<f64>::zeros([2, 2, 3]);
        let b = t(&[3], &[1., 2., 3.]);
        let out = add(&a, &b).unwrap();
        assert_eq!(&out.data()[3..6], &[1., 2., 3.]);
        assert!(add(&a, &t(&[2], &[1., 2.])).is_err());
    }
}
