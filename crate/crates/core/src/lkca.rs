//! Large-kernel convolutional attention.
//!
//! One learnable `(2·Gh−1) × (2·Gw−1)` kernel replaces the attention score
//! matrix of a token mixer on a `Gh × Gw` token grid. The same linear map can
//! be evaluated three ways:
//!
//! * **attention view**: unroll the kernel into an `N × N` score matrix and
//!   multiply it into the projected values,
//! * **convolution view**: fold the values onto the grid and cross-correlate
//!   each channel plane with the kernel under `(Gh−1, Gw−1)` zero padding,
//! * **spectral view** (feature `spectral`): the same correlation through a
//!   zero-padded 2D FFT.
//!
//! Row `(i, j)` of the score matrix reads the kernel window whose top-left
//! corner is `(Gh−1−i, Gw−1−j)`, so
//! `scores[i·Gw+j, p·Gw+q] = kernel[Gh−1−i+p, Gw−1−j+q]`. That is exactly the
//! tap the padded correlation applies to input cell `(p, q)` when producing
//! output cell `(i, j)`, which is why the views agree.
//!
//! There is no softmax, scaling, head split or output projection: the raw
//! shared weights are applied to the values.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{
    self, batched_matmul, cross_correlate_2d_counted, grid_fold, grid_unfold, no_count,
    MacCounter, Scalar, Tensor,
};

/// Which realization of the layer's linear map to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Attention,
    Convolution,
    Spectral,
}

impl View {
    pub const ALL: [View; 3] = [View::Attention, View::Convolution, View::Spectral];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Attention => "attention",
            View::Convolution => "convolution",
            View::Spectral => "spectral",
        }
    }

    /// Whether this build can evaluate the view.
    pub fn is_available(self) -> bool {
        match self {
            View::Spectral => cfg!(feature = "spectral"),
            _ => true,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "attn" => Ok(View::Attention),
            "convolution" | "conv" => Ok(View::Convolution),
            "spectral" | "fft" => Ok(View::Spectral),
            other => Err(Error::InvalidArgument(format!(
                "unknown view {other:?} (expected attention, convolution or spectral)"
            ))),
        }
    }
}

/// Initial value of the shared kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelInit {
    Zeros,
    TruncNormal,
}

impl FromStr for KernelInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(KernelInit::Zeros),
            "trunc_normal" => Ok(KernelInit::TruncNormal),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel_init {other:?} (expected zeros or trunc_normal)"
            ))),
        }
    }
}

impl fmt::Display for KernelInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelInit::Zeros => "zeros",
            KernelInit::TruncNormal => "trunc_normal",
        })
    }
}

/// The shared `(2·Gh−1) × (2·Gw−1)` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LkcaKernel<T = f32> {
    weights: Tensor<T>,
    grid_h: usize,
    grid_w: usize,
}

/// Kernel extents for a `gh × gw` token grid.
pub fn kernel_extent(gh: usize, gw: usize) -> (usize, usize) {
    (2 * gh - 1, 2 * gw - 1)
}

impl<T: Scalar> LkcaKernel<T> {
    pub fn new(grid_h: usize, grid_w: usize, weights: Tensor<T>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(dim_err!("LKCA grid must be at least 1x1, got {grid_h}x{grid_w}"));
        }
        let (kh, kw) = kernel_extent(grid_h, grid_w);
        if weights.shape() != [kh, kw] {
            return Err(dim_err!(
                "LKCA kernel for a {grid_h}x{grid_w} grid must be [{kh}, {kw}], got {:?}",
                weights.shape()
            ));
        }
        Ok(Self {
            weights,
            grid_h,
            grid_w,
        })
    }

    pub fn zeros(grid_h: usize, grid_w: usize) -> Result<Self> {
        let (kh, kw) = kernel_extent(grid_h.max(1), grid_w.max(1));
        Self::new(grid_h, grid_w, Tensor::zeros([kh, kw]))
    }

    /// Single 1 at `(Gh−1, Gw−1)`; unrolls to the identity.
    pub fn centered_delta(grid_h: usize, grid_w: usize) -> Result<Self> {
        let mut k = Self::zeros(grid_h, grid_w)?;
        k.weights.set(&[grid_h - 1, grid_w - 1], T::one());
        Ok(k)
    }

    pub fn init(grid_h: usize, grid_w: usize, init: KernelInit, rng: &mut SeededRng) -> Result<Self> {
        match init {
            KernelInit::Zeros => Self::zeros(grid_h, grid_w),
            KernelInit::TruncNormal => {
                let (kh, kw) = kernel_extent(grid_h.max(1), grid_w.max(1));
                Self::new(grid_h, grid_w, tensor::trunc_normal(rng, [kh, kw], 0.02))
            }
        }
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Per-token affine map `V = x·W + b` producing the values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueProjection<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ValueProjection<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let d = weight.shape().first().copied().unwrap_or(0);
        if weight.shape() != [d, d] || bias.shape() != [d] {
            return Err(dim_err!(
                "value projection needs a square weight and matching bias, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::eye(dim),
            bias: Tensor::zeros([dim]),
        }
    }

    /// trunc-normal(0, 0.02) weight, zero bias.
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: tensor::trunc_normal(rng, [dim, dim], 0.02),
            bias: Tensor::zeros([dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, x: &Tensor<T>, counter: &MacCounter) -> Result<Tensor<T>> {
        let v = batched_matmul(x, &self.weight, counter)?;
        tensor::add(&v, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LkcaLayer<T = f32> {
    pub kernel: LkcaKernel<T>,
    pub value: ValueProjection<T>,
    pub view: View,
}

impl<T: Scalar> LkcaLayer<T> {
    pub fn new(kernel: LkcaKernel<T>, value: ValueProjection<T>, view: View) -> Self {
        Self {
            kernel,
            value,
            view,
        }
    }

    pub fn init(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        kernel_init: KernelInit,
        view: View,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let kernel = LkcaKernel::init(grid_h, grid_w, kernel_init, rng)?;
        Ok(Self::new(kernel, ValueProjection::init(dim, rng), view))
    }

    pub fn dim(&self) -> usize {
        self.value.dim()
    }

    pub fn with_view(mut self, view: View) -> Self {
        self.view = view;
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_counted(x, no_count())
    }

    pub fn forward_counted(&self, x: &Tensor<T>, counter: &MacCounter) -> Result<Tensor<T>> {
        match self.view {
            View::Attention => forward_attention_view(x, self, counter),
            View::Convolution => forward_conv_view(x, self, counter),
            View::Spectral => forward_spectral_view(x, self, counter),
        }
    }

    /// Stored learnable tensors, by name.
    pub fn parameters(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("kernel", self.kernel.weights()),
            ("value.weight", &self.value.weight),
            ("value.bias", &self.value.bias),
        ]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (gh, gw) = self.kernel.grid();
        let d = self.dim();
        if x.rank() != 3 || x.shape()[1] != gh * gw || x.shape()[2] != d {
            return Err(dim_err!(
                "LKCA layer on a {gh}x{gw} grid with dim {d} expects [b, {}, {d}], got {:?}",
                gh * gw,
                x.shape()
            ));
        }
        Ok((x.shape()[0], gh * gw, d))
    }
}

/// The unrolled `N × N` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T = f32> {
    pub scores: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Slides a `Gh × Gw` window over the kernel: token `(i, j)` takes the window
/// with top-left corner `(Gh−1−i, Gw−1−j)`, flattened row-major.
pub fn unroll_kernel_to_attention<T: Scalar>(k: &LkcaKernel<T>) -> AttentionMatrix<T> {
    let (gh, gw) = k.grid();
    let n = gh * gw;
    let kw = 2 * gw - 1;
    let w = k.weights().data();
    let mut scores = Vec::with_capacity(n * n);
    for i in 0..gh {
        for j in 0..gw {
            let (r0, c0) = (gh - 1 - i, gw - 1 - j);
            for p in 0..gh {
                scores.extend_from_slice(&w[(r0 + p) * kw + c0..][..gw]);
            }
        }
    }
    AttentionMatrix {
        scores: Tensor::new([n, n], scores).expect("unrolled scores are N x N"),
        grid_h: gh,
        grid_w: gw,
    }
}

/// `out = S(kernel) · (x·W + b)` with the score matrix materialized.
pub fn forward_attention_view<T: Scalar>(
    x: &Tensor<T>,
    layer: &LkcaLayer<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    layer.check_input(x)?;
    let v = layer.value.apply(x, counter)?;
    let scores = unroll_kernel_to_attention(&layer.kernel).scores;
    batched_matmul(&scores, &v, counter)
}

/// Fold the values onto the grid and correlate every channel plane with the
/// kernel under `(Gh−1, Gw−1)` zero padding; the output grid keeps its size.
pub fn forward_conv_view<T: Scalar>(
    x: &Tensor<T>,
    layer: &LkcaLayer<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (b, _, d) = layer.check_input(x)?;
    let (gh, gw) = layer.kernel.grid();
    let v = layer.value.apply(x, counter)?;
    let planes = grid_fold(&v, gh, gw)?;
    let out = cross_correlate_2d_counted(&planes, layer.kernel.weights(), gh - 1, gw - 1, counter)?;
    grid_unfold(&out, b, d)
}

/// The convolution view evaluated through a 2D FFT of size at least
/// `(3Gh−2) × (3Gw−2)`, rounded up to powers of two. Only the value
/// projection is counted by `counter`.
#[cfg(feature = "spectral")]
pub fn forward_spectral_view<T: Scalar>(
    x: &Tensor<T>,
    layer: &LkcaLayer<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    let (b, _, d) = layer.check_input(x)?;
    let (gh, gw) = layer.kernel.grid();
    let v = layer.value.apply(x, counter)?;
    let planes = grid_fold(&v, gh, gw)?;
    let out = spectral::correlate_full_padding(&planes, layer.kernel.weights(), gh, gw);
    grid_unfold(&out, b, d)?.checked("forward_spectral_view")
}

#[cfg(not(feature = "spectral"))]
pub fn forward_spectral_view<T: Scalar>(
    _x: &Tensor<T>,
    _layer: &LkcaLayer<T>,
    _counter: &MacCounter,
) -> Result<Tensor<T>> {
    Err(Error::InvalidArgument(
        "spectral view is not available in this build (enable feature `spectral`)".into(),
    ))
}

#[cfg(feature = "spectral")]
mod spectral {
    use rustfft::num_complex::Complex64;
    use rustfft::{Fft, FftPlanner};
    use std::sync::Arc;

    use crate::tensor::{Scalar, Tensor};

    struct Plan {
        rows: usize,
        cols: usize,
        row_fwd: Arc<dyn Fft<f64>>,
        col_fwd: Arc<dyn Fft<f64>>,
        row_inv: Arc<dyn Fft<f64>>,
        col_inv: Arc<dyn Fft<f64>>,
    }

    impl Plan {
        fn new(rows: usize, cols: usize) -> Self {
            let mut planner = FftPlanner::new();
            Self {
                rows,
                cols,
                row_fwd: planner.plan_fft_forward(cols),
                col_fwd: planner.plan_fft_forward(rows),
                row_inv: planner.plan_fft_inverse(cols),
                col_inv: planner.plan_fft_inverse(rows),
            }
        }

        fn transform(&self, buf: &mut [Complex64], inverse: bool) {
            let (row, col) = if inverse {
                (&self.row_inv, &self.col_inv)
            } else {
                (&self.row_fwd, &self.col_fwd)
            };
            row.process(buf);
            let mut column = vec![Complex64::default(); self.rows];
            for c in 0..self.cols {
                for (r, slot) in column.iter_mut().enumerate() {
                    *slot = buf[r * self.cols + c];
                }
                col.process(&mut column);
                for (r, slot) in column.iter().enumerate() {
                    buf[r * self.cols + c] = *slot;
                }
            }
        }
    }

    /// Per-plane correlation with padding `(gh−1, gw−1)` and a
    /// `(2gh−1) × (2gw−1)` kernel, evaluated as a linear convolution with the
    /// flipped kernel and cropped at offset `(gh−1, gw−1)`.
    pub(super) fn correlate_full_padding<T: Scalar>(
        planes: &Tensor<T>,
        kernel: &Tensor<T>,
        gh: usize,
        gw: usize,
    ) -> Tensor<T> {
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        let rows = (3 * gh - 2).next_power_of_two();
        let cols = (3 * gw - 2).next_power_of_two();
        let plan = Plan::new(rows, cols);

        let mut k_hat = vec![Complex64::default(); rows * cols];
        for a in 0..kh {
            for b in 0..kw {
                let w = kernel.data()[(kh - 1 - a) * kw + (kw - 1 - b)].as_f64();
                k_hat[a * cols + b] = Complex64::new(w, 0.0);
            }
        }
        plan.transform(&mut k_hat, false);

        let count = planes.shape()[0];
        let n = gh * gw;
        let norm = 1.0 / (rows * cols) as f64;
        let mut out = Vec::with_capacity(count * n);
        let mut buf = vec![Complex64::default(); rows * cols];
        for plane in planes.data().chunks_exact(n) {
            buf.iter_mut().for_each(|z| *z = Complex64::default());
            for p in 0..gh {
                for q in 0..gw {
                    buf[p * cols + q] = Complex64::new(plane[p * gw + q].as_f64(), 0.0);
                }
            }
            plan.transform(&mut buf, false);
            for (z, k) in buf.iter_mut().zip(&k_hat) {
                *z *= k;
            }
            plan.transform(&mut buf, true);
            for i in 0..gh {
                for j in 0..gw {
                    out.push(T::of(buf[(i + gh - 1) * cols + (j + gw - 1)].re * norm));
                }
            }
        }
        Tensor::new([count, gh, gw], out).expect("spectral output shape")
    }
}

/// Gradients of [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LkcaGrads<T = f32> {
    pub x: Tensor<T>,
    pub kernel: Tensor<T>,
    pub value_weight: Tensor<T>,
    pub value_bias: Tensor<T>,
}

/// Closed-form adjoint of `out = S(K)·(x·W + b)`.
///
/// With `G = Sᵀ·grad_out`: `grad_x = G·Wᵀ`, `grad_W = Σ xᵀ·G`,
/// `grad_b = Σ G`. The kernel gradient is, per channel plane, the
/// correlation of the padded value plane with the `grad_out` plane, summed
/// over planes.
pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &LkcaLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<LkcaGrads<T>> {
    let (b, n, d) = layer.check_input(x)?;
    if grad_out.shape() != x.shape() {
        return Err(dim_err!(
            "lkca backward: grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        ));
    }
    let (gh, gw) = layer.kernel.grid();
    let v = layer.value.apply(x, no_count())?;

    let scores = unroll_kernel_to_attention(&layer.kernel).scores;
    let scores_t = tensor::transpose_last2(&scores)?;
    let g = batched_matmul(&scores_t, grad_out, no_count())?;

    let w_t = tensor::transpose_last2(&layer.value.weight)?;
    let grad_x = batched_matmul(&g, &w_t, no_count())?;

    let x_flat_t = tensor::transpose_last2(&x.reshape([b * n, d])?)?;
    let grad_w = tensor::matmul(&x_flat_t, &g.reshape([b * n, d])?)?;

    let mut grad_b = vec![T::zero(); d];
    for row in g.data().chunks_exact(d) {
        for (acc, &v) in grad_b.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }

    let v_planes = grid_fold(&v, gh, gw)?;
    let g_planes = grid_fold(grad_out, gh, gw)?;
    let (kh, kw) = kernel_extent(gh, gw);
    let mut grad_k = Tensor::zeros([kh, kw]);
    for (vp, gp) in v_planes
        .data()
        .chunks_exact(n)
        .zip(g_planes.data().chunks_exact(n))
    {
        let vp = Tensor::new([1, gh, gw], vp.to_vec())?;
        let gp = Tensor::new([gh, gw], gp.to_vec())?;
        let part = tensor::cross_correlate_2d(&vp, &gp, gh - 1, gw - 1)?;
        for (acc, &p) in grad_k.data_mut().iter_mut().zip(part.data()) {
            *acc = *acc + p;
        }
    }

    Ok(LkcaGrads {
        x: grad_x,
        kernel: grad_k,
        value_weight: grad_w,
        value_bias: Tensor::new([d], grad_b)?,
    })
}

/// `d² + d + (2Gh−1)(2Gw−1)`.
pub fn count_params<T: Scalar>(layer: &LkcaLayer<T>) -> u64 {
    let d = layer.dim() as u64;
    let (kh, kw) = kernel_extent(layer.kernel.grid_h, layer.kernel.grid_w);
    d * d + d + (kh * kw) as u64
}

/// FLOPs of one forward pass at 2 FLOPs per MAC:
/// `2·b·N·d²` for the value projection plus `2·b·N²·d` for applying the
/// scores. Unrolling, padding and layout changes are free. The count is the
/// same for the attention and convolution views.
pub fn count_flops<T: Scalar>(layer: &LkcaLayer<T>, batch: usize) -> u64 {
    let b = batch as u64;
    let n = layer.kernel.tokens() as u64;
    let d = layer.dim() as u64;
    2 * b * n * d * d + 2 * b * n * n * d
}

/// Rough bytes of the intermediates one forward pass holds, for reporting.
pub fn working_set_bytes(view: View, batch: usize, gh: usize, gw: usize, dim: usize, elem: usize) -> u64 {
    let n = gh * gw;
    let acts = 3 * batch * n * dim; // input, values, output
    let extra = match view {
        View::Attention => n * n,
        View::Convolution => 2 * batch * n * dim, // folded in/out planes
        View::Spectral => {
            let f = (3 * gh - 2).next_power_of_two() * (3 * gw - 2).next_power_of_two();
            2 * batch * n * dim + 4 * f // two complex buffers, counted as 2 reals each
        }
    };
    ((acts + extra) * elem) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel_3x3() -> LkcaKernel<f64> {
        let w = Tensor::from_fn([3, 3], |i| (i + 1) as f64);
        LkcaKernel::new(2, 2, w).unwrap()
    }

    #[test]
    fn unroll_row_for_origin_token() {
        // token (0,0): window at (1,1) of K, flattened row-major
        let k = kernel_3x3();
        let s = unroll_kernel_to_attention(&k).scores;
        let w = k.weights();
        assert_eq!(
            &s.data()[..4],
            &[w.at(&[1, 1]), w.at(&[1, 2]), w.at(&[2, 1]), w.at(&[2, 2])]
        );
    }

    #[test]
    fn unroll_zero_and_delta() {
        let z = unroll_kernel_to_attention(&LkcaKernel::<f32>::zeros(3, 4).unwrap());
        assert!(z.scores.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.scores.shape(), &[12, 12]);
        let id = unroll_kernel_to_attention(&LkcaKernel::<f32>::centered_delta(3, 4).unwrap());
        assert_eq!(id.scores, Tensor::eye(12));
    }

    #[test]
    fn kernel_shape_is_checked() {
        assert!(LkcaKernel::<f32>::new(2, 2, Tensor::zeros([3, 4])).is_err());
        assert!(LkcaKernel::<f32>::zeros(0, 2).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = SeededRng::new(1);
        let x: Tensor<f32> = tensor::rand_normal(&mut rng, [2, 6, 3], 0.0, 1.0).unwrap();
        for view in View::ALL.into_iter().filter(|v| v.is_available()) {
            let layer = LkcaLayer::new(
                LkcaKernel::centered_delta(2, 3).unwrap(),
                ValueProjection::identity(3),
                view,
            );
            let out = layer.forward(&x).unwrap();
            if view == View::Spectral {
                assert!(out.max_abs_diff(&x).unwrap() < 1e-5);
            } else {
                assert_eq!(out, x, "{view}");
            }
        }
    }

    #[test]
    fn single_token_scales_values() {
        let w = Tensor::from_f64([1, 1], &[2.5]).unwrap();
        let layer = LkcaLayer::new(
            LkcaKernel::<f64>::new(1, 1, w).unwrap(),
            ValueProjection::identity(2),
            View::Convolution,
        );
        let x = Tensor::from_f64([1, 1, 2], &[1.0, -3.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().data(), &[2.5, -7.5]);
    }

    #[test]
    fn grid_mismatch_is_a_dimension_error() {
        let layer = LkcaLayer::<f32>::new(
            LkcaKernel::zeros(2, 2).unwrap(),
            ValueProjection::identity(3),
            View::Attention,
        );
        let x = Tensor::zeros([1, 5, 3]);
        for view in [View::Attention, View::Convolution] {
            let l = layer.clone().with_view(view);
            assert!(matches!(l.forward(&x), Err(Error::Dimension(_))));
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = SeededRng::new(2);
        let layer =
            LkcaLayer::<f64>::init(2, 3, 4, KernelInit::TruncNormal, View::Attention, &mut rng).unwrap();
        let x = tensor::rand_normal(&mut rng, [2, 6, 4], 0.0, 1.0).unwrap();
        let g = backward(&x, &layer, &Tensor::zeros([2, 6, 4])).unwrap();
        for t in [&g.x, &g.kernel, &g.value_weight, &g.value_bias] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn counts() {
        let mut rng = SeededRng::new(0);
        let l = LkcaLayer::<f32>::init(8, 8, 64, KernelInit::Zeros, View::Attention, &mut rng).unwrap();
        assert_eq!(count_params(&l), 4385);
        assert_eq!(count_flops(&l, 1), 1_048_576);
        assert_eq!(count_flops(&l, 0), 0);
        let l = LkcaLayer::<f32>::init(1, 1, 1, KernelInit::Zeros, View::Attention, &mut rng).unwrap();
        assert_eq!(count_params(&l), 3);
    }

    #[test]
    fn view_names_round_trip() {
        for v in View::ALL {
            assert_eq!(v.as_str().parse::<View>().unwrap(), v);
        }
        assert!("dense".parse::<View>().is_err());
    }
}
