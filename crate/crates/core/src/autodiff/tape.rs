use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::lkca::{kernel_extent, unroll_kernel_to_attention, LkcaKernel};
use crate::tensor::{self, no_count, Scalar, Tensor};
use crate::train::loss;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name, in registration order.
pub type GradientMap<T> = IndexMap<String, Tensor<T>>;

/// Forward function of an op recorded through [`Tape::opaque`].
pub type OpaqueFn<T> = Arc<dyn Fn(&[&Tensor<T>]) -> Result<Tensor<T>> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    Transpose,
    Reshape,
    LayerNorm,
    Gelu,
    Softmax,
    Correlate,
    GridFold,
    GridUnfold,
    Unroll,
    Mean,
    Sum,
    SplitHeads,
    MergeHeads,
    CrossEntropy,
    Opaque,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax_rows",
            OpKind::Correlate => "cross_correlate_2d",
            OpKind::GridFold => "grid_fold",
            OpKind::GridUnfold => "grid_unfold",
            OpKind::Unroll => "unroll_kernel",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Opaque => "opaque",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        const ALL: [OpKind; 21] = [
            OpKind::Input,
            OpKind::Param,
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Mul,
            OpKind::Scale,
            OpKind::Transpose,
            OpKind::Reshape,
            OpKind::LayerNorm,
            OpKind::Gelu,
            OpKind::Softmax,
            OpKind::Correlate,
            OpKind::GridFold,
            OpKind::GridUnfold,
            OpKind::Unroll,
            OpKind::Mean,
            OpKind::Sum,
            OpKind::SplitHeads,
            OpKind::MergeHeads,
            OpKind::CrossEntropy,
            OpKind::Opaque,
        ];
        ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Softmax(Var),
    Correlate {
        input: Var,
        kernel: Var,
        pad: (usize, usize),
    },
    GridFold {
        x: Var,
        grid: (usize, usize),
    },
    GridUnfold {
        x: Var,
        batch: usize,
        dim: usize,
    },
    Unroll {
        kernel: Var,
        grid: (usize, usize),
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        smoothing: f64,
    },
    Opaque {
        name: String,
        inputs: Vec<Var>,
        forward: OpaqueFn<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Correlate { .. } => OpKind::Correlate,
            Op::GridFold { .. } => OpKind::GridFold,
            Op::GridUnfold { .. } => OpKind::GridUnfold,
            Op::Unroll { .. } => OpKind::Unroll,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Opaque { .. } => OpKind::Opaque,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::GridFold { x, .. }
            | Op::GridUnfold { x, .. }
            | Op::Mean { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. } => vec![*x],
            Op::Unroll { kernel, .. } => vec![*kernel],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Correlate { input, kernel, .. } => vec![*input, *kernel],
            Op::Opaque { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Ordered record of primitive applications for reverse-mode
/// differentiation.
///
/// Values are computed eagerly when an op is recorded, and every op only
/// refers to earlier entries, so the record is always in topological order.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    fault: Option<(OpKind, f64)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Operands the op at `v` was recorded with.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Scales every input adjoint produced by ops of `kind` by `factor`.
    /// Only for negative-control tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name:?} registered twice on tape"
            )));
        }
        self.nodes.push(Node {
            op: Op::Param,
            value,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name, v);
        Ok(v)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product with the operand conventions of
    /// [`tensor::batched_matmul`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a + b` with `b` broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.nodes.push(Node {
            op: Op::Reshape(x),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn correlate(&mut self, input: Var, kernel: Var, pad: (usize, usize)) -> Result<Var> {
        self.push(Op::Correlate { input, kernel, pad })
    }

    pub fn grid_fold(&mut self, x: Var, gh: usize, gw: usize) -> Result<Var> {
        self.push(Op::GridFold { x, grid: (gh, gw) })
    }

    pub fn grid_unfold(&mut self, x: Var, batch: usize, dim: usize) -> Result<Var> {
        self.push(Op::GridUnfold { x, batch, dim })
    }

    /// The LKCA kernel unrolled into its `N × N` score matrix.
    pub fn unroll(&mut self, kernel: Var, gh: usize, gw: usize) -> Result<Var> {
        self.push(Op::Unroll {
            kernel,
            grid: (gh, gw),
        })
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Mean { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::SplitHeads { x, heads })
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::MergeHeads { x, heads })
    }

    /// Mean label-smoothed cross-entropy of `logits [b, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            labels: labels.into(),
            smoothing,
        })
    }

    /// Records a forward-only computation. Gradients cannot flow through it.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], forward: OpaqueFn<T>) -> Result<Var> {
        self.push(Op::Opaque {
            name: name.to_string(),
            inputs: inputs.to_vec(),
            forward,
        })
    }

    /// Re-evaluates every recorded op from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Param => node.value.clone(),
                Op::Reshape(x) => values[x.0].reshape(node.value.shape().to_vec())?,
                op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.adjoint(&node.op, &node.value, &g)?;
            grads[idx] = Some(g);
            let factor = match self.fault {
                Some((kind, f)) if kind == node.op.kind() => Some(T::of(f)),
                _ => None,
            };
            for (var, mut contrib) in contributions {
                if let Some(f) = factor {
                    contrib.data_mut().iter_mut().for_each(|v| *v = *v * f);
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn adjoint(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                matmul_adjoint(av, bv, g)?
                    .into_iter()
                    .zip([*a, *b])
                    .map(|(t, v)| (v, t))
                    .collect()
            }
            Op::Add(a, b) => {
                let inner = val(*b).len().max(1);
                let mut gb = vec![T::zero(); val(*b).len()];
                for (i, &x) in g.data().iter().enumerate() {
                    gb[i % inner] = gb[i % inner] + x;
                }
                vec![
                    (*a, g.clone()),
                    (*b, Tensor::new(val(*b).shape().to_vec(), gb)?),
                ]
            }
            Op::Mul(a, b) => vec![
                (*a, tensor::mul(g, val(*b))?),
                (*b, tensor::mul(g, val(*a))?),
            ],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * T::of(*c)))],
            Op::Transpose(x) => vec![(*x, tensor::transpose_last2(g)?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = layer_norm_adjoint(val(*x), val(*gamma), g, *eps)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Gelu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| gv * tensor::gelu_grad_scalar(xv))
                    .collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); out.len()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks_exact(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot = y.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for k in 0..n {
                        dst[k] = y[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::Correlate { input, kernel, pad } => {
                let (gi, gk) = correlate_adjoint(val(*input), val(*kernel), *pad, g);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::GridFold { x, .. } => {
                let s = val(*x).shape();
                vec![(*x, tensor::grid_unfold(g, s[0], s[2])?)]
            }
            Op::GridUnfold { x, .. } => {
                let s = val(*x).shape();
                vec![(*x, tensor::grid_fold(g, s[1], s[2])?)]
            }
            Op::Unroll { kernel, grid } => vec![(*kernel, unroll_adjoint(*grid, g))],
            Op::Mean { x, axis } => {
                let s = val(*x).shape();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let inv = T::one() / T::of(n as f64);
                let gx = Tensor::from_fn(s.to_vec(), |i| {
                    let outer = i / (n * inner);
                    let rest = i % inner;
                    g.data()[outer * inner + rest] * inv
                });
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))],
            Op::SplitHeads { x, heads } => vec![(*x, tensor::merge_heads(g, *heads)?)],
            Op::MergeHeads { x, heads } => vec![(*x, tensor::split_heads(g, *heads)?)],
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
            } => {
                let d = loss::cross_entropy_grad(val(*logits), labels, *smoothing)?;
                vec![(*logits, d.map(|v| v * g.data()[0]))]
            }
            Op::Opaque { name, .. } => return Err(Error::Unsupported(name.clone())),
        })
    }
}

fn eval<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    match op {
        Op::Input | Op::Param => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => tensor::batched_matmul(val(*a), val(*b), no_count()),
        Op::Add(a, b) => tensor::add(val(*a), val(*b)),
        Op::Mul(a, b) => tensor::mul(val(*a), val(*b)),
        Op::Scale(x, c) => tensor::scale(val(*x), T::of(*c)),
        Op::Transpose(x) => tensor::transpose_last2(val(*x)),
        Op::Reshape(_) => unreachable!("reshape is recorded with its target shape"),
        Op::LayerNorm { x, gamma, beta, eps } => tensor::layer_norm(val(*x), val(*gamma), val(*beta), *eps),
        Op::Gelu(x) => tensor::gelu(val(*x)),
        Op::Softmax(x) => tensor::softmax_rows(val(*x)),
        Op::Correlate { input, kernel, pad } => {
            tensor::cross_correlate_2d(val(*input), val(*kernel), pad.0, pad.1)
        }
        Op::GridFold { x, grid } => tensor::grid_fold(val(*x), grid.0, grid.1),
        Op::GridUnfold { x, batch, dim } => tensor::grid_unfold(val(*x), *batch, *dim),
        Op::Unroll { kernel, grid } => {
            let k = LkcaKernel::new(grid.0, grid.1, val(*kernel).clone())?;
            Ok(unroll_kernel_to_attention(&k).scores)
        }
        Op::Mean { x, axis } => tensor::mean_axis(val(*x), *axis),
        Op::Sum(x) => Ok(Tensor::scalar(val(*x).sum())),
        Op::SplitHeads { x, heads } => tensor::split_heads(val(*x), *heads),
        Op::MergeHeads { x, heads } => tensor::merge_heads(val(*x), *heads),
        Op::CrossEntropy {
            logits,
            labels,
            smoothing,
        } => Ok(Tensor::scalar(T::of(loss::cross_entropy_smoothed(
            val(*logits),
            labels,
            *smoothing,
        )?))),
        Op::Opaque { inputs, forward, .. } => {
            let args: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
            forward(&args)
        }
    }
}

fn matmul_adjoint<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
    let bt = tensor::transpose_last2(b)?;
    let at = tensor::transpose_last2(a)?;
    match (a.rank(), b.rank()) {
        (ra, 2) => {
            let ga = tensor::batched_matmul(g, &bt, no_count())?;
            let k = a.shape()[ra - 1];
            let m: usize = a.shape()[..ra - 1].iter().product();
            let a_flat_t = tensor::transpose_last2(&a.reshape([m, k])?)?;
            let g_flat = g.reshape([m, b.shape()[1]])?;
            let gb = tensor::matmul(&a_flat_t, &g_flat)?;
            Ok([ga, gb])
        }
        (2, 3) => {
            // A shared across the batch: its gradient sums over batch entries.
            let per_batch = tensor::batched_matmul(g, &bt, no_count())?;
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let mut ga = vec![T::zero(); m * k];
            for chunk in per_batch.data().chunks_exact(m * k) {
                for (acc, &v) in ga.iter_mut().zip(chunk) {
                    *acc = *acc + v;
                }
            }
            let gb = tensor::batched_matmul(&at, g, no_count())?;
            Ok([Tensor::new([m, k], ga)?, gb])
        }
        _ => Ok([
            tensor::batched_matmul(g, &bt, no_count())?,
            tensor::batched_matmul(&at, g, no_count())?,
        ]),
    }
}

fn layer_norm_adjoint<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = gamma.len();
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((xs, gs), dst) in x
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(gx.chunks_exact_mut(d))
    {
        let (mean, rstd) = tensor::moments(xs, eps);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for k in 0..d {
            xhat[k] = (xs[k] - mean) * rstd;
            dxhat[k] = gs[k] * gamma.data()[k];
            gg[k] = gg[k] + gs[k] * xhat[k];
            gb[k] = gb[k] + gs[k];
            sum_dxhat = sum_dxhat + dxhat[k];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[k] * xhat[k];
        }
        for k in 0..d {
            dst[k] = rstd * (dxhat[k] - sum_dxhat * inv_d - xhat[k] * sum_dxhat_xhat * inv_d);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new([d], gg)?,
        Tensor::new([d], gb)?,
    ))
}

fn correlate_adjoint<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    (ph, pw): (usize, usize),
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, hi, wi) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    // channels-last copies keep the inner loops long
    let to_hwc = |data: &[T], h: usize, w: usize| {
        let mut out = vec![T::zero(); c * h * w];
        for (ch, plane) in data.chunks_exact(h * w).enumerate() {
            for (cell, &v) in plane.iter().enumerate() {
                out[cell * c + ch] = v;
            }
        }
        out
    };
    let x = to_hwc(input.data(), hi, wi);
    let gy = to_hwc(g.data(), ho, wo);
    let k = kernel.data();
    let mut gx = vec![T::zero(); input.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    for i in 0..ho {
        let u_lo = ph.saturating_sub(i);
        let u_hi = (hi + ph - i).min(kh);
        for j in 0..wo {
            let v_lo = pw.saturating_sub(j);
            let v_hi = (wi + pw - j).min(kw);
            let gcell = &gy[(i * wo + j) * c..(i * wo + j + 1) * c];
            for u in u_lo..u_hi {
                let p = i + u - ph;
                for v in v_lo..v_hi {
                    let cell = (p * wi + j + v - pw) * c;
                    let kv = k[u * kw + v];
                    let mut dot = T::zero();
                    for ((gxc, &xc), &gc) in gx[cell..cell + c].iter_mut().zip(&x[cell..cell + c]).zip(gcell) {
                        *gxc = *gxc + gc * kv;
                        dot = dot + gc * xc;
                    }
                    gk[u * kw + v] = gk[u * kw + v] + dot;
                }
            }
        }
    }
    let mut gi = vec![T::zero(); input.len()];
    for (cell, chunk) in gx.chunks_exact(c).enumerate() {
        for (ch, &v) in chunk.iter().enumerate() {
            gi[ch * hi * wi + cell] = v;
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("input-shaped"),
        Tensor::new(kernel.shape().to_vec(), gk).expect("kernel-shaped"),
    )
}

fn unroll_adjoint<T: Scalar>((gh, gw): (usize, usize), g: &Tensor<T>) -> Tensor<T> {
    let (kh, kw) = kernel_extent(gh, gw);
    let n = gh * gw;
    let mut gk = vec![T::zero(); kh * kw];
    for i in 0..gh {
        for j in 0..gw {
            let row = &g.data()[(i * gw + j) * n..][..n];
            for p in 0..gh {
                for q in 0..gw {
                    let idx = (gh - 1 - i + p) * kw + (gw - 1 - j + q);
                    gk[idx] = gk[idx] + row[p * gw + q];
                }
            }
        }
    }
    Tensor::new([kh, kw], gk).expect("kernel-shaped")
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: GradientMap<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. any recorded value, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &GradientMap<T> {
        &self.params
    }

    pub fn into_map(self) -> GradientMap<T> {
        self.params
    }
}
