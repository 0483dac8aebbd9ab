//! Reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] walks the record in exact reverse order and
//! accumulates gradients additively into every node that requires them.
//! Tapes are append-only and confined to one logical thread; distinct
//! tapes are independent and may run concurrently.

use super::conv;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::DiffError;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// GELU tanh-approximation constants: 0.5 x (1 + tanh(C0 (x + C1 x^3))).
pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044_715;

/// Epsilon inside layer-norm and batch-norm variance square roots.
pub const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Matmul(usize, usize),
    Reshape(usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    MeanAxis { src: usize, axis: usize },
    SumAll(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    PowConst(usize, T),
    Clamp { src: usize, lo: T, hi: T },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: usize, gain: usize, bias: usize, mean: Vec<T>, rstd: Vec<T> },
    Conv3d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    ConvTranspose3d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    TokensToGrid(usize),
    GridToTokens(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a differentiable forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
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
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Records a tensor that does not receive gradients (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorRef {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that accumulates gradients (model parameters).
    pub fn param(&mut self, value: Tensor<T>) -> TensorRef {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor<T> {
        &self.nodes[r.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `r`, if one reached it.
    pub fn grad(&self, r: TensorRef) -> Option<&Tensor<T>> {
        self.grads[r.0].as_ref()
    }

    /// Gradient for a leaf, densified to zeros when the loss never touched it.
    pub fn leaf_grad(&self, r: TensorRef) -> Tensor<T> {
        match &self.grads[r.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[r.0].value.shape().to_vec()),
        }
    }

    // ---- elementwise binary ----

    fn check_same_shape(
        &self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
    ) -> Result<(), DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a.0, b.0), req))
    }

    /// Adds positional/embedding parameters to a token matrix (same-shape add).
    pub fn embedding_add(&mut self, tokens: TensorRef, emb: TensorRef) -> Result<TensorRef, DiffError> {
        self.check_same_shape("embedding_add", tokens, emb)?;
        self.add(tokens, emb)
    }

    /// `[m, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef, DiffError> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(bias).shape().to_vec());
        if ash.len() != 2 || bsh.len() != 1 || ash[1] != bsh[0] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, n) = (ash[0], ash[1]);
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j] + bv[j]);
            }
        }
        let req = self.requires(a.0) || self.requires(bias.0);
        Ok(self.push(Tensor::new(ash, data)?, Op::AddBias(a.0, bias.0), req))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a.0, b.0), req))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a.0, b.0), req))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Div(a.0, b.0), req))
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let v = self.value(a).data().iter().map(|&x| -x).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Neg(a.0), req))
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef, DiffError> {
        let c = T::from_f64(c);
        let v = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Scale(a.0, c), req))
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> Result<TensorRef, DiffError> {
        let c = T::from_f64(c);
        let v = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::AddScalar(a.0), req))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn exp(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let v = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Exp(a.0), req))
    }

    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let v = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Log(a.0), req))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let z = T::zero();
        let v = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > z { x } else { z })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Relu(a.0), req))
    }

    pub fn gelu(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let v = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let xf = x.to_f64();
                let t = (GELU_C0 * (xf + GELU_C1 * xf * xf * xf)).tanh();
                T::from_f64(0.5 * xf * (1.0 + t))
            })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Gelu(a.0), req))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let one = T::one();
        let v = self
            .value(a)
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Sigmoid(a.0), req))
    }

    /// Elementwise `x^p` for constant `p`; inputs must be positive when p < 1.
    pub fn pow_const(&mut self, a: TensorRef, p: f64) -> Result<TensorRef, DiffError> {
        let pt = T::from_f64(p);
        let v = self.value(a).data().iter().map(|&x| x.powf(pt)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::PowConst(a.0, pt), req))
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, a: TensorRef, lo: f64, hi: f64) -> Result<TensorRef, DiffError> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let v = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, v)?, Op::Clamp { src: a.0, lo, hi }, req))
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, DiffError> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let req = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a.0, b.0), req))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: Vec<usize>) -> Result<TensorRef, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(DiffError::InvalidShape {
                op: "reshape",
                shape,
                message: format!("element count differs from {:?}", self.value(a).shape()),
            });
        }
        let data = self.value(a).data().to_vec();
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(a.0), req))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape();
        if sh.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "transpose",
                shape: sh.to_vec(),
                message: "expected a 2-D tensor".into(),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a.0), req))
    }

    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::InvalidShape {
                op: "concat",
                shape: vec![],
                message: "no inputs".into(),
            });
        }
        let base = self.value(parts[0]).shape().to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidShape {
                op: "concat",
                shape: base,
                message: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = base.clone();
        for &p in &parts[1..] {
            let sh = self.value(p).shape();
            if sh.len() != base.len()
                || sh
                    .iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: sh.to_vec(),
                });
            }
            out_shape[axis] += sh[axis];
        }

        // Copy block rows: outer = product of dims before axis,
        // inner = product of dims after axis.
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let sh = self.value(p).shape();
                let span = sh[axis] * inner;
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * span..(o + 1) * span]);
            }
        }
        let req = parts.iter().any(|p| self.requires(p.0));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            req,
        ))
    }

    /// Narrow along `axis` to `[start, end)`.
    pub fn slice(
        &mut self,
        a: TensorRef,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        if axis >= sh.len() || start >= end || end > sh[axis] {
            return Err(DiffError::InvalidShape {
                op: "slice",
                shape: sh,
                message: format!("axis {axis}, range {start}..{end}"),
            });
        }
        let mut out_shape = sh.clone();
        out_shape[axis] = end - start;
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            let base = o * sh[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let req = self.requires(a.0);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                src: a.0,
                axis,
                start,
            },
            req,
        ))
    }

    /// Mean over one axis of a 2-D tensor, keeping the axis with extent 1.
    pub fn mean_axis(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 || axis > 1 {
            return Err(DiffError::InvalidShape {
                op: "mean_axis",
                shape: sh,
                message: format!("expected 2-D input and axis 0 or 1, got axis {axis}"),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let v = self.value(a).data();
        let out = if axis == 0 {
            let inv = T::from_f64(1.0 / m as f64);
            let mut acc = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    acc[j] = acc[j] + v[i * n + j];
                }
            }
            Tensor::new(vec![1, n], acc.into_iter().map(|s| s * inv).collect())?
        } else {
            let inv = T::from_f64(1.0 / n as f64);
            let mut acc = vec![T::zero(); m];
            for i in 0..m {
                for j in 0..n {
                    acc[i] = acc[i] + v[i * n + j];
                }
            }
            Tensor::new(vec![m, 1], acc.into_iter().map(|s| s * inv).collect())?
        };
        let req = self.requires(a.0);
        Ok(self.push(out, Op::MeanAxis { src: a.0, axis }, req))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let req = self.requires(a.0);
        Ok(self.push(Tensor::scalar(acc), Op::SumAll(a.0), req))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "softmax_axis",
                shape: sh,
                message: "expected a 2-D tensor".into(),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
            let mut denom = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom = denom + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / denom;
            }
        }
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(sh, out)?, Op::SoftmaxRows(a.0), req))
    }

    /// Row-wise log-sum-exp of a 2-D tensor, shape `[m, 1]`.
    pub fn logsumexp_rows(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "logsumexp_rows",
                shape: sh,
                message: "expected a 2-D tensor".into(),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
            let mut s = T::zero();
            for &x in row {
                s = s + (x - mx).exp();
            }
            out.push(mx + s.ln());
        }
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::LogSumExpRows(a.0), req))
    }

    // ---- normalization ----

    /// Per-row layer norm with learnable gain and bias (both `[h]`).
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
    ) -> Result<TensorRef, DiffError> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 2 {
            return Err(DiffError::InvalidShape {
                op: "layer_norm",
                shape: sh,
                message: "expected a 2-D tensor".into(),
            });
        }
        let (m, h) = (sh[0], sh[1]);
        for r in [gain, bias] {
            if self.value(r).shape() != [h] {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sh,
                    rhs: self.value(r).shape().to_vec(),
                });
            }
        }
        let v = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::from_f64(NORM_EPS);
        let inv_h = T::from_f64(1.0 / h as f64);
        let mut out = vec![T::zero(); m * h];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &v[i * h..(i + 1) * h];
            let mut mean = T::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean * inv_h;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_h;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..h {
                out[i * h + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let req = self.requires(x.0) || self.requires(gain.0) || self.requires(bias.0);
        Ok(self.push(
            Tensor::new(sh, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean: means,
                rstd: rstds,
            },
            req,
        ))
    }

    /// Per-channel normalization of a `[C, H, W, D]` feature volume over its
    /// spatial extent, with learnable gain and bias (both `[C]`). Statistics
    /// always come from the current volume, so inference needs no state.
    pub fn batch_norm_3d(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
    ) -> Result<TensorRef, DiffError> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(DiffError::InvalidShape {
                op: "batch_norm_3d",
                shape: sh,
                message: "expected a [C, H, W, D] tensor".into(),
            });
        }
        let c = sh[0];
        let spatial: usize = sh[1..].iter().product();
        for r in [gain, bias] {
            if self.value(r).shape() != [c] {
                return Err(DiffError::ShapeMismatch {
                    op: "batch_norm_3d",
                    lhs: sh,
                    rhs: self.value(r).shape().to_vec(),
                });
            }
        }
        let v = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::from_f64(NORM_EPS);
        let inv_n = T::from_f64(1.0 / spatial as f64);
        let mut out = vec![T::zero(); v.len()];
        let mut means = Vec::with_capacity(c);
        let mut rstds = Vec::with_capacity(c);
        for ch in 0..c {
            let chunk = &v[ch * spatial..(ch + 1) * spatial];
            let mut mean = T::zero();
            for &x in chunk {
                mean = mean + x;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &x in chunk {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for s in 0..spatial {
                out[ch * spatial + s] = (chunk[s] - mean) * rstd * g[ch] + b[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let req = self.requires(x.0) || self.requires(gain.0) || self.requires(bias.0);
        Ok(self.push(
            Tensor::new(sh, out)?,
            Op::BatchNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                mean: means,
                rstd: rstds,
            },
            req,
        ))
    }

    // ---- convolution ----

    /// 3-D convolution: `x [Cin, H, W, D]`, `w [Cout, Cin, k, k, k]`,
    /// optional `bias [Cout]`, zero padding.
    pub fn conv3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef, DiffError> {
        let out = conv::conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let req = self.requires(x.0)
            || self.requires(w.0)
            || bias.map(|b| self.requires(b.0)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            req,
        ))
    }

    /// Transposed 3-D convolution: `x [Cin, H, W, D]`, `w [Cin, Cout, k, k, k]`,
    /// optional `bias [Cout]`; output extent `(in-1)*stride + k - 2*pad`.
    pub fn conv_transpose3d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef, DiffError> {
        let out = conv::conv_transpose3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let req = self.requires(x.0)
            || self.requires(w.0)
            || bias.map(|b| self.requires(b.0)).unwrap_or(false);
        Ok(self.push(
            out,
            Op::ConvTranspose3d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            req,
        ))
    }

    // ---- token/grid layout ----

    /// `[n, h]` token rows to an `[h, gh, gw, gd]` feature grid, inverting the
    /// C-order patch enumeration (`n` must equal `gh*gw*gd`).
    pub fn tokens_to_grid(
        &mut self,
        a: TensorRef,
        grid: [usize; 3],
    ) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        let n_grid = grid[0] * grid[1] * grid[2];
        if sh.len() != 2 || sh[0] != n_grid {
            return Err(DiffError::InvalidShape {
                op: "tokens_to_grid",
                shape: sh,
                message: format!("grid {grid:?} needs {n_grid} token rows"),
            });
        }
        let (n, h) = (sh[0], sh[1]);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); n * h];
        for t in 0..n {
            for c in 0..h {
                out[c * n + t] = v[t * h + c];
            }
        }
        let req = self.requires(a.0);
        Ok(self.push(
            Tensor::new(vec![h, grid[0], grid[1], grid[2]], out)?,
            Op::TokensToGrid(a.0),
            req,
        ))
    }

    /// Inverse of [`Tape::tokens_to_grid`].
    pub fn grid_to_tokens(&mut self, a: TensorRef) -> Result<TensorRef, DiffError> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 4 {
            return Err(DiffError::InvalidShape {
                op: "grid_to_tokens",
                shape: sh,
                message: "expected a [h, gh, gw, gd] tensor".into(),
            });
        }
        let h = sh[0];
        let n: usize = sh[1..].iter().product();
        let v = self.value(a).data();
        let mut out = vec![T::zero(); n * h];
        for c in 0..h {
            for t in 0..n {
                out[t * h + c] = v[c * n + t];
            }
        }
        let req = self.requires(a.0);
        Ok(self.push(Tensor::new(vec![n, h], out)?, Op::GridToTokens(a.0), req))
    }

    // ---- backward ----

    /// Propagates `d loss / d node` to every recorded node that requires a
    /// gradient. `loss` must be scalar. A tape differentiates once; a second
    /// call is an error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardAlreadyRun);
        }
        if self.nodes.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.backward_done = true;
        let seed = Tensor::full(self.value(loss).shape().to_vec(), T::one());
        self.grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.propagate(i, g.data());
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, contribution: &[T]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut self.grads[id];
        match slot {
            Some(gr) => {
                for (dst, &src) in gr.data_mut().iter_mut().zip(contribution) {
                    *dst = *dst + src;
                }
            }
            None => {
                let shape = self.nodes[id].value.shape().to_vec();
                debug_assert_eq!(contribution.len(), shape.iter().product::<usize>());
                *slot = Some(
                    Tensor::new(shape, contribution.to_vec()).expect("gradient shape"),
                );
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Parents always precede children on an append-only tape, so parent
        // gradient slots are disjoint from the node currently being visited.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            &Op::AddBias(a, b) => {
                self.acc(a, g);
                if self.nodes[b].requires_grad {
                    let n = self.nodes[b].value.numel();
                    let m = g.len() / n;
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    self.acc(b, &db);
                }
            }
            &Op::Sub(a, b) => {
                self.acc(a, g);
                if self.nodes[b].requires_grad {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.acc(b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data();
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                    self.acc(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data();
                    let db: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    self.acc(b, &db);
                }
            }
            &Op::Div(a, b) => {
                let bv = self.nodes[b].value.data();
                if self.nodes[a].requires_grad {
                    let da: Vec<T> = g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect();
                    self.acc(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data();
                    let db: Vec<T> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect();
                    self.acc(b, &db);
                }
            }
            &Op::Neg(a) => {
                let da: Vec<T> = g.iter().map(|&x| -x).collect();
                self.acc(a, &da);
            }
            &Op::Scale(a, c) => {
                let da: Vec<T> = g.iter().map(|&x| x * c).collect();
                self.acc(a, &da);
            }
            &Op::AddScalar(a) => self.acc(a, g),
            &Op::Matmul(a, b) => {
                let ash = self.nodes[a].value.shape();
                let bsh = self.nodes[b].value.shape();
                let (m, k, n) = (ash[0], ash[1], bsh[1]);
                if self.nodes[a].requires_grad {
                    // dA = G · B^T
                    let bv = self.nodes[b].value.data();
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                for l in 0..k {
                                    da[i * k + l] = da[i * k + l] + gij * bv[l * n + j];
                                }
                            }
                        }
                    }
                    self.acc(a, &da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T · G
                    let av = self.nodes[a].value.data();
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av[i * k + l];
                            if ail != T::zero() {
                                for j in 0..n {
                                    db[l * n + j] = db[l * n + j] + ail * g[i * n + j];
                                }
                            }
                        }
                    }
                    self.acc(b, &db);
                }
            }
            &Op::Reshape(a) => self.acc(a, g),
            &Op::Transpose(a) => {
                let ash = self.nodes[a].value.shape();
                let (m, n) = (ash[0], ash[1]);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(a, &da);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0usize;
                for p in parts {
                    let span_axis = self.nodes[p].value.shape()[axis];
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(span_axis * inner * outer);
                        for o in 0..outer {
                            let base = o * total_axis * inner + offset * inner;
                            dp.extend_from_slice(&g[base..base + span_axis * inner]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += span_axis;
                }
            }
            &Op::Slice { src, axis, start } => {
                if self.nodes[src].requires_grad {
                    let src_shape = self.nodes[src].value.shape().to_vec();
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let span = out_shape[axis];
                    let mut da = vec![T::zero(); self.nodes[src].value.numel()];
                    for o in 0..outer {
                        let dst_base = o * src_shape[axis] * inner + start * inner;
                        let src_base = o * span * inner;
                        da[dst_base..dst_base + span * inner]
                            .copy_from_slice(&g[src_base..src_base + span * inner]);
                    }
                    self.acc(src, &da);
                }
            }
            &Op::MeanAxis { src, axis } => {
                let sh = self.nodes[src].value.shape();
                let (m, n) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); m * n];
                if axis == 0 {
                    let inv = T::from_f64(1.0 / m as f64);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j] * inv;
                        }
                    }
                } else {
                    let inv = T::from_f64(1.0 / n as f64);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i] * inv;
                        }
                    }
                }
                self.acc(src, &da);
            }
            &Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a].value.numel()];
                self.acc(a, &da);
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.data();
                let sh = self.nodes[i].value.shape();
                let (m, n) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot = dot + g[r * n + j] * y[r * n + j];
                    }
                    for j in 0..n {
                        da[r * n + j] = (g[r * n + j] - dot) * y[r * n + j];
                    }
                }
                self.acc(a, &da);
            }
            &Op::LogSumExpRows(a) => {
                let x = self.nodes[a].value.data();
                let sh = self.nodes[a].value.shape();
                let (m, n) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
                    let mut denom = T::zero();
                    for &v in row {
                        denom = denom + (v - mx).exp();
                    }
                    for j in 0..n {
                        da[r * n + j] = g[r] * (row[j] - mx).exp() / denom;
                    }
                }
                self.acc(a, &da);
            }
            &Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<T> = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                self.acc(a, &da);
            }
            &Op::Log(a) => {
                let x = self.nodes[a].value.data();
                let da: Vec<T> = g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect();
                self.acc(a, &da);
            }
            &Op::Relu(a) => {
                let x = self.nodes[a].value.data();
                let z = T::zero();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > z { gi } else { z })
                    .collect();
                self.acc(a, &da);
            }
            &Op::Gelu(a) => {
                let x = self.nodes[a].value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| {
                        let xf = xi.to_f64();
                        let u = GELU_C0 * (xf + GELU_C1 * xf * xf * xf);
                        let t = u.tanh();
                        let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * xf * xf);
                        let d = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du;
                        gi * T::from_f64(d)
                    })
                    .collect();
                self.acc(a, &da);
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let one = T::one();
                let da: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (one - yi))
                    .collect();
                self.acc(a, &da);
            }
            &Op::PowConst(a, p) => {
                let x = self.nodes[a].value.data();
                let pm1 = p - T::one();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * p * xi.powf(pm1))
                    .collect();
                self.acc(a, &da);
            }
            &Op::Clamp { src, lo, hi } => {
                let x = self.nodes[src].value.data();
                let z = T::zero();
                let da: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { z })
                    .collect();
                self.acc(src, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let sh = self.nodes[x].value.shape().to_vec();
                let (m, h) = (sh[0], sh[1]);
                let inv_h = T::from_f64(1.0 / h as f64);
                let xv = self.nodes[x].value.data().to_vec();
                let gv = self.nodes[gain].value.data().to_vec();

                if self.nodes[gain].requires_grad || self.nodes[bias].requires_grad {
                    let mut dg = vec![T::zero(); h];
                    let mut db = vec![T::zero(); h];
                    for i in 0..m {
                        for j in 0..h {
                            let xhat = (xv[i * h + j] - mean[i]) * rstd[i];
                            dg[j] = dg[j] + g[i * h + j] * xhat;
                            db[j] = db[j] + g[i * h + j];
                        }
                    }
                    self.acc(gain, &dg);
                    self.acc(bias, &db);
                }
                if self.nodes[x].requires_grad {
                    let mut dx = vec![T::zero(); m * h];
                    for i in 0..m {
                        let mut sum_gg = T::zero();
                        let mut sum_ggx = T::zero();
                        for j in 0..h {
                            let gg = g[i * h + j] * gv[j];
                            let xhat = (xv[i * h + j] - mean[i]) * rstd[i];
                            sum_gg = sum_gg + gg;
                            sum_ggx = sum_ggx + gg * xhat;
                        }
                        let mean_gg = sum_gg * inv_h;
                        let mean_ggx = sum_ggx * inv_h;
                        for j in 0..h {
                            let gg = g[i * h + j] * gv[j];
                            let xhat = (xv[i * h + j] - mean[i]) * rstd[i];
                            dx[i * h + j] = rstd[i] * (gg - mean_gg - xhat * mean_ggx);
                        }
                    }
                    self.acc(x, &dx);
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let sh = self.nodes[x].value.shape().to_vec();
                let c = sh[0];
                let spatial: usize = sh[1..].iter().product();
                let inv_n = T::from_f64(1.0 / spatial as f64);
                let xv = self.nodes[x].value.data().to_vec();
                let gv = self.nodes[gain].value.data().to_vec();

                if self.nodes[gain].requires_grad || self.nodes[bias].requires_grad {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        for s in 0..spatial {
                            let idx = ch * spatial + s;
                            let xhat = (xv[idx] - mean[ch]) * rstd[ch];
                            dg[ch] = dg[ch] + g[idx] * xhat;
                            db[ch] = db[ch] + g[idx];
                        }
                    }
                    self.acc(gain, &dg);
                    self.acc(bias, &db);
                }
                if self.nodes[x].requires_grad {
                    let mut dx = vec![T::zero(); xv.len()];
                    for ch in 0..c {
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for s in 0..spatial {
                            let idx = ch * spatial + s;
                            let xhat = (xv[idx] - mean[ch]) * rstd[ch];
                            sum_g = sum_g + g[idx];
                            sum_gx = sum_gx + g[idx] * xhat;
                        }
                        let mean_g = sum_g * inv_n;
                        let mean_gx = sum_gx * inv_n;
                        let scale = gv[ch] * rstd[ch];
                        for s in 0..spatial {
                            let idx = ch * spatial + s;
                            let xhat = (xv[idx] - mean[ch]) * rstd[ch];
                            dx[idx] = scale * (g[idx] - mean_g - xhat * mean_gx);
                        }
                    }
                    self.acc(x, &dx);
                }
            }
            &Op::Conv3d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (dx, dw, db) = conv::conv3d_backward(
                    &self.nodes[x].value,
                    &self.nodes[w].value,
                    g,
                    &out_shape,
                    stride,
                    pad,
                    self.nodes[x].requires_grad,
                    self.nodes[w].requires_grad,
                    bias.map(|b| self.nodes[b].requires_grad).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.acc(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(w, &dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.acc(b, &db);
                }
            }
            &Op::ConvTranspose3d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (dx, dw, db) = conv::conv_transpose3d_backward(
                    &self.nodes[x].value,
                    &self.nodes[w].value,
                    g,
                    &out_shape,
                    stride,
                    pad,
                    self.nodes[x].requires_grad,
                    self.nodes[w].requires_grad,
                    bias.map(|b| self.nodes[b].requires_grad).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    self.acc(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(w, &dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.acc(b, &db);
                }
            }
            &Op::TokensToGrid(a) => {
                // out[c*n + t] = in[t*h + c]
                let sh = self.nodes[a].value.shape();
                let (n, h) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); n * h];
                for t in 0..n {
                    for c in 0..h {
                        da[t * h + c] = g[c * n + t];
                    }
                }
                self.acc(a, &da);
            }
            &Op::GridToTokens(a) => {
                let sh = self.nodes[a].value.shape();
                let h = sh[0];
                let n: usize = sh[1..].iter().product();
                let mut da = vec![T::zero(); n * h];
                for c in 0..h {
                    for t in 0..n {
                        da[c * n + t] = g[t * h + c];
                    }
                }
                self.acc(a, &da);
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != T::zero() {
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + ail * brow[j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn untouched_param_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![1.0, 2.0]));
        let p = tape.param(t64(vec![3], vec![5.0, 6.0, 7.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(p).is_none());
        assert_eq!(tape.leaf_grad(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![1], vec![2.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(
            tape.backward(s),
            Err(DiffError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(DiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, 10.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![3], vec![-2.0, 0.0, 3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_accumulates_over_shared_input() {
        // loss = sum(x*x) + sum(x) => d/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![3.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(sq).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn tokens_grid_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(t64(vec![6, 4], data.clone()));
        let grid = tape.tokens_to_grid(x, [1, 2, 3]).unwrap();
        assert_eq!(tape.value(grid).shape(), &[4, 1, 2, 3]);
        let back = tape.grid_to_tokens(grid).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
    }

    #[test]
    fn concat_slice_round_trip_axis1() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t64(vec![2, 1], vec![9.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let sl = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(sl).data(), &[9.0, 8.0]);
    }
}
