//! Differentiable operations: pointwise arithmetic and activations with
//! trailing-dimension broadcasting, matrix product, shape ops, row
//! gather/scatter, 2x nearest upsample / sum pool, convolution, and the fused
//! clean-image estimate.
//!
//! Each backward rule builds its result through these same constructors, so a
//! retained backward pass stays differentiable. Rules that depend on operand
//! values (product rule, activation slopes) reattach the saved operands to the
//! tape; rules that are piecewise constant (abs, leaky relu) bake the mask in
//! as a constant, which is exactly their second derivative almost everywhere.

use std::sync::Arc;

use super::conv;
use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub enum Op {
    Watch,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddConst(f64),
    Abs,
    Square,
    Sqrt,
    Softplus,
    Sigmoid,
    Silu,
    LeakyRelu(f32),
    Clamp { lo: f32, hi: f32 },
    MatMul { ta: bool, tb: bool },
    Reshape,
    BroadcastTo,
    SumToShape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    PadAxis { axis: usize, before: usize },
    UpsampleNearest2 { spatial: usize },
    SumPool2 { spatial: usize },
    IndexRows { indices: Arc<Vec<usize>> },
    ScatterRows { indices: Arc<Vec<usize>>, rows: usize },
    EstimateX0 { a: f64, b: f64 },
    Conv { stride: usize, pad: usize },
    ConvBackInput { stride: usize, pad: usize },
    ConvBackKernel { stride: usize, pad: usize },
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| f(x)).collect();
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Tensor::from_vec(self.shape(), data),
        };
        tape.record(op, vec![self.saved()], self.shape().to_vec(), data)
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let bshape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| shape_err(name, self.shape(), other.shape()))?;
        let a = self.broadcast_to(&bshape)?;
        let b = other.broadcast_to(&bshape)?;
        let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let tape = match Tensor::common_tape(&[&a, &b])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&bshape, data)),
        };
        Ok(tape.record(op, vec![a.saved(), b.saved()], bshape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| (x as f64 * c) as f32)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.unary(Op::AddConst(c), |x| (x as f64 + c) as f32)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs, f32::abs)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt, f32::sqrt)
    }

    /// Numerically stable softplus: `max(x,0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self) -> Tensor {
        self.unary(Op::Softplus, |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, stable_sigmoid)
    }

    pub fn silu(&self) -> Tensor {
        self.unary(Op::Silu, |x| x * stable_sigmoid(x))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        self.unary(Op::LeakyRelu(slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    /// Elementwise clip to `[lo, hi]`; gradient passes through inside the
    /// range (inclusive) and is zero outside.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        assert!(lo <= hi, "clamp bounds inverted: {lo} > {hi}");
        self.unary(Op::Clamp { lo, hi }, move |x| x.clamp(lo, hi))
    }

    /// `a @ b` with optional transposes; both operands must be rank 2.
    pub fn matmul(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let (m, ka) = view_dims(self.shape(), ta);
        let (kb, n) = view_dims(other.shape(), tb);
        if ka != kb {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let data = matmul_data(self.data(), other.data(), m, ka, n, ta, tb);
        let shape = vec![m, n];
        let tape = match Tensor::common_tape(&[self, other])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&shape, data)),
        };
        Ok(tape.record(Op::MatMul { ta, tb }, vec![self.saved(), other.saved()], shape, data))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => {
                return Ok(Tensor {
                    shape: shape.to_vec(),
                    data: self.data.clone(),
                    node: None,
                })
            }
        };
        Ok(tape.record(Op::Reshape, vec![self.saved()], shape.to_vec(), self.to_vec()))
    }

    /// Expands to `shape` under trailing-dimension alignment (each aligned
    /// extent must match or be 1 on the input side). No-op on equal shapes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let rank = shape.len();
        if self.shape().len() > rank {
            return Err(shape_err("broadcast_to", self.shape(), shape));
        }
        let offset = rank - self.shape().len();
        for (i, &target) in shape.iter().enumerate() {
            let src = if i < offset { 1 } else { self.shape()[i - offset] };
            if src != target && src != 1 {
                return Err(shape_err("broadcast_to", self.shape(), shape));
            }
        }
        let data = broadcast_data(self.data(), self.shape(), shape);
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(shape, data)),
        };
        Ok(tape.record(Op::BroadcastTo, vec![self.saved()], shape.to_vec(), data))
    }

    /// Sums axes so the result has `shape`; inverse direction of
    /// [`Tensor::broadcast_to`]. Accumulates in f64.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        if shape.len() > rank {
            return Err(shape_err("sum_to_shape", self.shape(), shape));
        }
        let offset = rank - shape.len();
        for (i, &target) in shape.iter().enumerate() {
            let src = self.shape()[i + offset];
            if target != src && target != 1 {
                return Err(shape_err("sum_to_shape", self.shape(), shape));
            }
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = sum_to_data(self.data(), self.shape(), shape);
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(shape, data)),
        };
        Ok(tape.record(Op::SumToShape, vec![self.saved()], shape.to_vec(), data))
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.sum_to_shape(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len().max(1);
        Ok(self.sum()?.scale(1.0 / n as f64))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != rank
                || p.shape()[..axis] != out_shape[..axis]
                || p.shape()[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut written = 0;
        for p in parts {
            let pa = p.shape()[axis];
            for o in 0..outer {
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * total_axis + written) * inner;
                data[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            written += pa;
        }
        let refs: Vec<&Tensor> = parts.to_vec();
        let tape = match Tensor::common_tape(&refs)? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        let saved = parts.iter().map(|p| p.saved()).collect();
        Ok(tape.record(Op::Concat { axis }, saved, out_shape, data))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || start + len > self.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "axis {axis} range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    self.shape()
                ),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis];
        let mut data = vec![0.0f32; out_shape.iter().product()];
        for o in 0..outer {
            let src = &self.data()[(o * full + start) * inner..(o * full + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::Narrow { axis, start, len }, vec![self.saved()], out_shape, data))
    }

    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "pad_axis",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] += before + after;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let len = self.shape()[axis];
        let total = out_shape[axis];
        let mut data = vec![0.0f32; out_shape.iter().product()];
        for o in 0..outer {
            let src = &self.data()[o * len * inner..(o + 1) * len * inner];
            let dst_start = (o * total + before) * inner;
            data[dst_start..dst_start + len * inner].copy_from_slice(src);
        }
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::PadAxis { axis, before }, vec![self.saved()], out_shape, data))
    }

    /// Doubles the trailing `spatial` extents by nearest-neighbor repetition.
    pub fn upsample_nearest2(&self, spatial: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if spatial == 0 || spatial > rank {
            return Err(TensorError::Invalid {
                op: "upsample_nearest2",
                msg: format!("spatial rank {spatial} invalid for tensor rank {rank}"),
            });
        }
        let mut out_shape = self.shape().to_vec();
        for d in out_shape[rank - spatial..].iter_mut() {
            *d *= 2;
        }
        let mut data = vec![0.0f32; out_shape.iter().product()];
        if spatial == 2 {
            let (h, w) = (self.shape[rank - 2], self.shape[rank - 1]);
            let outer: usize = self.shape[..rank - 2].iter().product();
            let ow = 2 * w;
            for o in 0..outer {
                for y in 0..h {
                    let srow = &self.data()[(o * h + y) * w..(o * h + y + 1) * w];
                    let base = (o * 2 * h + 2 * y) * ow;
                    let (r0, r1) = data[base..base + 2 * ow].split_at_mut(ow);
                    for (x, &v) in srow.iter().enumerate() {
                        r0[2 * x] = v;
                        r0[2 * x + 1] = v;
                    }
                    r1.copy_from_slice(r0);
                }
            }
        } else {
            let in_strides = strides(self.shape());
            let out_strides = strides(&out_shape);
            for (lin, slot) in data.iter_mut().enumerate() {
                let mut rem = lin;
                let mut src = 0;
                for i in 0..rank {
                    let c = rem / out_strides[i];
                    rem %= out_strides[i];
                    let sc = if i >= rank - spatial { c / 2 } else { c };
                    src += sc * in_strides[i];
                }
                *slot = self.data()[src];
            }
        }
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::UpsampleNearest2 { spatial }, vec![self.saved()], out_shape, data))
    }

    /// Sums non-overlapping 2^spatial blocks; adjoint of [`Tensor::upsample_nearest2`].
    pub fn sum_pool2(&self, spatial: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if spatial == 0 || spatial > rank {
            return Err(TensorError::Invalid {
                op: "sum_pool2",
                msg: format!("spatial rank {spatial} invalid for tensor rank {rank}"),
            });
        }
        for &d in &self.shape()[rank - spatial..] {
            if d % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: "sum_pool2",
                    msg: format!("odd spatial extent in {:?}", self.shape()),
                });
            }
        }
        let mut out_shape = self.shape().to_vec();
        for d in out_shape[rank - spatial..].iter_mut() {
            *d /= 2;
        }
        let mut data = vec![0.0f32; out_shape.iter().product()];
        if spatial == 2 {
            let (h, w) = (self.shape[rank - 2], self.shape[rank - 1]);
            let outer: usize = self.shape[..rank - 2].iter().product();
            let (oh, ow) = (h / 2, w / 2);
            for o in 0..outer {
                for oy in 0..oh {
                    let i0 = &self.data()[(o * h + 2 * oy) * w..(o * h + 2 * oy) * w + w];
                    let i1 = &self.data()[(o * h + 2 * oy + 1) * w..(o * h + 2 * oy + 1) * w + w];
                    let drow = &mut data[(o * oh + oy) * ow..(o * oh + oy) * ow + ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        *d = i0[2 * ox] + i0[2 * ox + 1] + i1[2 * ox] + i1[2 * ox + 1];
                    }
                }
            }
        } else {
            let in_strides = strides(self.shape());
            let out_strides = strides(&out_shape);
            for (lin, &v) in self.data().iter().enumerate() {
                let mut rem = lin;
                let mut dst = 0;
                for i in 0..rank {
                    let c = rem / in_strides[i];
                    rem %= in_strides[i];
                    let oc = if i >= rank - spatial { c / 2 } else { c };
                    dst += oc * out_strides[i];
                }
                data[dst] += v;
            }
        }
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::SumPool2 { spatial }, vec![self.saved()], out_shape, data))
    }

    /// Gathers rows along axis 0; `self` is `[rows, ...]`.
    pub fn index_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or(TensorError::Invalid {
            op: "index_rows",
            msg: "rank-0 tensor has no rows".into(),
        })?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_size: usize = self.shape()[1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        let mut data = vec![0.0f32; indices.len() * row_size];
        for (i, &r) in indices.iter().enumerate() {
            data[i * row_size..(i + 1) * row_size]
                .copy_from_slice(&self.data()[r * row_size..(r + 1) * row_size]);
        }
        let idx = Arc::new(indices.to_vec());
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::IndexRows { indices: idx }, vec![self.saved()], out_shape, data))
    }

    /// Scatter-adds rows of `self` into a `[rows, ...]` zero tensor; duplicate
    /// indices accumulate. Adjoint of [`Tensor::index_rows`].
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        if self.shape().first() != Some(&indices.len()) {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("{} indices vs shape {:?}", indices.len(), self.shape()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let row_size: usize = self.shape()[1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = rows;
        let mut data = vec![0.0f32; rows * row_size];
        for (i, &r) in indices.iter().enumerate() {
            let src = &self.data()[i * row_size..(i + 1) * row_size];
            let dst = &mut data[r * row_size..(r + 1) * row_size];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let idx = Arc::new(indices.to_vec());
        let tape = match self.tape() {
            Some(t) => t.clone(),
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(Op::ScatterRows { indices: idx, rows }, vec![self.saved()], out_shape, data))
    }

    /// Fused clean-image estimate `(self - b*eps_hat) / a` with per-element
    /// f64 arithmetic; `a = sqrt(alpha_bar_t)`, `b = sqrt(1 - alpha_bar_t)`.
    pub fn estimate_x0_fused(&self, eps_hat: &Tensor, a: f64, b: f64) -> Result<Tensor> {
        if self.shape() != eps_hat.shape() {
            return Err(shape_err("estimate_x0", self.shape(), eps_hat.shape()));
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&xt, &eh)| ((xt as f64 - b * eh as f64) / a) as f32)
            .collect();
        let tape = match Tensor::common_tape(&[self, eps_hat])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(self.shape(), data)),
        };
        Ok(tape.record(
            Op::EstimateX0 { a, b },
            vec![self.saved(), eps_hat.saved()],
            self.shape().to_vec(),
            data,
        ))
    }

    /// Cross-correlation of `self` `[N,C,*sp]` with `kernel` `[F,C,*k]`;
    /// spatial rank 2 or 3.
    pub fn conv(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, c, in_sp) = split_conv_input(self.shape(), "conv")?;
        let (f, kc, k) = split_conv_kernel(kernel.shape(), in_sp.len(), "conv")?;
        if kc != c {
            return Err(shape_err("conv", self.shape(), kernel.shape()));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv",
                msg: "stride must be >= 1".into(),
            });
        }
        for &e in in_sp {
            if k > e + 2 * pad {
                return Err(TensorError::Invalid {
                    op: "conv",
                    msg: format!("kernel {k} exceeds padded extent {}", e + 2 * pad),
                });
            }
        }
        let (out_sp, data) = conv::conv_fwd(self.data(), n, c, in_sp, kernel.data(), f, k, stride, pad);
        let mut out_shape = vec![n, f];
        out_shape.extend(&out_sp);
        let tape = match Tensor::common_tape(&[self, kernel])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(
            Op::Conv { stride, pad },
            vec![self.saved(), kernel.saved()],
            out_shape,
            data,
        ))
    }

    /// Adjoint of [`Tensor::conv`] w.r.t. its input: `self` is the output
    /// cotangent `[N,F,*out_sp]`; result has spatial extents `in_sp`.
    pub fn conv_back_input(&self, kernel: &Tensor, stride: usize, pad: usize, in_sp: &[usize]) -> Result<Tensor> {
        let (n, f, out_sp) = split_conv_input(self.shape(), "conv_back_input")?;
        let (kf, c, k) = split_conv_kernel(kernel.shape(), out_sp.len(), "conv_back_input")?;
        if kf != f || in_sp.len() != out_sp.len() {
            return Err(shape_err("conv_back_input", self.shape(), kernel.shape()));
        }
        let data = conv::conv_back_input(self.data(), n, f, out_sp, kernel.data(), c, k, stride, pad, in_sp);
        let mut out_shape = vec![n, c];
        out_shape.extend(in_sp);
        let tape = match Tensor::common_tape(&[self, kernel])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(
            Op::ConvBackInput { stride, pad },
            vec![self.saved(), kernel.saved()],
            out_shape,
            data,
        ))
    }

    /// Adjoint of [`Tensor::conv`] w.r.t. its kernel: `self` is the output
    /// cotangent `[N,F,*out_sp]`, `input` the forward input `[N,C,*in_sp]`.
    pub fn conv_back_kernel(&self, input: &Tensor, stride: usize, pad: usize, k: usize) -> Result<Tensor> {
        let (n, f, out_sp) = split_conv_input(self.shape(), "conv_back_kernel")?;
        let (ni, c, in_sp) = split_conv_input(input.shape(), "conv_back_kernel")?;
        if n != ni || in_sp.len() != out_sp.len() {
            return Err(shape_err("conv_back_kernel", self.shape(), input.shape()));
        }
        let data = conv::conv_back_kernel(self.data(), n, f, out_sp, input.data(), c, in_sp, k, stride, pad);
        let mut out_shape = vec![f, c];
        out_shape.extend(std::iter::repeat(k).take(in_sp.len()));
        let tape = match Tensor::common_tape(&[self, input])? {
            Some(t) => t,
            None => return Ok(Tensor::from_vec(&out_shape, data)),
        };
        Ok(tape.record(
            Op::ConvBackKernel { stride, pad },
            vec![self.saved(), input.saved()],
            out_shape,
            data,
        ))
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn view_dims(shape: &[usize], t: bool) -> (usize, usize) {
    if t {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

fn matmul_data(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av != 0.0 {
                        let brow = &b[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0f32;
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let brow = &b[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let av = a[kk * m + i];
                    if av != 0.0 {
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for kk in 0..k {
                        acc += a[kk * m + i] * b[j * k + kk];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
    out
}

fn broadcast_data(src: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    let rank = to.len();
    let offset = rank - from.len();
    // Source extents aligned to the output rank; broadcast axes advance by 0.
    let mut af = vec![1usize; rank];
    af[offset..].copy_from_slice(from);
    let fs = strides(&af);
    let ss: Vec<usize> = (0..rank).map(|i| if af[i] == 1 { 0 } else { fs[i] }).collect();
    let mut out = vec![0.0f32; to.iter().product()];
    if out.is_empty() {
        return out;
    }
    // Longest suffix that is either fully materialized in the source (block
    // copy) or fully broadcast (block fill); prefix axes walk an odometer.
    let mut copy_k = rank;
    while copy_k > 0 && af[copy_k - 1] == to[copy_k - 1] {
        copy_k -= 1;
    }
    let mut fill_k = rank;
    while fill_k > 0 && af[fill_k - 1] == 1 {
        fill_k -= 1;
    }
    let (k, fill) = if fill_k < copy_k { (fill_k, true) } else { (copy_k, false) };
    let block: usize = to[k..].iter().product();
    let n_blocks: usize = to[..k].iter().product();
    let mut idx = vec![0usize; k];
    let mut s = 0usize;
    for bi in 0..n_blocks {
        let dst = &mut out[bi * block..(bi + 1) * block];
        if fill {
            dst.fill(src[s]);
        } else {
            dst.copy_from_slice(&src[s..s + block]);
        }
        for ax in (0..k).rev() {
            idx[ax] += 1;
            s += ss[ax];
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
            s -= ss[ax] * to[ax];
        }
    }
    out
}

fn sum_to_data(src: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    let rank = from.len();
    let offset = rank - to.len();
    // Destination extents aligned to the input rank; reduced axes advance by 0.
    let mut at = vec![1usize; rank];
    at[offset..].copy_from_slice(to);
    let ts = strides(&at);
    let ds: Vec<usize> = (0..rank).map(|i| if at[i] == 1 { 0 } else { ts[i] }).collect();
    let out_len = to.iter().product::<usize>().max(1);
    let mut acc = vec![0.0f64; out_len];
    if src.is_empty() {
        return acc.into_iter().map(|v| v as f32).collect();
    }
    // Longest suffix that is either preserved (block add) or reduced (block
    // sum); prefix axes walk an odometer.
    let mut copy_k = rank;
    while copy_k > 0 && at[copy_k - 1] == from[copy_k - 1] {
        copy_k -= 1;
    }
    let mut red_k = rank;
    while red_k > 0 && at[red_k - 1] == 1 {
        red_k -= 1;
    }
    let (k, reduce) = if red_k < copy_k { (red_k, true) } else { (copy_k, false) };
    let block: usize = from[k..].iter().product();
    let n_blocks: usize = from[..k].iter().product();
    let mut idx = vec![0usize; k];
    let mut d = 0usize;
    for bi in 0..n_blocks {
        let sblk = &src[bi * block..(bi + 1) * block];
        if reduce {
            let mut s = 0.0f64;
            for &v in sblk {
                s += v as f64;
            }
            acc[d] += s;
        } else {
            for (a, &v) in acc[d..d + block].iter_mut().zip(sblk) {
                *a += v as f64;
            }
        }
        for ax in (0..k).rev() {
            idx[ax] += 1;
            d += ds[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            d -= ds[ax] * from[ax];
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

impl Op {
    /// Gradients w.r.t. each input slot given the output cotangent `g`.
    /// `operands` are the saved inputs reattached to the tape; `out` is the
    /// saved output. Slots returning `None` receive no gradient.
    pub(crate) fn backward(&self, g: &Tensor, operands: &[Tensor], out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(match self {
            Op::Watch => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => vec![
                Some(g.mul(&operands[1])?),
                Some(g.mul(&operands[0])?),
            ],
            Op::Div => {
                let (a, b) = (&operands[0], &operands[1]);
                let ga = g.div(b)?;
                let gb = g.mul(a)?.div(&b.square())?.scale(-1.0);
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::AddConst(_) => vec![Some(g.clone())],
            Op::Abs => {
                let mask: Vec<f32> = operands[0]
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(operands[0].shape(), mask))?)]
            }
            Op::Square => vec![Some(g.mul(&operands[0])?.scale(2.0))],
            Op::Sqrt => vec![Some(g.div(&out.scale(2.0))?)],
            Op::Softplus => vec![Some(g.mul(&operands[0].sigmoid())?)],
            Op::Sigmoid => {
                let one_minus = out.scale(-1.0).add_const(1.0);
                vec![Some(g.mul(out)?.mul(&one_minus)?)]
            }
            Op::Silu => {
                let x = &operands[0];
                let s = x.sigmoid();
                let inner = x.mul(&s.scale(-1.0).add_const(1.0))?.add_const(1.0);
                vec![Some(g.mul(&s)?.mul(&inner)?)]
            }
            Op::LeakyRelu(slope) => {
                let mask: Vec<f32> = operands[0]
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { *slope })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(operands[0].shape(), mask))?)]
            }
            Op::Clamp { lo, hi } => {
                let mask: Vec<f32> = operands[0]
                    .data()
                    .iter()
                    .map(|&x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(operands[0].shape(), mask))?)]
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (&operands[0], &operands[1]);
                let ga = if !ta {
                    g.matmul(b, false, !tb)?
                } else {
                    b.matmul(g, *tb, true)?
                };
                let gb = if !tb {
                    a.matmul(g, !ta, false)?
                } else {
                    g.matmul(a, true, *ta)?
                };
                vec![Some(ga), Some(gb)]
            }
            Op::Reshape => vec![Some(g.reshape(operands[0].shape())?)],
            Op::BroadcastTo => vec![Some(g.sum_to_shape(operands[0].shape())?)],
            Op::SumToShape => vec![Some(g.broadcast_to(operands[0].shape())?)],
            Op::Concat { axis } => {
                let mut grads = Vec::with_capacity(operands.len());
                let mut start = 0;
                for p in operands {
                    let len = p.shape()[*axis];
                    grads.push(Some(g.narrow(*axis, start, len)?));
                    start += len;
                }
                grads
            }
            Op::Narrow { axis, start, len } => {
                let full = operands[0].shape()[*axis];
                vec![Some(g.pad_axis(*axis, *start, full - start - len)?)]
            }
            Op::PadAxis { axis, before } => {
                let len = operands[0].shape()[*axis];
                vec![Some(g.narrow(*axis, *before, len)?)]
            }
            Op::UpsampleNearest2 { spatial } => vec![Some(g.sum_pool2(*spatial)?)],
            Op::SumPool2 { spatial } => vec![Some(g.upsample_nearest2(*spatial)?)],
            Op::IndexRows { indices } => {
                vec![Some(g.scatter_rows(indices, operands[0].shape()[0])?)]
            }
            Op::ScatterRows { indices, .. } => vec![Some(g.index_rows(indices)?)],
            Op::EstimateX0 { a, b } => {
                vec![Some(g.scale(1.0 / a)), Some(g.scale(-b / a))]
            }
            Op::Conv { stride, pad } => {
                let (x, w) = (&operands[0], &operands[1]);
                let in_sp = &x.shape()[2..];
                let k = w.shape()[2];
                let gx = g.conv_back_input(w, *stride, *pad, in_sp)?;
                let gw = g.conv_back_kernel(x, *stride, *pad, k)?;
                vec![Some(gx), Some(gw)]
            }
            Op::ConvBackInput { stride, pad } => {
                let (y, w) = (&operands[0], &operands[1]);
                let k = w.shape()[2];
                let gy = g.conv(w, *stride, *pad)?;
                let gw = y.conv_back_kernel(g, *stride, *pad, k)?;
                vec![Some(gy), Some(gw)]
            }
            Op::ConvBackKernel { stride, pad } => {
                let (y, x) = (&operands[0], &operands[1]);
                let in_sp = &x.shape()[2..];
                let gy = x.conv(g, *stride, *pad)?;
                let gx = y.conv_back_input(g, *stride, *pad, in_sp)?;
                vec![Some(gy), Some(gx)]
            }
        })
    }
}

fn split_conv_input<'a>(shape: &'a [usize], op: &'static str) -> Result<(usize, usize, &'a [usize])> {
    if shape.len() != 4 && shape.len() != 5 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected [N,C,spatial...] with 2 or 3 spatial dims, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], &shape[2..]))
}

fn split_conv_kernel(shape: &[usize], spatial: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() != spatial + 2 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel rank {} does not match spatial rank {spatial}", shape.len()),
        });
    }
    let k = shape[2];
    if shape[2..].iter().any(|&e| e != k) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("non-square kernel {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], k))
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tape};
    use super::*;

    fn close(a: f32, b: f32) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn add_example() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn softplus_at_zero() {
        close(Tensor::scalar(0.0).softplus().item(), std::f32::consts::LN_2);
    }

    #[test]
    fn clamp_values_and_gradient_mask() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(&[4], vec![-2.0, 0.5, 1.0, 3.0]));
        let y = x.clamp(-1.25, 1.25);
        assert_eq!(y.to_vec(), vec![-1.25, 0.5, 1.0, 1.25]);
        let loss = y.sum().unwrap();
        let grads = backward(&loss, false).unwrap();
        let gx = &grads[&x.node_id().unwrap()];
        assert_eq!(gx.to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_trailing_alignment() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_backward_sums() {
        let tape = Tape::new();
        let b = tape.watch(&Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let a = Tensor::ones(&[3, 2]);
        let y = a.mul(&b).unwrap().sum().unwrap();
        let grads = backward(&y, false).unwrap();
        assert_eq!(grads[&b.node_id().unwrap()].to_vec(), vec![3.0, 3.0]);
    }

    #[test]
    fn matmul_and_grads() {
        let tape = Tape::new();
        let a = tape.watch(&Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.watch(&Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = a.matmul(&b, false, false).unwrap();
        assert_eq!(y.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
        let s = y.sum().unwrap();
        let grads = backward(&s, false).unwrap();
        // d(sum)/dA = ones @ B^T
        assert_eq!(grads[&a.node_id().unwrap()].to_vec(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads[&b.node_id().unwrap()].to_vec(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn concat_narrow_round_trip() {
        let tape = Tape::new();
        let a = tape.watch(&Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let b = tape.watch(&Tensor::from_vec(&[1, 3], vec![3.0, 4.0, 5.0]));
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let back = c.narrow(1, 2, 3).unwrap();
        assert_eq!(back.to_vec(), vec![3.0, 4.0, 5.0]);
        let s = back.sum().unwrap();
        let grads = backward(&s, false).unwrap();
        assert_eq!(grads[&b.node_id().unwrap()].to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(grads[&a.node_id().unwrap()].to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn upsample_pool_adjoint_shapes() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let up = x.upsample_nearest2(2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert_eq!(up.data()[0..4], [1.0, 1.0, 2.0, 2.0]);
        let down = up.sum_pool2(2).unwrap();
        assert_eq!(down.to_vec(), vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn index_scatter_rows() {
        let tape = Tape::new();
        let table = tape.watch(&Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = table.index_rows(&[2, 0, 2]).unwrap();
        assert_eq!(picked.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = picked.sum().unwrap();
        let grads = backward(&s, false).unwrap();
        assert_eq!(
            grads[&table.node_id().unwrap()].to_vec(),
            vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn estimate_x0_example() {
        // alpha_bar = 0.25: (1 - sqrt(0.75)*0.5) / 0.5 = 2 - sqrt(0.75)
        let xt = Tensor::scalar(1.0);
        let eh = Tensor::scalar(0.5);
        let x0 = xt.estimate_x0_fused(&eh, 0.25f64.sqrt(), 0.75f64.sqrt()).unwrap();
        close(x0.item(), 2.0 - 0.75f32.sqrt());
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(x.conv(&w, 1, 1).is_err());
    }

    #[test]
    fn conv_forward_and_grad_flow() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.watch(&Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
        let grads = backward(&y.sum().unwrap(), false).unwrap();
        assert_eq!(grads[&x.node_id().unwrap()].to_vec(), vec![1.0; 9]);
        assert_eq!(grads[&w.node_id().unwrap()].to_vec(), vec![1.0; 9]);
    }

    #[test]
    fn swap_symmetry_of_leaky_relu_masks() {
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 2.0]);
        let y = x.leaky_relu(0.2);
        assert_eq!(y.to_vec(), vec![-0.4, -0.1, 0.5, 2.0]);
    }
}
