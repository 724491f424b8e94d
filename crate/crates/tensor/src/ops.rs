//! Forward rules for every primitive. Backward rules live in `grad`.

use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tape::{Op, Var};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_apply<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| dim_err(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Splits `shape` around `axis` into (outer, axis size, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(Rc::new(value), op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.same_tape(other);
        let tracked = self.requires_grad() || other.requires_grad();
        self.tape.push(Rc::new(value), op, tracked)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = broadcast_apply("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary(&other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = broadcast_apply("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary(&other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = broadcast_apply("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary(&other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let denom = other.value();
        if denom.data().iter().any(|v| *v == T::zero()) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let v = broadcast_apply("div", &self.value(), &denom, |a, b| a / b)?;
        Ok(self.binary(&other, v, Op::Div(self.id, other.id)))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id))
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: T) -> Var<'t, T> {
        self.neg().add_scalar(c)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        let v = self.value().map(|v| v.exp());
        if !v.is_finite() {
            return Err(TensorError::Domain {
                op: "exp",
                detail: "overflow to a non-finite value".into(),
            });
        }
        Ok(self.unary(v, Op::Exp(self.id)))
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x.map(|v| v.ln()), Op::Log(self.id)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(TensorError::Parameter(format!(
                "axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::new(shape, out)?, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64)))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes inside the closed
    /// interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.value().map(|v| v.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Picks `self[i, index[i]]` from a `[batch, classes]` tensor.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 2 || x.shape()[0] != index.len() {
            return Err(dim_err("gather", x.shape(), &[index.len()]));
        }
        let c = x.shape()[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(TensorError::Parameter(format!(
                "gather index {bad} out of range for {c} classes"
            )));
        }
        let v: Vec<T> = index.iter().enumerate().map(|(i, &j)| x.data()[i * c + j]).collect();
        Ok(self.unary(
            Tensor::from_vec(v),
            Op::Gather(self.id, Rc::from(index.to_vec())),
        ))
    }

    /// Maximum over `axis`; ties route the gradient to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() || x.shape()[axis] == 0 {
            return Err(TensorError::Parameter(format!(
                "max over axis {axis} of shape {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let d = x.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let k = (o * n + j) * inner + i;
                    if d[k] > d[best] {
                        best = k;
                    }
                }
                vals.push(d[best]);
                arg.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Tensor::new(shape, vals)?, Op::MaxAxis(self.id, arg)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(dim_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::row_major(a.data(), m, k),
            MatView::row_major(b.data(), k, n),
            T::zero(),
            &mut out,
        );
        Ok(self.binary(&other, Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, other.id)))
    }

    /// NCHW convolution with a square `[O, C, k, k]` kernel, zero padding
    /// and stride 1 or 2.
    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        if !(1..=2).contains(&stride) {
            return Err(TensorError::Parameter(format!("conv2d stride {stride} not in 1..=2")));
        }
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(dim_err("conv2d", x.shape(), w.shape()));
        }
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let geom = ConvGeom::new(x.shape(), k, stride, pad).ok_or_else(|| dim_err("conv2d", x.shape(), w.shape()))?;
        let cols = conv::im2col(x.data(), &geom);
        let mut mat = vec![T::zero(); o * geom.columns()];
        gemm(
            MatView::row_major(w.data(), o, geom.patch()),
            MatView::row_major(&cols, geom.patch(), geom.columns()),
            T::zero(),
            &mut mat,
        );
        let mut out = conv::channels_to_batch(&mat, o, geom.n, geom.positions());
        let mut tracked = self.requires_grad() || weight.requires_grad();
        if let Some(b) = bias {
            self.same_tape(&b);
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(dim_err("conv2d bias", bv.shape(), &[o]));
            }
            let p = geom.positions();
            for (idx, chunk) in out.chunks_mut(p).enumerate() {
                let bo = bv.data()[idx % o];
                chunk.iter_mut().for_each(|v| *v = *v + bo);
            }
            tracked |= b.requires_grad();
        }
        let value = Tensor::new(vec![geom.n, o, geom.oh, geom.ow], out)?;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            stride,
            pad,
            cols: weight.requires_grad().then_some(cols),
        };
        Ok(self.tape.push(Rc::new(value), op, tracked))
    }

    /// Non-overlapping average pooling with a `size x size` window.
    pub fn avg_pool2d(&self, size: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 4 || size == 0 || x.shape()[2] % size != 0 || x.shape()[3] % size != 0 {
            return Err(dim_err("avg_pool2d", x.shape(), &[size, size]));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        let norm = T::one() / T::lit((size * size) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let d = &mut out[plane * oh * ow + (y / size) * ow + xx / size];
                    *d = *d + src[y * w + xx] * norm;
                }
            }
        }
        Ok(self.unary(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool(self.id, size)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let rows = s.first().copied().unwrap_or(1);
        self.reshape(vec![rows, s.iter().skip(1).product()])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| {
            TensorError::Parameter("softmax of a rank-0 tensor".into())
        })?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        Ok(self.unary(Tensor::new(x.shape().to_vec(), out)?, Op::Softmax(self.id)))
    }
}

/// Temperature-scaled softmax over the class (last) axis: `softmax(z / tau)`.
pub fn softmax_t<'t, T: Scalar>(logits: Var<'t, T>, tau: T) -> Result<Var<'t, T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(TensorError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let shape = logits.shape();
    if shape.last().copied().unwrap_or(0) < 2 {
        return Err(TensorError::Parameter(format!(
            "softmax needs at least 2 classes, got shape {shape:?}"
        )));
    }
    if tau == T::one() {
        logits.softmax()
    } else {
        logits.scale(T::one() / tau).softmax()
    }
}
