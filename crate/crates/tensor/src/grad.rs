//! Backward rules, one arm per primitive.

use crate::conv::{self, ConvGeom};
use crate::ops::axis_split;
use crate::scalar::{gemm, MatView, Scalar};
use crate::tape::{Node, NodeId, Op};
use crate::tensor::{broadcast_strides, for_each_broadcast, unbroadcast, Tensor};

type Slots<T> = Vec<Option<Tensor<T>>>;

fn accumulate<T: Scalar>(nodes: &[Node<T>], slots: &mut Slots<T>, id: NodeId, g: Tensor<T>) {
    if !nodes[id.0].tracked {
        return;
    }
    match &mut slots[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants<T>(nodes: &[Node<T>], id: NodeId) -> bool {
    nodes[id.0].tracked
}

/// Gradients of a broadcasting product/quotient with respect to one operand:
/// `acc[i_self] += g[o] * f(self[i_self], other[i_other])`.
fn broadcast_partial<T: Scalar>(
    g: &Tensor<T>,
    this: &Tensor<T>,
    other: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let out = g.shape();
    let s_this = broadcast_strides(this.shape(), out);
    let s_other = broadcast_strides(other.shape(), out);
    let mut acc = Tensor::zeros(this.shape().to_vec());
    let (gd, td, od) = (g.data(), this.data(), other.data());
    let dst = acc.data_mut();
    for_each_broadcast(out, &s_this, &s_other, |o, i, j| {
        dst[i] = dst[i] + gd[o] * f(td[i], od[j]);
    });
    acc
}

pub(crate) fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: Tensor<T>, slots: &mut Slots<T>) {
    let val = |id: NodeId| &*nodes[id.0].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, slots, *a, unbroadcast(&g, val(*a).shape()));
            }
            if wants(nodes, *b) {
                accumulate(nodes, slots, *b, unbroadcast(&g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, slots, *a, unbroadcast(&g, val(*a).shape()));
            }
            if wants(nodes, *b) {
                let gb = unbroadcast(&g, val(*b).shape()).map(|v| -v);
                accumulate(nodes, slots, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let ga = broadcast_partial(&g, val(*a), val(*b), |_, y| y);
                accumulate(nodes, slots, *a, ga);
            }
            if wants(nodes, *b) {
                let gb = broadcast_partial(&g, val(*b), val(*a), |_, x| x);
                accumulate(nodes, slots, *b, gb);
            }
        }
        Op::Div(a, b) => {
            if wants(nodes, *a) {
                let ga = broadcast_partial(&g, val(*a), val(*b), |_, y| T::one() / y);
                accumulate(nodes, slots, *a, ga);
            }
            if wants(nodes, *b) {
                let gb = broadcast_partial(&g, val(*b), val(*a), |y, x| -x / (y * y));
                accumulate(nodes, slots, *b, gb);
            }
        }
        Op::Neg(a) => accumulate(nodes, slots, *a, g.map(|v| -v)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, slots, *a, g.map(|v| v * c))
        }
        Op::AddScalar(a) => accumulate(nodes, slots, *a, g),
        Op::Relu(a) => {
            let ga = g
                .zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })
                .expect("relu grad shape");
            accumulate(nodes, slots, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.zip_map(&node.value, |g, y| g * y).expect("exp grad shape");
            accumulate(nodes, slots, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.zip_map(val(*a), |g, x| g / x).expect("log grad shape");
            accumulate(nodes, slots, *a, ga);
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate(nodes, slots, *a, Tensor::full(val(*a).shape().to_vec(), s));
        }
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let (outer, n, inner) = axis_split(shape, *axis);
            let mut ga = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for j in 0..n {
                    ga[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                }
            }
            accumulate(nodes, slots, *a, Tensor::new(shape.to_vec(), ga).expect("sum_axis grad"));
        }
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let ga = g
                .zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() })
                .expect("clamp grad shape");
            accumulate(nodes, slots, *a, ga);
        }
        Op::Gather(a, index) => {
            let shape = val(*a).shape();
            let c = shape[1];
            let mut ga = Tensor::zeros(shape.to_vec());
            for (i, &j) in index.iter().enumerate() {
                ga.data_mut()[i * c + j] = g.data()[i];
            }
            accumulate(nodes, slots, *a, ga);
        }
        Op::MaxAxis(a, arg) => {
            let mut ga = Tensor::zeros(val(*a).shape().to_vec());
            for (gv, &k) in g.data().iter().zip(arg) {
                ga.data_mut()[k] = ga.data()[k] + *gv;
            }
            accumulate(nodes, slots, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let gm = MatView::row_major(g.data(), m, n);
            if wants(nodes, *a) {
                let mut ga = vec![T::zero(); m * k];
                gemm(gm, MatView::row_major(bv.data(), k, n).t(), T::zero(), &mut ga);
                accumulate(nodes, slots, *a, Tensor::new(vec![m, k], ga).expect("matmul grad"));
            }
            if wants(nodes, *b) {
                let mut gb = vec![T::zero(); k * n];
                gemm(MatView::row_major(av.data(), m, k).t(), gm, T::zero(), &mut gb);
                accumulate(nodes, slots, *b, Tensor::new(vec![k, n], gb).expect("matmul grad"));
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let (o, k) = (wv.shape()[0], wv.shape()[2]);
            let geom = ConvGeom::new(xv.shape(), k, *stride, *pad).expect("conv geometry");
            let (n, p) = (geom.n, geom.positions());
            let gmat = conv::batch_to_channels(g.data(), o, n, p);
            let gview = MatView::row_major(&gmat, o, geom.columns());
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let gb: Vec<T> = gmat.chunks(geom.columns()).map(|r| r.iter().copied().sum()).collect();
                    accumulate(nodes, slots, *b, Tensor::from_vec(gb));
                }
            }
            if wants(nodes, *w) {
                let cols = cols.as_ref().expect("conv columns saved for tracked weight");
                let mut gw = vec![T::zero(); o * geom.patch()];
                gemm(
                    gview,
                    MatView::row_major(cols, geom.patch(), geom.columns()).t(),
                    T::zero(),
                    &mut gw,
                );
                accumulate(nodes, slots, *w, Tensor::new(wv.shape().to_vec(), gw).expect("conv grad"));
            }
            if wants(nodes, *x) {
                let mut gcols = vec![T::zero(); geom.patch() * geom.columns()];
                gemm(
                    MatView::row_major(wv.data(), o, geom.patch()).t(),
                    gview,
                    T::zero(),
                    &mut gcols,
                );
                let gx = conv::col2im(&gcols, &geom);
                accumulate(nodes, slots, *x, Tensor::new(xv.shape().to_vec(), gx).expect("conv grad"));
            }
        }
        Op::AvgPool(a, size) => {
            let shape = val(*a).shape();
            let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
            let (oh, ow) = (h / size, w / size);
            let norm = T::one() / T::lit((size * size) as f64);
            let mut ga = vec![T::zero(); nc * h * w];
            for plane in 0..nc {
                for y in 0..h {
                    for xx in 0..w {
                        ga[plane * h * w + y * w + xx] = g.data()[plane * oh * ow + (y / size) * ow + xx / size] * norm;
                    }
                }
            }
            accumulate(nodes, slots, *a, Tensor::new(shape.to_vec(), ga).expect("pool grad"));
        }
        Op::Reshape(a) => {
            let ga = g.reshape(val(*a).shape().to_vec()).expect("reshape grad");
            accumulate(nodes, slots, *a, ga);
        }
        Op::Softmax(a) => {
            let p = &node.value;
            let c = *p.shape().last().expect("softmax rank");
            let mut ga = vec![T::zero(); p.numel()];
            for ((dst, pr), gr) in ga.chunks_mut(c).zip(p.data().chunks(c)).zip(g.data().chunks(c)) {
                let dot: T = pr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                for ((d, &p), &g) in dst.iter_mut().zip(pr).zip(gr) {
                    *d = p * (g - dot);
                }
            }
            accumulate(nodes, slots, *a, Tensor::new(p.shape().to_vec(), ga).expect("softmax grad"));
        }
    }
}
