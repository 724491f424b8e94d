//! im2col lowering for 2-D convolution over NCHW tensors.
//!
//! Columns are laid out as `[C*k*k, N*OH*OW]`, so the convolution becomes one
//! `[O, C*k*k] x [C*k*k, N*OH*OW]` product.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], k: usize, stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn columns(&self) -> usize {
        self.n * self.positions()
    }

    /// Input coordinate for output position `o` and kernel offset `ki`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn src(&self, o: usize, ki: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + ki).checked_sub(self.pad)?;
        (v < extent).then_some(v)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.columns();
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let base = n * p + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst[base + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.columns();
    let p = g.positions();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.n {
                    let off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let base = n * p + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                let d = &mut x[off + iy * g.w + ix];
                                *d = *d + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, N*P]` -> `[N, O, P]`.
pub(crate) fn channels_to_batch<T: Scalar>(m: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..(b * o + oc + 1) * p]
                .copy_from_slice(&m[oc * n * p + b * p..oc * n * p + (b + 1) * p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`.
pub(crate) fn batch_to_channels<T: Scalar>(t: &[T], o: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for oc in 0..o {
        for b in 0..n {
            out[oc * n * p + b * p..oc * n * p + (b + 1) * p]
                .copy_from_slice(&t[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    out
}
