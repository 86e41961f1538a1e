//! Forward kernels and their backward closures.
//!
//! Binary elementwise ops support suffix broadcasting: the right operand's
//! shape must equal the trailing dimensions of the left operand's shape.
//! Convolutions are 1-D over the last axis, cross-correlation orientation
//! (`kernel[mid]` multiplies the current frame under same-padding).

use std::sync::Arc;

use super::{strides, Element, Tensor};
use crate::error::{Error, Result};

/// Temporal padding mode for 1-D convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding on both sides; requires odd kernel size. Output length
    /// is `ceil(T / stride)`.
    Same,
    /// Zero padding on the left only; the kernel's last tap multiplies the
    /// current frame. Output length is `ceil(T / stride)`.
    Causal,
}

fn shapes_suffix_compatible(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn binary<E, FF, FA, FB>(
    name: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    fwd: FF,
    da: FA,
    db: FB,
) -> Result<Tensor<E>>
where
    E: Element,
    FF: Fn(E, E) -> E,
    FA: Fn(E, E) -> E + 'static,
    FB: Fn(E, E) -> E + 'static,
{
    if !shapes_suffix_compatible(a.shape(), b.shape()) {
        return Err(Error::shape(
            name,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let na = a.numel();
    let nb = b.numel();
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(na);
    for i in 0..na {
        out.push(fwd(ad[i], bd[i % nb]));
    }
    let (aa, bb) = (a.shared_data(), b.shared_data());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            let mut ga = Vec::with_capacity(na);
            let mut gb = vec![E::zero(); nb];
            for i in 0..na {
                let (av, bv) = (aa[i], bb[i % nb]);
                ga.push(g[i] * da(av, bv));
                gb[i % nb] = gb[i % nb] + g[i] * db(av, bv);
            }
            vec![Some(ga), Some(gb)]
        },
    ))
}

fn unary<E, FF, FD>(x: &Tensor<E>, fwd: FF, deriv: FD) -> Tensor<E>
where
    E: Element,
    FF: Fn(E) -> E,
    // deriv(input, output) -> d out / d in
    FD: Fn(E, E) -> E + 'static,
{
    let xd = x.data();
    let out: Vec<E> = xd.iter().map(|&v| fwd(v)).collect();
    let xa = x.shared_data();
    let oa = Arc::new(out.clone());
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let ga: Vec<E> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * deriv(xa[i], oa[i]))
            .collect();
        vec![Some(ga)]
    })
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary("add", self, rhs, |a, b| a + b, |_, _| E::one(), |_, _| E::one())
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary(
            "sub",
            self,
            rhs,
            |a, b| a - b,
            |_, _| E::one(),
            |_, _| -E::one(),
        )
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary("mul", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b| E::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise maximum; on ties the gradient routes to `self`.
    pub fn maximum(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary(
            "maximum",
            self,
            rhs,
            |a, b| if a >= b { a } else { b },
            |a, b| if a >= b { E::one() } else { E::zero() },
            |a, b| if a >= b { E::zero() } else { E::one() },
        )
    }

    /// Elementwise minimum; on ties the gradient routes to `self`.
    pub fn minimum(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        binary(
            "minimum",
            self,
            rhs,
            |a, b| if a <= b { a } else { b },
            |a, b| if a <= b { E::one() } else { E::zero() },
            |a, b| if a <= b { E::zero() } else { E::one() },
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        unary(self, |v| -v, |_, _| -E::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::of_f64(c);
        unary(self, move |v| v * ce, move |_, _| ce)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let ce = E::of_f64(c);
        unary(self, move |v| v + ce, |_, _| E::one())
    }

    pub fn relu(&self) -> Tensor<E> {
        unary(
            self,
            |v| if v > E::zero() { v } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    /// GELU with the tanh approximation (documented so gradient oracles
    /// match the forward exactly).
    pub fn gelu(&self) -> Tensor<E> {
        unary(
            self,
            |v| E::of_f64(gelu_f(v.as_f64())),
            |x, _| E::of_f64(gelu_df(x.as_f64())),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<E> {
        unary(self, |v| v.ln(), |x, _| E::one() / x)
    }

    /// Elementwise power with constant exponent; domain x > 0.
    pub fn powf(&self, p: f64) -> Tensor<E> {
        let pe = E::of_f64(p);
        unary(
            self,
            move |v| v.powf(pe),
            move |x, _| pe * x.powf(pe - E::one()),
        )
    }

    /// softplus(x) = ln(1 + e^x), computed stably; derivative sigmoid(x).
    pub fn softplus(&self) -> Tensor<E> {
        unary(
            self,
            |v| {
                let x = v.as_f64();
                E::of_f64(x.max(0.0) + (-x.abs()).exp().ln_1p())
            },
            |x, _| {
                let x = x.as_f64();
                E::of_f64(1.0 / (1.0 + (-x).exp()))
            },
        )
    }

    pub fn clamp_min(&self, c: f64) -> Tensor<E> {
        let ce = E::of_f64(c);
        unary(
            self,
            move |v| if v < ce { ce } else { v },
            move |x, _| if x < ce { E::zero() } else { E::one() },
        )
    }

    pub fn clamp_max(&self, c: f64) -> Tensor<E> {
        let ce = E::of_f64(c);
        unary(
            self,
            move |v| if v > ce { ce } else { v },
            move |x, _| if x > ce { E::zero() } else { E::one() },
        )
    }

    fn lane_dims(&self, axis: usize) -> (usize, usize, usize) {
        let sh = self.shape();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        (outer, len, inner)
    }

    /// Softmax along `axis`; each lane sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = self.lane_dims(axis);
        let xd = self.data();
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = xd[at(0)];
                for j in 1..len {
                    if xd[at(j)] > mx {
                        mx = xd[at(j)];
                    }
                }
                let mut sum = E::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let oa = Arc::new(out.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = E::zero();
                        for j in 0..len {
                            dot = dot + g[at(j)] * oa[at(j)];
                        }
                        for j in 0..len {
                            gx[at(j)] = oa[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "log_softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = self.lane_dims(axis);
        let xd = self.data();
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = xd[at(0)];
                for j in 1..len {
                    if xd[at(j)] > mx {
                        mx = xd[at(j)];
                    }
                }
                let mut sum = E::zero();
                for j in 0..len {
                    sum = sum + (xd[at(j)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..len {
                    out[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        let oa = Arc::new(out.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut gsum = E::zero();
                        for j in 0..len {
                            gsum = gsum + g[at(j)];
                        }
                        for j in 0..len {
                            gx[at(j)] = g[at(j)] - oa[at(j)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Zero-mean unit-variance normalization along one axis (no affine
    /// terms; compose with channel scale/shift where needed). eps = 1e-5.
    pub fn layer_norm(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "layer_norm",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let eps = E::of_f64(1e-5);
        let (outer, len, inner) = self.lane_dims(axis);
        let n = E::of_f64(len as f64);
        let xd = self.data();
        let mut out = vec![E::zero(); xd.len()];
        let mut inv_stds = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mean = E::zero();
                for j in 0..len {
                    mean = mean + xd[at(j)];
                }
                mean = mean / n;
                let mut var = E::zero();
                for j in 0..len {
                    let d = xd[at(j)] - mean;
                    var = var + d * d;
                }
                var = var / n;
                let inv = E::one() / (var + eps).sqrt();
                inv_stds[o * inner + i] = inv;
                for j in 0..len {
                    out[at(j)] = (xd[at(j)] - mean) * inv;
                }
            }
        }
        let oa = Arc::new(out.clone());
        let inv_a = Arc::new(inv_stds);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let inv = inv_a[o * inner + i];
                        let mut gmean = E::zero();
                        let mut gydot = E::zero();
                        for j in 0..len {
                            gmean = gmean + g[at(j)];
                            gydot = gydot + g[at(j)] * oa[at(j)];
                        }
                        gmean = gmean / n;
                        gydot = gydot / n;
                        for j in 0..len {
                            gx[at(j)] = inv * (g[at(j)] - gmean - oa[at(j)] * gydot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean over the given axes; the reduced axes are dropped from the
    /// shape (a full reduction yields shape `[1]`).
    pub fn mean_pool(&self, axes: &[usize]) -> Result<Tensor<E>> {
        for &a in axes {
            if a >= self.rank() {
                return Err(Error::shape(
                    "mean_pool",
                    format!("axis {a} out of range for shape {:?}", self.shape()),
                ));
            }
        }
        let sh = self.shape().to_vec();
        let rank = sh.len();
        let dropped = |d: usize| axes.contains(&d);
        let mut out_shape: Vec<usize> = (0..rank).filter(|&d| !dropped(d)).map(|d| sh[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_numel: usize = out_shape.iter().product();
        let count = self.numel() / out_numel;
        let in_strides = strides(&sh);
        let out_strides = strides(&out_shape);

        // out flat index for each input flat index
        let map_out = {
            let sh = sh.clone();
            let in_strides = in_strides.clone();
            let out_strides = out_strides.clone();
            let axes: Vec<usize> = axes.to_vec();
            move |i: usize| -> usize {
                let mut rem = i;
                let mut oi = 0usize;
                let mut od = 0usize;
                for d in 0..sh.len() {
                    let c = rem / in_strides[d];
                    rem %= in_strides[d];
                    if !axes.contains(&d) {
                        oi += c * out_strides[od];
                        od += 1;
                    }
                }
                oi
            }
        };

        let xd = self.data();
        let mut out = vec![E::zero(); out_numel];
        for (i, &v) in xd.iter().enumerate() {
            out[map_out(i)] = out[map_out(i)] + v;
        }
        let ce = E::of_f64(1.0 / count as f64);
        for v in out.iter_mut() {
            *v = *v * ce;
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = Vec::with_capacity(n_in);
                for i in 0..n_in {
                    gx.push(g[map_out(i)] * ce);
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = self.lane_dims(axis);
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = self.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[(o * len + j) * inner + i];
                }
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let n = self.numel();
        let s = self.data().iter().fold(E::zero(), |acc, &v| acc + v);
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Same data, new shape (element count preserved). Zero-copy.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = new_shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), new_shape),
            ));
        }
        let out = self.to_vec();
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            out,
            vec![self.clone()],
            move |g| vec![Some(g.to_vec())],
        ))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("invalid permutation {:?} for shape {:?}", perm, self.shape()),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_str = strides(&in_shape);
        let out_str = strides(&out_shape);
        let n = self.numel();
        let perm_v = perm.to_vec();

        let map_in = move |oi: usize, out_str: &[usize], in_str: &[usize]| -> usize {
            let mut rem = oi;
            let mut ii = 0usize;
            for d in 0..out_str.len() {
                let c = rem / out_str[d];
                rem %= out_str[d];
                ii += c * in_str[perm_v[d]];
            }
            ii
        };

        let xd = self.data();
        let mut out = vec![E::zero(); n];
        for oi in 0..n {
            out[oi] = xd[map_in(oi, &out_str, &in_str)];
        }
        let (os2, is2) = (out_str.clone(), in_str.clone());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); n];
                for oi in 0..n {
                    gx[map_in(oi, &os2, &is2)] = g[oi];
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "axis {axis} range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, alen, inner) = self.lane_dims(axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let xd = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); outer * alen * inner];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Nearest-neighbour upsampling along `axis` by `factor`, truncated to
    /// `out_len` (output position t reads input position t / factor).
    pub fn repeat_axis(&self, axis: usize, factor: usize, out_len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || factor == 0 {
            return Err(Error::shape(
                "repeat_axis",
                format!("axis {axis}, factor {factor}, shape {:?}", self.shape()),
            ));
        }
        let (outer, alen, inner) = self.lane_dims(axis);
        if out_len > alen * factor {
            return Err(Error::shape(
                "repeat_axis",
                format!("out_len {out_len} exceeds {alen}*{factor}"),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = out_len;
        let xd = self.data();
        let mut out = Vec::with_capacity(outer * out_len * inner);
        for o in 0..outer {
            for t in 0..out_len {
                let src = (o * alen + t / factor) * inner;
                out.extend_from_slice(&xd[src..src + inner]);
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); outer * alen * inner];
                for o in 0..outer {
                    for t in 0..out_len {
                        let dst = (o * alen + t / factor) * inner;
                        let src = (o * out_len + t) * inner;
                        for i in 0..inner {
                            gx[dst + i] = gx[dst + i] + g[src + i];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Linear-interpolation upsampling along `axis` by `factor`, truncated
    /// to `out_len`. Source cell `j` sits at position `j*factor +
    /// (factor-1)/2` of the output grid (the center of the block it
    /// covers); output positions beyond the first/last center clamp.
    pub fn upsample_linear(&self, axis: usize, factor: usize, out_len: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() || factor == 0 {
            return Err(Error::shape(
                "upsample_linear",
                format!("axis {axis}, factor {factor}, shape {:?}", self.shape()),
            ));
        }
        let (outer, alen, inner) = self.lane_dims(axis);
        if out_len > alen * factor {
            return Err(Error::shape(
                "upsample_linear",
                format!("out_len {out_len} exceeds {alen}*{factor}"),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = out_len;
        // precompute (j0, j1, w) per output position
        let mut taps = Vec::with_capacity(out_len);
        for t in 0..out_len {
            let c = (t as f64 - (factor as f64 - 1.0) / 2.0) / factor as f64;
            if c <= 0.0 || alen == 1 {
                taps.push((0usize, 0usize, 0.0));
            } else if c >= (alen - 1) as f64 {
                taps.push((alen - 1, alen - 1, 0.0));
            } else {
                let j0 = c.floor() as usize;
                taps.push((j0, j0 + 1, c - j0 as f64));
            }
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(outer * out_len * inner);
        for o in 0..outer {
            for &(j0, j1, w) in &taps {
                let (w0, w1) = (E::of_f64(1.0 - w), E::of_f64(w));
                let a = (o * alen + j0) * inner;
                let b = (o * alen + j1) * inner;
                for i in 0..inner {
                    out.push(xd[a + i] * w0 + xd[b + i] * w1);
                }
            }
        }
        let taps2 = taps.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); outer * alen * inner];
                for o in 0..outer {
                    for (t, &(j0, j1, w)) in taps2.iter().enumerate() {
                        let (w0, w1) = (E::of_f64(1.0 - w), E::of_f64(w));
                        let src = (o * out_len + t) * inner;
                        let a = (o * alen + j0) * inner;
                        let b = (o * alen + j1) * inner;
                        for i in 0..inner {
                            gx[a + i] = gx[a + i] + g[src + i] * w0;
                            gx[b + i] = gx[b + i] + g[src + i] * w1;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Spatial block-average pooling on `[B,C,T,H,W]` down to `(h0, w0)`.
    /// H and W must be divisible by h0 and w0.
    pub fn pool_hw(&self, h0: usize, w0: usize) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 5 {
            return Err(Error::shape("pool_hw", format!("need rank 5, got {:?}", sh)));
        }
        let (b, c, t, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        if h0 == 0 || w0 == 0 || h % h0 != 0 || w % w0 != 0 {
            return Err(Error::shape(
                "pool_hw",
                format!("grid ({h0},{w0}) does not divide spatial extent ({h},{w})"),
            ));
        }
        let (bh, bw) = (h / h0, w / w0);
        let inv = E::of_f64(1.0 / (bh * bw) as f64);
        let xd = self.data();
        let mut out = vec![E::zero(); b * c * t * h0 * w0];
        for bi in 0..b * c * t {
            let xin = &xd[bi * h * w..(bi + 1) * h * w];
            let oout = &mut out[bi * h0 * w0..(bi + 1) * h0 * w0];
            for i in 0..h {
                for j in 0..w {
                    let oi = (i / bh) * w0 + j / bw;
                    oout[oi] = oout[oi] + xin[i * w + j];
                }
            }
            for v in oout.iter_mut() {
                *v = *v * inv;
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, t, h0, w0],
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); b * c * t * h * w];
                for bi in 0..b * c * t {
                    let gin = &g[bi * h0 * w0..(bi + 1) * h0 * w0];
                    let gout = &mut gx[bi * h * w..(bi + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            gout[i * w + j] = gin[(i / bh) * w0 + j / bw] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Block-copy expansion of `[B,C,T,h0,w0]` back to `(H, W)`: each pooled
    /// cell is copied across its block.
    pub fn broadcast_hw(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 5 {
            return Err(Error::shape(
                "broadcast_hw",
                format!("need rank 5, got {:?}", sh),
            ));
        }
        let (b, c, t, h0, w0) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        if h0 == 0 || w0 == 0 || h % h0 != 0 || w % w0 != 0 {
            return Err(Error::shape(
                "broadcast_hw",
                format!("target ({h},{w}) not divisible by grid ({h0},{w0})"),
            ));
        }
        let (bh, bw) = (h / h0, w / w0);
        let xd = self.data();
        let mut out = vec![E::zero(); b * c * t * h * w];
        for bi in 0..b * c * t {
            let xin = &xd[bi * h0 * w0..(bi + 1) * h0 * w0];
            let oout = &mut out[bi * h * w..(bi + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    oout[i * w + j] = xin[(i / bh) * w0 + j / bw];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, t, h, w],
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![E::zero(); b * c * t * h0 * w0];
                for bi in 0..b * c * t {
                    let gin = &g[bi * h * w..(bi + 1) * h * w];
                    let gout = &mut gx[bi * h0 * w0..(bi + 1) * h0 * w0];
                    for i in 0..h {
                        for j in 0..w {
                            let oi = (i / bh) * w0 + j / bw;
                            gout[oi] = gout[oi] + gin[i * w + j];
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let mut out = vec![E::zero(); m * n];
        mm(self.data(), rhs.data(), &mut out, m, k, n);
        let (aa, bb) = (self.shared_data(), rhs.shared_data());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut ga = vec![E::zero(); m * k];
                mm_abt(g, &bb, &mut ga, m, n, k);
                let mut gb = vec![E::zero(); k * n];
                mm_atb(&aa, g, &mut gb, m, k, n);
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Batched matrix product `[N,m,k] @ [N,k,n]`; with `transpose_rhs`,
    /// rhs is `[N,n,k]` and the product is `a @ bᵀ`.
    pub fn bmm(&self, rhs: &Tensor<E>, transpose_rhs: bool) -> Result<Tensor<E>> {
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] {
            return Err(Error::shape(
                "bmm",
                format!("{:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (nb, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (rk, n) = if transpose_rhs {
            (rhs.shape()[2], rhs.shape()[1])
        } else {
            (rhs.shape()[1], rhs.shape()[2])
        };
        if rk != k {
            return Err(Error::shape(
                "bmm",
                format!(
                    "inner extents disagree: {:?} @ {:?} (transpose_rhs={transpose_rhs})",
                    self.shape(),
                    rhs.shape()
                ),
            ));
        }
        let mut out = vec![E::zero(); nb * m * n];
        for b in 0..nb {
            let a = &self.data()[b * m * k..(b + 1) * m * k];
            let bd = &rhs.data()[b * k * n..(b + 1) * k * n];
            let o = &mut out[b * m * n..(b + 1) * m * n];
            if transpose_rhs {
                mm_abt(a, bd, o, m, k, n);
            } else {
                mm(a, bd, o, m, k, n);
            }
        }
        let (aa, bb) = (self.shared_data(), rhs.shared_data());
        Ok(Tensor::from_op(
            vec![nb, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut ga = vec![E::zero(); nb * m * k];
                let mut gb = vec![E::zero(); nb * k * n];
                for b in 0..nb {
                    let gs = &g[b * m * n..(b + 1) * m * n];
                    let a = &aa[b * m * k..(b + 1) * m * k];
                    let bd = &bb[b * k * n..(b + 1) * k * n];
                    let gav = &mut ga[b * m * k..(b + 1) * m * k];
                    let gbv = &mut gb[b * k * n..(b + 1) * k * n];
                    if transpose_rhs {
                        // out = a @ bᵀ with b stored [n,k]:
                        // ga = g @ b ; gb = gᵀ @ a
                        mm(gs, bd, gav, m, n, k);
                        mm_atb(gs, a, gbv, m, n, k);
                    } else {
                        mm_abt(gs, bd, gav, m, n, k);
                        mm_atb(a, gs, gbv, m, k, n);
                    }
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Multiply by a single-element tensor (differentiable in both).
    pub fn scale_by(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must have one element, got {:?}", s.shape()),
            ));
        }
        let sv = s.data()[0];
        let out: Vec<E> = self.data().iter().map(|&v| v * sv).collect();
        let xa = self.shared_data();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), s.clone()],
            move |g| {
                let gx: Vec<E> = g.iter().map(|&gv| gv * sv).collect();
                let gs = g
                    .iter()
                    .zip(xa.iter())
                    .fold(E::zero(), |acc, (&gv, &xv)| acc + gv * xv);
                vec![Some(gx), Some(vec![gs])]
            },
        ))
    }

    /// Constant one-hot rows: `indices[t]` selects the hot column.
    pub fn one_hot(indices: &[usize], classes: usize) -> Tensor<E> {
        let mut data = vec![E::zero(); indices.len() * classes];
        for (t, &c) in indices.iter().enumerate() {
            assert!(c < classes, "one_hot index {c} out of range {classes}");
            data[t * classes + c] = E::one();
        }
        Tensor::from_vec(&[indices.len(), classes], data).expect("consistent by construction")
    }
}

/// out += a @ b, a: [m,k], b: [k,n]
fn mm<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == E::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out += a @ bᵀ, a: [m,k], b: [n,k]
fn mm_abt<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out += aᵀ @ b, a: [m,k], b: [m,n], out: [k,n]
fn mm_atb<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Affine map along the last axis: `x[.., Cin] @ w[Cin, Cout] (+ b[Cout])`.
pub fn linear<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    if x.rank() == 0 || w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let cin = *x.shape().last().unwrap();
    if w.shape()[0] != cin {
        return Err(Error::shape(
            "linear",
            format!("inner extents disagree: x {:?} vs w {:?}", x.shape(), w.shape()),
        ));
    }
    let cout = w.shape()[1];
    if let Some(bias) = b {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs Cout {}", bias.shape(), cout),
            ));
        }
    }
    let m = x.numel() / cin;
    let mut out = vec![E::zero(); m * cout];
    mm(x.data(), w.data(), &mut out, m, cin, cout);
    if let Some(bias) = b {
        let bd = bias.data();
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o = *o + bv;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = cout;

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    let has_bias = b.is_some();
    let (xa, wa) = (x.shared_data(), w.shared_data());
    Ok(Tensor::from_op(out_shape, out, parents, move |g| {
        let mut gx = vec![E::zero(); m * cin];
        mm_abt(g, &wa, &mut gx, m, cout, cin);
        let mut gw = vec![E::zero(); cin * cout];
        mm_atb(&xa, g, &mut gw, m, cin, cout);
        let mut contribs = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = vec![E::zero(); cout];
            for row in g.chunks(cout) {
                for (acc, &gv) in gb.iter_mut().zip(row) {
                    *acc = *acc + gv;
                }
            }
            contribs.push(Some(gb));
        }
        contribs
    }))
}

fn conv_out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

fn conv_padding(k: usize, dilation: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => {
            if k % 2 == 0 {
                Err(Error::Invalid(format!(
                    "same-padding requires an odd kernel size, got {k}"
                )))
            } else {
                Ok(dilation * (k - 1) / 2)
            }
        }
        Padding::Causal => Ok(dilation * (k - 1)),
    }
}

/// Depthwise temporal convolution: `x[B,C,T]` with one kernel per channel
/// `kernel[C,k]`. Output length is `ceil(T / stride)`.
pub fn dwconv1d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    if x.rank() != 3 || kernel.rank() != 2 || x.shape()[1] != kernel.shape()[0] {
        return Err(Error::shape(
            "dwconv1d",
            format!("x {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    if stride < 1 || dilation < 1 {
        return Err(Error::Invalid(format!(
            "dwconv1d: stride ({stride}) and dilation ({dilation}) must be >= 1"
        )));
    }
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[1];
    let pad = conv_padding(k, dilation, padding)? as isize;
    let t_out = conv_out_len(t, stride);

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![E::zero(); b * c * t_out];
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &xd[(bi * c + ci) * t..(bi * c + ci + 1) * t];
            let krow = &kd[ci * k..(ci + 1) * k];
            let orow = &mut out[(bi * c + ci) * t_out..(bi * c + ci + 1) * t_out];
            for (to, o) in orow.iter_mut().enumerate() {
                let center = (to * stride) as isize;
                let mut acc = E::zero();
                for (j, &kv) in krow.iter().enumerate() {
                    let ti = center + (j * dilation) as isize - pad;
                    if ti >= 0 && (ti as usize) < t {
                        acc = acc + kv * xrow[ti as usize];
                    }
                }
                *o = acc;
            }
        }
    }
    let (xa, ka) = (x.shared_data(), kernel.shared_data());
    Ok(Tensor::from_op(
        vec![b, c, t_out],
        out,
        vec![x.clone(), kernel.clone()],
        move |g| {
            let mut gx = vec![E::zero(); b * c * t];
            let mut gk = vec![E::zero(); c * k];
            for bi in 0..b {
                for ci in 0..c {
                    let xrow = &xa[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    let krow = &ka[ci * k..(ci + 1) * k];
                    let grow = &g[(bi * c + ci) * t_out..(bi * c + ci + 1) * t_out];
                    let gxrow = &mut gx[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    for (to, &gv) in grow.iter().enumerate() {
                        if gv == E::zero() {
                            continue;
                        }
                        let center = (to * stride) as isize;
                        for j in 0..k {
                            let ti = center + (j * dilation) as isize - pad;
                            if ti >= 0 && (ti as usize) < t {
                                gxrow[ti as usize] = gxrow[ti as usize] + krow[j] * gv;
                                gk[ci * k + j] = gk[ci * k + j] + xrow[ti as usize] * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk)]
        },
    ))
}

/// Full 1-D convolution with channel mixing: `x[B,Cin,T]`,
/// `kernel[Cout,Cin,k]`, optional `bias[Cout]`, stride 1.
pub fn conv1d<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    dilation: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    if x.rank() != 3 || kernel.rank() != 3 || x.shape()[1] != kernel.shape()[1] {
        return Err(Error::shape(
            "conv1d",
            format!("x {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    if dilation < 1 {
        return Err(Error::Invalid("conv1d: dilation must be >= 1".into()));
    }
    let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (kernel.shape()[0], kernel.shape()[2]);
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape(
                "conv1d",
                format!("bias {:?} vs Cout {}", bt.shape(), cout),
            ));
        }
    }
    let pad = conv_padding(k, dilation, padding)? as isize;

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![E::zero(); b * cout * t];
    for bi in 0..b {
        for co in 0..cout {
            let orow = &mut out[(bi * cout + co) * t..(bi * cout + co + 1) * t];
            if let Some(bt) = bias {
                let bv = bt.data()[co];
                for o in orow.iter_mut() {
                    *o = bv;
                }
            }
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                for j in 0..k {
                    let kv = kd[(co * cin + ci) * k + j];
                    if kv == E::zero() {
                        continue;
                    }
                    let off = (j * dilation) as isize - pad;
                    let t_lo = (-off).max(0) as usize;
                    let t_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                    for to in t_lo..t_hi {
                        orow[to] = orow[to] + kv * xrow[(to as isize + off) as usize];
                    }
                }
            }
        }
    }
    let mut parents = vec![x.clone(), kernel.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let has_bias = bias.is_some();
    let (xa, ka) = (x.shared_data(), kernel.shared_data());
    Ok(Tensor::from_op(
        vec![b, cout, t],
        out,
        parents,
        move |g| {
            let mut gx = vec![E::zero(); b * cin * t];
            let mut gk = vec![E::zero(); cout * cin * k];
            for bi in 0..b {
                for co in 0..cout {
                    let grow = &g[(bi * cout + co) * t..(bi * cout + co + 1) * t];
                    for ci in 0..cin {
                        let xrow = &xa[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                        let gxrow = &mut gx[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                        for j in 0..k {
                            let kv = ka[(co * cin + ci) * k + j];
                            let off = (j * dilation) as isize - pad;
                            let t_lo = (-off).max(0) as usize;
                            let t_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                            let mut acc = E::zero();
                            for to in t_lo..t_hi {
                                let xi = (to as isize + off) as usize;
                                acc = acc + xrow[xi] * grow[to];
                                gxrow[xi] = gxrow[xi] + kv * grow[to];
                            }
                            gk[(co * cin + ci) * k + j] = gk[(co * cin + ci) * k + j] + acc;
                        }
                    }
                }
            }
            let mut contribs = vec![Some(gx), Some(gk)];
            if has_bias {
                let mut gb = vec![E::zero(); cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let grow = &g[(bi * cout + co) * t..(bi * cout + co + 1) * t];
                        let mut acc = E::zero();
                        for &gv in grow {
                            acc = acc + gv;
                        }
                        gb[co] = gb[co] + acc;
                    }
                }
                contribs.push(Some(gb));
            }
            contribs
        },
    ))
}

/// Scaled dot-product attention. `q: [.., Tq, d]`, `k: [.., Tk, d]`,
/// `v: [.., Tk, dv]` with equal leading dimensions; softmax over keys.
pub fn attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() < 2 || qs.len() != ks.len() || qs.len() != vs.len() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
        ));
    }
    let r = qs.len();
    let lead_q = &qs[..r - 2];
    if lead_q != &ks[..r - 2] || lead_q != &vs[..r - 2] || qs[r - 1] != ks[r - 1]
        || ks[r - 2] != vs[r - 2]
    {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
        ));
    }
    let n: usize = lead_q.iter().product::<usize>().max(1);
    let (tq, d) = (qs[r - 2], qs[r - 1]);
    let (tk, dv) = (vs[r - 2], vs[r - 1]);
    let qf = q.reshape(&[n, tq, d])?;
    let kf = k.reshape(&[n, tk, d])?;
    let vf = v.reshape(&[n, tk, dv])?;
    let scores = qf.bmm(&kf, true)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax(2)?;
    let out = weights.bmm(&vf, false)?;
    let mut out_shape = lead_q.to_vec();
    out_shape.push(tq);
    out_shape.push(dv);
    out.reshape(&out_shape)
}


impl<E: Element> Tensor<E> {
    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        for p in parts {
            if p.rank() != rank
                || (0..rank).any(|d| d != axis && p.shape()[d] != parts[0].shape()[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;

        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let src = o * l * inner;
                out.extend_from_slice(&p.data()[src..src + l * inner]);
            }
        }
        let parents: Vec<Tensor<E>> = parts.iter().map(|p| (*p).clone()).collect();
        let lens2 = lens.clone();
        Ok(Tensor::from_op(out_shape, out, parents, move |g| {
            let mut contribs: Vec<Option<Vec<E>>> = lens2
                .iter()
                .map(|&l| Some(vec![E::zero(); outer * l * inner]))
                .collect();
            for o in 0..outer {
                let mut offset = 0usize;
                for (pi, &l) in lens2.iter().enumerate() {
                    let src = (o * total + offset) * inner;
                    let dst = o * l * inner;
                    let buf = contribs[pi].as_mut().unwrap();
                    buf[dst..dst + l * inner].copy_from_slice(&g[src..src + l * inner]);
                    offset += l;
                }
            }
            contribs
        }))
    }
}
