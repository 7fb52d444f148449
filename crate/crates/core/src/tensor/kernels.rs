//! Raw numeric kernels shared by the autodiff graph and the smoothing code.
//!
//! Every function here is pure: it reads its inputs and returns a fresh
//! tensor. Shape checks happen up front so the inner loops can index freely.

use crate::error::{contract, Error, Result};

use super::{Scalar, Tensor};

fn shape_err<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return shape_err("matmul", sa, sb);
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[n, m], out)
}

pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.len() != 2 {
        return shape_err("transpose", s, &[0, 0]);
    }
    let (n, m) = (s[0], s[1]);
    let d = a.data();
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Tensor::new(&[m, n], out)
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || w[2] % 2 == 0 {
        return shape_err("conv2d", x, w);
    }
    Ok((x[0], x[1], x[2], x[3], w[0], w[2]))
}

/// Adds `wv * src` shifted by `(dy, dx)` into `dst`, with zero padding.
#[inline]
fn shifted_axpy<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wv: T,
) {
    let (hi, wi) = (h as isize, w as isize);
    let y0 = (-dy).max(0);
    let y1 = (hi - dy).min(hi);
    let x0 = (-dx).max(0);
    let x1 = (wi - dx).min(wi);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    let (x0, x1) = (x0 as usize, x1 as usize);
    let sx0 = (x0 as isize + dx) as usize;
    for y in y0..y1 {
        let yo = y as usize * w;
        let ys = (y + dy) as usize * w;
        let d = &mut dst[yo + x0..yo + x1];
        let s = &src[ys + sx0..ys + sx0 + (x1 - x0)];
        for (o, &v) in d.iter_mut().zip(s) {
            *o += wv * v;
        }
    }
}

/// Shifted inner product `sum_{y,x} a[y,x] * b[y+dy, x+dx]` with zero padding.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (hi, wi) = (h as isize, w as isize);
    let y0 = (-dy).max(0);
    let y1 = (hi - dy).min(hi);
    let x0 = (-dx).max(0);
    let x1 = (wi - dx).min(wi);
    let mut acc = T::zero();
    if y0 >= y1 || x0 >= x1 {
        return acc;
    }
    let (x0, x1) = (x0 as usize, x1 as usize);
    let sx0 = (x0 as isize + dx) as usize;
    for y in y0..y1 {
        let ya = y as usize * w;
        let yb = (y + dy) as usize * w;
        for (&u, &v) in a[ya + x0..ya + x1]
            .iter()
            .zip(&b[yb + sx0..yb + sx0 + (x1 - x0)])
        {
            acc += u * v;
        }
    }
    acc
}

/// 2-D cross-correlation, stride 1, "same" zero padding.
///
/// `x`: `[N, Cin, H, W]`, `w`: `[Cout, Cin, k, k]` with odd `k`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin, h, wd, cout, k) = conv_dims(x.shape(), w.shape())?;
    let p = (k / 2) as isize;
    let plane = h * wd;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * cout * plane];
    for b in 0..n {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let src = &xd[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let kbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[kbase + ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        shifted_axpy(dst, src, h, wd, ky as isize - p, kx as isize - p, wv);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, wd], out)
}

/// Gradient of `conv2d` with respect to its kernel.
///
/// `out[co, ci, a, b] = sum_{n,y,x} g[n, co, y, x] * x[n, ci, y + a - p, x + b - p]`
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (xs, gs) = (x.shape(), g.shape());
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] || xs[2..] != gs[2..] || k % 2 == 0 {
        return shape_err("conv2d_weight_grad", xs, gs);
    }
    let (n, cin, h, wd, cout) = (xs[0], xs[1], xs[2], xs[3], gs[1]);
    let p = (k / 2) as isize;
    let plane = h * wd;
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![T::zero(); cout * cin * k * k];
    for co in 0..cout {
        for ci in 0..cin {
            let kbase = (co * cin + ci) * k * k;
            for b in 0..n {
                let gp = &gd[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                let xp = &xd[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        out[kbase + ky * k + kx] +=
                            shifted_dot(gp, xp, h, wd, ky as isize - p, kx as isize - p);
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, cin, k, k], out)
}

/// Swap the channel axes and rotate each spatial kernel by 180 degrees.
///
/// `out[ci, co, a, b] = w[co, ci, k-1-a, k-1-b]`. Self-adjoint and an
/// involution, which makes it its own backward rule.
pub fn flip_kernel<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return shape_err("flip_kernel", s, &[0, 0, 0, 0]);
    }
    let (cout, cin, k) = (s[0], s[1], s[2]);
    let d = w.data();
    let mut out = vec![T::zero(); d.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for a in 0..k {
                for b in 0..k {
                    out[((ci * cout + co) * k + a) * k + b] =
                        d[((co * cin + ci) * k + (k - 1 - a)) * k + (k - 1 - b)];
                }
            }
        }
    }
    Tensor::new(&[cin, cout, k, k], out)
}

fn pool_dims(s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() < 2 {
        return shape_err("avg_pool2", s, &[2, 2]);
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let outer = s[..s.len() - 2].iter().product();
    Ok((outer, h, w))
}

/// 2x2 average pooling with stride 2 over the last two axes.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, h, w) = pool_dims(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err("avg_pool2", x.shape(), &[2, 2]);
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let d = x.data();
    let mut out = vec![T::zero(); outer * oh * ow];
    for o in 0..outer {
        let src = &d[o * h * w..(o + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out[(o * oh + y) * ow + xx] =
                    quarter * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

/// Adjoint of [`avg_pool2`]: each input value spread over its 2x2 block at 1/4.
pub fn unpool2<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, oh, ow) = pool_dims(y.shape())?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64_lossy(0.25);
    let d = y.data();
    let mut out = vec![T::zero(); outer * h * w];
    for o in 0..outer {
        for yy in 0..oh {
            for xx in 0..ow {
                let v = quarter * d[(o * oh + yy) * ow + xx];
                let i = o * h * w + 2 * yy * w + 2 * xx;
                out[i] = v;
                out[i + 1] = v;
                out[i + w] = v;
                out[i + w + 1] = v;
            }
        }
    }
    let mut shape = y.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, out)
}

fn last_axis(s: &[usize]) -> Result<usize> {
    match s.last() {
        Some(&k) => Ok(k),
        None => contract("operation needs a tensor of rank >= 1"),
    }
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = last_axis(x.shape())?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Sum over the last axis, dropping it.
pub fn row_sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = last_axis(x.shape())?;
    let out = x.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
    let s = x.shape();
    Tensor::new(&s[..s.len() - 1], out)
}

/// Repeat each element `d` times along a new trailing axis.
pub fn row_broadcast<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let mut shape = x.shape().to_vec();
    shape.push(d);
    let out = x
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(d))
        .collect();
    Tensor::new(&shape, out)
}

/// Expand a per-channel vector `[C]` to `shape = [N, C, ...]`.
pub fn bias_broadcast<T: Scalar>(b: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if b.rank() != 1 || shape.len() < 2 || shape[1] != b.len() {
        return shape_err("bias_broadcast", b.shape(), shape);
    }
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        for &v in b.data() {
            out.extend(std::iter::repeat(v).take(inner));
        }
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`bias_broadcast`]: sum everything except axis 1.
pub fn bias_sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return shape_err("bias_sum", s, &[0, 0]);
    }
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = vec![T::zero(); c];
    for (i, chunk) in x.data().chunks(inner).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[c], out)
}

fn check_gather(s: &[usize], idx: &[usize]) -> Result<usize> {
    if s.len() != 2 || s[0] != idx.len() {
        return shape_err("gather", s, &[idx.len()]);
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
        return contract(format!("gather index {bad} out of range for {} classes", s[1]));
    }
    Ok(s[1])
}

/// `out[n] = x[n, idx[n]]`
pub fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let k = check_gather(x.shape(), idx)?;
    let d = x.data();
    let out = idx.iter().enumerate().map(|(n, &i)| d[n * k + i]).collect();
    Tensor::new(&[idx.len()], out)
}

/// Adjoint of [`gather`]: place `g[n]` at `[n, idx[n]]` in a zero `[N, k]` tensor.
pub fn scatter<T: Scalar>(g: &Tensor<T>, idx: &[usize], k: usize) -> Result<Tensor<T>> {
    if g.shape() != [idx.len()] {
        return shape_err("scatter", g.shape(), &[idx.len()]);
    }
    check_gather(&[idx.len(), k], idx)?;
    let mut out = vec![T::zero(); idx.len() * k];
    for (n, (&i, &v)) in idx.iter().zip(g.data()).enumerate() {
        out[n * k + i] = v;
    }
    Tensor::new(&[idx.len(), k], out)
}

pub fn broadcast_scalar<T: Scalar>(s: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if s.len() != 1 {
        return shape_err("broadcast", s.shape(), shape);
    }
    Ok(Tensor::full(shape, s.item()))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Indicator of the active set of `relu`: 1 where `x > 0`, else 0.
pub fn relu_mask<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}
