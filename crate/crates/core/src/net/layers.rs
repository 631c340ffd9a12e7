//! Forward and backward kernels on channel-first buffers.

use crate::real::Real;

#[inline]
fn valid(k: usize, n: usize) -> (usize, usize) {
    // Output range for which tap k of a padded 3-wide kernel is in bounds.
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// 3×3 convolution, stride 1, zero padding 1. Weights are `[co, ci, 3, 3]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3<T: Real>(x: &[T], ci: usize, h: usize, w: usize, wt: &[T], b: &[T], co: usize, out: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), ci * hw);
    debug_assert_eq!(out.len(), co * hw);
    for o in 0..co {
        let oc = &mut out[o * hw..(o + 1) * hw];
        oc.fill(b[o]);
        for i in 0..ci {
            let xc = &x[i * hw..(i + 1) * hw];
            let k = &wt[(o * ci + i) * 9..(o * ci + i + 1) * 9];
            for ky in 0..3 {
                let (y0, y1) = valid(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid(kx, w);
                    let kv = k[ky * 3 + kx];
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let orow = &mut oc[y * w + x0..y * w + x1];
                        let srow = &xc[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (a, &s) in orow.iter_mut().zip(srow) {
                            *a += kv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of [`conv3x3`] and, when `dx` is
/// given, adds the input gradient into it.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[T],
    dout: &[T],
    co: usize,
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let hw = h * w;
    for o in 0..co {
        let dc = &dout[o * hw..(o + 1) * hw];
        db[o] += dc.iter().copied().sum::<T>();
        for i in 0..ci {
            let xc = &x[i * hw..(i + 1) * hw];
            let base = (o * ci + i) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid(kx, w);
                    let kv = wt[base + ky * 3 + kx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &dc[y * w + x0..y * w + x1];
                        let srow = &xc[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (&g, &s) in drow.iter().zip(srow) {
                            acc += g * s;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxrow = &mut dx[i * hw + sy * w + x0 + kx - 1..i * hw + sy * w + x1 + kx - 1];
                            for (d, &g) in dxrow.iter_mut().zip(drow) {
                                *d += kv * g;
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

pub fn relu<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output `out` is not positive.
pub fn relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the flat input
/// index of each maximum (first one on ties).
pub fn maxpool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(dout: &[T], arg: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &a) in dout.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}

/// Average pooling onto a `p × p` grid of equal blocks.
pub fn avgpool<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (bh, bw) = (h / p, w / p);
    let inv = T::of(1.0 / (bh * bw) as f64);
    let mut out = vec![T::zero(); c * p * p];
    for ch in 0..c {
        for y in 0..h {
            let row = &x[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            let orow = &mut out[ch * p * p + (y / bh) * p..ch * p * p + (y / bh + 1) * p];
            for (bx, o) in orow.iter_mut().enumerate() {
                *o += row[bx * bw..(bx + 1) * bw].iter().copied().sum::<T>();
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn avgpool_backward<T: Real>(dout: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (bh, bw) = (h / p, w / p);
    let inv = T::of(1.0 / (bh * bw) as f64);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] = dout[ch * p * p + (y / bh) * p + xx / bw] * inv;
            }
        }
    }
    dx
}

/// `out = W x + b` with `W` of shape `[o, i]`.
pub fn linear<T: Real>(x: &[T], wt: &[T], b: &[T]) -> Vec<T> {
    let i = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + wt[o * i..(o + 1) * i].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>())
        .collect()
}

/// Accumulates `dW += dout xᵀ`, `db += dout` and returns `Wᵀ dout`.
pub fn linear_backward<T: Real>(x: &[T], wt: &[T], dout: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let i = x.len();
    let mut dx = vec![T::zero(); i];
    for (o, &g) in dout.iter().enumerate() {
        db[o] += g;
        if g == T::zero() {
            continue;
        }
        let row = &wt[o * i..(o + 1) * i];
        for ((d, &a), (dwv, &v)) in dx.iter_mut().zip(row).zip(dw[o * i..(o + 1) * i].iter_mut().zip(x)) {
            *d += a * g;
            *dwv += g * v;
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy `−log p[label]` and the probabilities.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m.f64() + logits.iter().map(|&v| (v - m).f64().exp()).sum::<f64>().ln();
    (lse - logits[label].f64(), softmax(logits))
}
