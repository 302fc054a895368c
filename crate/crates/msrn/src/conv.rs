//! Convolution, pooling and upsampling routines behind the tape ops.
//!
//! Convolution is lowered to im2col plus the GEMM kernels; the im2col
//! scratch lives in a thread-local so episode loops do not reallocate
//! multi-megabyte buffers on every call.

use std::cell::RefCell;

use crate::kernels::{axpy, gemm_nn, gemm_nt, transpose_into};
use crate::tensor::Tensor;

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

#[derive(Default)]
struct Scratch {
    cols: Vec<f64>,
    aux: Vec<f64>,
    wt: Vec<f64>,
}

/// Ensures capacity without touching contents; callers that accumulate into
/// the buffer must zero it themselves.
fn grow(buf: &mut Vec<f64>, n: usize) {
    if buf.len() < n {
        buf.resize(n, 0.0);
    }
}

fn grow_zeroed(buf: &mut Vec<f64>, n: usize) {
    grow(buf, n);
    buf[..n].iter_mut().for_each(|v| *v = 0.0);
}

/// Output spatial extent for one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Gathers x [C,H,W] into cols [C*kh*kw][oh*ow] for the given geometry.
fn im2col(
    x: &[f64],
    cols: &mut [f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let positions = oh * ow;
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * positions;
                for oi in 0..oh {
                    let si = (oi * stride + u) as isize - pad as isize;
                    let dst = &mut cols[row + oi * ow..row + oi * ow + ow];
                    if si < 0 || si as usize >= h {
                        dst.iter_mut().for_each(|d| *d = 0.0);
                        continue;
                    }
                    let src_row = &x[(c * h + si as usize) * w..(c * h + si as usize + 1) * w];
                    // oj*stride + v - pad must land in 0..w
                    let j_lo = pad.saturating_sub(v).div_ceil(stride).min(ow);
                    let j_hi = (w + pad - v).div_ceil(stride).min(ow).max(j_lo);
                    dst[..j_lo].iter_mut().for_each(|d| *d = 0.0);
                    dst[j_hi..].iter_mut().for_each(|d| *d = 0.0);
                    if stride == 1 {
                        let s0 = j_lo + v - pad;
                        dst[j_lo..j_hi].copy_from_slice(&src_row[s0..s0 + (j_hi - j_lo)]);
                    } else {
                        let mut sj = j_lo * stride + v - pad;
                        for d in &mut dst[j_lo..j_hi] {
                            *d = src_row[sj];
                            sj += stride;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds cols [C*kh*kw][oh*ow] back into dx [C,H,W].
fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let positions = oh * ow;
    for c in 0..c_in {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * positions;
                for oi in 0..oh {
                    let si = (oi * stride + u) as isize - pad as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    let src = &cols[row + oi * ow..row + oi * ow + ow];
                    let drow = &mut dx[(c * h + si as usize) * w..(c * h + si as usize + 1) * w];
                    let j_lo = pad.saturating_sub(v).div_ceil(stride).min(ow);
                    let j_hi = (w + pad - v).div_ceil(stride).min(ow).max(j_lo);
                    if stride == 1 {
                        let s0 = j_lo + v - pad;
                        axpy(1.0, &src[j_lo..j_hi], &mut drow[s0..s0 + (j_hi - j_lo)]);
                    } else {
                        let mut sj = j_lo * stride + v - pad;
                        for s in &src[j_lo..j_hi] {
                            drow[sj] += s;
                            sj += stride;
                        }
                    }
                }
            }
        }
    }
}

/// x [Cin,H,W] ⊛ w [Cout,Cin,kh,kw] + b [Cout] -> [Cout,OH,OW].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = conv_out_extent(h, kh, stride, pad).unwrap();
    let ow = conv_out_extent(wd, kw, stride, pad).unwrap();
    let positions = oh * ow;
    let ckk = c_in * kh * kw;

    let mut out = vec![0.0; c_out * positions];
    for (o, chunk) in out.chunks_mut(positions).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b.data()[o]);
    }
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        grow(&mut s.cols, ckk * positions);
        im2col(
            x.data(),
            &mut s.cols,
            (c_in, h, wd),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        gemm_nn(w.data(), &s.cols[..ckk * positions], &mut out, c_out, ckk, positions);
    });
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradients of `conv2d_forward` with respect to x, w and b.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    go: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (go.shape()[1], go.shape()[2]);
    let positions = oh * ow;
    let ckk = c_in * kh * kw;

    let mut db = vec![0.0; c_out];
    for (o, slot) in db.iter_mut().enumerate() {
        *slot = go.data()[o * positions..(o + 1) * positions].iter().sum();
    }

    let mut dw = vec![0.0; c_out * ckk];
    let mut dx = vec![0.0; c_in * h * wd];
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        grow(&mut s.cols, ckk * positions);
        im2col(
            x.data(),
            &mut s.cols,
            (c_in, h, wd),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        // dW[o][kk] = sum_p go[o][p] * cols[kk][p]
        gemm_nt(go.data(), &s.cols[..ckk * positions], &mut dw, c_out, positions, ckk);

        // d(cols) = W^T * go, then scattered back to dx.
        grow(&mut s.wt, ckk * c_out);
        transpose_into(w.data(), &mut s.wt, c_out, ckk);
        grow_zeroed(&mut s.aux, ckk * positions);
        let Scratch { aux, wt, .. } = &mut *s;
        gemm_nn(&wt[..ckk * c_out], go.data(), &mut aux[..ckk * positions], ckk, c_out, positions);
        col2im_add(
            &aux[..ckk * positions],
            &mut dx,
            (c_in, h, wd),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
        );
    });

    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new(vec![c_out], db),
    )
}

/// 2x2 max pooling with stride 2; ties go to the first index in row-major
/// order. Returns the pooled map and the flat argmax indices for backward.
pub fn maxpool2x2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut idx = vec![0u32; c * oh * ow];
    let d = x.data();
    for cc in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let base = (cc * h + 2 * oi) * w + 2 * oj;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &p in &cand[1..] {
                    if d[p] > d[best] {
                        best = p;
                    }
                }
                let o = (cc * oh + oi) * ow + oj;
                out[o] = d[best];
                idx[o] = best as u32;
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out), idx)
}

pub fn maxpool2x2_backward(idx: &[u32], go: &Tensor, input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (g, &p) in go.data().iter().zip(idx) {
        dxd[p as usize] += g;
    }
    dx
}

fn spatial_split(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => unreachable!("pooling requires rank 2 or 3"),
    }
}

/// Average pooling with kernel and stride k over the two trailing modes.
pub fn avgpool_forward(x: &Tensor, k: usize) -> Tensor {
    let (c, h, w) = spatial_split(x.shape());
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    let inv = 1.0 / (k * k) as f64;
    let d = x.data();
    for cc in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut s = 0.0;
                for u in 0..k {
                    let row = (cc * h + oi * k + u) * w + oj * k;
                    s += d[row..row + k].iter().sum::<f64>();
                }
                out[(cc * oh + oi) * ow + oj] = s * inv;
            }
        }
    }
    let shape = if x.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Tensor::new(shape, out)
}

pub fn avgpool_backward(go: &Tensor, k: usize, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = spatial_split(input_shape);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for cc in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let g = go.data()[(cc * oh + oi) * ow + oj] * inv;
                for u in 0..k {
                    let row = (cc * h + oi * k + u) * w + oj * k;
                    dxd[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor on the two trailing
/// modes.
pub fn upsample_forward(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = spatial_split(x.shape());
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    let d = x.data();
    for cc in 0..c {
        for oi in 0..oh {
            let src_row = (cc * h + oi / f) * w;
            let dst_row = (cc * oh + oi) * ow;
            for oj in 0..ow {
                out[dst_row + oj] = d[src_row + oj / f];
            }
        }
    }
    let shape = if x.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Tensor::new(shape, out)
}

pub fn upsample_backward(go: &Tensor, f: usize, input_shape: &[usize]) -> Tensor {
    let (c, h, w) = spatial_split(input_shape);
    let (oh, ow) = (h * f, w * f);
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for cc in 0..c {
        for oi in 0..oh {
            let src_row = (cc * h + oi / f) * w;
            let go_row = (cc * oh + oi) * ow;
            for oj in 0..ow {
                dxd[src_row + oj / f] += go.data()[go_row + oj];
            }
        }
    }
    dx
}
