//! Plain numeric kernels behind the graph operations.
//!
//! Layouts are NCHW for images and OIHW for convolution kernels. Every
//! function here is a pure map from input tensors to a fresh output tensor.

use alloc::vec;

use crate::tensor::Tensor;

/// Output length of a strided, zero-padded window sweep.
pub fn window_out_len(input: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || window == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input index `o * stride + offset`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_i = in_len as isize - 1 - offset;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = out_len.min(max_i as usize / stride + 1);
    (lo.min(hi), hi)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (o, _, kh, kw) = dims4(k);
    let oh = window_out_len(h, kh, stride, padding).unwrap_or(0);
    let ow = window_out_len(w, kw, stride, padding).unwrap_or(0);
    let mut out = vec![0.0; n * o * oh * ow];
    let (xd, kd) = (x.data(), k.data());
    let p = padding as isize;
    for b in 0..n {
        for oc in 0..o {
            let plane = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let xp = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, stride, ky as isize - p);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(ow, w, stride, kx as isize - p);
                        if x0 >= x1 {
                            continue;
                        }
                        let kv = kd[((oc * c + ic) * kh + ky) * kw + kx];
                        for oy in y0..y1 {
                            let iy = (oy * stride + ky) - padding;
                            let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                            let row_in = &xp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = x0 + kx - padding;
                                for (dst, src) in row_out[x0..x1]
                                    .iter_mut()
                                    .zip(&row_in[ix0..ix0 + (x1 - x0)])
                                {
                                    *dst += kv * src;
                                }
                            } else {
                                for ox in x0..x1 {
                                    row_out[ox] += kv * row_in[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).expect("conv2d output shape")
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(
    gy: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
    in_hw: (usize, usize),
) -> Tensor {
    let (n, o, oh, ow) = dims4(gy);
    let (_, c, kh, kw) = dims4(k);
    let (h, w) = in_hw;
    let mut out = vec![0.0; n * c * h * w];
    let (gd, kd) = (gy.data(), k.data());
    let p = padding as isize;
    for b in 0..n {
        for oc in 0..o {
            let gp = &gd[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let xp = &mut out[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, stride, ky as isize - p);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(ow, w, stride, kx as isize - p);
                        if x0 >= x1 {
                            continue;
                        }
                        let kv = kd[((oc * c + ic) * kh + ky) * kw + kx];
                        for oy in y0..y1 {
                            let iy = (oy * stride + ky) - padding;
                            let row_g = &gp[oy * ow..(oy + 1) * ow];
                            let row_x = &mut xp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = x0 + kx - padding;
                                for (dst, src) in row_x[ix0..ix0 + (x1 - x0)]
                                    .iter_mut()
                                    .zip(&row_g[x0..x1])
                                {
                                    *dst += kv * src;
                                }
                            } else {
                                for ox in x0..x1 {
                                    row_x[ox * stride + kx - padding] += kv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("conv2d_input_grad output shape")
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(
    x: &Tensor,
    gy: &Tensor,
    stride: usize,
    padding: usize,
    k_hw: (usize, usize),
) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (_, o, oh, ow) = dims4(gy);
    let (kh, kw) = k_hw;
    let mut out = vec![0.0; o * c * kh * kw];
    let (xd, gd) = (x.data(), gy.data());
    let p = padding as isize;
    for b in 0..n {
        for oc in 0..o {
            let gp = &gd[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let xp = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(oh, h, stride, ky as isize - p);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(ow, w, stride, kx as isize - p);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = (oy * stride + ky) - padding;
                            let row_g = &gp[oy * ow..(oy + 1) * ow];
                            let row_x = &xp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = x0 + kx - padding;
                                acc += row_g[x0..x1]
                                    .iter()
                                    .zip(&row_x[ix0..ix0 + (x1 - x0)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in x0..x1 {
                                    acc += row_g[ox] * row_x[ox * stride + kx - padding];
                                }
                            }
                        }
                        out[((oc * c + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, c, kh, kw], out).expect("conv2d_weight_grad output shape")
}

pub fn avgpool2d(x: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let oh = window_out_len(h, kernel, stride, 0).unwrap_or(0);
    let ow = window_out_len(w, kernel, stride, 0).unwrap_or(0);
    let scale = 1.0 / (kernel * kernel) as f64;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    let row = &xp[(oy * stride + ky) * w..];
                    acc += row[ox * stride..ox * stride + kernel].iter().sum::<f64>();
                }
                out[(plane * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("avgpool2d output shape")
}

/// Adjoint of [`avgpool2d`].
pub fn avgpool2d_grad(gy: &Tensor, kernel: usize, stride: usize, in_hw: (usize, usize)) -> Tensor {
    let (n, c, oh, ow) = dims4(gy);
    let (h, w) = in_hw;
    let scale = 1.0 / (kernel * kernel) as f64;
    let gd = gy.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let xp = &mut out[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[(plane * oh + oy) * ow + ox] * scale;
                for ky in 0..kernel {
                    let row = &mut xp[(oy * stride + ky) * w..];
                    for v in &mut row[ox * stride..ox * stride + kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("avgpool2d_grad output shape")
}

/// `a [m, k] · b [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            for (dst, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *dst += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul output shape")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose output shape")
}

/// Row-wise log-softmax of a `[rows, cols]` matrix, stabilised by the row max.
pub fn log_softmax(a: &Tensor) -> Tensor {
    let cols = a.shape()[1];
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("log_softmax output shape")
}

/// Forward difference along axis 2 (rows) or 3 (columns) of an NCHW tensor.
pub fn diff(x: &Tensor, axis: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let xd = x.data();
    let (oh, ow) = if axis == 2 { (h - 1, w) } else { (h, w - 1) };
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let (next, cur) = if axis == 2 {
                    ((y + 1) * w + xx, y * w + xx)
                } else {
                    (y * w + xx + 1, y * w + xx)
                };
                out[(plane * oh + y) * ow + xx] = xp[next] - xp[cur];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("diff output shape")
}

/// Adjoint of [`diff`].
pub fn diff_adjoint(g: &Tensor, axis: usize) -> Tensor {
    let (n, c, oh, ow) = dims4(g);
    let (h, w) = if axis == 2 { (oh + 1, ow) } else { (oh, ow + 1) };
    let gd = g.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let xp = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = gd[(plane * oh + y) * ow + xx];
                let (next, cur) = if axis == 2 {
                    ((y + 1) * w + xx, y * w + xx)
                } else {
                    (y * w + xx + 1, y * w + xx)
                };
                xp[next] += v;
                xp[cur] -= v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("diff_adjoint output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..7 {
                for stride in 1..4 {
                    for offset in -3isize..3 {
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let brute: alloc::vec::Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = o as isize * stride as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: alloc::vec::Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "{out_len} {in_len} {stride} {offset}");
                    }
                }
            }
        }
    }

    #[test]
    fn window_lengths() {
        assert_eq!(window_out_len(5, 3, 1, 0), Some(3));
        assert_eq!(window_out_len(5, 3, 2, 1), Some(3));
        assert_eq!(window_out_len(2, 3, 1, 0), None);
    }
}
