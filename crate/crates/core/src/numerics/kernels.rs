//! Raw dense routines behind the graph ops. Shapes are validated by callers.

/// `c (m x n) = op(a) * op(b) (+ c if accumulate)`, all row-major.
///
/// `a` is `m x k` (or `k x m` when `a_t`), `b` is `k x n` (or `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds an `n x ci x h x w` input into a `(ci*9) x (n*h*w)` matrix for a
/// 3x3, stride-1, pad-1 convolution.
pub fn im2col3x3(x: &[f64], n: usize, ci: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let cols_w = n * hw;
    let mut cols = vec![0.0; ci * 9 * cols_w];
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_w;
                for b in 0..n {
                    let src = &x[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                    let dst = &mut cols[row + b * hw..row + (b + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[oy * w + ox] = src[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto the input.
pub fn col2im3x3(cols: &[f64], n: usize, ci: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let cols_w = n * hw;
    let mut dx = vec![0.0; n * ci * hw];
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_w;
                for b in 0..n {
                    let src = &cols[row + b * hw..row + (b + 1) * hw];
                    let dst = &mut dx[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..w {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[iy * w + ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(co x n*h*w)` matrix layout -> `n x co x h x w`.
pub fn channel_major_to_nchw(mat: &[f64], n: usize, co: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * co * hw];
    for c in 0..co {
        for b in 0..n {
            out[(b * co + c) * hw..(b * co + c + 1) * hw]
                .copy_from_slice(&mat[c * n * hw + b * hw..c * n * hw + (b + 1) * hw]);
        }
    }
    out
}

pub fn nchw_to_channel_major(x: &[f64], n: usize, co: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * co * hw];
    for c in 0..co {
        for b in 0..n {
            out[c * n * hw + b * hw..c * n * hw + (b + 1) * hw]
                .copy_from_slice(&x[(b * co + c) * hw..(b * co + c + 1) * hw]);
        }
    }
    out
}

pub fn avgpool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avgpool2x2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * src[y * ow + xx];
                dst[2 * y * w + 2 * xx] += g;
                dst[2 * y * w + 2 * xx + 1] += g;
                dst[(2 * y + 1) * w + 2 * xx] += g;
                dst[(2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
    dx
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}
