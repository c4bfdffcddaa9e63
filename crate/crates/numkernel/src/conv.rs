//! Stride-1, zero-padded ("same") 2D convolution kernels over `[C, H, W]`
//! feature maps, plus adaptive average pooling.

/// Accumulates `w * src` shifted by `(dy, dx)` into `dst`, clipping at the
/// borders. Both planes are `h * w`. `dy`/`dx` are kernel offsets relative
/// to the kernel centre.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wt: f64) {
    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (a, b) in d.iter_mut().zip(s) {
            *a += wt * b;
        }
    }
}

/// Sum over the valid region of `a[y, x] * b[y + dy, x + dx]`.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
    if y0 >= y1 || x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ra = &a[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let rb = &b[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        acc += ra.iter().zip(rb).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// `x: [c_in, h, w]`, `wt: [c_out, c_in, k, k]` → `[c_out, h, w]`.
pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let p = (d.k / 2) as isize;
    let mut out = vec![0.0; d.c_out * hw];
    for co in 0..d.c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..d.c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wt[kbase + ky * d.k + kx];
                    if wv != 0.0 {
                        shifted_axpy(o, src, d.h, d.w, ky as isize - p, kx as isize - p, wv);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`.
pub(crate) fn conv2d_backward(x: &[f64], wt: &[f64], g: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>) {
    let hw = d.h * d.w;
    let p = (d.k / 2) as isize;
    let mut gx = vec![0.0; d.c_in * hw];
    let mut gw = vec![0.0; wt.len()];
    for co in 0..d.c_out {
        let go = &g[co * hw..(co + 1) * hw];
        for ci in 0..d.c_in {
            let src = &x[ci * hw..(ci + 1) * hw];
            let kbase = (co * d.c_in + ci) * d.k * d.k;
            let gxi = &mut gx[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    gw[kbase + ky * d.k + kx] += shifted_dot(go, src, d.h, d.w, dy, dx);
                    let wv = wt[kbase + ky * d.k + kx];
                    if wv != 0.0 {
                        // out[y] += w * x[y + dy]  =>  gx[y'] += w * g[y' - dy]
                        shifted_axpy(gxi, go, d.h, d.w, -dy, -dx, wv);
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Depthwise: `x: [c, h, w]`, `wt: [c, 1, k, k]`.
pub(crate) fn dwconv2d_forward(x: &[f64], wt: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let o = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wt[ch * k * k + ky * k + kx];
                shifted_axpy(o, src, h, w, ky as isize - p, kx as isize - p, wv);
            }
        }
    }
    out
}

pub(crate) fn dwconv2d_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut gx = vec![0.0; c * hw];
    let mut gw = vec![0.0; wt.len()];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        let go = &g[ch * hw..(ch + 1) * hw];
        let gxi = &mut gx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                gw[ch * k * k + ky * k + kx] += shifted_dot(go, src, h, w, dy, dx);
                shifted_axpy(gxi, go, h, w, -dy, -dx, wt[ch * k * k + ky * k + kx]);
            }
        }
    }
    (gx, gw)
}

/// Bin `[start, end)` of output cell `i` when pooling `n` inputs into `m`
/// outputs (same boundaries as the common framework definition).
pub(crate) fn pool_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n) / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

pub(crate) fn adaptive_avg_pool_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[ch * oh * ow + i * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let v = g[ch * oh * ow + i * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        gx[ch * h * w + y * w + x] += v;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit zero padding.
    fn conv_oracle(x: &[f64], wt: &[f64], d: &ConvDims) -> Vec<f64> {
        let p = (d.k / 2) as isize;
        let mut out = vec![0.0; d.c_out * d.h * d.w];
        for co in 0..d.c_out {
            for y in 0..d.h as isize {
                for xx in 0..d.w as isize {
                    let mut s = 0.0;
                    for ci in 0..d.c_in {
                        for ky in 0..d.k as isize {
                            for kx in 0..d.k as isize {
                                let (sy, sx) = (y + ky - p, xx + kx - p);
                                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                    continue;
                                }
                                s += wt[((co * d.c_in + ci) * d.k + ky as usize) * d.k + kx as usize]
                                    * x[(ci * d.h + sy as usize) * d.w + sx as usize];
                            }
                        }
                    }
                    out[(co * d.h + y as usize) * d.w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let d = ConvDims { c_in: 2, c_out: 3, h: 4, w: 5, k: 3 };
        let x: Vec<f64> = (0..d.c_in * d.h * d.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..d.c_out * d.c_in * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let a = conv2d_forward(&x, &wt, &d);
        let b = conv_oracle(&x, &wt, &d);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_bins_cover_input() {
        assert_eq!(pool_bin(0, 5, 2), (0, 3));
        assert_eq!(pool_bin(1, 5, 2), (2, 5));
        assert_eq!(pool_bin(3, 8, 8), (3, 4));
    }
}
