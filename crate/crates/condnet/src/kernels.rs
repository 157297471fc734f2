//! Raw computational kernels: matrix multiply, im2col/col2im lowering for
//! grouped convolution, and pooling. Everything here is scalar code with a
//! fixed accumulation order, so results are bit-reproducible run to run.

use crate::tensor::Scalar;

/// `c += a * b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// The inner loop runs over contiguous rows of `b` and `c` (an axpy per
/// `(i,p)` pair), which keeps the accumulation order fixed per output
/// element while still autovectorizing.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// Row-major transpose of `a: [rows, cols]` into a fresh buffer.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Spatial geometry of a convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    /// Output spatial dims for an `h x w` input, floor convention.
    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ky, kx) = self.kernel;
        let (sy, sx) = self.stride;
        let (py, px) = self.pad;
        let eh = h + 2 * py;
        let ew = w + 2 * px;
        if ky == 0 || kx == 0 || sy == 0 || sx == 0 || eh < ky || ew < kx {
            return None;
        }
        Some(((eh - ky) / sy + 1, (ew - kx) / sx + 1))
    }
}

/// Lower one input-channel block to columns: `x: [cg, h, w]` becomes
/// `cols: [cg*ky*kx, h_out*w_out]` with zero padding outside the image.
pub fn im2col<T: Scalar>(
    x: &[T],
    cg: usize,
    h: usize,
    w: usize,
    win: Window,
    h_out: usize,
    w_out: usize,
    cols: &mut [T],
) {
    let (ky, kx) = win.kernel;
    let (sy, sx) = win.stride;
    let (py, px) = win.pad;
    debug_assert_eq!(x.len(), cg * h * w);
    debug_assert_eq!(cols.len(), cg * ky * kx * h_out * w_out);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    for c in 0..cg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..ky {
            for dx in 0..kx {
                let row = ((c * ky + dy) * kx + dx) * (h_out * w_out);
                for oy in 0..h_out {
                    let iy = (oy * sy + dy) as isize - py as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * w_out..row + (oy + 1) * w_out];
                    if sx == 1 {
                        // contiguous copy of the in-bounds span
                        let lo = px.saturating_sub(dx); // first ox with ix >= 0
                        let hi = (w + px - dx).min(w_out); // first ox with ix >= w
                        if lo < hi {
                            let ix0 = lo + dx - px;
                            dst[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sx + dx) as isize - px as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back to the input block: inverse layout of [`im2col`].
pub fn col2im_acc<T: Scalar>(
    cols: &[T],
    cg: usize,
    h: usize,
    w: usize,
    win: Window,
    h_out: usize,
    w_out: usize,
    x_grad: &mut [T],
) {
    let (ky, kx) = win.kernel;
    let (sy, sx) = win.stride;
    let (py, px) = win.pad;
    debug_assert_eq!(x_grad.len(), cg * h * w);
    for c in 0..cg {
        let plane = &mut x_grad[c * h * w..(c + 1) * h * w];
        for dy in 0..ky {
            for dx in 0..kx {
                let row = ((c * ky + dy) * kx + dx) * (h_out * w_out);
                for oy in 0..h_out {
                    let iy = (oy * sy + dy) as isize - py as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..w_out {
                        let ix = (ox * sx + dx) as isize - px as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += cols[row + oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max-pool one channel plane, recording the flat input index of each
/// window maximum. Ties go to the first element in row-major scan order.
pub fn maxpool_plane<T: Scalar>(
    plane: &[T],
    h: usize,
    w: usize,
    win: Window,
    h_out: usize,
    w_out: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (ky, kx) = win.kernel;
    let (sy, sx) = win.stride;
    let (py, px) = win.pad;
    for oy in 0..h_out {
        for ox in 0..w_out {
            let mut best: Option<(T, usize)> = None;
            for dy in 0..ky {
                let iy = (oy * sy + dy) as isize - py as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kx {
                    let ix = (ox * sx + dx) as isize - px as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let idx = iy as usize * w + ix as usize;
                    let v = plane[idx];
                    match best {
                        Some((bv, _)) if v <= bv => {}
                        _ => best = Some((v, idx)),
                    }
                }
            }
            let (v, idx) = best.expect("pooling window must cover >= 1 element");
            out[oy * w_out + ox] = v;
            argmax[oy * w_out + ox] = idx;
        }
    }
}
