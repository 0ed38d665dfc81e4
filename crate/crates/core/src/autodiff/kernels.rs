//! Raw NCHW kernels used by the graph ops. No shape validation happens
//! here; callers check geometry before dispatching.

/// Sliding-window geometry mapping an image `(h, w)` onto an output grid
/// `(oh, ow)` with a square kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn grid(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `(c, h, w)` image into a `(c*k*k, oh*ow)` column matrix.
pub(crate) fn im2col(img: &[f64], c: usize, win: &Window, cols: &mut [f64]) {
    let grid = win.grid();
    let mut row = 0;
    for ch in 0..c {
        let plane = &img[ch * win.h * win.w..(ch + 1) * win.h * win.w];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let dst = &mut cols[row * grid..(row + 1) * grid];
                for oy in 0..win.oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    let out = &mut dst[oy * win.ow..(oy + 1) * win.ow];
                    if iy < 0 || iy >= win.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    if win.stride == 1 {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - win.pad as isize;
                            *o = if ix < 0 || ix >= win.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            *o = if ix < 0 || ix >= win.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
pub(crate) fn col2im(cols: &[f64], c: usize, win: &Window, img: &mut [f64]) {
    let grid = win.grid();
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut img[ch * win.h * win.w..(ch + 1) * win.h * win.w];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let src = &cols[row * grid..(row + 1) * grid];
                for oy in 0..win.oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    for ox in 0..win.ow {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < win.w {
                            dst[ix as usize] += src[oy * win.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major GEMM `c = alpha * op(a) * op(b) + beta * c` where `op` is an
/// optional transpose. `a` is stored as `(m, k)` or, transposed, `(k, m)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover exactly the strided extents described above,
    // and `c` does not alias `a` or `b` (distinct borrows).
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

/// Source index pairs and weights for one axis of a bilinear resize with
/// half-pixel centers (`align_corners = false`).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
