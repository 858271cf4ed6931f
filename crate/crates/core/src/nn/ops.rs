//! Convolution kernels (forward and backward) on raw NCHW buffers.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: N×cin×h×w`, `w: cout×cin×k×k`, `b: cout` → `N×cout×ho×wo`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], n: usize, w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut out = vec![T::zero(); n * g.cout * plane];
    let mut cols = vec![T::zero(); g.patch() * plane];
    for s in 0..n {
        im2col(&x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w], g, &mut cols);
        let o = &mut out[s * g.cout * plane..(s + 1) * g.cout * plane];
        for (co, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
        T::gemm(g.cout, g.patch(), plane, w, false, &cols, false, o, T::one());
    }
    out
}

/// Accumulates `dw`, `db` and (optionally) `dx` for [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    g: &ConvGeom,
    grad: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_sz = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); g.patch() * plane];
    let mut dcols = vec![T::zero(); g.patch() * plane];
    let mut dx = dx;
    for s in 0..n {
        let gs = &grad[s * g.cout * plane..(s + 1) * g.cout * plane];
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        T::gemm(g.cout, plane, g.patch(), gs, false, &cols, true, dw, T::one());
        for (co, chunk) in gs.chunks(plane).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(g.patch(), g.cout, plane, w, true, gs, false, &mut dcols, T::zero());
            col2im_add(&dcols, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
        }
    }
}

/// 2×2 stride-2 transposed convolution; `w: cin×cout×2×2`.
pub(crate) fn convt_forward<T: Scalar>(x: &[T], n: usize, cin: usize, h: usize, wd: usize, w: &[T], b: &[T], cout: usize) -> Vec<T> {
    let hw = h * wd;
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = vec![T::zero(); n * cout * ho * wo];
    let mut y = vec![T::zero(); cout * 4 * hw];
    for s in 0..n {
        let xs = &x[s * cin * hw..(s + 1) * cin * hw];
        T::gemm(cout * 4, cin, hw, w, true, xs, false, &mut y, T::zero());
        let o = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        for co in 0..cout {
            for dy in 0..2 {
                for dx in 0..2 {
                    let yrow = &y[(co * 4 + dy * 2 + dx) * hw..(co * 4 + dy * 2 + dx + 1) * hw];
                    for iy in 0..h {
                        for ix in 0..wd {
                            o[(co * ho + 2 * iy + dy) * wo + 2 * ix + dx] = yrow[iy * wd + ix] + b[co];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn convt_backward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    w: &[T],
    cout: usize,
    grad: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let hw = h * wd;
    let (ho, wo) = (2 * h, 2 * wd);
    let mut dy_buf = vec![T::zero(); cout * 4 * hw];
    let mut dx = dx;
    for s in 0..n {
        let gs = &grad[s * cout * ho * wo..(s + 1) * cout * ho * wo];
        for co in 0..cout {
            let mut bsum = T::zero();
            for dy in 0..2 {
                for dxo in 0..2 {
                    let row = &mut dy_buf[(co * 4 + dy * 2 + dxo) * hw..(co * 4 + dy * 2 + dxo + 1) * hw];
                    for iy in 0..h {
                        for ix in 0..wd {
                            let v = gs[(co * ho + 2 * iy + dy) * wo + 2 * ix + dxo];
                            row[iy * wd + ix] = v;
                            bsum += v;
                        }
                    }
                }
            }
            db[co] += bsum;
        }
        let xs = &x[s * cin * hw..(s + 1) * cin * hw];
        T::gemm(cin, hw, cout * 4, xs, false, &dy_buf, true, dw, T::one());
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(cin, cout * 4, hw, w, false, &dy_buf, false, &mut dx[s * cin * hw..(s + 1) * cin * hw], T::one());
        }
    }
}
