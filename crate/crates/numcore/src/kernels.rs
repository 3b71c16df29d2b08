//! Raw slice kernels behind the graph ops. Layouts are row-major; images are
//! `C x H x W`.

use crate::element::{gemm, Element, MatRef};
use crate::error::{NumError, Result};

/// Number of im2col elements processed per band; sized to stay cache-resident.
const BAND_ELEMS: usize = 1 << 15;

/// Geometry of a 2-D convolution over a single `C x H x W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 4],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let [c_in, h, w] = input;
        let [c_out, kc, kh, kw] = kernel;
        if kc != c_in {
            return Err(NumError::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(NumError::dim("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * pad.0 || kw > w + 2 * pad.1 {
            return Err(NumError::dim(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad.0,
                    w + 2 * pad.1
                ),
            ));
        }
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Rows of the im2col matrix (`c_in * kh * kw`).
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.patch() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Fills `cols` (`patch x (y1 - y0) * ow`) with input patches for output rows `y0..y1`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, y0: usize, y1: usize, cols: &mut [T]) {
    let n = (y1 - y0) * g.ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                for (band_y, oy) in (y0..y1).enumerate() {
                    let out = &mut dst[band_y * g.ow..(band_y + 1) * g.ow];
                    let iy = (oy * sh) as isize + ky as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if sw == 1 {
                        // valid ox satisfy 0 <= ox + kx - pw < w
                        let shift = kx as isize - pw;
                        let lo = (-shift).clamp(0, g.ow as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(lo as isize, g.ow as isize) as usize;
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let s0 = (lo as isize + shift) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize + kx as isize - pw;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back into the image gradient `dx`.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, y0: usize, y1: usize, dx: &mut [T]) {
    let n = (y1 - y0) * g.ow;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * n..(row + 1) * n];
                for (band_y, oy) in (y0..y1).enumerate() {
                    let iy = (oy * sh) as isize + ky as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[band_y * g.ow..(band_y + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * sw) as isize + kx as isize - pw;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[c_out x oh x ow] = kernel * x (+ bias)`, zero padding.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    out: &mut [T],
) {
    let plane = g.oh * g.ow;
    debug_assert_eq!(out.len(), g.c_out * plane);
    let k = MatRef::new(kernel, g.c_out, g.patch());
    let band = g.band_rows();
    let mut cols = vec![T::zero(); g.patch() * band * g.ow];
    let mut y0 = 0;
    while y0 < g.oh {
        let y1 = (y0 + band).min(g.oh);
        let n = (y1 - y0) * g.ow;
        let cols = &mut cols[..g.patch() * n];
        im2col(x, g, y0, y1, cols);
        gemm(k, MatRef::new(cols, g.patch(), n), T::zero(), &mut out[y0 * g.ow..], plane);
        y0 = y1;
    }
    if let Some(b) = bias {
        for (c, &bc) in b.iter().enumerate() {
            out[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v + bc);
        }
    }
}

/// Accumulates gradients of a convolution into whichever of `dx`, `dk`, `db`
/// are requested.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    g: &ConvGeom,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane = g.oh * g.ow;
    if let Some(db) = db {
        for (c, d) in db.iter_mut().enumerate() {
            *d = *d + dy[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    let k = MatRef::new(kernel, g.c_out, g.patch());
    let band = g.band_rows();
    let mut cols = vec![T::zero(); g.patch() * band * g.ow];
    let mut y0 = 0;
    while y0 < g.oh {
        let y1 = (y0 + band).min(g.oh);
        let n = (y1 - y0) * g.ow;
        let cols = &mut cols[..g.patch() * n];
        let dy_band = MatRef {
            data: &dy[y0 * g.ow..],
            rows: g.c_out,
            cols: n,
            rs: plane,
            cs: 1,
        };
        if let Some(dk) = dk.as_deref_mut() {
            im2col(x, g, y0, y1, cols);
            gemm(dy_band, MatRef::new(cols, g.patch(), n).t(), T::one(), dk, g.patch());
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k.t(), dy_band, T::zero(), cols, n);
            col2im(cols, g, y0, y1, dx);
        }
        y0 = y1;
    }
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` image.
pub fn upsample2x<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let base = (ch * h2 + 2 * y) * w2;
            {
                let row = &mut out[base..base + w2];
                for (xi, &v) in src.iter().enumerate() {
                    row[2 * xi] = v;
                    row[2 * xi + 1] = v;
                }
            }
            out.copy_within(base..base + w2, base + w2);
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 output block into its source pixel.
pub fn upsample2x_backward<T: Element>(dy: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            let r0 = (ch * 2 * h + 2 * y) * w2;
            let r1 = r0 + w2;
            let dst = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xi, d) in dst.iter_mut().enumerate() {
                *d = *d + dy[r0 + 2 * xi] + dy[r0 + 2 * xi + 1] + dy[r1 + 2 * xi] + dy[r1 + 2 * xi + 1];
            }
        }
    }
}
