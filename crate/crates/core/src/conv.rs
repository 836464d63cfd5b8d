//! Grouped 2-D convolution kernels over `C × H × W` buffers.
//!
//! Weights are laid out `[C_out, C_in / groups, k, k]`. Output channel `o`
//! belongs to group `o / (C_out / groups)` and reads only that group's input
//! channels.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        if groups == 0 || stride == 0 {
            return Err(Error::Config("groups and stride must be positive".into()));
        }
        let (c_in, height, width) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, c_in_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "channel counts {c_in} -> {c_out} not divisible by {groups} groups"
            )));
        }
        if c_in_g != c_in / groups || kh != kw {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::shape("conv2d", x_shape, w_shape));
        }
        Ok(Self {
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride,
            padding,
            groups,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.out_height, self.out_width]
    }

    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input = o * stride + k - padding must lie in [0, extent)
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_extent as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (h, wd, oh, ow, k) = (
        geo.height,
        geo.width,
        geo.out_height,
        geo.out_width,
        geo.kernel,
    );
    let (cig, cog) = (geo.in_per_group(), geo.out_per_group());
    let mut y = vec![0.0; geo.c_out * oh * ow];
    for o in 0..geo.c_out {
        let g = o / cog;
        let out = &mut y[o * oh * ow..(o + 1) * oh * ow];
        for cl in 0..cig {
            let ci = g * cig + cl;
            let xin = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = geo.valid_range(ky, h, oh);
                for kx in 0..k {
                    let wv = w[((o * cig + cl) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = geo.valid_range(kx, wd, ow);
                    for oy in y0..y1 {
                        let iy = oy * geo.stride + ky - geo.padding;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        if geo.stride == 1 && x1 > x0 {
                            let src = &row[x0 + kx - geo.padding..x1 + kx - geo.padding];
                            for (o, v) in orow[x0..x1].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ox * geo.stride + kx - geo.padding;
                                orow[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input and weight gradients for upstream gradient `gy`.
pub fn conv2d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (h, wd, oh, ow, k) = (
        geo.height,
        geo.width,
        geo.out_height,
        geo.out_width,
        geo.kernel,
    );
    let (cig, cog) = (geo.in_per_group(), geo.out_per_group());
    for o in 0..geo.c_out {
        let g = o / cog;
        let gout = &gy[o * oh * ow..(o + 1) * oh * ow];
        for cl in 0..cig {
            let ci = g * cig + cl;
            for ky in 0..k {
                let (y0, y1) = geo.valid_range(ky, h, oh);
                for kx in 0..k {
                    let widx = ((o * cig + cl) * k + ky) * k + kx;
                    let (x0, x1) = geo.valid_range(kx, wd, ow);
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * geo.stride + ky - geo.padding;
                        let base = ci * h * wd + iy * wd;
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        if geo.stride == 1 && x1 > x0 {
                            let lo = base + x0 + kx - geo.padding;
                            let span = x1 - x0;
                            let xs = &x[lo..lo + span];
                            for (go, xv) in grow[x0..x1].iter().zip(xs) {
                                acc += go * xv;
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                for (gi, go) in gx[lo..lo + span].iter_mut().zip(&grow[x0..x1]) {
                                    *gi += go * wv;
                                }
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ox * geo.stride + kx - geo.padding;
                                let go = grow[ox];
                                acc += go * x[base + ix];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[base + ix] += go * wv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
