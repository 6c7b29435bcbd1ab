//! 2D cross-correlation kernels.
//!
//! The stride-1 path runs contiguous row operations (axpy for forward and
//! input gradients, dot products for weight gradients) which is what the
//! training loop spends its time in. Other strides fall back to plain
//! loops. Every output element is written by exactly one iteration in a
//! fixed order, so results are bit-reproducible.

use rayon::prelude::*;

use super::{AdError, Result};

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || b_shape.len() != 1 {
            return Err(AdError::ShapeMismatch(format!(
                "conv2d wants x NCHW, w [Cout,Cin,k,k], b [Cout]; got {x_shape:?}, {w_shape:?}, {b_shape:?}"
            )));
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, wc_in, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in || k != k2 || b_shape[0] != c_out {
            return Err(AdError::ShapeMismatch(format!(
                "conv2d: kernel {w_shape:?} incompatible with input {x_shape:?} / bias {b_shape:?}"
            )));
        }
        if k % 2 == 0 {
            return Err(AdError::ShapeMismatch(format!("conv2d kernel must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(AdError::ShapeMismatch("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(AdError::ShapeMismatch(format!(
                "conv2d: {h}x{w} with pad {pad} smaller than kernel {k}"
            )));
        }
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            return Err(AdError::ShapeMismatch(format!(
                "conv2d: output size not integral for {h}x{w}, k {k}, pad {pad}, stride {stride}"
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * out_plane];
    // Each (n, oc) output plane is owned by one task.
    out.par_chunks_mut(out_plane).enumerate().for_each(|(noc, plane)| {
        let (ni, oc) = (noc / g.c_out, noc % g.c_out);
        plane.iter_mut().for_each(|v| *v = b[oc]);
        if g.stride == 1 {
            forward_plane_s1(x, w, g, ni, oc, plane);
        } else {
            forward_plane_general(x, w, g, ni, oc, plane);
        }
    });
    out
}

fn forward_plane_s1(x: &[f64], w: &[f64], g: &ConvGeom, ni: usize, oc: usize, out: &mut [f64]) {
    let in_plane = g.h * g.w;
    for ic in 0..g.c_in {
        let x_plane = &x[(ni * g.c_in + ic) * in_plane..][..in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = w[((oc * g.c_in + ic) * g.k + ky) * g.k + kx];
                if wv == 0.0 {
                    continue;
                }
                let sy = ky as isize - g.pad as isize;
                let sx = kx as isize - g.pad as isize;
                let oy0 = (-sy).max(0) as usize;
                let oy1 = ((g.h as isize - sy).min(g.oh as isize)).max(0) as usize;
                let ox0 = (-sx).max(0) as usize;
                let ox1 = ((g.w as isize - sx).min(g.ow as isize)).max(0) as usize;
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy as isize + sy) as usize;
                    let x_row = &x_plane[iy * g.w..][..g.w];
                    let out_row = &mut out[oy * g.ow..][..g.ow];
                    let ix0 = (ox0 as isize + sx) as usize;
                    for (o, xv) in out_row[ox0..ox1]
                        .iter_mut()
                        .zip(&x_row[ix0..ix0 + (ox1 - ox0)])
                    {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

fn forward_plane_general(
    x: &[f64],
    w: &[f64],
    g: &ConvGeom,
    ni: usize,
    oc: usize,
    out: &mut [f64],
) {
    let in_plane = g.h * g.w;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let mut acc = out[oy * g.ow + ox];
            for ic in 0..g.c_in {
                let x_plane = &x[(ni * g.c_in + ic) * in_plane..][..in_plane];
                for ky in 0..g.k {
                    let iy = oy as isize * g.stride as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = ox as isize * g.stride as isize + kx as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        acc += w[((oc * g.c_in + ic) * g.k + ky) * g.k + kx]
                            * x_plane[iy as usize * g.w + ix as usize];
                    }
                }
            }
            out[oy * g.ow + ox] = acc;
        }
    }
}

/// Gradients w.r.t. input, weights, and bias.
pub(crate) fn backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;

    let mut db = vec![0.0; g.c_out];
    for ni in 0..g.n {
        for oc in 0..g.c_out {
            db[oc] += dy[(ni * g.c_out + oc) * out_plane..][..out_plane]
                .iter()
                .sum::<f64>();
        }
    }

    // dw: each oc block owned by one task; batch accumulated serially inside.
    let kk = g.c_in * g.k * g.k;
    let mut dw = vec![0.0; g.c_out * kk];
    dw.par_chunks_mut(kk).enumerate().for_each(|(oc, dw_oc)| {
        for ni in 0..g.n {
            let dy_plane = &dy[(ni * g.c_out + oc) * out_plane..][..out_plane];
            if g.stride == 1 {
                dw_plane_s1(x, dy_plane, g, ni, dw_oc);
            } else {
                dw_plane_general(x, dy_plane, g, ni, dw_oc);
            }
        }
    });

    // dx: each (n, ic) input plane owned by one task.
    let mut dx = vec![0.0; g.n * g.c_in * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(nic, dx_plane)| {
        let (ni, ic) = (nic / g.c_in, nic % g.c_in);
        for oc in 0..g.c_out {
            let dy_plane = &dy[(ni * g.c_out + oc) * out_plane..][..out_plane];
            if g.stride == 1 {
                dx_plane_s1(w, dy_plane, g, oc, ic, dx_plane);
            } else {
                dx_plane_general(w, dy_plane, g, oc, ic, dx_plane);
            }
        }
    });

    (dx, dw, db)
}

fn dw_plane_s1(x: &[f64], dy_plane: &[f64], g: &ConvGeom, ni: usize, dw_oc: &mut [f64]) {
    let in_plane = g.h * g.w;
    for ic in 0..g.c_in {
        let x_plane = &x[(ni * g.c_in + ic) * in_plane..][..in_plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let sy = ky as isize - g.pad as isize;
                let sx = kx as isize - g.pad as isize;
                let oy0 = (-sy).max(0) as usize;
                let oy1 = ((g.h as isize - sy).min(g.oh as isize)).max(0) as usize;
                let ox0 = (-sx).max(0) as usize;
                let ox1 = ((g.w as isize - sx).min(g.ow as isize)).max(0) as usize;
                if ox0 >= ox1 {
                    continue;
                }
                let mut acc = 0.0;
                for oy in oy0..oy1 {
                    let iy = (oy as isize + sy) as usize;
                    let ix0 = (ox0 as isize + sx) as usize;
                    let dy_row = &dy_plane[oy * g.ow..][ox0..ox1];
                    let x_row = &x_plane[iy * g.w + ix0..][..ox1 - ox0];
                    acc += dy_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                }
                dw_oc[(ic * g.k + ky) * g.k + kx] += acc;
            }
        }
    }
}

fn dw_plane_general(x: &[f64], dy_plane: &[f64], g: &ConvGeom, ni: usize, dw_oc: &mut [f64]) {
    let in_plane = g.h * g.w;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gv = dy_plane[oy * g.ow + ox];
            if gv == 0.0 {
                continue;
            }
            for ic in 0..g.c_in {
                let x_plane = &x[(ni * g.c_in + ic) * in_plane..][..in_plane];
                for ky in 0..g.k {
                    let iy = oy as isize * g.stride as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = ox as isize * g.stride as isize + kx as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dw_oc[(ic * g.k + ky) * g.k + kx] +=
                            gv * x_plane[iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    }
}

fn dx_plane_s1(w: &[f64], dy_plane: &[f64], g: &ConvGeom, oc: usize, ic: usize, dx_plane: &mut [f64]) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let wv = w[((oc * g.c_in + ic) * g.k + ky) * g.k + kx];
            if wv == 0.0 {
                continue;
            }
            let sy = ky as isize - g.pad as isize;
            let sx = kx as isize - g.pad as isize;
            let oy0 = (-sy).max(0) as usize;
            let oy1 = ((g.h as isize - sy).min(g.oh as isize)).max(0) as usize;
            let ox0 = (-sx).max(0) as usize;
            let ox1 = ((g.w as isize - sx).min(g.ow as isize)).max(0) as usize;
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = (oy as isize + sy) as usize;
                let ix0 = (ox0 as isize + sx) as usize;
                let dy_row = &dy_plane[oy * g.ow..][ox0..ox1];
                let dx_row = &mut dx_plane[iy * g.w + ix0..][..ox1 - ox0];
                for (d, s) in dx_row.iter_mut().zip(dy_row) {
                    *d += wv * s;
                }
            }
        }
    }
}

fn dx_plane_general(
    w: &[f64],
    dy_plane: &[f64],
    g: &ConvGeom,
    oc: usize,
    ic: usize,
    dx_plane: &mut [f64],
) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gv = dy_plane[oy * g.ow + ox];
            if gv == 0.0 {
                continue;
            }
            for ky in 0..g.k {
                let iy = oy as isize * g.stride as isize + ky as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = ox as isize * g.stride as isize + kx as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    dx_plane[iy as usize * g.w + ix as usize] +=
                        gv * w[((oc * g.c_in + ic) * g.k + ky) * g.k + kx];
                }
            }
        }
    }
}
