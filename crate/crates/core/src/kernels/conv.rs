//! 2-D convolution over NHWC tensors.
//!
//! Weights are laid out `(kh, kw, c_in / groups, c_out)`. Ungrouped
//! convolutions go through im2col + GEMM; grouped and depthwise convolutions
//! use direct loops. Transposed convolution is expressed through the adjoint
//! of the forward convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dims4, gemm, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: Padding::Same, dilation: 1, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn same() -> Self {
        Self::default()
    }

    pub fn valid() -> Self {
        Self { padding: Padding::Valid, ..Self::default() }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self { dilation, ..Self::default() }
    }

    pub fn depthwise(channels: usize) -> Self {
        Self { groups: channels, ..Self::default() }
    }
}

/// Fully resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub groups: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, dilation: usize, padding: Padding) -> Result<(usize, usize)> {
    let eff = (k - 1) * dilation + 1;
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + eff).saturating_sub(input);
            Ok((out, needed / 2))
        }
        Padding::Valid => {
            if input < eff {
                return Err(Error::shape(format!(
                    "valid convolution: input extent {input} smaller than effective kernel {eff}"
                )));
            }
            Ok(((input - eff) / stride + 1, 0))
        }
    }
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (n, h, w, cin) = dims4(x_shape)?;
        let (kh, kw, cin_g, cout) = dims4(w_shape)?;
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::arg("stride, dilation and groups must be positive"));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::shape(format!("groups {} must divide c_in {cin} and c_out {cout}", spec.groups)));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::shape(format!(
                "kernel {w_shape:?} expects {cin_g} input channels per group, input has {cin} over {} groups",
                spec.groups
            )));
        }
        if h == 0 || w == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("empty spatial extent"));
        }
        let (oh, pad_top) = out_extent(h, kh, spec.stride, spec.dilation, spec.padding)?;
        let (ow, pad_left) = out_extent(w, kw, spec.stride, spec.dilation, spec.padding)?;
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            groups: spec.groups,
            stride: spec.stride,
            dilation: spec.dilation,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    /// Geometry of the forward convolution whose adjoint is a stride-`s`
    /// transposed convolution of `x_shape` with kernel `(kh, kw, c_out, c_in)`.
    pub fn for_transpose(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Result<Self> {
        let (n, h, w, cin_t) = dims4(x_shape)?;
        let (kh, kw, cout_t, wk_in) = dims4(w_shape)?;
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        if wk_in != cin_t {
            return Err(Error::shape(format!(
                "transposed kernel {w_shape:?} expects {wk_in} input channels, got {cin_t}"
            )));
        }
        let g = Self::new(
            &[n, h * stride, w * stride, cout_t],
            &[kh, kw, cout_t, cin_t],
            Conv2dSpec { stride, ..Conv2dSpec::same() },
        )?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.cin]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin / self.groups, self.cout]
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.oh * self.ow * self.cout) as u64 * (self.kh * self.kw * (self.cin / self.groups)) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kh * g.kw * g.cin;
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst_row = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = g.src(oy, ky, g.pad_top, g.h);
                    for kx in 0..g.kw {
                        let dst = &mut dst_row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        match (iy, g.src(ox, kx, g.pad_left, g.w)) {
                            (Some(iy), Some(ix)) => {
                                let base = ((n * g.h + iy) * g.w + ix) * g.cin;
                                dst.copy_from_slice(&x[base..base + g.cin]);
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.kh * g.kw * g.cin;
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src_row = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let base = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let src = &src_row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                        for (d, &s) in dx[base..base + g.cin].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Visits every valid (output pixel, kernel tap) pair with flat offsets of
/// the output pixel, the input pixel and the kernel tap.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let tap_stride = (g.cin / g.groups) * g.cout;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_base = ((n * g.oh + oy) * g.ow + ox) * g.cout;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let in_base = ((n * g.h + iy) * g.w + ix) * g.cin;
                        f(out_base, in_base, (ky * g.kw + kx) * tap_stride);
                    }
                }
            }
        }
    }
}

/// Forward convolution without bias.
pub fn conv_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.n * g.oh * g.ow;
    let mut out = vec![T::zero(); m * g.cout];
    if g.groups == 1 {
        let k = g.kh * g.kw * g.cin;
        if g.is_pointwise() {
            gemm(m, k, g.cout, x, false, w, false, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); m * k];
            im2col(x, g, &mut cols);
            gemm(m, k, g.cout, &cols, false, w, false, &mut out, false);
        }
        return out;
    }
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for_each_tap(g, |ob, ib, wb| {
        let o = &mut out[ob..ob + g.cout];
        let xi = &x[ib..ib + g.cin];
        let wt = &w[wb..wb + cin_g * g.cout];
        if cin_g == 1 {
            for (co, acc) in o.iter_mut().enumerate() {
                *acc = *acc + xi[co / cout_g] * wt[co];
            }
        } else {
            for (co, acc) in o.iter_mut().enumerate() {
                let base = (co / cout_g) * cin_g;
                let mut s = T::zero();
                for ci in 0..cin_g {
                    s = s + xi[base + ci] * wt[ci * g.cout + co];
                }
                *acc = *acc + s;
            }
        }
    });
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv_backward_data<T: Element>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.n * g.oh * g.ow;
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.cin];
    if g.groups == 1 {
        let k = g.kh * g.kw * g.cin;
        if g.is_pointwise() {
            gemm(m, g.cout, k, dy, false, w, true, &mut dx, false);
        } else {
            let mut cols = vec![T::zero(); m * k];
            gemm(m, g.cout, k, dy, false, w, true, &mut cols, false);
            col2im(&cols, g, &mut dx);
        }
        return dx;
    }
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for_each_tap(g, |ob, ib, wb| {
        let d = &dy[ob..ob + g.cout];
        let wt = &w[wb..wb + cin_g * g.cout];
        let dxi = &mut dx[ib..ib + g.cin];
        for co in 0..g.cout {
            let base = (co / cout_g) * cin_g;
            for ci in 0..cin_g {
                dxi[base + ci] = dxi[base + ci] + d[co] * wt[ci * g.cout + co];
            }
        }
    });
    dx
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv_backward_weight<T: Element>(dy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.n * g.oh * g.ow;
    let cin_g = g.cin / g.groups;
    let mut dw = vec![T::zero(); g.kh * g.kw * cin_g * g.cout];
    if g.groups == 1 {
        let k = g.kh * g.kw * g.cin;
        if g.is_pointwise() {
            gemm(k, m, g.cout, x, true, dy, false, &mut dw, false);
        } else {
            let mut cols = vec![T::zero(); m * k];
            im2col(x, g, &mut cols);
            gemm(k, m, g.cout, &cols, true, dy, false, &mut dw, false);
        }
        return dw;
    }
    let cout_g = g.cout / g.groups;
    for_each_tap(g, |ob, ib, wb| {
        let d = &dy[ob..ob + g.cout];
        let xi = &x[ib..ib + g.cin];
        let dwt = &mut dw[wb..wb + cin_g * g.cout];
        for co in 0..g.cout {
            let base = (co / cout_g) * cin_g;
            for ci in 0..cin_g {
                dwt[ci * g.cout + co] = dwt[ci * g.cout + co] + d[co] * xi[base + ci];
            }
        }
    });
    dw
}

/// Adds a per-channel bias in place over the trailing axis.
pub fn add_bias<T: Element>(out: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

/// Sums a gradient over every axis except the trailing one.
pub fn bias_grad<T: Element>(dy: &[T], channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for row in dy.chunks_exact(channels) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    db
}
