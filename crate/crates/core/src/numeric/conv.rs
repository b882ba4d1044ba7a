use crate::error::{Error, Result};

use super::Real;

/// Geometry of a square-kernel convolution from `cin×h×w` to `cout×ho×wo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!("extent {size} with kernel {k}, stride {stride}, padding {pad} is not integral"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn for_conv(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::shape("conv2d", "kernel size and stride must be ≥ 1"));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: out_extent(h, k, stride, pad)?,
            wo: out_extent(w, k, stride, pad)?,
        })
    }

    /// Input pixel read by kernel tap `(ki, kj)` at output `(oy, ox)`, if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds `x: [cin×h×w]` into `[(cin·k·k) × (ho·wo)]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * hw];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, xx)) = g.source(oy, ox, ki, kj) {
                            cols[row + oy * g.wo + ox] = plane[y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto `[cin×h×w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        let base = c * g.h * g.w;
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, xx)) = g.source(oy, ox, ki, kj) {
                            x[base + y * g.w + xx] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
