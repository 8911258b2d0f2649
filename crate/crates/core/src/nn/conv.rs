//! im2col unfolding shared by the math core and the crossbar mapper.
//!
//! Activations of a convolutional layer are stored as `N × (C·H·W)` rows in
//! channel-major order. Unfolded patches use the column index
//! `c·K·K + ky·K + kx`, which is also the row order of an unfolded crossbar
//! column.

use crate::error::{Error, Result};

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.in_h == 0
            || self.in_w == 0
        {
            return Err(Error::domain(format!("degenerate convolution {self:?}")));
        }
        if self.in_h + 2 * self.padding < self.kernel || self.in_w + 2 * self.padding < self.kernel
        {
            return Err(Error::domain("kernel larger than padded input"));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unfolded patch (`K·K·C_in`).
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// Source index inside one input image for patch entry `col` at output
    /// position `pos`, or `None` when it falls into the zero padding.
    pub fn source_index(&self, pos: usize, col: usize) -> Option<usize> {
        let k = self.kernel;
        let (oy, ox) = (pos / self.out_w(), pos % self.out_w());
        let c = col / (k * k);
        let (ky, kx) = ((col / k) % k, col % k);
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            return None;
        }
        Some(c * self.in_h * self.in_w + iy as usize * self.in_w + ix as usize)
    }

    /// Precomputed `source_index` table, `positions × patch_len`.
    pub fn gather_table(&self) -> Vec<Option<u32>> {
        let (p, l) = (self.positions(), self.patch_len());
        let mut t = Vec::with_capacity(p * l);
        for pos in 0..p {
            for col in 0..l {
                t.push(self.source_index(pos, col).map(|i| i as u32));
            }
        }
        t
    }
}

/// Unfolds `n` images (`n × in_len`, flat) into `(n·P) × patch_len` rows.
pub fn im2col(geom: &ConvGeometry, input: &[f64], n: usize) -> Vec<f64> {
    let table = geom.gather_table();
    let (p, l, il) = (geom.positions(), geom.patch_len(), geom.in_len());
    let mut out = vec![0.0; n * p * l];
    for img in 0..n {
        let src = &input[img * il..(img + 1) * il];
        let dst = &mut out[img * p * l..(img + 1) * p * l];
        for (d, t) in dst.iter_mut().zip(&table) {
            if let Some(i) = t {
                *d = src[*i as usize];
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the images.
pub fn col2im(geom: &ConvGeometry, cols: &[f64], n: usize) -> Vec<f64> {
    let table = geom.gather_table();
    let (p, l, il) = (geom.positions(), geom.patch_len(), geom.in_len());
    let mut out = vec![0.0; n * il];
    for img in 0..n {
        let dst = &mut out[img * il..(img + 1) * il];
        let src = &cols[img * p * l..(img + 1) * p * l];
        for (s, t) in src.iter().zip(&table) {
            if let Some(i) = t {
                dst[*i as usize] += s;
            }
        }
    }
    out
}

/// Reorders `(n·P) × C` matmul output rows into channel-major `n × (C·P)`.
pub fn rows_to_nchw(rows: &[f64], n: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for img in 0..n {
        for pos in 0..positions {
            let r = (img * positions + pos) * channels;
            for c in 0..channels {
                out[img * channels * positions + c * positions + pos] = rows[r + c];
            }
        }
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(nchw: &[f64], n: usize, positions: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; nchw.len()];
    for img in 0..n {
        for pos in 0..positions {
            let r = (img * positions + pos) * channels;
            for c in 0..channels {
                out[r + c] = nchw[img * channels * positions + c * positions + pos];
            }
        }
    }
    out
}

/// Reference direct convolution (no unfolding). `weights` is laid out as
/// `patch_len × C_out`, matching the unfolded-column convention.
pub fn conv2d_direct(geom: &ConvGeometry, input: &[f64], n: usize, weights: &[f64]) -> Vec<f64> {
    let (k, co) = (geom.kernel, geom.out_channels);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = vec![0.0; n * geom.out_len()];
    for img in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..geom.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= geom.in_h as isize
                                    || ix >= geom.in_w as isize
                                {
                                    continue;
                                }
                                let x = input[img * geom.in_len()
                                    + c * geom.in_h * geom.in_w
                                    + iy as usize * geom.in_w
                                    + ix as usize];
                                acc += x * weights[(c * k * k + ky * k + kx) * co + o];
                            }
                        }
                    }
                    out[img * geom.out_len() + o * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}
