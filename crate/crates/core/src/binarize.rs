//! Sign binarization, straight-through gradients and XNOR-popcount dot
//! products.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Default straight-through clip, matching the ±1 codomain.
pub const DEFAULT_CLIP: f64 = 1.0;

/// `+1` for `v >= 0`, `−1` otherwise. Zero maps to `+1`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn binarize(latent: &Tensor) -> Result<Tensor> {
    if latent.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("binarize input".into()));
    }
    Ok(latent.map(sign))
}

/// Straight-through gradient: passes `grad_out` where `|latent| <= clip`.
pub fn ste_backward(grad_out: &Tensor, latent: &Tensor, clip: f64) -> Result<Tensor> {
    if grad_out.shape() != latent.shape() {
        return Err(Error::dim("ste operand length", latent.len(), grad_out.len()));
    }
    Tensor::new(
        latent.shape(),
        ste_mask_apply(grad_out.data(), latent.data(), clip),
    )
}

pub(crate) fn ste_mask_apply(g: &[f64], latent: &[f64], clip: f64) -> Vec<f64> {
    g.iter()
        .zip(latent)
        .map(|(g, x)| if x.abs() <= clip { *g } else { 0.0 })
        .collect()
}

/// Real-valued latent weights together with their binarized copy.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryWeight {
    latent: Tensor,
    bin: Tensor,
}

impl BinaryWeight {
    pub fn new(latent: Tensor) -> Result<Self> {
        let bin = binarize(&latent)?;
        Ok(Self { latent, bin })
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn bin(&self) -> &Tensor {
        &self.bin
    }

    /// Replaces the latent weights and refreshes the binary copy.
    pub fn update(&mut self, latent: Tensor) -> Result<()> {
        self.bin = binarize(&latent)?;
        self.latent = latent;
        Ok(())
    }
}

/// Bits packed LSB-first into 64-bit words; bit `b` encodes `2b − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    words: Vec<u64>,
    len: usize,
}

impl PackedBits {
    pub fn from_bools(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self {
            words,
            len: bits.len(),
        }
    }

    /// Encodes a ±1 vector (`+1 → 1`, `−1 → 0`).
    pub fn from_signs(values: &[f64]) -> Self {
        let bits: Vec<bool> = values.iter().map(|&v| v >= 0.0).collect();
        Self::from_bools(&bits)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }
}

/// `2·popcount(XNOR(x, w)) − N`, the ±1 dot product of the encoded vectors.
pub fn xnor_popcount_dot(x: &PackedBits, w: &PackedBits) -> Result<i64> {
    if x.len != w.len {
        return Err(Error::dim("bit sequence length", x.len, w.len));
    }
    let n = x.len;
    let mut agree: u64 = 0;
    for (i, (a, b)) in x.words.iter().zip(&w.words).enumerate() {
        let mut xn = !(a ^ b);
        let used = n - i * 64;
        if used < 64 {
            xn &= (1u64 << used) - 1;
        }
        agree += u64::from(xn.count_ones());
    }
    Ok(2 * agree as i64 - n as i64)
}
