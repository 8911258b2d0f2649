//! Dataset ingestion: IDX containers (optionally gzip-compressed) and
//! synthetic two-class point sets.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{domain, Sampler};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    /// `N × H × W` pixels scaled to `[0, 1]`.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!("header needs {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let magic = be_u32(bytes, 0)?;
    let dims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic 0x{other:08x}"),
            })
        }
    };
    let shape: Vec<usize> = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * dims;
    let count: usize = shape.iter().product();
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: expected {expected} bytes, got {}", bytes.len()),
        });
    }
    let payload = &bytes[header..expected];
    if dims == 1 {
        return Ok(Idx::Labels(payload.iter().map(|&b| b as usize).collect()));
    }
    if count == 0 {
        return Err(Error::Parse {
            offset: 4,
            message: "image file with a zero dimension".into(),
        });
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Idx::Images(Tensor::new(&shape, data)?))
}

/// Reads an IDX file, decompressing gzip transparently.
pub fn read_idx(path: &Path) -> Result<Idx> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

/// Labelled samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// `(C, H, W)` of one sample.
    pub shape: (usize, usize, usize),
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// Maps pixels to `{0, 1}` at `threshold`.
    pub fn binarized(&self, threshold: f64) -> Dataset {
        Dataset {
            x: self.x.map(|v| if v > threshold { 1.0 } else { 0.0 }),
            ..self.clone()
        }
    }
}

/// Loads an image/label IDX pair as a 1-channel dataset.
pub fn load_idx_pair(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let Idx::Images(img) = read_idx(images)? else {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{} is not an image file", images.display()),
        });
    };
    let Idx::Labels(lab) = read_idx(labels)? else {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{} is not a label file", labels.display()),
        });
    };
    let (n, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if lab.len() != n {
        return Err(Error::dim("label count", n, lab.len()));
    }
    let classes = lab.iter().max().map_or(0, |m| m + 1);
    let ds = Dataset {
        x: img.reshape(&[n, h * w])?,
        labels: lab,
        shape: (1, h, w),
        classes: classes.max(2),
    };
    Ok(match limit {
        Some(k) if k < n => ds.subset(&(0..k).collect::<Vec<_>>()),
        _ => ds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synthetic {
    TwoMoons,
    Blobs,
}

impl Synthetic {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "two_moons" => Some(Self::TwoMoons),
            "blobs" => Some(Self::Blobs),
            _ => None,
        }
    }
}

/// Centres of the two blobs.
pub const BLOB_CENTERS: [(f64, f64); 2] = [(-2.5, 0.0), (2.5, 0.0)];

/// Two-class point set: class 0 gets `n − n/2` points, class 1 gets `n/2`,
/// interleaved. Two moons uses the upper arc `(cos t, sin t)` and the lower
/// arc `(1 − cos t, 0.5 − sin t)` with `t ~ U[0, π]`; `noise` is the
/// standard deviation of added Gaussian jitter (the blob spread for blobs).
pub fn gen_synthetic(kind: Synthetic, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::domain("synthetic datasets need n >= 2"));
    }
    if !(noise >= 0.0) {
        return Err(Error::domain("noise must be nonnegative"));
    }
    let mut s = Sampler::from_path(seed, &[domain::DATA, kind as u64]);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (px, py) = match kind {
            Synthetic::TwoMoons => {
                let t = std::f64::consts::PI * s.uniform();
                if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
            Synthetic::Blobs => BLOB_CENTERS[class],
        };
        let (jx, jy) = if noise > 0.0 {
            (noise * s.gaussian(), noise * s.gaussian())
        } else {
            (0.0, 0.0)
        };
        x.push(px + jx);
        x.push(py + jy);
        labels.push(class);
    }
    Ok(Dataset {
        x: Tensor::new(&[n, 2], x)?,
        labels,
        shape: (2, 1, 1),
        classes: 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn single_pixel_image() {
        let Idx::Images(t) = parse_idx(&idx_images(1, 1, 1, &[255])).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data(), &[1.0]);
    }

    #[test]
    fn labels_and_errors() {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend(3u32.to_be_bytes());
        b.extend([7, 0, 9]);
        assert_eq!(parse_idx(&b).unwrap(), Idx::Labels(vec![7, 0, 9]));

        let err = parse_idx(&idx_images(2, 2, 2, &[0; 5])).unwrap_err().to_string();
        assert!(err.contains("expected 24") && err.contains("got 21"), "{err}");
        assert!(matches!(parse_idx(&[0, 0, 8, 4, 0]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Parse { .. })));
    }

    #[test]
    fn two_moons_on_arcs() {
        let d = gen_synthetic(Synthetic::TwoMoons, 101, 0.0, 3).unwrap();
        assert_eq!(d.len(), 101);
        let ones = d.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!((101 - ones, ones), (51, 50));
        for (r, &l) in d.labels.iter().enumerate() {
            let (x, y) = (d.x.get2(r, 0), d.x.get2(r, 1));
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            assert!(((x - cx).hypot(y - cy) - 1.0).abs() < 1e-12);
            assert!(if l == 0 { y >= 0.0 } else { y <= 0.5 });
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        for k in [Synthetic::TwoMoons, Synthetic::Blobs] {
            let a = gen_synthetic(k, 100, 0.1, 9).unwrap();
            assert_eq!(a, gen_synthetic(k, 100, 0.1, 9).unwrap());
            assert_ne!(a, gen_synthetic(k, 100, 0.1, 10).unwrap());
            assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 50);
        }
        assert!(gen_synthetic(Synthetic::Blobs, 1, 0.1, 0).is_err());
    }
}
