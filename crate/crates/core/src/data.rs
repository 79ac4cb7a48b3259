//! Dataset ingestion: IDX-format image/label files and the synthetic
//! Gaussian-mixture classification task used for desk-scale experiments.
//! Pixels live in [0,1] everywhere past this module.

use crate::error::{Error, Result};
use crate::numerics::{tags, RngState, Tensor};
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// [n, dim] rows in [0,1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-sample dimensions as stored (e.g. [28, 28] for image files,
    /// [dim] for synthetic vectors). Product equals the row width.
    pub sample_dims: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sample_dims.iter().product()
    }

    /// Gather a batch by indices, preserving order.
    pub fn select(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(vec![idx.len(), d], data).expect("gathered rows are rectangular"),
            labels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.view_rows() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.images.view_rows(),
                labels: self.labels.len(),
            });
        }
        for &l in &self.labels {
            if l >= self.classes {
                return Err(Error::InvalidLabel {
                    label: l,
                    classes: self.classes,
                });
            }
        }
        if self.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config("pixel outside [0,1]".to_string()));
        }
        Ok(())
    }
}

// ── IDX format ──────────────────────────────────────────────────────────────

fn be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedFile {
            path: path.to_string().into(),
            detail: format!("need {} header bytes, file has {}", end, bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Parse an IDX image/label file pair: big-endian magic and dimension
/// header, unsigned-byte payload, pixels mapped to [0,1] by /255.
pub fn parse_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let ipath = image_path.display().to_string();
    let lpath = label_path.display().to_string();
    let ibytes = std::fs::read(image_path).map_err(|e| Error::io(&ipath, e))?;
    let lbytes = std::fs::read(label_path).map_err(|e| Error::io(&lpath, e))?;

    let imagic = be_u32(&ibytes, 0, &ipath)?;
    if imagic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: ipath.into(),
            expected: IDX_IMAGE_MAGIC,
            found: imagic,
        });
    }
    let n = be_u32(&ibytes, 4, &ipath)? as usize;
    let rows = be_u32(&ibytes, 8, &ipath)? as usize;
    let cols = be_u32(&ibytes, 12, &ipath)? as usize;
    let payload = n * rows * cols;
    if ibytes.len() != 16 + payload {
        return Err(Error::TruncatedFile {
            path: ipath.into(),
            detail: format!("expected {} payload bytes, found {}", payload, ibytes.len() - 16),
        });
    }

    let lmagic = be_u32(&lbytes, 0, &lpath)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: lpath.into(),
            expected: IDX_LABEL_MAGIC,
            found: lmagic,
        });
    }
    let ln = be_u32(&lbytes, 4, &lpath)? as usize;
    if lbytes.len() != 8 + ln {
        return Err(Error::TruncatedFile {
            path: lpath.into(),
            detail: format!("expected {} label bytes, found {}", ln, lbytes.len() - 8),
        });
    }
    if n != ln {
        return Err(Error::CountMismatch { images: n, labels: ln });
    }

    let data: Vec<f32> = ibytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        images: Tensor::from_vec(vec![n, rows * cols], data)?,
        labels,
        classes,
        sample_dims: vec![rows, cols],
    })
}

/// Write an IDX pair from byte pixels. The inverse of parse_idx: a
/// write-then-read round trip is bit-exact.
pub fn write_idx(
    image_path: &Path,
    label_path: &Path,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::CountMismatch {
            images: if rows * cols == 0 { 0 } else { pixels.len() / (rows * cols) },
            labels: n,
        });
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    ib.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    ib.extend_from_slice(&(n as u32).to_be_bytes());
    ib.extend_from_slice(&(rows as u32).to_be_bytes());
    ib.extend_from_slice(&(cols as u32).to_be_bytes());
    ib.extend_from_slice(pixels);
    crate::checkpoint::atomic_write(image_path, &ib)?;

    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(n as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    crate::checkpoint::atomic_write(label_path, &lb)?;
    Ok(())
}

/// Quantize [0,1] pixels to the u8 grid (round to nearest).
pub fn quantize(pixels: &[f32]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

// ── synthetic task ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            dim: 64,
            n_per_class: 50,
            noise_sigma: 0.05,
        }
    }
}

/// One sample in five goes to the test split; the stride keeps per-class
/// counts exact whenever n_per_class is a multiple of five.
pub const SPLIT_STRIDE: usize = 5;

/// Midpoint offset of the strong (reliable) coordinates.
pub const STRONG_OFFSET: f64 = 0.13;
/// Midpoint offset of the weak coordinates. Deliberately smaller than the
/// common Linf budget 8/255 ≈ 0.031, so an attacker inside that budget can
/// reverse every weak coordinate's vote while the strong block survives.
pub const WEAK_OFFSET: f64 = 0.02;
/// Probability that a sample's strong block is redrawn from another class,
/// capping how accurate a strong-only classifier can be.
pub const STRONG_FLIP: f64 = 0.15;

/// Width of the strong block: the shortest binary code that separates all
/// classes, and at least two coordinates.
fn strong_width(classes: usize) -> usize {
    let mut k = 2usize;
    while (1usize << k) < classes {
        k += 1;
    }
    k
}

/// Generate the desk-scale classification task, a class-conditional Gaussian
/// mixture that is separable but attackable. Each class mean splits into a
/// strong block (binary class code at offset ±0.18, occasionally flipped to
/// another class's code) and a weak block (a per-class sign pattern at
/// offset ±0.016, individually inside typical attack budgets). A naturally
/// fit model leans on the weak block to resolve the flipped samples, which
/// an Linf adversary then turns against it; a model trained under attack is
/// pushed onto the strong block. Samples add isotropic Gaussian noise and
/// clip to [0,1]. Deterministic in seed. Returns (train, test) split 80/20
/// by fixed stride over the generation order.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.n_per_class == 0 {
        return Err(Error::config(format!(
            "synthetic task needs >= 2 classes, positive dim and count; got {cfg:?}"
        )));
    }
    let k = strong_width(cfg.classes);
    if cfg.dim <= k {
        return Err(Error::config(format!(
            "synthetic dim {} too small: {} classes need {} strong coordinates plus at least one weak coordinate",
            cfg.dim, cfg.classes, k
        )));
    }
    let root = RngState::new(seed);
    let mut means_rng = root.derive(tags::DATA_MEANS);
    // strong[c][j] encodes bit j of c; weak signs are drawn independently
    let strong: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            (0..k)
                .map(|j| {
                    if (c >> j) & 1 == 1 {
                        0.5 + STRONG_OFFSET
                    } else {
                        0.5 - STRONG_OFFSET
                    }
                })
                .collect()
        })
        .collect();
    let weak: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.dim - k)
                .map(|_| {
                    if means_rng.next_u64() & 1 == 1 {
                        0.5 + WEAK_OFFSET
                    } else {
                        0.5 - WEAK_OFFSET
                    }
                })
                .collect()
        })
        .collect();

    let n_total = cfg.classes * cfg.n_per_class;
    let mut noise_rng = root.derive(tags::DATA_NOISE);
    let mut images = Vec::with_capacity(n_total * cfg.dim);
    let mut labels = Vec::with_capacity(n_total);
    for c in 0..cfg.classes {
        for _ in 0..cfg.n_per_class {
            let sc = if noise_rng.uniform() < STRONG_FLIP {
                // redraw the strong code from the other classes uniformly
                let r = noise_rng.below((cfg.classes - 1) as u64) as usize;
                if r >= c {
                    r + 1
                } else {
                    r
                }
            } else {
                c
            };
            for &m in strong[sc].iter().chain(weak[c].iter()) {
                let v = m + cfg.noise_sigma * noise_rng.normal();
                images.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }

    let mut tr_img = Vec::new();
    let mut tr_lbl = Vec::new();
    let mut te_img = Vec::new();
    let mut te_lbl = Vec::new();
    for i in 0..n_total {
        let row = &images[i * cfg.dim..(i + 1) * cfg.dim];
        if i % SPLIT_STRIDE == SPLIT_STRIDE - 1 {
            te_img.extend_from_slice(row);
            te_lbl.push(labels[i]);
        } else {
            tr_img.extend_from_slice(row);
            tr_lbl.push(labels[i]);
        }
    }
    let make = |img: Vec<f32>, lbl: Vec<usize>| -> Result<Dataset> {
        let n = lbl.len();
        Ok(Dataset {
            images: Tensor::from_vec(vec![n, cfg.dim], img)?,
            labels: lbl,
            classes: cfg.classes,
            sample_dims: vec![cfg.dim],
        })
    };
    Ok((make(tr_img, tr_lbl)?, make(te_img, te_lbl)?))
}

/// Shuffled batch index lists for one epoch. The last batch may be short;
/// order is fully determined by the stream.
pub fn epoch_batches(n: usize, batch: usize, rng: &RngState) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut st = *rng;
    st.shuffle(&mut idx);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
