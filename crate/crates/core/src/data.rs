//! Image datasets: IDX files, a synthetic correlated generator, and batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar1::Ar1Cov;
use crate::error::{Error, Result};
use crate::posterior::standard_normal;
use crate::trainer::mix_seed;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `count` flattened images of `rows × cols` pixels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    count: usize,
    rows: usize,
    cols: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f64>, rows: usize, cols: usize, split: Split) -> Result<Self> {
        let n = rows * cols;
        if n == 0 {
            return Err(Error::Dimension {
                what: "pixels per image",
                expected: 1,
                actual: 0,
            });
        }
        if !images.len().is_multiple_of(n) {
            return Err(Error::Dimension {
                what: "image array length (multiple of pixels per image)",
                expected: images.len().div_ceil(n) * n,
                actual: images.len(),
            });
        }
        if let Some((index, &value)) = images.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelOutOfRange { index, value });
        }
        Ok(Self {
            count: images.len() / n,
            images,
            rows,
            cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixels();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.images.chunks_exact(self.pixels())
    }

    /// First `count` images (or all of them).
    pub fn take(&self, count: usize) -> Dataset {
        let count = count.min(self.count);
        Dataset {
            images: self.images[..count * self.pixels()].to_vec(),
            count,
            rows: self.rows,
            cols: self.cols,
            split: self.split,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::TruncatedPayload {
        needed: offset + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
}

/// Parses an IDX image file (`ubyte`, 3 dimensions). Pixels are scaled by
/// `1/255`. Trailing bytes after the payload are ignored.
pub fn read_idx_images(bytes: &[u8], split: Split) -> Result<Dataset> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::UnexpectedMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(IDX_HEADER_LEN))
        .ok_or(Error::TruncatedPayload {
            needed: usize::MAX,
            available: bytes.len(),
        })?;
    if bytes.len() < needed {
        return Err(Error::TruncatedPayload {
            needed,
            available: bytes.len(),
        });
    }
    let images = bytes[IDX_HEADER_LEN..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(images, rows, cols, split)
}

/// Serializes to IDX with pixels quantized as `round(255·v)`.
pub fn write_idx_images(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(IDX_HEADER_LEN + data.images.len());
    for v in [IDX_IMAGE_MAGIC, data.count as u32, data.rows as u32, data.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(data.images.iter().map(|v| (v * 255.0).round() as u8));
    out
}

/// A synthetic dataset plus the Gaussian field it was squashed from.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub data: Dataset,
    /// Pre-sigmoid values, same layout as `data.images()`.
    pub field: Vec<f64>,
}

/// `count` images of `side × side` pixels. Every image row is an independent
/// stationary AR(1) sequence with unit marginal variance and lag-1
/// correlation `rho_pix`, pushed through a logistic sigmoid.
pub fn synth_correlated(count: usize, side: usize, rho_pix: f64, seed: u64, split: Split) -> Result<SynthDataset> {
    if side == 0 {
        return Err(Error::Dimension {
            what: "synthetic image side",
            expected: 1,
            actual: 0,
        });
    }
    let cov = Ar1Cov::new(side, rho_pix, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Vec::with_capacity(count * side * side);
    for _ in 0..count * side {
        let eps = standard_normal(&mut rng, side);
        field.extend(cov.color(&eps)?);
    }
    let images = field.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    Ok(SynthDataset {
        data: Dataset::new(images, side, side, split)?,
        field,
    })
}

/// Sizes and correlation of a synthetic train/test pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub side: usize,
    pub rho_pix: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_count: 4000,
            test_count: 1000,
            side: 8,
            rho_pix: 0.8,
        }
    }
}

impl SynthSpec {
    /// Train and test splits drawn from independent streams derived from `seed`.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let train = synth_correlated(self.train_count, self.side, self.rho_pix, mix_seed(seed, SALT_SYNTH_TRAIN), Split::Train)?;
        let test = synth_correlated(self.test_count, self.side, self.rho_pix, mix_seed(seed, SALT_SYNTH_TEST), Split::Test)?;
        Ok((train.data, test.data))
    }
}

const SALT_SYNTH_TRAIN: u64 = 0x0073_796e_7472;
const SALT_SYNTH_TEST: u64 = 0x0073_796e_7465;

/// A seeded permutation of `0..count` cut into consecutive batches; the last
/// may be short.
pub fn batches(count: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::lag_one_autocorrelation;

    fn header(magic: u32, count: u32, rows: u32, cols: u32) -> Vec<u8> {
        [magic, count, rows, cols].iter().flat_map(|v| v.to_be_bytes()).collect()
    }

    #[test]
    fn idx_wrong_magic() {
        let mut bytes = header(0x0000_0801, 1, 1, 1);
        bytes.push(0);
        let err = read_idx_images(&bytes, Split::Train).unwrap_err();
        assert!(matches!(err, Error::UnexpectedMagic { found: 0x801, .. }));
        assert!(err.to_string().contains("unexpected magic"));
    }

    #[test]
    fn idx_minimal_valid() {
        let mut bytes = header(IDX_IMAGE_MAGIC, 1, 1, 1);
        bytes.push(0xFF);
        let d = read_idx_images(&bytes, Split::Test).unwrap();
        assert_eq!((d.len(), d.pixels()), (1, 1));
        assert_eq!(d.image(0), &[1.0]);
        assert_eq!(d.split(), Split::Test);
    }

    #[test]
    fn idx_truncated() {
        let bytes = header(IDX_IMAGE_MAGIC, 2, 2, 2);
        let err = read_idx_images(&bytes, Split::Train).unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { needed: 24, available: 16 }));
        assert!(err.to_string().contains("truncated payload"));
        assert!(read_idx_images(&bytes[..10], Split::Train).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range() {
        assert!(matches!(
            Dataset::new(vec![0.5, 1.5], 1, 1, Split::Train),
            Err(Error::PixelOutOfRange { index: 1, .. })
        ));
        assert!(Dataset::new(vec![0.5; 3], 1, 2, Split::Train).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_correlated(10, 4, 0.5, 3, Split::Train).unwrap();
        let b = synth_correlated(10, 4, 0.5, 3, Split::Train).unwrap();
        assert_eq!(write_idx_images(&a.data), write_idx_images(&b.data));
        assert_eq!(a.field, b.field);
        assert!(synth_correlated(10, 4, 1.0, 3, Split::Train).is_err());
    }

    #[test]
    fn synth_white_has_no_autocorrelation() {
        let s = synth_correlated(700, 4, 0.0, 5, Split::Train).unwrap();
        let r = lag_one_autocorrelation(s.data.images().chunks(4));
        assert!(r.abs() < 0.05, "{r}");
    }

    #[test]
    fn synth_correlated_field() {
        let s = synth_correlated(700, 4, 0.9, 6, Split::Train).unwrap();
        let r = lag_one_autocorrelation(s.field.chunks(4));
        assert!((r - 0.9).abs() < 0.05, "{r}");
    }

    #[test]
    fn batches_cover_indices() {
        let b = batches(5, 2, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);

        assert_eq!(batches(5, 9, 1).len(), 1);
        assert_eq!(batches(50, 7, 42), batches(50, 7, 42));
        assert_ne!(batches(50, 7, 42), batches(50, 7, 43));
    }
}
