use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{LsptError, Result};
use crate::io::{read_f32s, read_u16, read_u32, write_f32s};

/// Images with labels and a per-sample mask of class-informative patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[B × 3 × H × W]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// One flag per patch, row-major over the patch grid.
    pub masks: Vec<Vec<bool>>,
    pub classes: usize,
    pub patch: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        masks: Vec<Vec<bool>>,
        classes: usize,
        patch: usize,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(LsptError::contract(format!("images must be [B, 3, H, W], got {s:?}")));
        }
        if patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
            return Err(LsptError::contract(format!(
                "patch {patch} does not tile {}×{} images",
                s[2], s[3]
            )));
        }
        if labels.len() != s[0] || masks.len() != s[0] {
            return Err(LsptError::contract(format!(
                "{} images, {} labels, {} masks",
                s[0],
                labels.len(),
                masks.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(LsptError::Label { label, classes });
        }
        let n = (s[2] / patch) * (s[3] / patch);
        if masks.iter().any(|m| m.len() != n) {
            return Err(LsptError::contract(format!("every mask must have {n} entries")));
        }
        Ok(Dataset {
            images,
            labels,
            masks,
            classes,
            patch,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_h(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn image_w(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h() / self.patch) * (self.image_w() / self.patch)
    }

    /// Sample `i` as a `[3 × H × W]` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let sz = 3 * self.image_h() * self.image_w();
        let data = self.images.data()[i * sz..(i + 1) * sz].to_vec();
        Tensor::new(vec![3, self.image_h(), self.image_w()], data).expect("image slice")
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let sz = 3 * self.image_h() * self.image_w();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sz..(i + 1) * sz]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), 3, self.image_h(), self.image_w()], data)
                .expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            classes: self.classes,
            patch: self.patch,
        }
    }

    /// Samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

const DATA_MAGIC: &[u8; 6] = b"LSPTD\0";
const DATA_VERSION: u16 = 1;

/// Writes the `LSPTD` format: magic, u16 version, u32 B/H/W/K, u16 labels,
/// masks packed least-significant bit first and padded to a byte per sample,
/// then f32 images; all little-endian. The patch size is not stored.
pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LsptError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| LsptError::io(path, e);
    if data.classes > u16::MAX as usize + 1 {
        return Err(LsptError::format(path, "too many classes for u16 labels"));
    }
    w.write_all(DATA_MAGIC).map_err(io)?;
    w.write_all(&DATA_VERSION.to_le_bytes()).map_err(io)?;
    for f in [data.len(), data.image_h(), data.image_w(), data.classes] {
        w.write_all(&(f as u32).to_le_bytes()).map_err(io)?;
    }
    for &l in &data.labels {
        w.write_all(&(l as u16).to_le_bytes()).map_err(io)?;
    }
    for m in &data.masks {
        let mut bytes = vec![0u8; m.len().div_ceil(8)];
        for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bytes).map_err(io)?;
    }
    write_f32s(&mut w, data.images.data()).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads an `LSPTD` file; `patch` fixes the mask length `HW/patch²`.
pub fn load_dataset<T: Scalar>(path: &Path, patch: usize) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| LsptError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| LsptError::io(path, e);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DATA_MAGIC {
        return Err(LsptError::format(path, "bad magic, not a dataset"));
    }
    let version = read_u16(&mut r).map_err(io)?;
    if version != DATA_VERSION {
        return Err(LsptError::format(path, format!("unsupported version {version}")));
    }
    let mut f = [0usize; 4];
    for slot in &mut f {
        *slot = read_u32(&mut r).map_err(io)? as usize;
    }
    let [b, h, w, k] = f;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(LsptError::format(path, format!("patch {patch} does not tile {h}×{w}")));
    }
    let n = (h / patch) * (w / patch);
    let mut labels = Vec::with_capacity(b);
    for _ in 0..b {
        labels.push(read_u16(&mut r).map_err(io)? as usize);
    }
    let mut masks = Vec::with_capacity(b);
    let mut bytes = vec![0u8; n.div_ceil(8)];
    for _ in 0..b {
        r.read_exact(&mut bytes).map_err(io)?;
        masks.push((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect());
    }
    let mut images = Tensor::zeros(&[b, 3, h, w]);
    read_f32s(&mut r, images.data_mut()).map_err(io)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(LsptError::format(path, "trailing bytes after images"));
    }
    Dataset::new(images, labels, masks, k, patch).map_err(|e| LsptError::format(path, e.to_string()))
}

/// Stratified split: each class contributes `round(fraction · count)`
/// samples to the first part, clamped so both parts get at least one.
/// Both parts keep the original sample order.
pub fn split<T: Scalar>(data: &Dataset<T>, train_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LsptError::contract(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(LsptError::contract(format!(
                "class {class} has {} samples, split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let take = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..take]);
        val.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train), data.subset(&val)))
}
