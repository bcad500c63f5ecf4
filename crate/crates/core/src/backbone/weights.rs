use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ViTConfig;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{LsptError, Result};
use crate::io::{read_f32s, read_u16, read_u32, write_f32s};

pub(crate) const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// One pre-norm transformer layer: attention and a two-layer gelu MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    /// `[D × 3D]`, columns ordered q | k | v, each split evenly across heads.
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Self::zeros(dim, hidden);
        w.qkv_w = Tensor::randn(&[dim, 3 * dim], INIT_STD, rng);
        w.proj_w = Tensor::randn(&[dim, dim], INIT_STD, rng);
        w.fc1_w = Tensor::randn(&[dim, hidden], INIT_STD, rng);
        w.fc2_w = Tensor::randn(&[hidden, dim], INIT_STD, rng);
        w
    }

    /// Unit layernorm affines, every linear map and bias zero: the layer is
    /// the identity through its residual paths.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        BlockWeights {
            ln1_gamma: Tensor::full(&[dim], T::one()),
            ln1_beta: Tensor::zeros(&[dim]),
            qkv_w: Tensor::zeros(&[dim, 3 * dim]),
            qkv_b: Tensor::zeros(&[3 * dim]),
            proj_w: Tensor::zeros(&[dim, dim]),
            proj_b: Tensor::zeros(&[dim]),
            ln2_gamma: Tensor::full(&[dim], T::one()),
            ln2_beta: Tensor::zeros(&[dim]),
            fc1_w: Tensor::zeros(&[dim, hidden]),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::zeros(&[hidden, dim]),
            fc2_b: Tensor::zeros(&[dim]),
        }
    }

    /// Canonical order, shared by the file formats and the optimizer.
    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn hidden(&self) -> usize {
        self.fc1_w.cols()
    }
}

/// Frozen encoder parameters.
///
/// Canonical order: `patch_w [3P²×D]`, `patch_b [D]`, `pos_embed [N×D]`,
/// `class_token [1×D]`, each block in order (see [`BlockWeights::tensors`]),
/// then the final layernorm `norm_gamma`, `norm_beta` applied to the class
/// token before the head.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<T> {
    pub config: ViTConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub class_token: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
}

const WEIGHTS_MAGIC: &[u8; 6] = b"LSPTW\0";
const WEIGHTS_VERSION: u16 = 1;
/// magic + version + eight u32 config fields
pub const WEIGHTS_HEADER_BYTES: usize = 6 + 2 + 8 * 4;

impl<T: Scalar> BackboneWeights<T> {
    /// Deterministic init: N(0, 0.02²) for embeddings and linear maps, zero
    /// biases, unit layernorm gains. Draws follow the canonical order from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n) = (config.dim, config.num_patches());
        let patch_w = Tensor::randn(&[config.patch_dim(), d], INIT_STD, &mut rng);
        let patch_b = Tensor::zeros(&[d]);
        let pos_embed = Tensor::randn(&[n, d], INIT_STD, &mut rng);
        let class_token = Tensor::randn(&[1, d], INIT_STD, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockWeights::init(d, config.mlp_hidden(), &mut rng))
            .collect();
        Ok(BackboneWeights {
            config,
            patch_w,
            patch_b,
            pos_embed,
            class_token,
            blocks,
            norm_gamma: Tensor::full(&[d], T::one()),
            norm_beta: Tensor::zeros(&[d]),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos_embed".to_string(), &self.pos_embed),
            ("class_token".to_string(), &self.class_token),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{l}.{n}"), t)));
        }
        out.push(("norm_gamma".to_string(), &self.norm_gamma));
        out.push(("norm_beta".to_string(), &self.norm_beta));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_embed,
            &mut self.class_token,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over the config and the exact bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for f in config_fields(&self.config) {
            h.update(f.to_le_bytes());
        }
        for (_, t) in self.tensors() {
            for &v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the `LSPTW` format: magic, u16 version, the eight u32 config
    /// fields (H, W, P, D, heads, L, mlp_ratio×10, K), then every parameter
    /// in canonical order as f32, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| LsptError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| LsptError::io(path, e);
        w.write_all(WEIGHTS_MAGIC).map_err(io)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io)?;
        for f in config_fields(&self.config) {
            w.write_all(&f.to_le_bytes()).map_err(io)?;
        }
        for (_, t) in self.tensors() {
            write_f32s(&mut w, t.data()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| LsptError::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| LsptError::io(path, e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(LsptError::format(path, "bad magic, not a weight file"));
        }
        let version = read_u16(&mut r).map_err(io)?;
        if version != WEIGHTS_VERSION {
            return Err(LsptError::format(path, format!("unsupported version {version}")));
        }
        let mut f = [0usize; 8];
        for slot in &mut f {
            *slot = read_u32(&mut r).map_err(io)? as usize;
        }
        let config = ViTConfig {
            image_h: f[0],
            image_w: f[1],
            patch: f[2],
            dim: f[3],
            heads: f[4],
            blocks: f[5],
            mlp_ratio_x10: f[6],
            classes: f[7],
        };
        config
            .validate()
            .map_err(|e| LsptError::format(path, format!("header: {e}")))?;
        let mut weights = Self::init_shapes(config);
        for t in weights.tensors_mut() {
            read_f32s(&mut r, t.data_mut()).map_err(io)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(LsptError::format(path, "trailing bytes after parameters"));
        }
        Ok(weights)
    }

    fn init_shapes(config: ViTConfig) -> Self {
        let d = config.dim;
        BackboneWeights {
            config,
            patch_w: Tensor::zeros(&[config.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[config.num_patches(), d]),
            class_token: Tensor::zeros(&[1, d]),
            blocks: (0..config.blocks)
                .map(|_| BlockWeights::zeros(d, config.mlp_hidden()))
                .collect(),
            norm_gamma: Tensor::zeros(&[d]),
            norm_beta: Tensor::zeros(&[d]),
        }
    }
}

fn config_fields(c: &ViTConfig) -> [u32; 8] {
    [
        c.image_h, c.image_w, c.patch, c.dim, c.heads, c.blocks, c.mlp_ratio_x10, c.classes,
    ]
    .map(|v| v as u32)
}
