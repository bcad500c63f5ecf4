use crate::error::{LsptError, Result};

/// Shape of the encoder. `mlp_ratio_x10` stores the MLP width multiplier in
/// tenths, the same integer the weight file carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio_x10: usize,
    pub classes: usize,
}

impl ViTConfig {
    /// 32×32 images, 8×8 patches (16 tokens), width 64, 4 heads, 6 blocks.
    pub fn micro() -> Self {
        ViTConfig {
            image_h: 32,
            image_w: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            blocks: 6,
            mlp_ratio_x10: 20,
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LsptError::Config(msg));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return fail(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.blocks == 0 {
            return fail("at least one block required".into());
        }
        if self.mlp_ratio_x10 == 0 || !(self.dim * self.mlp_ratio_x10).is_multiple_of(10) {
            return fail(format!(
                "mlp ratio {}/10 does not give an integer width for dim {}",
                self.mlp_ratio_x10, self.dim
            ));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    /// Patch token count `HW / P²`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio_x10 / 10
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_has_sixteen_patches() {
        let c = ViTConfig::micro();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.mlp_hidden(), 128);
    }

    #[test]
    fn four_by_four_with_patch_two_gives_four_tokens() {
        let c = ViTConfig {
            image_h: 4,
            image_w: 4,
            patch: 2,
            dim: 8,
            heads: 2,
            blocks: 2,
            mlp_ratio_x10: 20,
            classes: 2,
        };
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 4);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut c = ViTConfig::micro();
        c.patch = 5;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::micro();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::micro();
        c.mlp_ratio_x10 = 13;
        c.dim = 6;
        c.heads = 1;
        assert!(c.validate().is_err());
    }
}
