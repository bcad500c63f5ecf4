use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{LsptError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// The class is the texture filling one randomly placed patch.
    LocalMotif,
    /// The class is the unordered pair of textures at two opposite grid
    /// corners.
    LongRangePair,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LocalMotif => "local_motif",
            TaskKind::LongRangePair => "long_range_pair",
        }
    }

    /// Informative patches per sample.
    pub fn motifs_per_sample(self) -> usize {
        match self {
            TaskKind::LocalMotif => 1,
            TaskKind::LongRangePair => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = LsptError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "local_motif" => Ok(TaskKind::LocalMotif),
            "long_range_pair" => Ok(TaskKind::LongRangePair),
            _ => Err(LsptError::Config(format!("unknown task kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LsptError::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples_per_class < 2 {
            return bad(format!("need at least 2 samples per class, got {}", self.samples_per_class));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} does not tile {}×{} images",
                self.patch, self.image_h, self.image_w
            ));
        }
        if self.kind == TaskKind::LongRangePair && self.grid().0 * self.grid().1 < 2 {
            return bad("long_range_pair needs at least two patches".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    /// Distinct textures the task draws from.
    pub fn num_motifs(&self) -> usize {
        match self.kind {
            TaskKind::LocalMotif => self.classes,
            TaskKind::LongRangePair => {
                (1..).find(|m| m * (m + 1) / 2 >= self.classes).expect("finite")
            }
        }
    }

    /// The `[3 × P × P]` textures, f32-representable, in `[−1, 1]`.
    pub fn motifs<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_motifs())
            .map(|_| Tensor::uniform(&[3, self.patch, self.patch], -1.0, 1.0, &mut rng))
            .collect()
    }
}

/// The first `classes` unordered motif pairs `(a ≤ b)` in lexicographic
/// order over `motifs` textures; pair `k` defines class `k`.
pub fn motif_pairs(motifs: usize, classes: usize) -> Vec<(usize, usize)> {
    (0..motifs)
        .flat_map(|a| (a..motifs).map(move |b| (a, b)))
        .take(classes)
        .collect()
}

/// Generates a balanced dataset: sample `i` has label `i mod K`. Images are
/// zero except for the motif patches, plus Gaussian noise everywhere, and
/// are rounded to f32 so they survive the dataset file unchanged.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticTaskSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let motifs: Vec<Tensor<f64>> = spec.motifs();
    let pairs = motif_pairs(spec.num_motifs(), spec.classes);
    let (gh, gw) = spec.grid();
    let (h, w, p) = (spec.image_h, spec.image_w, spec.patch);
    let n = gh * gw;
    let b = spec.classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| LsptError::Config(e.to_string()))?;

    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut labels = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for i in 0..b {
        let label = i % spec.classes;
        let placed: Vec<(usize, usize)> = match spec.kind {
            TaskKind::LocalMotif => vec![(rng.random_range(0..n), label)],
            TaskKind::LongRangePair => {
                let corners = if rng.random_bool(0.5) {
                    [0, n - 1]
                } else {
                    [gw - 1, (gh - 1) * gw]
                };
                let (a, c) = pairs[label];
                let (a, c) = if rng.random_bool(0.5) { (a, c) } else { (c, a) };
                vec![(corners[0], a), (corners[1], c)]
            }
        };
        let mut img = vec![0.0f64; 3 * h * w];
        let mut mask = vec![false; n];
        for &(cell, m) in &placed {
            mask[cell] = true;
            let (r0, c0) = ((cell / gw) * p, (cell % gw) * p);
            let t = motifs[m].data();
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        img[ch * h * w + (r0 + y) * w + c0 + x] = t[(ch * p + y) * p + x];
                    }
                }
            }
        }
        for v in &mut img {
            if spec.noise_std > 0.0 {
                *v += noise.sample(&mut rng);
            }
            images.push(T::from_f32_storage(*v as f32));
        }
        labels.push(label);
        masks.push(mask);
    }
    Dataset::new(
        Tensor::new(vec![b, 3, h, w], images)?,
        labels,
        masks,
        spec.classes,
        p,
    )
}
