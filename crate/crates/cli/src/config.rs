//! `key = value` run configuration with dotted section prefixes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lspt_core::data::{SyntheticTaskSpec, TaskKind};
use lspt_core::trainer::{OptimizerKind, TrainConfig};
use lspt_core::{LsptError, Result, StrategyKind, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = LsptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            _ => Err(LsptError::Config(format!("precision must be f64 or f32, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub vit: ViTConfig,
    /// Seed of the frozen backbone weights.
    pub backbone_seed: u64,
    pub data: SyntheticTaskSpec,
    /// Dataset file to use instead of generating one.
    pub data_path: Option<PathBuf>,
    pub train_fraction: f64,
    pub num_prompts: usize,
    /// Seed of the prompt bank initialization.
    pub bank_seed: u64,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = ViTConfig::micro();
        RunConfig {
            vit,
            backbone_seed: 0,
            data: SyntheticTaskSpec {
                kind: TaskKind::LocalMotif,
                classes: vit.classes,
                samples_per_class: 50,
                noise_std: 0.1,
                image_h: vit.image_h,
                image_w: vit.image_w,
                patch: vit.patch,
                seed: 0,
            },
            data_path: None,
            train_fraction: 0.8,
            num_prompts: 4,
            bank_seed: 0,
            train: TrainConfig::default(),
            precision: Precision::F64,
        }
    }
}

/// Raw entries keyed by their full dotted name, with the line they came from.
struct Entries {
    origin: String,
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| LsptError::Config(format!("{origin}:{}: {m}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected 'key = value'"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key"));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            let value = v.trim_matches('"').to_string();
            if map.insert(key.clone(), (i + 1, value)).is_some() {
                return Err(err(&format!("duplicate key '{key}'")));
            }
        }
        Ok(Entries {
            origin: origin.to_string(),
            map,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                LsptError::Config(format!("{}:{line}: bad value '{v}' for {key}: {e}", self.origin))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(LsptError::Config(format!("{}:{line}: unknown key '{k}'", self.origin))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LsptError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(p) = &cfg.data_path {
            if p.is_relative() {
                cfg.data_path = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut e = Entries::parse(text, origin)?;
        let mut c = RunConfig::default();
        let v = &mut c.vit;
        e.set("vit.image_h", &mut v.image_h)?;
        e.set("vit.image_w", &mut v.image_w)?;
        e.set("vit.patch", &mut v.patch)?;
        e.set("vit.dim", &mut v.dim)?;
        e.set("vit.heads", &mut v.heads)?;
        e.set("vit.blocks", &mut v.blocks)?;
        e.set("vit.classes", &mut v.classes)?;
        if let Some(r) = e.take::<f64>("vit.mlp_ratio")? {
            let x10 = (r * 10.0).round();
            if !(x10 >= 1.0 && (r * 10.0 - x10).abs() < 1e-9) {
                return Err(LsptError::Config(format!("vit.mlp_ratio {r} must be a positive multiple of 0.1")));
            }
            v.mlp_ratio_x10 = x10 as usize;
        }
        e.set("vit.seed", &mut c.backbone_seed)?;

        let d = &mut c.data;
        d.classes = c.vit.classes;
        e.set("data.kind", &mut d.kind)?;
        e.set("data.classes", &mut d.classes)?;
        e.set("data.samples_per_class", &mut d.samples_per_class)?;
        e.set("data.noise_std", &mut d.noise_std)?;
        e.set("data.seed", &mut d.seed)?;
        (d.image_h, d.image_w, d.patch) = (c.vit.image_h, c.vit.image_w, c.vit.patch);
        c.data_path = e.take::<PathBuf>("data.path")?;
        e.set("data.train_fraction", &mut c.train_fraction)?;

        e.set("prompts.num_prompts", &mut c.num_prompts)?;
        e.set("prompts.strategy", &mut c.train.strategy)?;
        e.set("prompts.seed", &mut c.bank_seed)?;

        let t = &mut c.train;
        e.set::<OptimizerKind>("train.optimizer", &mut t.optimizer)?;
        e.set("train.lr", &mut t.lr)?;
        e.set("train.weight_decay", &mut t.weight_decay)?;
        e.set("train.momentum", &mut t.momentum)?;
        e.set("train.beta1", &mut t.beta1)?;
        e.set("train.beta2", &mut t.beta2)?;
        e.set("train.eps", &mut t.eps)?;
        e.set("train.epochs", &mut t.epochs)?;
        e.set("train.batch_size", &mut t.batch_size)?;
        e.set("train.seed", &mut t.seed)?;
        e.set("train.cosine", &mut t.cosine)?;
        e.set("train.record_time", &mut t.record_time)?;
        e.set("precision", &mut c.precision)?;
        e.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        if self.data_path.is_none() {
            self.data.validate()?;
        }
        if self.data.classes != self.vit.classes {
            return Err(LsptError::Config(format!(
                "data.classes {} differs from vit.classes {}",
                self.data.classes, self.vit.classes
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LsptError::Config(format!(
                "data.train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if self.train.strategy.components().layout != lspt_core::prompts::PromptLayout::None
            && self.num_prompts == 0
        {
            return Err(LsptError::Config(format!(
                "strategy {} needs prompts.num_prompts >= 1",
                self.train.strategy
            )));
        }
        if self.train.strategy == StrategyKind::LsptKMeans && self.num_prompts > self.vit.num_patches() {
            return Err(LsptError::Config(format!(
                "k-means coding needs num_prompts <= {} patches",
                self.vit.num_patches()
            )));
        }
        Ok(())
    }

    /// Replaces every seed (data, backbone, bank, shuffling) with `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c.backbone_seed = seed;
        c.bank_seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn with_strategy(&self, strategy: StrategyKind) -> Self {
        let mut c = self.clone();
        c.train.strategy = strategy;
        c
    }
}
