use std::fmt;
use std::str::FromStr;

use crate::error::LsptError;

/// Where prompt tokens enter the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptLayout {
    /// No prompts; only the head trains.
    None,
    /// One set before block 1; its outputs travel through the blocks.
    Shallow,
    /// A fresh set per block.
    Deep,
}

/// How the previous block's patch tokens are folded into its prompt outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialCoding {
    None,
    /// Add the patch-token mean to every prompt row.
    Mean,
    /// Add per-prompt k-means centroids of the patch tokens.
    KMeans,
}

/// How the coded prompts and the fresh prompt set become the next input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalCoding {
    /// Fresh set only, or fresh set plus the spatially coded prompts when a
    /// spatial coding is active.
    None,
    Lstm,
    Gru,
    Transformer,
}

/// The three independent switches a strategy is made of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Components {
    pub layout: PromptLayout,
    pub spatial: SpatialCoding,
    pub temporal: TemporalCoding,
}

impl Components {
    /// Number of switches that differ.
    pub fn diff(&self, other: &Components) -> usize {
        usize::from(self.layout != other.layout)
            + usize::from(self.spatial != other.spatial)
            + usize::from(self.temporal != other.temporal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    LinearProbe,
    VptShallow,
    VptDeep,
    Lspt,
    LsptGru,
    LsptTransformer,
    LsptKMeans,
    LsptGspcOnly,
    LsptLpcOnly,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::LinearProbe,
        StrategyKind::VptShallow,
        StrategyKind::VptDeep,
        StrategyKind::Lspt,
        StrategyKind::LsptGru,
        StrategyKind::LsptTransformer,
        StrategyKind::LsptKMeans,
        StrategyKind::LsptGspcOnly,
        StrategyKind::LsptLpcOnly,
    ];

    /// The LSPT variants that swap exactly one component.
    pub const ABLATIONS: [StrategyKind; 5] = [
        StrategyKind::LsptGru,
        StrategyKind::LsptTransformer,
        StrategyKind::LsptKMeans,
        StrategyKind::LsptGspcOnly,
        StrategyKind::LsptLpcOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::LinearProbe => "linear-probe",
            StrategyKind::VptShallow => "vpt-shallow",
            StrategyKind::VptDeep => "vpt-deep",
            StrategyKind::Lspt => "lspt",
            StrategyKind::LsptGru => "lspt-gru",
            StrategyKind::LsptTransformer => "lspt-transformer",
            StrategyKind::LsptKMeans => "lspt-kmeans",
            StrategyKind::LsptGspcOnly => "lspt-gspc-only",
            StrategyKind::LsptLpcOnly => "lspt-lpc-only",
        }
    }

    /// Stable id used in bank files.
    pub fn tag(self) -> u16 {
        Self::ALL.iter().position(|&s| s == self).expect("listed") as u16
    }

    pub fn from_tag(tag: u16) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn components(self) -> Components {
        use PromptLayout as L;
        use SpatialCoding as S;
        use TemporalCoding as T;
        let (layout, spatial, temporal) = match self {
            StrategyKind::LinearProbe => (L::None, S::None, T::None),
            StrategyKind::VptShallow => (L::Shallow, S::None, T::None),
            StrategyKind::VptDeep => (L::Deep, S::None, T::None),
            StrategyKind::Lspt => (L::Deep, S::Mean, T::Lstm),
            StrategyKind::LsptGru => (L::Deep, S::Mean, T::Gru),
            StrategyKind::LsptTransformer => (L::Deep, S::Mean, T::Transformer),
            StrategyKind::LsptKMeans => (L::Deep, S::KMeans, T::Lstm),
            StrategyKind::LsptGspcOnly => (L::Deep, S::Mean, T::None),
            StrategyKind::LsptLpcOnly => (L::Deep, S::None, T::Lstm),
        };
        Components {
            layout,
            spatial,
            temporal,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = LsptError;

    /// Accepts the kebab-case names and the `VPTDeep` / `LSPT_GRU` spellings,
    /// case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Self::ALL
            .into_iter()
            .find(|k| k.name().replace('-', "") == key)
            .ok_or_else(|| LsptError::Config(format!("unknown strategy '{s}'")))
    }
}
