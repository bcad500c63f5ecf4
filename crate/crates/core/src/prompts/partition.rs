use super::bank::PromptBank;
use super::{PromptLayout, StrategyKind, TemporalCoding};
use crate::autodiff::Scalar;
use crate::backbone::BackboneWeights;

/// Element counts per group of the trainable partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub prompts: usize,
    pub cell: usize,
    pub aggregator: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.prompts + self.cell + self.aggregator + self.head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    /// `(name, numel)` of every bank tensor `strategy` trains.
    pub trainable: Vec<(String, usize)>,
    /// `(name, numel)` of every backbone tensor.
    pub frozen: Vec<(String, usize)>,
    pub counts: ParamCounts,
    pub frozen_total: usize,
}

/// Splits parameters into what `strategy` trains (the relevant part of the
/// bank) and what stays frozen (the whole backbone).
pub fn param_partition<T: Scalar>(
    strategy: StrategyKind,
    bank: &PromptBank<T>,
    backbone: &BackboneWeights<T>,
) -> ParamPartition {
    let c = strategy.components();
    let prompt_sets = match c.layout {
        PromptLayout::None => 0,
        PromptLayout::Shallow => 1,
        PromptLayout::Deep => bank.prompts.len(),
    };
    let uses_cell = matches!(c.temporal, TemporalCoding::Lstm | TemporalCoding::Gru);
    let uses_agg = c.temporal == TemporalCoding::Transformer;
    let mut counts = ParamCounts::default();
    let mut trainable = Vec::new();
    for (name, t) in bank.named_parameters() {
        let slot = if let Some(rest) = name.strip_prefix("prompts.") {
            let idx: usize = rest.parse().unwrap_or(usize::MAX);
            (idx <= prompt_sets).then_some(&mut counts.prompts)
        } else if name.starts_with("cell") {
            uses_cell.then_some(&mut counts.cell)
        } else if name.starts_with("aggregator.") {
            uses_agg.then_some(&mut counts.aggregator)
        } else {
            Some(&mut counts.head)
        };
        if let Some(slot) = slot {
            *slot += t.numel();
            trainable.push((name, t.numel()));
        }
    }
    let frozen: Vec<(String, usize)> = backbone
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let frozen_total = frozen.iter().map(|(_, n)| n).sum();
    ParamPartition {
        trainable,
        frozen,
        counts,
        frozen_total,
    }
}
