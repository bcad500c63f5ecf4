//! Prompt-tuning strategies: VPT baselines, spatial and long-term prompt
//! coding, and their ablation variants.

mod bank;
mod coding;
mod forward;
mod kmeans;
mod partition;
mod strategy;

pub use bank::{BankVars, CellKind, CellVars, GateWeights, PromptBank, RecurrentCell};
pub use coding::{
    build_next_inputs, gru_step, gspc, gspc_kmeans, lstm_step, transformer_aggregate, ContextState,
    KMEANS_ITERS,
};
pub use forward::{forward_graph, lspt_forward, trace_of, BlockVars, PromptedForward};
pub use kmeans::{lloyd_kmeans, KMeans};
pub use partition::{param_partition, ParamCounts, ParamPartition};
pub use strategy::{Components, PromptLayout, SpatialCoding, StrategyKind, TemporalCoding};
