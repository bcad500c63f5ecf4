//! Per-block prompt/patch similarity and attention maps over a forward trace.

mod export;
mod maps;

pub use export::{export_report, read_map_csv, to_graymap, GRAYMAP_MIDPOINT};
pub use maps::{
    class_attention_map, cosine, prompt_attention_map, prompt_patch_cosine, retention_curve,
    retention_score, AttentionRows, DiagnosticsReport, ReportMeta,
};

#[cfg(test)]
mod tests;
