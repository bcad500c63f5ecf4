use crate::autodiff::{Scalar, Tensor};
use crate::backbone::{BlockTrace, ForwardTrace};
use crate::error::{LsptError, Result};
use crate::prompts::StrategyKind;

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == T::zero() || bb == T::zero() {
        return T::zero();
    }
    let c = ab / (aa.sqrt() * bb.sqrt());
    c.max(-T::one()).min(T::one())
}

/// Prompt tokens that block `l` hands on: the coded inputs of the next
/// block, or the raw prompt outputs after the last block.
fn prompts_after<T>(block: &BlockTrace<T>) -> &Tensor<T> {
    block.next_prompts.as_ref().unwrap_or(&block.prompt_toks)
}

/// Per block, `map[i]` is the cosine between patch token `i` and each prompt
/// token, averaged over prompts.
pub fn prompt_patch_cosine<T: Scalar>(trace: &ForwardTrace<T>) -> Result<Vec<Tensor<T>>> {
    if trace.num_prompts == 0 {
        return Err(LsptError::contract("cosine maps need at least one prompt token"));
    }
    let inv = T::one() / T::lit(trace.num_prompts as f64);
    trace
        .blocks
        .iter()
        .map(|b| {
            let prompts = prompts_after(b);
            let map = (0..trace.num_patches)
                .map(|i| {
                    let patch = b.patch_toks.row(i);
                    let sum = (0..prompts.rows()).fold(T::zero(), |s, k| s + cosine(prompts.row(k), patch));
                    sum * inv
                })
                .collect();
            Tensor::new(vec![trace.num_patches], map)
        })
        .collect()
}

/// Which query rows an attention map averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionRows {
    #[default]
    Class,
    Prompts,
}

fn attention_map<T: Scalar>(trace: &ForwardTrace<T>, l: usize, rows: AttentionRows) -> Result<Tensor<T>> {
    if l == 0 || l > trace.blocks.len() {
        return Err(LsptError::contract(format!("block {l} outside 1..={}", trace.blocks.len())));
    }
    let (np, n) = (trace.num_prompts, trace.num_patches);
    let t = 1 + np + n;
    let attn = trace.blocks[l - 1].attention.data();
    let queries: Vec<usize> = match rows {
        AttentionRows::Class => vec![0],
        AttentionRows::Prompts if np == 0 => {
            return Err(LsptError::contract("prompt attention rows need at least one prompt"))
        }
        AttentionRows::Prompts => (1..=np).collect(),
    };
    let mut map = vec![T::zero(); n];
    for h in 0..trace.heads {
        for &q in &queries {
            let row = &attn[(h * t + q) * t..(h * t + q + 1) * t];
            for (m, &a) in map.iter_mut().zip(&row[1 + np..]) {
                *m += a;
            }
        }
    }
    let total = map.iter().fold(T::zero(), |s, &v| s + v);
    if total > T::zero() {
        map.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(vec![n], map)
}

/// Head-averaged attention from the class token to the patch tokens of
/// block `l` (1-based), renormalized over patches.
pub fn class_attention_map<T: Scalar>(trace: &ForwardTrace<T>, l: usize) -> Result<Tensor<T>> {
    attention_map(trace, l, AttentionRows::Class)
}

/// Like [`class_attention_map`], averaging the prompt-token rows instead.
pub fn prompt_attention_map<T: Scalar>(trace: &ForwardTrace<T>, l: usize) -> Result<Tensor<T>> {
    attention_map(trace, l, AttentionRows::Prompts)
}

/// Mean of `map` over masked patches minus its mean over the rest.
pub fn retention_score<T: Scalar>(map: &Tensor<T>, mask: &[bool]) -> Result<T> {
    if mask.len() != map.numel() {
        return Err(LsptError::dim("retention mask", &[mask.len()], map.shape()));
    }
    let inside = mask.iter().filter(|&&m| m).count();
    if inside == 0 {
        return Err(LsptError::contract("retention needs a non-empty object mask"));
    }
    if inside == mask.len() {
        return Err(LsptError::contract("retention needs at least one unmasked patch"));
    }
    let (mut a, mut b) = (T::zero(), T::zero());
    for (&v, &m) in map.data().iter().zip(mask) {
        if m {
            a += v;
        } else {
            b += v;
        }
    }
    Ok(a / T::lit(inside as f64) - b / T::lit((mask.len() - inside) as f64))
}

/// [`retention_score`] of every cosine map in `report`.
pub fn retention_curve<T: Scalar>(report: &DiagnosticsReport<T>, mask: &[bool]) -> Result<Vec<T>> {
    report.cosine_maps.iter().map(|m| retention_score(m, mask)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportMeta {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub sample: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport<T> {
    pub meta: ReportMeta,
    pub cosine_maps: Vec<Tensor<T>>,
    pub attn_maps: Vec<Tensor<T>>,
    /// Empty when no object mask was given.
    pub retention: Vec<T>,
}

impl<T: Scalar> DiagnosticsReport<T> {
    pub fn build(trace: &ForwardTrace<T>, mask: Option<&[bool]>, meta: ReportMeta) -> Result<Self> {
        if meta.grid.0 * meta.grid.1 != trace.num_patches {
            return Err(LsptError::contract(format!(
                "grid {:?} does not cover {} patches",
                meta.grid, trace.num_patches
            )));
        }
        let cosine_maps = prompt_patch_cosine(trace)?;
        let attn_maps = (1..=trace.blocks.len())
            .map(|l| class_attention_map(trace, l))
            .collect::<Result<_>>()?;
        let mut report = DiagnosticsReport {
            meta,
            cosine_maps,
            attn_maps,
            retention: Vec::new(),
        };
        if let Some(mask) = mask {
            report.retention = retention_curve(&report, mask)?;
        }
        Ok(report)
    }
}
