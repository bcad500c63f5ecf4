use super::bank::{BankVars, PromptBank};
use super::coding::{build_next_inputs, ContextState};
use super::{Components, PromptLayout, StrategyKind};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::backbone::{BackboneWeights, BlockTrace, ForwardTrace, TokenBundle};
use crate::error::Result;

/// Graph nodes of one block in a prompted forward.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub output: TokenBundle,
    pub attention: Var,
    pub next_prompts: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct PromptedForward {
    /// `[1 × K]`
    pub logits: Var,
    pub blocks: Vec<BlockVars>,
    /// Cell state after the last coding step.
    pub context: ContextState,
}

/// Prompted encoder forward from cached patch tokens `x0` (`[N × D]`) to
/// logits. `c0` overrides the zero initial cell state.
pub fn forward_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    backbone: &'a BackboneWeights<T>,
    bank: &BankVars,
    components: Components,
    x0: Var,
    c0: Option<Var>,
) -> Result<PromptedForward> {
    let cfg = &backbone.config;
    let d = cfg.dim;
    let first = match components.layout {
        PromptLayout::None => None,
        PromptLayout::Shallow | PromptLayout::Deep => bank.prompts.first().copied(),
    };
    let prompts = match first {
        Some(p) => p,
        None => g.constant(Tensor::zeros(&[0, d])),
    };
    let np = g.shape(prompts)[0];
    let mut ctx = ContextState {
        cell: match c0 {
            Some(c) => c,
            None => g.constant(Tensor::zeros(&[np, d])),
        },
    };
    let mut bundle = TokenBundle {
        class_tok: g.constant_ref(&backbone.class_token),
        prompt_toks: prompts,
        patch_toks: x0,
        num_prompts: np,
        num_patches: cfg.num_patches(),
    };
    let blocks_n = backbone.blocks.len();
    let mut blocks = Vec::with_capacity(blocks_n);
    for l in 1..=blocks_n {
        let (output, attention) = backbone.attn_block(g, l, &bundle)?;
        let next_prompts = if l < blocks_n {
            Some(build_next_inputs(g, components, l, blocks_n, cfg.heads, &output, bank, &mut ctx)?)
        } else {
            None
        };
        if let Some(p) = next_prompts {
            bundle = TokenBundle {
                prompt_toks: p,
                ..output
            };
        } else {
            bundle = output;
        }
        blocks.push(BlockVars {
            output,
            attention,
            next_prompts,
        });
    }
    let feat = backbone.class_features(g, bundle.class_tok)?;
    let logits = g.matmul(feat, bank.head_w)?;
    let logits = g.add(logits, bank.head_b)?;
    Ok(PromptedForward {
        logits,
        blocks,
        context: ctx,
    })
}

/// Copies the recorded values of a forward out of the graph.
pub fn trace_of<T: Scalar>(g: &Graph<'_, T>, fwd: &PromptedForward, heads: usize) -> ForwardTrace<T> {
    let first = fwd.blocks.first().map(|b| b.output);
    ForwardTrace {
        num_prompts: first.map_or(0, |b| b.num_prompts),
        num_patches: first.map_or(0, |b| b.num_patches),
        heads,
        blocks: fwd
            .blocks
            .iter()
            .map(|b| BlockTrace {
                class_tok: g.value(b.output.class_tok).clone(),
                prompt_toks: g.value(b.output.prompt_toks).clone(),
                patch_toks: g.value(b.output.patch_toks).clone(),
                attention: g.value(b.attention).clone(),
                next_prompts: b.next_prompts.map(|p| g.value(p).clone()),
            })
            .collect(),
    }
}

/// Runs `strategy` on one `[3×H×W]` image; returns logits `[K]` and the
/// per-block trace.
pub fn lspt_forward<T: Scalar>(
    image: &Tensor<T>,
    backbone: &BackboneWeights<T>,
    bank: &PromptBank<T>,
    strategy: StrategyKind,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let components = strategy.components();
    bank.check_supports(components, &backbone.config)?;
    let x0 = backbone.patch_embed(image)?;
    let mut g = Graph::new();
    let x0 = g.constant(x0);
    let vars = BankVars::register(&mut g, bank);
    let fwd = forward_graph(&mut g, backbone, &vars, components, x0, None)?;
    let trace = trace_of(&g, &fwd, backbone.config.heads);
    let logits = g.value(fwd.logits).clone().reshape(&[bank.classes])?;
    Ok((logits, trace))
}
