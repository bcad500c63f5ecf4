use super::bank::{BankVars, CellKind, CellVars};
use super::kmeans::lloyd_kmeans;
use super::{Components, PromptLayout, SpatialCoding, TemporalCoding};
use crate::autodiff::{Graph, Scalar, Var};
use crate::backbone::{transformer_layer, LayerVars, TokenBundle};
use crate::error::{LsptError, Result};

/// Lloyd iterations used by the k-means spatial coding inside a forward.
pub const KMEANS_ITERS: usize = 10;

/// The LSTM cell state carried between block boundaries within one forward.
#[derive(Clone, Copy, Debug)]
pub struct ContextState {
    pub cell: Var,
}

fn same_shape<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(LsptError::contract(format!(
            "{op}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn same_cols<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(LsptError::contract(format!("{op}: token widths {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Adds the mean of the patch rows to every prompt row.
pub fn gspc<T: Scalar>(g: &mut Graph<'_, T>, prompts_out: Var, patches_out: Var) -> Result<Var> {
    same_cols(g, "gspc", prompts_out, patches_out)?;
    let mean = g.mean_over_rows(patches_out)?;
    g.add(prompts_out, mean)
}

/// Adds k-means centroid `j` of the patch rows to prompt row `j`. The
/// clustering is a constant of the graph.
pub fn gspc_kmeans<T: Scalar>(
    g: &mut Graph<'_, T>,
    prompts_out: Var,
    patches_out: Var,
    iters: usize,
    seed: u64,
) -> Result<Var> {
    same_cols(g, "gspc_kmeans", prompts_out, patches_out)?;
    let (np, n) = (g.shape(prompts_out)[0], g.shape(patches_out)[0]);
    if np > n {
        return Err(LsptError::contract(format!("gspc_kmeans: {np} prompts but only {n} patches")));
    }
    let km = lloyd_kmeans(g.value(patches_out), np, iters, seed)?;
    let centroids = g.constant(km.centroids);
    g.add(prompts_out, centroids)
}

fn check_cell(cell: &CellVars, kind: CellKind) -> Result<()> {
    if cell.kind != kind || cell.gates.len() != kind.gates() {
        return Err(LsptError::contract(format!("expected a {kind:?} cell, got {:?}", cell.kind)));
    }
    Ok(())
}

fn gate<T: Scalar>(g: &mut Graph<'_, T>, w: [Var; 3], x: Var, h: Var) -> Result<Var> {
    let [w_x, w_h, b] = w;
    let a = g.matmul(x, w_x)?;
    let c = g.matmul(h, w_h)?;
    let s = g.add(a, c)?;
    g.add(s, b)
}

/// One LSTM step applied to every token row independently; returns
/// `(h_new, c_new)`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    cell: &CellVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    check_cell(cell, CellKind::Lstm)?;
    same_shape(g, "lstm_step", x, h)?;
    same_shape(g, "lstm_step", x, c)?;
    let i = gate(g, cell.gates[0], x, h)?;
    let i = g.sigmoid(i);
    let f = gate(g, cell.gates[1], x, h)?;
    let f = g.sigmoid(f);
    let cand = gate(g, cell.gates[2], x, h)?;
    let cand = g.tanh(cand);
    let o = gate(g, cell.gates[3], x, h)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// One GRU step: `h_new = (1 − z)⊙h + z⊙h̃`.
pub fn gru_step<T: Scalar>(g: &mut Graph<'_, T>, cell: &CellVars, x: Var, h: Var) -> Result<Var> {
    check_cell(cell, CellKind::Gru)?;
    same_shape(g, "gru_step", x, h)?;
    let z = gate(g, cell.gates[0], x, h)?;
    let z = g.sigmoid(z);
    let r = gate(g, cell.gates[1], x, h)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let cand = gate(g, cell.gates[2], x, rh)?;
    let cand = g.tanh(cand);
    let delta = g.sub(cand, h)?;
    let step = g.mul(z, delta)?;
    g.add(h, step)
}

/// Runs one transformer layer over `[spatial; new]` and keeps the rows at
/// the new-prompt positions. Also returns the `[heads × T × T]` attention.
pub fn transformer_aggregate<T: Scalar>(
    g: &mut Graph<'_, T>,
    layer: &LayerVars,
    heads: usize,
    spatial_prompts: Var,
    new_prompts: Var,
) -> Result<(Var, Var)> {
    same_shape(g, "transformer_aggregate", spatial_prompts, new_prompts)?;
    let np = g.shape(new_prompts)[0];
    let seq = g.concat_rows(&[spatial_prompts, new_prompts])?;
    let out = transformer_layer(g, layer, heads, seq)?;
    let kept = g.slice_rows(out.tokens, np, np)?;
    Ok((kept, out.attention))
}

/// Prompt input for block `l + 1` from the outputs of block `l` (1-based,
/// `l < blocks`). Updates `ctx` when the temporal coding carries a cell
/// state.
#[allow(clippy::too_many_arguments)]
pub fn build_next_inputs<T: Scalar>(
    g: &mut Graph<'_, T>,
    components: Components,
    l: usize,
    blocks: usize,
    heads: usize,
    block_out: &TokenBundle,
    bank: &BankVars,
    ctx: &mut ContextState,
) -> Result<Var> {
    if l == 0 || l >= blocks {
        return Err(LsptError::contract(format!(
            "no prompt coding after block {l} of {blocks}"
        )));
    }
    if components.layout != PromptLayout::Deep {
        return Ok(block_out.prompt_toks);
    }
    let fresh = *bank.prompts.get(l).ok_or_else(|| {
        LsptError::contract(format!("bank has no prompt set for block {}", l + 1))
    })?;
    let coded = match components.spatial {
        SpatialCoding::None => block_out.prompt_toks,
        SpatialCoding::Mean => gspc(g, block_out.prompt_toks, block_out.patch_toks)?,
        SpatialCoding::KMeans => {
            gspc_kmeans(g, block_out.prompt_toks, block_out.patch_toks, KMEANS_ITERS, l as u64)?
        }
    };
    let missing = |what: &str| LsptError::contract(format!("bank has no {what}"));
    match components.temporal {
        TemporalCoding::None if components.spatial == SpatialCoding::None => Ok(fresh),
        TemporalCoding::None => g.add(coded, fresh),
        TemporalCoding::Lstm => {
            let cell = bank.cell_after(l).ok_or_else(|| missing("LSTM cell"))?;
            let (h, c) = lstm_step(g, cell, fresh, coded, ctx.cell)?;
            ctx.cell = c;
            Ok(h)
        }
        TemporalCoding::Gru => {
            let cell = bank.cell_after(l).ok_or_else(|| missing("GRU cell"))?;
            gru_step(g, cell, fresh, coded)
        }
        TemporalCoding::Transformer => {
            let agg = bank.aggregator.as_ref().ok_or_else(|| missing("aggregator layer"))?;
            Ok(transformer_aggregate(g, agg, heads, coded, fresh)?.0)
        }
    }
}
