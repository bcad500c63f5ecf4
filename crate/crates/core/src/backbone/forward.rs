use super::{BackboneWeights, BlockWeights, LN_EPS};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{LsptError, Result};

/// A block's input or output sequence `[x_C, prompts, patches]`, kept as
/// three graph nodes with explicit segment lengths.
#[derive(Clone, Copy, Debug)]
pub struct TokenBundle {
    pub class_tok: Var,
    /// `[Np × D]`, possibly `Np = 0`.
    pub prompt_toks: Var,
    pub patch_toks: Var,
    pub num_prompts: usize,
    pub num_patches: usize,
}

/// [`BlockWeights`] registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

impl LayerVars {
    fn register<'a, T: Scalar>(
        g: &mut Graph<'a, T>,
        w: &'a BlockWeights<T>,
        leaf: fn(&mut Graph<'a, T>, &'a Tensor<T>) -> Var,
    ) -> Self {
        Self::from_vars(w.tensors().map(|(_, t)| leaf(g, t)))
    }

    /// From twelve existing nodes in [`BlockWeights::tensors`] order.
    pub fn from_vars(vars: [Var; 12]) -> Self {
        let [v0, v1, v2, v3, v4, v5, v6, v7, v8, v9, v10, v11] = vars;
        LayerVars {
            ln1_gamma: v0,
            ln1_beta: v1,
            qkv_w: v2,
            qkv_b: v3,
            proj_w: v4,
            proj_b: v5,
            ln2_gamma: v6,
            ln2_beta: v7,
            fc1_w: v8,
            fc1_b: v9,
            fc2_w: v10,
            fc2_b: v11,
        }
    }

    pub fn frozen<'a, T: Scalar>(g: &mut Graph<'a, T>, w: &'a BlockWeights<T>) -> Self {
        Self::register(g, w, Graph::constant_ref)
    }

    pub fn trainable<'a, T: Scalar>(g: &mut Graph<'a, T>, w: &'a BlockWeights<T>) -> Self {
        Self::register(g, w, Graph::param)
    }

    /// Canonical order, matching [`BlockWeights::tensors`].
    pub fn vars(&self) -> [Var; 12] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.ln2_gamma,
            self.ln2_beta,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

/// Output of one transformer layer over a full token sequence.
pub struct LayerOutput {
    pub tokens: Var,
    /// Post-softmax attention weights, `[heads × T × T]`.
    pub attention: Var,
}

/// Pre-norm layer: `h = x + MHSA(LN₁(x))`, `out = h + MLP(LN₂(h))`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LayerVars,
    heads: usize,
    x: Var,
) -> Result<LayerOutput> {
    let d = g.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(LsptError::contract(format!("dim {d} not divisible by {heads} heads")));
    }
    let eps = T::lit(LN_EPS);

    let n1 = g.layernorm(x, w.ln1_gamma, w.ln1_beta, eps)?;
    let qkv = g.linear(n1, w.qkv_w, w.qkv_b)?;
    let (merged, attention) = g.attention(qkv, heads)?;
    let proj = g.linear(merged, w.proj_w, w.proj_b)?;
    let h1 = g.add(x, proj)?;

    let n2 = g.layernorm(h1, w.ln2_gamma, w.ln2_beta, eps)?;
    let f = g.linear(n2, w.fc1_w, w.fc1_b)?;
    let f = g.gelu(f);
    let f = g.linear(f, w.fc2_w, w.fc2_b)?;
    let tokens = g.add(h1, f)?;
    Ok(LayerOutput { tokens, attention })
}

/// Non-overlapping `P×P` patches of a `[3×H×W]` image as rows of an
/// `[N × 3P²]` matrix. Patches run row-major over the grid; inside a patch
/// the features are channel-major, then row-major pixels.
pub fn extract_patches<T: Scalar>(
    image: &Tensor<T>,
    h: usize,
    w: usize,
    p: usize,
) -> Result<Tensor<T>> {
    if image.shape() != [3, h, w] {
        return Err(LsptError::Config(format!(
            "image shape {:?} does not match configured [3, {h}, {w}]",
            image.shape()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..3 {
                for i in 0..p {
                    let start = c * h * w + (pr * p + i) * w + pc * p;
                    out.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, 3 * p * p], out)
}

impl<T: Scalar> BackboneWeights<T> {
    /// `X⁰`: linear patch embedding plus positional embedding, `[N × D]`.
    ///
    /// Positional embeddings go to patch tokens only. The backbone is frozen,
    /// so this is computed outside any graph and can be cached per image.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let patches = extract_patches(image, c.image_h, c.image_w, c.patch)?;
        let (n, k, d) = (c.num_patches(), c.patch_dim(), c.dim);
        let mut out = self.pos_embed.data().to_vec();
        T::gemm(n, k, d, patches.data(), false, self.patch_w.data(), false, T::one(), &mut out);
        for row in out.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(self.patch_b.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// Block `l` (1-based) over `[x_C, prompts, patches]`; returns the
    /// re-split output and the `[heads × T × T]` attention weights.
    pub fn attn_block<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        l: usize,
        input: &TokenBundle,
    ) -> Result<(TokenBundle, Var)> {
        if l == 0 || l > self.blocks.len() {
            return Err(LsptError::contract(format!(
                "block index {l} outside 1..={}",
                self.blocks.len()
            )));
        }
        let w = LayerVars::frozen(g, &self.blocks[l - 1]);
        let seq = g.concat_rows(&[input.class_tok, input.prompt_toks, input.patch_toks])?;
        let out = transformer_layer(g, &w, self.config.heads, seq)?;
        let parts = g.split_rows(out.tokens, &[1, input.num_prompts, input.num_patches])?;
        Ok((
            TokenBundle {
                class_tok: parts[0],
                prompt_toks: parts[1],
                patch_toks: parts[2],
                ..*input
            },
            out.attention,
        ))
    }

    /// Final layernorm of the class token, the head's input.
    pub fn class_features<'a>(&'a self, g: &mut Graph<'a, T>, class_tok: Var) -> Result<Var> {
        let gamma = g.constant_ref(&self.norm_gamma);
        let beta = g.constant_ref(&self.norm_beta);
        g.layernorm(class_tok, gamma, beta, T::lit(LN_EPS))
    }

    /// Prompt-free encoder forward from cached patch tokens: returns the
    /// normalized final class token `[1 × D]`.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, patch_tokens: Var) -> Result<Var> {
        let d = self.config.dim;
        let mut bundle = TokenBundle {
            class_tok: g.constant_ref(&self.class_token),
            prompt_toks: g.constant(Tensor::zeros(&[0, d])),
            patch_toks: patch_tokens,
            num_prompts: 0,
            num_patches: self.config.num_patches(),
        };
        for l in 1..=self.blocks.len() {
            bundle = self.attn_block(g, l, &bundle)?.0;
        }
        self.class_features(g, bundle.class_tok)
    }
}

/// Per-block record of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace<T> {
    pub class_tok: Tensor<T>,
    /// Prompt outputs of the block (before any coding).
    pub prompt_toks: Tensor<T>,
    pub patch_toks: Tensor<T>,
    /// `[heads × T × T]`, `T = 1 + Np + N`.
    pub attention: Tensor<T>,
    /// Prompt inputs handed to the next block after coding; `None` after the
    /// last block.
    pub next_prompts: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub num_prompts: usize,
    pub num_patches: usize,
    pub heads: usize,
    pub blocks: Vec<BlockTrace<T>>,
}
