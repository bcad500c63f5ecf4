use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Components, PromptLayout, StrategyKind, TemporalCoding};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::backbone::{BlockWeights, LayerVars, ViTConfig, INIT_STD};
use crate::error::{LsptError, Result};
use crate::io::{read_f32s, read_u16, read_u32, write_f32s};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// Gates in order input, forget, cell, output.
    Lstm,
    /// Gates in order update, reset, candidate.
    Gru,
}

impl CellKind {
    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["input", "forget", "cell", "output"],
            CellKind::Gru => &["update", "reset", "candidate"],
        }
    }

    pub fn gates(self) -> usize {
        self.gate_names().len()
    }
}

/// `pre = x·w_x + h·w_h + b` for one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentCell<T> {
    pub kind: CellKind,
    pub gates: Vec<GateWeights<T>>,
}

impl<T: Scalar> RecurrentCell<T> {
    /// Uniform in `±1/√D`, the usual recurrent-layer default.
    pub fn init(kind: CellKind, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (dim as f64).sqrt();
        let gates = (0..kind.gates())
            .map(|_| GateWeights {
                w_x: Tensor::uniform(&[dim, dim], -k, k, rng),
                w_h: Tensor::uniform(&[dim, dim], -k, k, rng),
                b: Tensor::uniform(&[dim], -k, k, rng),
            })
            .collect();
        RecurrentCell { kind, gates }
    }

    pub fn zeros(kind: CellKind, dim: usize) -> Self {
        let gates = (0..kind.gates())
            .map(|_| GateWeights {
                w_x: Tensor::zeros(&[dim, dim]),
                w_h: Tensor::zeros(&[dim, dim]),
                b: Tensor::zeros(&[dim]),
            })
            .collect();
        RecurrentCell { kind, gates }
    }

    pub fn param_count(&self) -> usize {
        self.gates
            .iter()
            .map(|g| g.w_x.numel() + g.w_h.numel() + g.b.numel())
            .sum()
    }
}

/// The trainable partition: prompt sets, the recurrent cell (shared by every
/// block boundary), the optional aggregator layer, and the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<T> {
    pub strategy: StrategyKind,
    pub dim: usize,
    pub classes: usize,
    pub num_prompts: usize,
    /// `P¹..P^L` for deep layouts, `[P¹]` for shallow, empty for a probe.
    pub prompts: Vec<Tensor<T>>,
    /// One shared cell, or `L − 1` per-boundary cells in the test fixture.
    pub cells: Vec<RecurrentCell<T>>,
    pub aggregator: Option<BlockWeights<T>>,
    /// `[D × K]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

const BANK_MAGIC: &[u8; 6] = b"LSPTP\0";
const BANK_VERSION: u16 = 1;
/// Keeps bank draws independent of a backbone initialized from the same seed.
const BANK_STREAM: u64 = 0x6c737074;

impl<T: Scalar> PromptBank<T> {
    pub fn init(strategy: StrategyKind, config: &ViTConfig, num_prompts: usize, seed: u64) -> Result<Self> {
        Self::build(strategy, config, num_prompts, seed, false)
    }

    /// Same as [`PromptBank::init`] but with a separate cell per block
    /// boundary instead of one shared cell.
    pub fn init_per_block_cells(
        strategy: StrategyKind,
        config: &ViTConfig,
        num_prompts: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::build(strategy, config, num_prompts, seed, true)
    }

    fn build(
        strategy: StrategyKind,
        config: &ViTConfig,
        num_prompts: usize,
        seed: u64,
        per_block: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BANK_STREAM);
        let d = config.dim;
        let c = strategy.components();
        let sets = match c.layout {
            PromptLayout::None => 0,
            PromptLayout::Shallow => 1,
            PromptLayout::Deep => config.blocks,
        };
        let num_prompts = if sets == 0 { 0 } else { num_prompts };
        // uniform ±√(6 / (fan_in + fan_out)) with the patch-embedding fans
        let v = (6.0 / (config.patch_dim() + d) as f64).sqrt();
        let prompts = (0..sets)
            .map(|_| Tensor::uniform(&[num_prompts, d], -v, v, &mut rng))
            .collect();
        let cell_kind = match c.temporal {
            TemporalCoding::Lstm => Some(CellKind::Lstm),
            TemporalCoding::Gru => Some(CellKind::Gru),
            _ => None,
        };
        let cell_sets = match (cell_kind, per_block) {
            (None, _) => 0,
            (Some(_), false) => 1,
            (Some(_), true) => config.blocks.saturating_sub(1),
        };
        let cells = cell_kind
            .map(|k| (0..cell_sets).map(|_| RecurrentCell::init(k, d, &mut rng)).collect())
            .unwrap_or_default();
        let aggregator = (c.temporal == TemporalCoding::Transformer)
            .then(|| BlockWeights::init(d, config.mlp_hidden(), &mut rng));
        let head_w = Tensor::randn(&[d, config.classes], INIT_STD, &mut rng);
        let head_b = Tensor::zeros(&[config.classes]);
        Ok(PromptBank {
            strategy,
            dim: d,
            classes: config.classes,
            num_prompts,
            prompts,
            cells,
            aggregator,
            head_w,
            head_b,
        })
    }

    /// Every tensor in canonical order with a stable name.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, p) in self.prompts.iter().enumerate() {
            out.push((format!("prompts.{}", l + 1), p));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            for (gate, name) in cell.gates.iter().zip(cell.kind.gate_names()) {
                out.push((format!("cell{i}.{name}.w_x"), &gate.w_x));
                out.push((format!("cell{i}.{name}.w_h"), &gate.w_h));
                out.push((format!("cell{i}.{name}.b"), &gate.b));
            }
        }
        if let Some(a) = &self.aggregator {
            for (name, t) in a.tensors() {
                out.push((format!("aggregator.{name}"), t));
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Same order as [`PromptBank::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.prompts.iter_mut().collect();
        for cell in &mut self.cells {
            for gate in &mut cell.gates {
                out.push(&mut gate.w_x);
                out.push(&mut gate.w_h);
                out.push(&mut gate.b);
            }
        }
        if let Some(a) = &mut self.aggregator {
            out.extend(a.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether this bank holds everything `components` needs on `config`.
    pub fn check_supports(&self, components: Components, config: &ViTConfig) -> Result<()> {
        let fail = |m: String| Err(LsptError::contract(m));
        if self.dim != config.dim || self.classes != config.classes {
            return fail(format!(
                "bank D={} K={} does not match backbone D={} K={}",
                self.dim, self.classes, config.dim, config.classes
            ));
        }
        let need_sets = match components.layout {
            PromptLayout::None => 0,
            PromptLayout::Shallow => 1,
            PromptLayout::Deep => config.blocks,
        };
        if self.prompts.len() < need_sets {
            return fail(format!(
                "{:?} layout needs {need_sets} prompt sets, bank has {}",
                components.layout,
                self.prompts.len()
            ));
        }
        let need_cell = match components.temporal {
            TemporalCoding::Lstm => Some(CellKind::Lstm),
            TemporalCoding::Gru => Some(CellKind::Gru),
            _ => None,
        };
        if let Some(kind) = need_cell {
            let boundaries = config.blocks.saturating_sub(1);
            let ok = !self.cells.is_empty()
                && self.cells.iter().all(|c| c.kind == kind)
                && (self.cells.len() == 1 || self.cells.len() == boundaries);
            if !ok && boundaries > 0 {
                return fail(format!("bank has no usable {kind:?} cell"));
            }
        }
        if components.temporal == TemporalCoding::Transformer && self.aggregator.is_none() {
            return fail("bank has no aggregator layer".into());
        }
        Ok(())
    }

    /// Writes the `LSPTP` format: magic, u16 version, u16 strategy tag, six
    /// u32 shape fields (D, K, Np, prompt sets, cell sets, aggregator MLP
    /// width or 0), then every tensor of [`PromptBank::named_parameters`] as
    /// f32, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| LsptError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| LsptError::io(path, e);
        w.write_all(BANK_MAGIC).map_err(io)?;
        w.write_all(&BANK_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.strategy.tag().to_le_bytes()).map_err(io)?;
        let hidden = self.aggregator.as_ref().map_or(0, |a| a.hidden());
        for f in [
            self.dim,
            self.classes,
            self.num_prompts,
            self.prompts.len(),
            self.cells.len(),
            hidden,
        ] {
            w.write_all(&(f as u32).to_le_bytes()).map_err(io)?;
        }
        for (_, t) in self.named_parameters() {
            write_f32s(&mut w, t.data()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| LsptError::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| LsptError::io(path, e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != BANK_MAGIC {
            return Err(LsptError::format(path, "bad magic, not a prompt bank"));
        }
        let version = read_u16(&mut r).map_err(io)?;
        if version != BANK_VERSION {
            return Err(LsptError::format(path, format!("unsupported version {version}")));
        }
        let tag = read_u16(&mut r).map_err(io)?;
        let strategy = StrategyKind::from_tag(tag)
            .ok_or_else(|| LsptError::format(path, format!("unknown strategy tag {tag}")))?;
        let mut f = [0usize; 6];
        for slot in &mut f {
            *slot = read_u32(&mut r).map_err(io)? as usize;
        }
        let [dim, classes, num_prompts, sets, cell_sets, hidden] = f;
        let kind = if strategy == StrategyKind::LsptGru {
            CellKind::Gru
        } else {
            CellKind::Lstm
        };
        let mut bank = PromptBank {
            strategy,
            dim,
            classes,
            num_prompts,
            prompts: (0..sets).map(|_| Tensor::zeros(&[num_prompts, dim])).collect(),
            cells: (0..cell_sets).map(|_| RecurrentCell::zeros(kind, dim)).collect(),
            aggregator: (hidden > 0).then(|| BlockWeights::zeros(dim, hidden)),
            head_w: Tensor::zeros(&[dim, classes]),
            head_b: Tensor::zeros(&[classes]),
        };
        for t in bank.parameters_mut() {
            read_f32s(&mut r, t.data_mut()).map_err(io)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(LsptError::format(path, "trailing bytes after parameters"));
        }
        Ok(bank)
    }
}

/// One registered recurrent cell: `(w_x, w_h, b)` per gate.
#[derive(Clone, Debug)]
pub struct CellVars {
    pub kind: CellKind,
    pub gates: Vec<[Var; 3]>,
}

impl CellVars {
    pub fn register<'a, T: Scalar>(g: &mut Graph<'a, T>, cell: &'a RecurrentCell<T>) -> Self {
        CellVars {
            kind: cell.kind,
            gates: cell
                .gates
                .iter()
                .map(|w| [g.param(&w.w_x), g.param(&w.w_h), g.param(&w.b)])
                .collect(),
        }
    }
}

/// A [`PromptBank`] registered as trainable leaves of one graph.
#[derive(Clone, Debug)]
pub struct BankVars {
    pub prompts: Vec<Var>,
    pub cells: Vec<CellVars>,
    pub aggregator: Option<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl BankVars {
    pub fn register<'a, T: Scalar>(g: &mut Graph<'a, T>, bank: &'a PromptBank<T>) -> Self {
        let prompts = bank.prompts.iter().map(|p| g.param(p)).collect();
        let cells = bank.cells.iter().map(|c| CellVars::register(g, c)).collect();
        let aggregator = bank.aggregator.as_ref().map(|a| LayerVars::trainable(g, a));
        BankVars {
            prompts,
            cells,
            aggregator,
            head_w: g.param(&bank.head_w),
            head_b: g.param(&bank.head_b),
        }
    }

    /// Rebuilds the handles from leaves listed in the order of [`BankVars::vars`].
    pub fn from_vars<T: Scalar>(bank: &PromptBank<T>, vars: &[Var]) -> Result<Self> {
        let expected = bank.named_parameters().len();
        if vars.len() != expected {
            return Err(LsptError::contract(format!(
                "expected {expected} bank leaves, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = |n: usize| -> Vec<Var> { it.by_ref().take(n).collect() };
        let prompts = take(bank.prompts.len());
        let cells = bank
            .cells
            .iter()
            .map(|c| CellVars {
                kind: c.kind,
                gates: take(c.kind.gates() * 3).chunks(3).map(|w| [w[0], w[1], w[2]]).collect(),
            })
            .collect();
        let aggregator = bank
            .aggregator
            .as_ref()
            .map(|_| LayerVars::from_vars(take(12).try_into().expect("twelve leaves")));
        let head = take(2);
        Ok(BankVars { prompts, cells, aggregator, head_w: head[0], head_b: head[1] })
    }

    /// Leaves in the order of [`PromptBank::named_parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.prompts.clone();
        for c in &self.cells {
            out.extend(c.gates.iter().flatten());
        }
        if let Some(a) = &self.aggregator {
            out.extend(a.vars());
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    /// The cell used after block `l` (1-based).
    pub fn cell_after(&self, l: usize) -> Option<&CellVars> {
        match self.cells.len() {
            0 => None,
            1 => self.cells.first(),
            _ => self.cells.get(l - 1),
        }
    }
}
