use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use lspt_core::data::{gen_synthetic, load_dataset, save_dataset, split};
use lspt_core::diagnostics::{export_report, DiagnosticsReport, ReportMeta};
use lspt_core::prompts::{lspt_forward, param_partition};
use lspt_core::trainer::{evaluate, train, Evaluation, Metrics};
use lspt_core::{BackboneWeights, Dataset, LsptError, PromptBank, Result, Scalar, StrategyKind};

use crate::config::{Precision, RunConfig};

pub const BACKBONE_FILE: &str = "backbone.lsptw";
pub const BANK_FILE: &str = "bank.lsptp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "strategy,seed,val_acc,params";

/// Process exit status for an error.
pub fn exit_code(e: &LsptError) -> u8 {
    match e {
        LsptError::Io { .. } | LsptError::Format { .. } => 3,
        LsptError::Numeric(_) => 4,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LsptError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LsptError::io(path, e))
}

fn dataset<T: Scalar>(cfg: &RunConfig) -> Result<Dataset<T>> {
    match &cfg.data_path {
        Some(p) => {
            let d = load_dataset(p, cfg.vit.patch)?;
            if d.image_h() != cfg.vit.image_h || d.image_w() != cfg.vit.image_w || d.classes != cfg.vit.classes {
                return Err(LsptError::Config(format!(
                    "dataset {} ({}×{}, {} classes) does not match the vit config",
                    p.display(),
                    d.image_h(),
                    d.image_w(),
                    d.classes
                )));
            }
            Ok(d)
        }
        None => gen_synthetic(&cfg.data),
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let d: Dataset<f32> = gen_synthetic(&cfg.data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&d, out)?;
    Ok(d.len())
}

/// Result of one training run.
pub struct TrainReport {
    pub metrics: Metrics,
    pub trainable: usize,
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainReport> {
    let data: Dataset<T> = dataset(cfg)?;
    let (train_set, val_set) = split(&data, cfg.train_fraction, cfg.data.seed)?;
    let backbone = BackboneWeights::init(cfg.vit, cfg.backbone_seed)?;
    let bank = PromptBank::init(cfg.train.strategy, &cfg.vit, cfg.num_prompts, cfg.bank_seed)?;
    let trainable = param_partition(cfg.train.strategy, &bank, &backbone).counts.total();
    let outcome = train(&train_set, &val_set, &backbone, bank, &cfg.train)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        backbone.save(&dir.join(BACKBONE_FILE))?;
        outcome.bank.save(&dir.join(BANK_FILE))?;
        outcome.metrics.write_csv(&dir.join(METRICS_FILE))?;
    }
    Ok(TrainReport {
        metrics: outcome.metrics,
        trainable,
    })
}

/// Trains per the config; with `out`, writes the backbone, bank and metrics.
pub fn train_run(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainReport> {
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg, out),
        Precision::F32 => train_typed::<f32>(cfg, out),
    }
}

/// Backbone next to the bank unless given explicitly.
fn backbone_path(bank: &Path, backbone: Option<&Path>) -> PathBuf {
    backbone.map(Path::to_path_buf).unwrap_or_else(|| {
        bank.parent().unwrap_or(Path::new(".")).join(BACKBONE_FILE)
    })
}

pub fn eval(bank: &Path, data: &Path, backbone: Option<&Path>) -> Result<Evaluation> {
    let bb = BackboneWeights::<f64>::load(&backbone_path(bank, backbone))?;
    let pb = PromptBank::<f64>::load(bank)?;
    let d = load_dataset(data, bb.config.patch)?;
    evaluate(&d, &bb, &pb, pb.strategy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub val_acc: f64,
    pub params: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{:.6},{}", r.strategy, r.seed, r.val_acc, r.params).expect("write to string");
    }
    s
}

/// Trains every `(strategy, seed)` cell, strategies outermost. Cells run on
/// `threads` workers; each writes its own metrics file and the rows are
/// merged in cell order.
pub fn ablate(
    cfg: &RunConfig,
    strategies: &[StrategyKind],
    seeds: &[u64],
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<AblationRow>> {
    let cells: Vec<RunConfig> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| cfg.with_strategy(s).with_seed(seed)))
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let cell_dir = out.join("cells");
    create_dir(&cell_dir)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| LsptError::Config(format!("cannot start worker pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let report = train_run(c, None)?;
                let name = format!("{}_seed{}.csv", c.train.strategy, c.train.seed);
                report.metrics.write_csv(&cell_dir.join(name))?;
                Ok(AblationRow {
                    strategy: c.train.strategy,
                    seed: c.train.seed,
                    val_acc: report.metrics.last().map_or(0.0, |m| m.val_acc),
                    params: report.trainable,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_text(&out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    Ok(rows)
}

pub fn diagnose(
    bank: &Path,
    data: &Path,
    backbone: Option<&Path>,
    sample: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let bb = BackboneWeights::<f64>::load(&backbone_path(bank, backbone))?;
    let pb = PromptBank::<f64>::load(bank)?;
    let d = load_dataset(data, bb.config.patch)?;
    if sample >= d.len() {
        return Err(LsptError::Config(format!("sample {sample} outside dataset of {}", d.len())));
    }
    let (_, trace) = lspt_forward(&d.image(sample), &bb, &pb, pb.strategy)?;
    let c = bb.config;
    let meta = ReportMeta {
        strategy: pb.strategy,
        seed,
        sample,
        grid: (c.image_h / c.patch, c.image_w / c.patch),
    };
    // Samples without an object mask get no retention curve.
    let mask = Some(d.masks[sample].as_slice()).filter(|m| m.iter().any(|&b| b));
    let report = DiagnosticsReport::build(&trace, mask, meta)?;
    export_report(&report, out)
}

pub const PARAM_HEADER: &str = "strategy,prompts,cell,aggregator,head,trainable,frozen";

/// Parameter accounting of every strategy under the config's model.
pub fn param_table(cfg: &RunConfig) -> Result<String> {
    let backbone = BackboneWeights::<f32>::init(cfg.vit, 0)?;
    let mut s = format!("{PARAM_HEADER}\n");
    for strategy in StrategyKind::ALL {
        let bank = PromptBank::<f32>::init(strategy, &cfg.vit, cfg.num_prompts, 0)?;
        let p = param_partition(strategy, &bank, &backbone);
        let k = p.counts;
        writeln!(
            s,
            "{strategy},{},{},{},{},{},{}",
            k.prompts,
            k.cell,
            k.aggregator,
            k.head,
            k.total(),
            p.frozen_total
        )
        .expect("write to string");
    }
    Ok(s)
}

/// Parses `1,2,5` or the inclusive range `1..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || LsptError::Config(format!("bad seed list '{s}'"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Worker count from `LSPT_THREADS`; `None` leaves the pool default.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("LSPT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(LsptError::Config(format!("LSPT_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}
