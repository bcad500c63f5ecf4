use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::DiagnosticsReport;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{LsptError, Result};

/// Pixel value of every cell in a constant map.
pub const GRAYMAP_MIDPOINT: u8 = 128;

/// Binary (P5) 8-bit graymap of `map` on a `rows × cols` grid, linearly
/// scaled from the map's min to max. Returns the bytes and the `(min, max)`
/// used.
pub fn to_graymap<T: Scalar>(map: &Tensor<T>, grid: (usize, usize)) -> Result<(Vec<u8>, (f64, f64))> {
    let (rows, cols) = grid;
    if rows * cols != map.numel() {
        return Err(LsptError::dim("graymap", &[rows, cols], map.shape()));
    }
    let vals: Vec<f64> = map.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(LsptError::Numeric("non-finite value in map".into()));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            GRAYMAP_MIDPOINT
        }
    }));
    Ok((out, (lo, hi)))
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| LsptError::io(&path, e))?;
    Ok(path)
}

fn map_csv<T: Scalar>(map: &Tensor<T>) -> String {
    let mut s = String::from("patch,value\n");
    for (i, v) in map.data().iter().enumerate() {
        writeln!(s, "{i},{}", v.to_f64().unwrap_or(f64::NAN)).expect("write to string");
    }
    s
}

/// Parses a `patch,value` CSV written by [`export_report`].
pub fn read_map_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| LsptError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("patch,value") {
        return Err(LsptError::format(path, "missing 'patch,value' header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || LsptError::format(path, format!("bad row {}: '{line}'", i + 1));
            let (idx, val) = line.split_once(',').ok_or_else(bad)?;
            if idx.parse::<usize>().ok() != Some(i) {
                return Err(bad());
            }
            val.parse::<f64>().map_err(|_| bad())
        })
        .collect()
}

/// Writes every map of `report` into `dir` as a graymap plus raw-value CSV,
/// a `ranges.csv` sidecar with each graymap's value range, the retention
/// curve, and a `key=value` index. Returns the paths written.
pub fn export_report<T: Scalar>(report: &DiagnosticsReport<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| LsptError::io(dir, e))?;
    let grid = report.meta.grid;
    let mut written = Vec::new();
    let mut ranges = String::from("map,min,max\n");
    let kinds = [("cosine", &report.cosine_maps), ("attn", &report.attn_maps)];
    for (kind, maps) in kinds {
        for (i, map) in maps.iter().enumerate() {
            let stem = format!("{kind}_block{}", i + 1);
            let (pgm, (lo, hi)) = to_graymap(map, grid)?;
            written.push(write(dir.join(format!("{stem}.pgm")), pgm)?);
            written.push(write(dir.join(format!("{stem}.csv")), map_csv(map))?);
            writeln!(ranges, "{stem},{lo},{hi}").expect("write to string");
        }
    }
    written.push(write(dir.join("ranges.csv"), ranges)?);
    let mut retention = String::from("block,score\n");
    for (i, v) in report.retention.iter().enumerate() {
        writeln!(retention, "{},{}", i + 1, v.to_f64().unwrap_or(f64::NAN)).expect("write to string");
    }
    written.push(write(dir.join("retention.csv"), retention)?);

    let m = &report.meta;
    let mut index = String::new();
    for (k, v) in [
        ("strategy", m.strategy.name().to_string()),
        ("seed", m.seed.to_string()),
        ("sample", m.sample.to_string()),
        ("grid_rows", grid.0.to_string()),
        ("grid_cols", grid.1.to_string()),
        ("blocks", report.cosine_maps.len().to_string()),
    ] {
        writeln!(index, "{k}={v}").expect("write to string");
    }
    for p in &written {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        writeln!(index, "file={name}").expect("write to string");
    }
    written.push(write(dir.join("index.txt"), index)?);
    Ok(written)
}
