use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LsptError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc,seconds";

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for m in &self.epochs {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                m.epoch, m.train_loss, m.train_acc, m.val_acc, m.seconds
            )
            .expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| LsptError::io(path, e))
    }
}
