//! Per-epoch training history as CSV:
//! `epoch,train_loss,val_loss,val_acc,val_auroc,lr`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pgbn_core::train::EpochRecord;

use crate::error::{io_err, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_acc: f64,
    /// Empty when the validation split holds one class.
    val_auroc: Option<f64>,
    lr: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(Row {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            val_acc: r.val_acc,
            val_auroc: r.val_auroc,
            lr: r.lr,
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|row| {
            let r: Row = row?;
            Ok(EpochRecord {
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                val_acc: r.val_acc,
                val_auroc: r.val_auroc,
                lr: r.lr,
            })
        })
        .collect()
}
