//! Training driver: dataset loading, the epoch loop, logs and checkpoints.

use std::path::Path;

use gradirn_core::training::validation_loss;
use gradirn_core::{RegistrationConfig, RegistrationParams, Tensor, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RegistrationRecord, TrainRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::write_json;

pub const LOG_FILE: &str = "train_log.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub registration: RegistrationRecord,
    pub training: TrainRecord,
    pub parameter_count: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Validation loss of the initial parameters, if a validation split exists.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

type Pairs = Vec<(Tensor<f32>, Tensor<f32>)>;

fn images(ds: &Dataset, split: &str) -> Result<Pairs> {
    Ok(ds
        .load_split(Some(split))?
        .into_iter()
        .map(|p| (p.moving, p.fixed))
        .collect())
}

/// Trains on the `train` split of `ds` (validating on `val` when present) and
/// writes checkpoints plus [`LOG_FILE`] into `out`. Parameters are initialized
/// from the training seed.
pub fn train_dataset(
    ds: &Dataset,
    cfg: &TrainConfig,
    reg: &RegistrationConfig,
    tau_init: f64,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    let train = images(ds, "train")?;
    if train.is_empty() {
        return Err(Error::Dataset("the dataset has no `train` samples".into()));
    }
    let val = images(ds, "val")?;
    let params = RegistrationParams::init(reg, tau_init, cfg.seed);
    let mut trainer = Trainer::new(params, cfg.clone(), reg.clone())?;
    let record = TrainRecord::new(cfg, tau_init);
    let val_loss = |p: &RegistrationParams<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(validation_loss(p, reg, cfg.lambda, &val)?))
    };
    let mut log = TrainLog {
        registration: reg.into(),
        training: record.clone(),
        parameter_count: trainer.params.count_parameters(),
        train_pairs: train.len(),
        val_pairs: val.len(),
        initial_val_loss: val_loss(&trainer.params)?,
        epochs: Vec::new(),
    };
    for e in 1..=cfg.epochs {
        let train_loss = trainer.train_epoch(&train)?;
        let entry = EpochLog {
            epoch: e,
            train_loss,
            val_loss: val_loss(&trainer.params)?,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e != cfg.epochs {
            let dir = out.join(format!("epoch-{e:04}"));
            checkpoint::save(&dir, &trainer.params, Some(&trainer.adam), reg, Some(&record), e)?;
        }
    }
    checkpoint::save(
        out,
        &trainer.params,
        Some(&trainer.adam),
        reg,
        Some(&record),
        cfg.epochs,
    )?;
    write_json(&out.join(LOG_FILE), &log)?;
    Ok(log)
}
