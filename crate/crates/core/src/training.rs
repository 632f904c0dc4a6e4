//! Training configuration, the epoch loop, and the binary checkpoint format.
//!
//! A checkpoint file is laid out as
//! `"XNCK" | u32 version | u32 len | JSON header | u32 count | count × (u32 len | name | XTEN tensor)`,
//! all integers little-endian. The header carries the model and training
//! configuration, optimizer scalars, scheduler state and the epoch history;
//! tensors carry parameters, batch-norm running statistics and Adam moments.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_batches, Batch, FoldAssignment, VolumeDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::combined_loss;
use crate::metrics::{evaluate_with_loss, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::nn::Mode;
use crate::optim::{Adam, AdamHyper, Monitor, PlateauScheduler};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAX_EPOCHS: usize = 100;
/// Learning rate of the single-batch overfitting smoke test; at the training
/// default of 1e-3 the loss descends steadily but needs more than 200 steps.
pub const OVERFIT_LR: f64 = 1e-2;
const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Seeds weight initialisation, fold assignment and batch shuffling.
    pub seed: u64,
    /// Recorded for provenance; every kernel here is single-threaded and
    /// reproducible regardless of this flag.
    pub deterministic: bool,
    pub folds: usize,
    pub fold: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: MAX_EPOCHS,
            batch_size: 8,
            initial_lr: 1e-3,
            seed: 0,
            deterministic: true,
            folds: 5,
            fold: 0,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_lr: 1e-6,
            monitor: Monitor::ValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return bad(format!("epochs must be in 1..={MAX_EPOCHS}, got {}", self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.folds < 2 || self.fold >= self.folds {
            return bad(format!("fold {} of {} is out of range (need ≥ 2 folds)", self.fold, self.folds));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be positive".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.initial_lr) {
            return bad(format!("min_lr {} must lie in [0, initial_lr]", self.min_lr));
        }
        Ok(())
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler::new(self.initial_lr, self.plateau_factor, self.plateau_patience, self.min_lr)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    pub optimizer: Adam<T>,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    optimizer: AdamHyper,
    scheduler: PlateauScheduler,
    history: Vec<EpochRecord>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A freshly initialised model; weights are drawn from `train.seed`.
    pub fn fresh(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let model = Model::new(model, &mut rng)?;
        Ok(Checkpoint {
            model,
            optimizer: Adam::new(train.initial_lr),
            scheduler: train.scheduler(),
            train,
            history: Vec::new(),
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    /// Named tensors in file order: model state, then first and second moments.
    pub fn tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.model.state();
        for (n, t) in &self.optimizer.m {
            out.push((format!("{MOMENT_M}{n}"), t.clone()));
        }
        for (n, t) in &self.optimizer.v {
            out.push((format!("{MOMENT_V}{n}"), t.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.name().to_string(),
            model: self.model.config().clone(),
            train: self.train.clone(),
            optimizer: self.optimizer.hyper(),
            scheduler: self.scheduler.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_xten());
        }
        Ok(out)
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("xnck.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corrupt { reason, .. } => Error::Corrupt {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: "<checkpoint>".into(),
            reason,
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let read_u32 = |r: &mut Cursor<&[u8]>, what: &str| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| corrupt(format!("truncated {what}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json_len = read_u32(&mut r, "header length")? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(|_| corrupt("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE.name() {
            return Err(Error::DType {
                found: if header.dtype == "f32" { "f32" } else { "f64" },
                expected: T::DTYPE.name(),
            });
        }
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut state = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            if len > bytes.len() {
                return Err(corrupt("name length exceeds file size".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| corrupt("truncated name".into()))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("non-UTF-8 tensor name".into()))?;
            let t = Tensor::<T>::read_xten(&mut r).map_err(|e| match e {
                Error::Corrupt { reason, .. } => corrupt(format!("tensor {name}: {reason}")),
                other => other,
            })?;
            if state.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes after last tensor".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(header.model, &mut rng)?;
        model.load_state(&state).map_err(|e| corrupt(e.to_string()))?;
        let mut optimizer = Adam::from_hyper(header.optimizer);
        let mut known: std::collections::HashSet<String> =
            model.state().into_iter().map(|(n, _)| n).collect();
        for (name, t) in &state {
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                optimizer.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                optimizer.v.insert(p.to_string(), t.clone());
            } else if !known.remove(name) {
                return Err(corrupt(format!("unexpected tensor {name}")));
            }
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            optimizer,
            scheduler: header.scheduler,
            history: header.history,
        })
    }
}

/// Reads only the model out of a checkpoint.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Checkpoint::<T>::load(path).map(|c| c.model)
}

fn to_divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One optimisation step on a batch; returns the loss before the update.
pub fn train_step<T: Scalar>(model: &mut Model<T>, optimizer: &mut Adam<T>, batch: &Batch<T>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.images.clone())?;
    let t = g.input(batch.masks.clone())?;
    let probs = model.forward(&mut g, x, Mode::Train)?;
    let loss = combined_loss(&mut g, probs, t)?;
    let value = g.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    let grads = g.backward(loss)?;
    optimizer.step(model, &grads)?;
    Ok(value)
}

/// Repeated steps on a single batch; returns the loss before each step.
pub fn overfit_batch<T: Scalar>(model: &mut Model<T>, batch: &Batch<T>, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut optimizer = Adam::new(lr);
    (0..steps).map(|_| train_step(model, &mut optimizer, batch)).collect()
}

/// Drives epochs over one cross-validation fold, tracking the best model by
/// validation Dice and optionally persisting outputs after every epoch.
pub struct Trainer<'a, T> {
    pub state: Checkpoint<T>,
    dataset: &'a VolumeDataset,
    train_volumes: Vec<usize>,
    val_volumes: Vec<usize>,
    best: Option<Checkpoint<T>>,
    best_dice: f64,
    last_report: Option<MetricReport>,
    out_dir: Option<PathBuf>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(state: Checkpoint<T>, dataset: &'a VolumeDataset, folds: &FoldAssignment) -> Result<Self> {
        state.train.validate()?;
        if folds.k != state.train.folds {
            return Err(Error::Config(format!(
                "fold assignment has {} folds, training config expects {}",
                folds.k, state.train.folds
            )));
        }
        let (train_volumes, val_volumes) = dataset.split(folds, state.train.fold)?;
        if train_volumes.is_empty() || val_volumes.is_empty() {
            return Err(Error::Data(format!(
                "fold {} leaves {} training and {} validation volumes",
                state.train.fold,
                train_volumes.len(),
                val_volumes.len()
            )));
        }
        let best_dice = state
            .history
            .iter()
            .map(|r| r.val_dice)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Trainer {
            state,
            dataset,
            train_volumes,
            val_volumes,
            best: None,
            best_dice,
            last_report: None,
            out_dir: None,
        })
    }

    /// Persist `last.xnck`, `best.xnck` and `history.json` under `dir` after
    /// every epoch.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Restores the best-so-far snapshot when resuming.
    pub fn with_best(mut self, best: Checkpoint<T>) -> Self {
        if let Some(r) = best.history.last() {
            self.best_dice = self.best_dice.max(r.val_dice);
        }
        self.best = Some(best);
        self
    }

    pub fn train_volumes(&self) -> &[usize] {
        &self.train_volumes
    }

    pub fn val_volumes(&self) -> &[usize] {
        &self.val_volumes
    }

    pub fn best(&self) -> Option<&Checkpoint<T>> {
        self.best.as_ref()
    }

    /// Validation report of the most recent epoch.
    pub fn last_report(&self) -> Option<&MetricReport> {
        self.last_report.as_ref()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let index = self.state.epoch();
        let epoch = index + 1;
        let diverge = to_divergence(epoch);
        let lr = self.state.scheduler.lr;
        self.state.optimizer.lr = lr;
        let cfg = &self.state.train;
        let (mut sum, mut seen) = (0.0, 0usize);
        for batch in load_batches::<T>(self.dataset, &self.train_volumes, cfg.batch_size, cfg.seed, Some(index)) {
            let loss = train_step(&mut self.state.model, &mut self.state.optimizer, &batch).map_err(&diverge)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("training loss became {loss}"),
                });
            }
            sum += loss * batch.slices.len() as f64;
            seen += batch.slices.len();
        }
        let train_loss = sum / seen as f64;
        let (report, val_loss) = evaluate_with_loss(
            &mut self.state.model,
            self.dataset,
            &self.val_volumes,
            cfg.batch_size,
            &format!("fold{}", cfg.fold),
        )
        .map_err(&diverge)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("validation loss became {val_loss}"),
            });
        }
        let val_dice = report.aggregate.dice;
        let monitored = match self.state.train.monitor {
            Monitor::ValLoss => val_loss,
            Monitor::ValDice => -val_dice,
        };
        self.state.scheduler.update(monitored);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_dice,
        };
        self.state.history.push(record.clone());
        self.last_report = Some(report);
        let improved = val_dice > self.best_dice;
        if improved {
            self.best_dice = val_dice;
            self.best = Some(self.state.clone());
        }
        if let Some(dir) = &self.out_dir {
            self.state.save(&dir.join("last.xnck"))?;
            if improved {
                self.state.save(&dir.join("best.xnck"))?;
            }
            write_history(&dir.join("history.json"), &self.state.history)?;
        }
        Ok(record)
    }

    /// Runs until `state.train.epochs` epochs have completed.
    pub fn fit(&mut self) -> Result<&[EpochRecord]> {
        while self.state.epoch() < self.state.train.epochs {
            self.run_epoch()?;
        }
        Ok(&self.state.history)
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(history)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            base_widths: vec![8, 8, 8, 8, 16],
            ..ModelConfig::default()
        }
    }

    fn checkpoint() -> Checkpoint<f32> {
        let train = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        Checkpoint::fresh(tiny_model(), train).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 101,
                ..TrainConfig::default()
            },
            TrainConfig {
                fold: 5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                initial_lr: -1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let err = serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn fresh_init_is_seeded() {
        let a = checkpoint().model.state();
        let b = checkpoint().model.state();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut c = checkpoint();
        c.optimizer.t = 4;
        c.optimizer
            .m
            .insert("head.bias".into(), Tensor::new(vec![1], vec![0.25]).unwrap());
        c.optimizer
            .v
            .insert("head.bias".into(), Tensor::new(vec![1], vec![0.5]).unwrap());
        c.history.push(EpochRecord {
            epoch: 1,
            lr: 1e-3,
            train_loss: 0.7,
            val_loss: 0.6,
            val_dice: 0.1,
        });
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors(), c.tensors());
        assert_eq!(back.history, c.history);
        assert_eq!(back.optimizer.hyper(), c.optimizer.hyper());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = checkpoint().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(Error::Corrupt { .. })),
                "cut at {cut}"
            );
        }
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&wrong_version),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::DType { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&extra), Err(Error::Corrupt { .. })));
    }
}
