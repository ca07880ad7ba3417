use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{save_checkpoint, CheckpointRecord};
use super::loss::{dice_loss, dice_value, DEFAULT_SMOOTH};
use super::plateau::PlateauState;
use crate::autodiff::{Mode, Tape};
use crate::data::{to_batch, NormalizationStats, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, FocusNetParams, GateMode};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smooth: f64,
    pub adam: AdamConfig,
    /// Where the best checkpoint is written whenever validation loss improves.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop once validation loss is at or below this value.
    pub early_stop_val_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 80,
            batch_size: 8,
            seed: 0,
            smooth: DEFAULT_SMOOTH,
            adam: AdamConfig::default(),
            checkpoint_path: None,
            early_stop_val_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".to_string()));
        }
        if self.smooth.is_nan() || self.smooth <= 0.0 {
            return Err(Error::Config(format!("smooth must be positive, got {}", self.smooth)));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr).expect("write to string");
        }
        s
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }
}

pub struct TrainOutcome {
    pub history: History,
    pub best: CheckpointRecord,
    /// Parameters after the last epoch.
    pub last: FocusNetParams<f32>,
}

fn check_samples(arch: &ArchConfig, set: &[SegmentationSample], which: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{which} set is empty")));
    }
    for s in set {
        if s.channels() != arch.in_channels {
            return Err(Error::Config(format!(
                "{which} sample '{}' has {} channels but the architecture expects {}",
                s.id,
                s.channels(),
                arch.in_channels
            )));
        }
        if s.height() != arch.input_size || s.width() != arch.input_size {
            return Err(Error::Config(format!(
                "{which} sample '{}' is {}x{} but the architecture expects {}x{}",
                s.id,
                s.height(),
                s.width(),
                arch.input_size,
                arch.input_size
            )));
        }
    }
    Ok(())
}

/// Eval-mode dice loss averaged over batches, weighted by batch size.
pub fn validation_loss(
    model: &FocusNetParams<f32>,
    samples: &[SegmentationSample],
    batch_size: usize,
    smooth: f64,
) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Validation("validation needs samples and a positive batch size".to_string()));
    }
    let losses = samples
        .par_chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&SegmentationSample> = chunk.iter().collect();
            let (x, gt) = to_batch(&refs)?;
            Ok(dice_value(&model.predict(&x)?, &gt, smooth)? * chunk.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Epoch loop: seeded shuffle, train-mode forward, dice loss, Adam; then an
/// eval-mode validation pass, the plateau schedule, and checkpointing on
/// strict improvement. `on_epoch` sees each finished epoch.
pub fn train(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    normalization: Option<NormalizationStats>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    check_samples(arch, train_set, "training")?;
    check_samples(arch, val_set, "validation")?;

    let mut rng = RngState::new(cfg.seed);
    let mut model = FocusNetParams::<f32>::build(arch, &mut RngState::new(rng.next_seed()))?;
    let mut adam = AdamState::new(&model.params, &cfg.adam);
    let mut plateau = PlateauState::new(cfg.adam.lr);
    let mut history = History::default();
    let mut best: Option<CheckpointRecord> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let lr = plateau.lr;
        adam.lr = lr;
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&SegmentationSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, gt) = to_batch(&refs)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, Mode::Train, &mut rng, GateMode::Learned)?;
            let loss = dice_loss(&mut tape, &out.prob, &gt, cfg.smooth)?;
            let value = f64::from(loss.value().data()[0]);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}, batch {b}")));
            }
            let grads = tape.backward(&loss)?;
            drop(tape);
            if grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut model.params, &grads, &mut adam)?;
            model.stats = out.stats;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = validation_loss(&model, val_set, cfg.batch_size, cfg.smooth)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        plateau.update(val_loss);

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);

        if best.as_ref().is_none_or(|b| val_loss < b.best_val_loss) {
            let rec = CheckpointRecord::new(&model, normalization.clone(), val_loss, epoch as u32);
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&rec, path)?;
            }
            best = Some(rec);
        }
        if cfg.early_stop_val_loss.is_some_and(|t| val_loss <= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best: best.expect("at least one epoch"),
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn setup() -> (ArchConfig, Vec<SegmentationSample>) {
        let arch = ArchConfig {
            input_size: 16,
            ..ArchConfig::tiny()
        };
        let data = synth_generate(4, 16, 1, &mut RngState::new(2)).unwrap();
        (arch, data.samples)
    }

    #[test]
    fn deterministic_history_and_best() {
        let (arch, data) = setup();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let a = train(&cfg, &arch, &data[..3], &data[3..], None, |_| {}).unwrap();
        let b = train(&cfg, &arch, &data[..3], &data[3..], None, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.epochs.len(), 3);
        assert_eq!(a.best.best_val_loss, a.history.best_val_loss().unwrap());
        let again = validation_loss(&a.best.to_model().unwrap(), &data[3..], 2, 1.0).unwrap();
        assert_eq!(again, a.best.best_val_loss);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let (mut arch, data) = setup();
        arch.in_channels = 3;
        let r = train(&TrainConfig::default(), &arch, &data, &data, None, |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
