//! `key = value` run configuration with a fixed schema.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::{parse, ArchConfig};
use crate::train::TrainConfig;

/// Every accepted key with a one-line description.
pub const SCHEMA: &[(&str, &str)] = &[
    ("in_channels", "input channels, 1 or 3"),
    ("encoder_widths", "comma-separated encoder stage widths"),
    ("bottleneck_width", "bottleneck width"),
    ("decoder_widths", "comma-separated decoder widths, the reverse of encoder_widths"),
    ("se_ratio", "squeeze-and-excitation reduction ratio"),
    ("dropout_rate", "dropout rate in [0, 1)"),
    ("input_size", "square network input size, a multiple of 2^depth"),
    ("max_epochs", "epoch cap"),
    ("batch_size", "mini-batch size for training and evaluation"),
    ("smooth", "dice smoothing term"),
    ("lr", "initial Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("early_stop_val_loss", "stop once validation loss reaches this value; 'none' disables"),
    ("hflip_prob", "horizontal flip probability"),
    ("vflip_prob", "vertical flip probability"),
    ("zoom_min", "smallest zoom factor"),
    ("zoom_max", "largest zoom factor"),
    ("channel_shift", "per-channel shift half-width (RGB only)"),
    ("channel_shift_fraction", "fraction of augmented draws that get a channel shift"),
    ("augment_target", "expanded training-set size; 0 disables augmentation"),
    ("train_fraction", "training share of the train/validation split"),
    ("threshold", "binarization threshold"),
    ("seed", "seed for every random choice"),
    ("data_dir", "dataset root with images/ and masks/"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub train_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::tiny(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            train_fraction: 0.8,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            data_dir: None,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            k if ArchConfig::KEYS.contains(&k) => self.arch.set(k, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "smooth" => self.train.smooth = parse(key, v)?,
            "lr" => self.train.adam.lr = parse(key, v)?,
            "beta1" => self.train.adam.beta1 = parse(key, v)?,
            "beta2" => self.train.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam.eps = parse(key, v)?,
            "early_stop_val_loss" => {
                self.train.early_stop_val_loss = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "hflip_prob" => self.augment.hflip_prob = parse(key, v)?,
            "vflip_prob" => self.augment.vflip_prob = parse(key, v)?,
            "zoom_min" => self.augment.zoom_min = parse(key, v)?,
            "zoom_max" => self.augment.zoom_max = parse(key, v)?,
            "channel_shift" => self.augment.channel_shift = parse(key, v)?,
            "channel_shift_fraction" => self.augment.channel_shift_fraction = parse(key, v)?,
            "augment_target" => {
                let n: usize = parse(key, v)?;
                self.augment.target_size = (n > 0).then_some(n);
            }
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// The effective configuration in the same format [`RunConfig::apply_text`] reads.
    pub fn to_text(&self) -> String {
        let mut s = self.arch.to_text();
        let t = &self.train;
        let a = &self.augment;
        let lines: [(&str, String); 18] = [
            ("max_epochs", t.max_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("smooth", t.smooth.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("early_stop_val_loss", t.early_stop_val_loss.map_or("none".to_string(), |v| v.to_string())),
            ("hflip_prob", a.hflip_prob.to_string()),
            ("vflip_prob", a.vflip_prob.to_string()),
            ("zoom_min", a.zoom_min.to_string()),
            ("zoom_max", a.zoom_max.to_string()),
            ("channel_shift", a.channel_shift.to_string()),
            ("channel_shift_fraction", a.channel_shift_fraction.to_string()),
            ("augment_target", a.target_size.unwrap_or(0).to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("threshold", self.threshold.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in lines {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        if let Some(d) = &self.data_dir {
            writeln!(s, "data_dir = {}", d.display()).expect("write to string");
        }
        s
    }

    /// `TrainConfig` with the run seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("lr = 0.01 # faster\n\nencoder_widths = 8, 16\ndecoder_widths=16,8\naugment_target = 40\ndata_dir = /tmp/x\n")
            .unwrap();
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.arch.encoder_widths, [8, 16]);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::default().apply_text("learning_rate = 1") {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_covers_every_key() {
        let mut c = RunConfig::default();
        for (k, _) in SCHEMA {
            let line = c.to_text().lines().find(|l| l.starts_with(&format!("{k} "))).map(str::to_string);
            if let Some(line) = line {
                c.apply_text(&line).unwrap();
            } else {
                assert_eq!(*k, "data_dir");
            }
        }
    }
}
