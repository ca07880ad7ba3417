use rayon::prelude::*;

use super::transform::resample;
use super::{DatasetManifest, SegmentationSample};
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Half-width of the uniform per-channel shift (RGB images only).
    pub channel_shift: f64,
    /// Fraction of draws that receive a channel shift.
    pub channel_shift_fraction: f64,
    /// Size of the expanded training set; `None` disables expansion.
    pub target_size: Option<usize>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            zoom_min: 0.8,
            zoom_max: 1.2,
            channel_shift: 0.1,
            channel_shift_fraction: 0.1,
            target_size: None,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("channel_shift_fraction", self.channel_shift_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= 1.0 && self.zoom_max >= 1.0) {
            return Err(Error::Config(format!(
                "zoom range [{}, {}] must be positive and contain 1",
                self.zoom_min, self.zoom_max
            )));
        }
        if self.channel_shift.is_nan() || self.channel_shift < 0.0 {
            return Err(Error::Config(format!("channel_shift {} must be non-negative", self.channel_shift)));
        }
        Ok(())
    }
}

/// One concrete augmentation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub zoom: f64,
    /// Per-channel additive shift, if any.
    pub shift: Option<Vec<f64>>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            hflip: false,
            vflip: false,
            zoom: 1.0,
            shift: None,
        }
    }

    pub fn draw(cfg: &AugmentationConfig, channels: usize, rng: &mut RngState) -> Self {
        let hflip = rng.bernoulli(cfg.hflip_prob);
        let vflip = rng.bernoulli(cfg.vflip_prob);
        let zoom = rng.uniform_range(cfg.zoom_min, cfg.zoom_max);
        let shifted = channels == 3 && cfg.channel_shift > 0.0 && rng.bernoulli(cfg.channel_shift_fraction);
        let shift = shifted.then(|| {
            (0..channels)
                .map(|_| rng.uniform_range(-cfg.channel_shift, cfg.channel_shift))
                .collect()
        });
        AugmentParams {
            hflip,
            vflip,
            zoom,
            shift,
        }
    }
}

pub fn hflip(sample: &SegmentationSample) -> SegmentationSample {
    let flip = |t: &crate::Tensor<f32>| {
        let w = t.shape()[2];
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
        out
    };
    SegmentationSample {
        id: sample.id.clone(),
        image: flip(&sample.image),
        mask: flip(&sample.mask),
    }
}

pub fn vflip(sample: &SegmentationSample) -> SegmentationSample {
    let flip = |t: &crate::Tensor<f32>| {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let mut out = t.clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
        out
    };
    SegmentationSample {
        id: sample.id.clone(),
        image: flip(&sample.image),
        mask: flip(&sample.mask),
    }
}

/// Scales about the image centre: crops when `z > 1`, reflect-pads when `z < 1`.
pub fn zoom(sample: &SegmentationSample, z: f64) -> SegmentationSample {
    if z == 1.0 {
        return sample.clone();
    }
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let map = |y: usize, x: usize| {
        (
            (y as f64 + 0.5 - cy) / z + cy - 0.5,
            (x as f64 + 0.5 - cx) / z + cx - 0.5,
        )
    };
    SegmentationSample {
        id: sample.id.clone(),
        image: resample(&sample.image, h, w, false, map),
        mask: resample(&sample.mask, h, w, true, map),
    }
}

pub fn apply(sample: &SegmentationSample, p: &AugmentParams) -> Result<SegmentationSample> {
    let mut s = sample.clone();
    if p.hflip {
        s = hflip(&s);
    }
    if p.vflip {
        s = vflip(&s);
    }
    s = zoom(&s, p.zoom);
    if let Some(shift) = &p.shift {
        if shift.len() != s.channels() {
            return Err(Error::Data(format!(
                "channel shift has {} entries for a {}-channel image",
                shift.len(),
                s.channels()
            )));
        }
        let plane = s.height() * s.width();
        for (plane, &d) in s.image.data_mut().chunks_mut(plane).zip(shift) {
            for v in plane {
                *v = (f64::from(*v) + d).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(s)
}

pub fn augment(sample: &SegmentationSample, cfg: &AugmentationConfig, rng: &mut RngState) -> Result<SegmentationSample> {
    apply(sample, &AugmentParams::draw(cfg, sample.channels(), rng))
}

/// Keeps the originals and appends augmented copies of uniformly chosen
/// originals, `<stem>_aug<k>`, until `target` samples exist.
pub fn expand_dataset(
    manifest: &DatasetManifest,
    cfg: &AugmentationConfig,
    target: usize,
    rng: &mut RngState,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let n = manifest.len();
    if target < n {
        return Err(Error::Validation(format!("target size {target} is below the current size {n}")));
    }
    if n == 0 {
        return Err(Error::Data("cannot expand an empty dataset".to_string()));
    }
    let draws: Vec<(usize, u64)> = (n..target).map(|_| (rng.index(n), rng.next_seed())).collect();
    let extra = draws
        .par_iter()
        .enumerate()
        .map(|(k, &(i, seed))| {
            let src = &manifest.samples[i];
            let mut s = augment(src, cfg, &mut RngState::new(seed))?;
            s.id = format!("{}_aug{k:05}", src.id);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = manifest.samples.clone();
    samples.extend(extra);
    DatasetManifest::new(samples, format!("{} (expanded)", manifest.source))
}

/// Seeded shuffle, then `round(fraction·n)` samples (at least 1, at most n−1) go to training.
pub fn split(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 samples to split, have {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| manifest.samples[i].clone()).collect::<Vec<_>>();
    Ok((
        DatasetManifest::new(pick(&order[..n_train]), format!("{} (train)", manifest.source))?,
        DatasetManifest::new(pick(&order[n_train..]), format!("{} (val)", manifest.source))?,
    ))
}
