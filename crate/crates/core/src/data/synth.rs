//! Noisy filled ellipses on a flat background, with exact masks.

use super::{DatasetManifest, SegmentationSample};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MIN_SYNTH_SIZE: usize = 16;
pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Semi-axis along the rotated x direction.
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub theta: f64,
    /// Mean intensity per channel.
    pub intensity: Vec<f64>,
}

impl Ellipse {
    /// Whether the centre of pixel `(y, x)` lies inside or on the boundary.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: SegmentationSample,
    pub ellipses: Vec<Ellipse>,
}

fn generate_one(id: String, size: usize, channels: usize, rng: &mut RngState) -> SynthSample {
    let s = size as f64;
    let background: Vec<f64> = (0..channels).map(|_| rng.uniform_range(0.1, 0.3)).collect();
    let count = 1 + rng.index(3);
    let mut levels = [0.5, 0.7, 0.9];
    rng.shuffle(&mut levels);
    let ellipses: Vec<Ellipse> = levels[..count]
        .iter()
        .map(|&level| Ellipse {
            cy: rng.uniform_range(0.25 * s, 0.75 * s),
            cx: rng.uniform_range(0.25 * s, 0.75 * s),
            rx: rng.uniform_range(s / 10.0, s / 4.0),
            ry: rng.uniform_range(s / 10.0, s / 4.0),
            theta: rng.uniform_range(0.0, std::f64::consts::PI),
            intensity: (0..channels).map(|_| level + rng.uniform_range(-0.04, 0.04)).collect(),
        })
        .collect();

    let plane = size * size;
    let mut image = vec![0.0f32; channels * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let top = ellipses.iter().rev().find(|e| e.contains(y, x));
            if top.is_some() {
                mask[p] = 1.0;
            }
            for c in 0..channels {
                let base = top.map_or(background[c], |e| e.intensity[c]);
                image[c * plane + p] = (base + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let sample = SegmentationSample {
        id,
        image: Tensor::new(&[channels, size, size], image).expect("synth image shape"),
        mask: Tensor::new(&[1, size, size], mask).expect("synth mask shape"),
    };
    SynthSample { sample, ellipses }
}

/// `n` samples of `size × size` with `channels` of 1 or 3, plus their ellipses.
pub fn synth_samples(n: usize, size: usize, channels: usize, rng: &mut RngState) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset needs n >= 1".to_string()));
    }
    if size < MIN_SYNTH_SIZE {
        return Err(Error::Validation(format!(
            "synthetic image size {size} is below the minimum {MIN_SYNTH_SIZE}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Validation(format!("synthetic channels must be 1 or 3, got {channels}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut sub = RngState::new(rng.next_seed());
            generate_one(format!("synth{i:04}"), size, channels, &mut sub)
        })
        .collect())
}

pub fn synth_generate(n: usize, size: usize, channels: usize, rng: &mut RngState) -> Result<DatasetManifest> {
    let samples = synth_samples(n, size, channels, rng)?.into_iter().map(|s| s.sample).collect();
    DatasetManifest::new(samples, format!("synthetic ellipses {size}x{size}"))
}
