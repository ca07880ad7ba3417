use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-6;

/// Mirror index with edge duplication: `… b a | a b c … z | z y …`.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Bilinear sample of a `h×w` plane at continuous pixel-centre coordinates.
pub(crate) fn sample_bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let at = |y: i64, x: i64| f64::from(plane[reflect(y, h) * w + reflect(x, w)]);
    let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
    let top = lerp(at(y0, x0), at(y0, x0 + 1), fx);
    let bottom = lerp(at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx);
    lerp(top, bottom, fy) as f32
}

pub(crate) fn sample_nearest(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let y = (sy + 0.5).floor() as i64;
    let x = (sx + 0.5).floor() as i64;
    plane[reflect(y, h) * w + reflect(x, w)]
}

/// Resamples every channel of `[C,H,W]` to `[C,oh,ow]`; `map` sends an output
/// pixel centre `(y, x)` to source coordinates.
pub(crate) fn resample(
    t: &Tensor<f32>,
    oh: usize,
    ow: usize,
    nearest: bool,
    map: impl Fn(usize, usize) -> (f64, f64),
) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks(h * w).take(c) {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = map(y, x);
                out.push(if nearest {
                    sample_nearest(plane, h, w, sy, sx)
                } else {
                    sample_bilinear(plane, h, w, sy, sx)
                });
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("resample shape")
}

/// Bilinear image / nearest-neighbour mask resize to `size × size` with
/// half-pixel centres.
pub fn resize(sample: &SegmentationSample, size: usize) -> Result<SegmentationSample> {
    if size == 0 {
        return Err(Error::Validation("resize target must be at least 1".to_string()));
    }
    let (h, w) = (sample.height(), sample.width());
    let (ry, rx) = (h as f64 / size as f64, w as f64 / size as f64);
    let map = |y: usize, x: usize| ((y as f64 + 0.5) * ry - 0.5, (x as f64 + 0.5) * rx - 0.5);
    let image = resample(&sample.image, size, size, false, map);
    let mask = resample(&sample.mask, size, size, true, map).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    SegmentationSample::new(sample.id.clone(), image, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose std fell below the floor and was clamped.
    pub clamped: Vec<bool>,
}

impl NormalizationStats {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(s, "{c}: {m} {d}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::Data(format!("malformed stats line '{line}'"));
            let (c, rest) = line.split_once(':').ok_or_else(bad)?;
            if c.trim().parse::<usize>().ok() != Some(i) {
                return Err(bad());
            }
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let [m, d] = vals[..] else { return Err(bad()) };
            if d.is_nan() || d < STD_FLOOR || !m.is_finite() {
                return Err(bad());
            }
            mean.push(m);
            std.push(d);
        }
        let clamped = std.iter().map(|&d| d == STD_FLOOR).collect();
        Ok(NormalizationStats { mean, std, clamped })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Per-channel mean and population std over every pixel of `samples`.
pub fn compute_stats(samples: &[SegmentationSample]) -> Result<NormalizationStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot compute statistics of an empty split".to_string()))?;
    let c = first.channels();
    let (mut sum, mut count) = (vec![0.0f64; c], vec![0usize; c]);
    for s in samples {
        if s.channels() != c {
            return Err(Error::Data(format!("sample '{}' has {} channels, expected {c}", s.id, s.channels())));
        }
        let plane = s.height() * s.width();
        for (ch, p) in s.image.data().chunks(plane).enumerate() {
            sum[ch] += p.iter().map(|&v| f64::from(v)).sum::<f64>();
            count[ch] += plane;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0f64; c];
    for s in samples {
        let plane = s.height() * s.width();
        for (ch, p) in s.image.data().chunks(plane).enumerate() {
            sq[ch] += p.iter().map(|&v| (f64::from(v) - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let raw: Vec<f64> = sq.iter().zip(&count).map(|(s, &n)| (s / n as f64).sqrt()).collect();
    Ok(NormalizationStats {
        mean,
        std: raw.iter().map(|&d| d.max(STD_FLOOR)).collect(),
        clamped: raw.iter().map(|&d| d < STD_FLOOR).collect(),
    })
}

/// `(pixel − mean) / std` per channel; the mask is untouched.
pub fn normalize(sample: &SegmentationSample, stats: &NormalizationStats) -> Result<SegmentationSample> {
    if sample.channels() != stats.mean.len() {
        return Err(Error::Data(format!(
            "sample '{}' has {} channels but statistics cover {}",
            sample.id,
            sample.channels(),
            stats.mean.len()
        )));
    }
    let plane = sample.height() * sample.width();
    let mut image = sample.image.clone();
    for (ch, p) in image.data_mut().chunks_mut(plane).enumerate() {
        let (m, d) = (stats.mean[ch], stats.std[ch]);
        for v in p {
            *v = ((f64::from(*v) - m) / d) as f32;
        }
    }
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image,
        mask: sample.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: usize, h: usize, w: usize, img: Vec<f32>) -> SegmentationSample {
        SegmentationSample::new("s", Tensor::new(&[c, h, w], img).unwrap(), Tensor::zeros(&[1, h, w])).unwrap()
    }

    #[test]
    fn two_by_two_to_one() {
        let r = resize(&sample(1, 2, 2, vec![0.0, 0.0, 2.0, 2.0]), 1).unwrap();
        assert_eq!(r.image.data(), &[1.0]);
    }

    #[test]
    fn same_size_and_constant() {
        let img: Vec<f32> = (0..27).map(|i| (i as f32 * 0.37).sin()).collect();
        let s = sample(3, 3, 3, img);
        assert_eq!(resize(&s, 3).unwrap(), s);
        let k = sample(1, 5, 5, vec![0.3; 25]);
        for size in [1, 2, 7, 16] {
            assert!(resize(&k, size).unwrap().image.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..6).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, [2, 1, 0, 0, 1, 2, 2, 1, 0]);
    }

    #[test]
    fn normalize_formula_and_constant_channel() {
        let stats = NormalizationStats {
            mean: vec![0.4],
            std: vec![0.2],
            clamped: vec![false],
        };
        let n = normalize(&sample(1, 1, 1, vec![0.6]), &stats).unwrap();
        assert!((n.image.data()[0] - 1.0).abs() < 1e-6);

        let k = sample(1, 2, 2, vec![0.7; 4]);
        let st = compute_stats(std::slice::from_ref(&k)).unwrap();
        assert_eq!(st.clamped, [true]);
        assert_eq!(st.std, [STD_FLOOR]);
        assert!(normalize(&k, &st).unwrap().image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_text_round_trip() {
        let st = NormalizationStats {
            mean: vec![0.1234567890123, 0.5, 1.0 / 3.0],
            std: vec![0.2, 0.25, 0.1 + 0.2],
            clamped: vec![false; 3],
        };
        assert_eq!(NormalizationStats::from_text(&st.to_text()).unwrap(), st);
        assert!(NormalizationStats::from_text("0: 1").is_err());
    }
}
