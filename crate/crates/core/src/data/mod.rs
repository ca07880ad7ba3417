//! Samples, on-disk datasets, preprocessing, augmentation and synthetic data.

pub mod augment;
pub mod pnm;
pub mod synth;
pub mod transform;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use pnm::{read_pnm, write_pnm, Image8};

pub use augment::{augment, expand_dataset, split, AugmentParams, AugmentationConfig};
pub use synth::{synth_generate, Ellipse, SynthSample};
pub use transform::{compute_stats, normalize, resize, NormalizationStats};

const PNM_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

/// An image in [0, 1] with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[C, H, W]`
    pub image: Tensor<f32>,
    /// `[1, H, W]`, values in {0, 1}
    pub mask: Tensor<f32>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if image.rank() != 3 || mask.rank() != 3 || mask.shape()[0] != 1 {
            return Err(Error::Data(format!(
                "sample '{id}': expected image [C,H,W] and mask [1,H,W], got {:?} and {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::Data(format!(
                "sample '{id}': image {:?} and mask {:?} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample '{id}': mask is not binary")));
        }
        Ok(SegmentationSample { id, image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SegmentationSample>,
    pub channels: usize,
    pub source: String,
}

impl DatasetManifest {
    pub fn new(samples: Vec<SegmentationSample>, source: impl Into<String>) -> Result<Self> {
        let channels = samples.first().map_or(0, SegmentationSample::channels);
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.channels() != channels {
                return Err(Error::Data(format!(
                    "sample '{}' has {} channels, dataset has {channels}",
                    s.id,
                    s.channels()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id '{}'", s.id)));
            }
        }
        Ok(DatasetManifest {
            samples,
            channels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn pnm_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| PNM_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

pub fn image_to_tensor(img: &Image8) -> Tensor<f32> {
    let (c, plane) = (img.channels, img.width * img.height);
    Tensor::from_fn(&[c, img.height, img.width], |i| {
        let (ch, p) = (i / plane, i % plane);
        f32::from(img.data[p * c + ch]) / 255.0
    })
}

/// Quantizes `[C,H,W]` values in [0, 1] with round-half-up.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<Image8> {
    let [c, h, w] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::Data(format!("expected [C,H,W], got {:?}", t.shape())))?;
    let plane = h * w;
    let mut data = vec![0u8; c * plane];
    for (i, &v) in t.data().iter().enumerate() {
        let (ch, p) = (i / plane, i % plane);
        data[p * c + ch] = quantize(v);
    }
    Image8::new(w, h, c, data)
}

/// `floor(v·255 + 0.5)` clamped to 0..=255.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Reads `root/images/*` and `root/masks/*` paired by file stem, sorted by stem.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let images = pnm_files(&root.join("images"))?;
    let masks = pnm_files(&root.join("masks"))?;
    if images.is_empty() {
        return Err(Error::Data(format!("no PGM/PPM images under {}", root.join("images").display())));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks.get(stem).ok_or_else(|| Error::Pairing { stem: stem.clone() })?;
        let image = read_pnm(image_path)?;
        let mask = read_pnm(mask_path)?;
        if mask.channels != 1 {
            return Err(Error::Image {
                path: mask_path.clone(),
                detail: "mask must be 8-bit grayscale".to_string(),
            });
        }
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::Data(format!(
                "'{stem}': image is {}x{} but mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        let mask = Tensor::new(
            &[1, mask.height, mask.width],
            mask.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
        )?;
        samples.push(SegmentationSample::new(stem.clone(), image_to_tensor(&image), mask)?);
    }
    DatasetManifest::new(samples, root.display().to_string())
}

/// Writes the standard layout: `images/<id>.pgm|ppm` and `masks/<id>.pgm` (0 or 255).
pub fn write_dataset(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ext = if manifest.channels == 3 { "ppm" } else { "pgm" };
    for s in &manifest.samples {
        write_pnm(&images.join(format!("{}.{ext}", s.id)), &tensor_to_image(&s.image)?)?;
        write_pnm(&masks.join(format!("{}.pgm", s.id)), &tensor_to_image(&s.mask)?)?;
    }
    Ok(())
}

/// Stacks samples into `[N,C,H,W]` images and `[N,1,H,W]` masks.
pub fn to_batch(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, img: &Image8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_pnm(path, img).unwrap();
    }

    #[test]
    fn loads_sorted_pairs_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for stem in ["b", "a"] {
            write(&root.join(format!("images/{stem}.ppm")), &Image8::new(2, 1, 3, vec![0, 51, 255, 10, 20, 30]).unwrap());
            write(&root.join(format!("masks/{stem}.pgm")), &Image8::new(2, 1, 1, vec![255, 127]).unwrap());
        }
        let m = load_dataset(root).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.samples[0].id, "a");
        assert_eq!(m.channels, 3);
        assert_eq!(m.samples[0].mask.data(), &[1.0, 0.0]);
        assert_eq!(m.samples[0].image.data()[0], 0.0);
        assert_eq!(m.samples[0].image.data()[2], 51.0 / 255.0);
    }

    #[test]
    fn missing_mask_is_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write(&root.join("images/x.pgm"), &Image8::new(1, 1, 1, vec![0]).unwrap());
        fs::create_dir_all(root.join("masks")).unwrap();
        match load_dataset(root) {
            Err(Error::Pairing { stem }) => assert_eq!(stem, "x"),
            other => panic!("{other:?}"),
        }
        fs::remove_dir(root.join("masks")).unwrap();
        assert!(matches!(load_dataset(root), Err(Error::Io { .. })));
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
    }
}
