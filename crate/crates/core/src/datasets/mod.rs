//! Datasets, synthetic domains and mixed ordered/shuffled batches.

mod batch;
mod digits;
mod domains;
pub mod idx;
mod manifest;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::patchwork::ImageTensor;

pub use batch::{compose_batch, compose_rotation_batch, images_to_tensor, ordered_count, Batch};
pub use digits::{render_digit, synth_digits, DIGIT_SIZE};
pub use domains::{synth_domain, DomainKind, DomainTransformSpec};
pub use manifest::{load_manifest, parse_manifest, ManifestEntry};

/// Images with class labels in `0..classes`, all from one visual domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain_id: usize,
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        domain_id: usize,
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return invalid(format!("{} images but {} labels", images.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return invalid(format!("label {} outside 0..{}", bad, classes));
        }
        Ok(Self {
            name: name.into(),
            domain_id,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize) -> (&ImageTensor, usize) {
        (&self.images[i], self.labels[i])
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            domain_id: self.domain_id,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn with_name(mut self, name: impl Into<String>, domain_id: usize) -> Self {
        self.name = name.into();
        self.domain_id = domain_id;
        self
    }

    pub(crate) fn map_images(&self, f: impl FnMut(&ImageTensor) -> ImageTensor) -> Vec<ImageTensor> {
        self.images.iter().map(f).collect()
    }
}

/// Digit corpora carry at least ten classes even if a file lacks some digits.
const MIN_IDX_CLASSES: usize = 10;

/// Load an IDX image/label pair as single-channel images scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = idx::read_images(&images_path)?;
    let labels = idx::read_labels(&labels_path)?;
    from_idx(
        &images_path.as_ref().file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        &images,
        &labels,
    )
}

pub fn from_idx(name: &str, images: &idx::IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count() != labels.len() {
        return Err(crate::error::Error::Parse {
            offset: 4,
            message: format!("{} images but {} labels", images.count(), labels.len()),
        });
    }
    let size = images.rows * images.cols;
    let imgs = images
        .pixels
        .chunks(size.max(1))
        .take(images.count())
        .map(|px| {
            ImageTensor::new(1, images.rows, images.cols, px.iter().map(|&b| b as f32 / 255.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(MIN_IDX_CLASSES);
    Dataset::new(name, 0, imgs, labels, classes)
}

/// Inverse of [`from_idx`] for single-channel (or channel-0) data.
pub fn to_idx(d: &Dataset) -> Result<(idx::IdxImages, Vec<u8>)> {
    let first = d.images.first().ok_or_else(|| crate::error::Error::InvalidArgument("empty dataset".into()))?;
    let (rows, cols) = (first.height(), first.width());
    let mut pixels = Vec::with_capacity(d.len() * rows * cols);
    for img in &d.images {
        if (img.height(), img.width()) != (rows, cols) {
            return invalid("IDX needs images of one size");
        }
        pixels.extend(img.data()[..rows * cols].iter().map(|&v| (v * 255.0).round() as u8));
    }
    let labels = d
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| crate::error::Error::InvalidArgument(format!("label {} exceeds a byte", l))))
        .collect::<Result<Vec<_>>>()?;
    Ok((idx::IdxImages { rows, cols, pixels }, labels))
}

pub const NORMALIZED_SIZE: usize = 32;

/// Bilinear resize to 32×32 and replicate grayscale to three channels.
pub fn normalize_32rgb(d: &Dataset) -> Dataset {
    Dataset {
        images: d.map_images(|img| img.resize_bilinear(NORMALIZED_SIZE, NORMALIZED_SIZE).to_rgb()),
        ..d.clone()
    }
}

/// Seeded shuffle, then the first `floor(fraction * len)` items become the holdout.
pub fn split(d: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return invalid(format!("holdout fraction {} outside (0, 1)", holdout_fraction));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (holdout_fraction * d.len() as f64 + 1e-9).floor() as usize;
    let (hold, train) = order.split_at(n_hold);
    Ok((d.select(train), d.select(hold)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = (0..n).map(|i| ImageTensor::filled(1, 2, 2, i as f32 / n as f32)).collect();
        Dataset::new("toy", 0, images, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new("x", 0, vec![ImageTensor::filled(1, 1, 1, 0.0)], vec![], 2).is_err());
        assert!(Dataset::new("x", 0, vec![ImageTensor::filled(1, 1, 1, 0.0)], vec![2], 2).is_err());
    }

    #[test]
    fn fixture_round_trip() {
        let labels = [7u8, 0, 3, 9];
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        let images = idx::IdxImages { rows: 28, cols: 28, pixels };
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        std::fs::write(&ip, idx::encode_images(&images)).unwrap();
        std::fs::write(&lp, idx::encode_labels(&labels)).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.labels(), &[7, 0, 3, 9]);
        assert_eq!(d.classes(), 10);
        assert_eq!(d.images()[1].at(0, 0, 1), ((28 * 28 + 1) * 7 % 256) as f32 / 255.0);
        let (back, back_labels) = to_idx(&d).unwrap();
        assert_eq!(back, images);
        assert_eq!(back_labels, labels);

        std::fs::write(&lp, idx::encode_labels(&labels[..3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(crate::Error::Parse { .. })));
        std::fs::write(&ip, b"").unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(crate::Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn normalization() {
        let d = Dataset::new("g", 0, vec![ImageTensor::filled(1, 28, 28, 0.6)], vec![1], 10).unwrap();
        let n = normalize_32rgb(&d);
        let img = &n.images()[0];
        assert_eq!((img.channels(), img.height(), img.width()), (3, 32, 32));
        assert!(img.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));

        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(0);
        use rand::Rng;
        let rgb = ImageTensor::new(3, 32, 32, (0..3 * 1024).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let d = Dataset::new("c", 0, vec![rgb.clone()], vec![0], 10).unwrap();
        assert_eq!(normalize_32rgb(&d).images()[0], rgb);

        let gray = Dataset::new("g", 0, vec![ImageTensor::new(1, 28, 28, (0..784).map(|i| (i % 29) as f32 / 29.0).collect()).unwrap()], vec![0], 10).unwrap();
        let img = normalize_32rgb(&gray).images()[0].clone();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.at(0, y, x), img.at(1, y, x));
                assert_eq!(img.at(1, y, x), img.at(2, y, x));
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = toy(100);
        let (tr, ho) = split(&d, 0.1, 4).unwrap();
        assert_eq!((tr.len(), ho.len()), (90, 10));
        assert_eq!(split(&d, 0.1, 4).unwrap(), (tr.clone(), ho.clone()));
        let mut all: Vec<u32> = tr.images().iter().chain(ho.images()).map(|i| i.data()[0].to_bits()).collect();
        all.sort_unstable();
        let mut want: Vec<u32> = d.images().iter().map(|i| i.data()[0].to_bits()).collect();
        want.sort_unstable();
        assert_eq!(all, want);

        let (tr, ho) = split(&toy(3), 0.5, 0).unwrap();
        assert_eq!((tr.len(), ho.len()), (2, 1));
        assert!(split(&d, 0.0, 0).is_err());
        assert!(split(&d, 1.0, 0).is_err());
    }
}
