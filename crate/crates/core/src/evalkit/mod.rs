//! Accuracy, confusion matrices, auxiliary-head diagnostics, CAM heatmaps
//! and ablation sweeps.

mod sweep;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::Tensor;

use crate::datasets::{images_to_tensor, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::{AuxTask, Model};
use crate::patchwork::{rotate, shuffle_image, GridSpec, ImageTensor};
use crate::permgen::PermutationSet;

pub use sweep::{ablation_sweep, SweepAxis, SweepCell, SweepReport, SweepRow};

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Center-crop `img` to the model's input size.
pub fn prepare(model: &Model, img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = model.spec.input_hw;
    if img.channels() != model.spec.in_channels {
        return invalid(format!("{}-channel image for a {}-channel model", img.channels(), model.spec.in_channels));
    }
    img.center_crop(h, w)
}

/// Class and auxiliary logits for already-prepared images, in chunks.
fn logits(model: &Model, images: &[ImageTensor], aux: bool) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for chunk in images.chunks(EVAL_CHUNK) {
        let inf = model.infer(images_to_tensor(chunk)?)?;
        out.push(if aux {
            inf.aux_logits.ok_or_else(|| Error::InvalidArgument("model has no auxiliary head".into()))?
        } else {
            inf.class_logits
        });
    }
    Ok(out)
}

fn argmax_all(parts: Vec<Tensor<f32>>) -> Vec<usize> {
    parts.iter().flat_map(|t| t.argmax_rows()).collect()
}

/// Predicted classes on unaugmented, center-cropped images.
pub fn predict(model: &Model, d: &Dataset) -> Result<Vec<usize>> {
    if d.classes() != model.spec.classes {
        return invalid(format!("dataset has {} classes, model {}", d.classes(), model.spec.classes));
    }
    let imgs = d.images().iter().map(|i| prepare(model, i)).collect::<Result<Vec<_>>>()?;
    Ok(argmax_all(logits(model, &imgs, false)?))
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Fraction of images whose object-head argmax equals the label.
pub fn accuracy(model: &Model, d: &Dataset) -> Result<f64> {
    let pred = predict(model, d)?;
    Ok(fraction(pred.iter().zip(d.labels()).filter(|(p, y)| p == y).count(), d.len()))
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return invalid("truth and prediction lengths differ");
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return invalid(format!("class pair ({}, {}) outside 0..{}", t, p, classes));
            }
            m.counts[t * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        fraction(self.diagonal() as usize, self.total() as usize)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.classes {
            s.push_str(&format!(",{}", c));
        }
        s.push('\n');
        for t in 0..self.classes {
            s.push_str(&t.to_string());
            for p in 0..self.classes {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(model: &Model, d: &Dataset) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_pairs(model.spec.classes, d.labels(), &predict(model, d)?)
}

/// Shuffle every image with a uniformly drawn non-identity permutation and
/// score the auxiliary head's recovery of the permutation index.
pub fn jigsaw_accuracy(model: &Model, d: &Dataset, set: &PermutationSet, grid: &GridSpec, seed: u64) -> Result<f64> {
    if model.spec.aux_task != AuxTask::Jigsaw || !model.has_aux_head() {
        return invalid("jigsaw accuracy needs a model with a jigsaw head");
    }
    if model.spec.aux_classes != set.len() {
        return invalid(format!("jigsaw head has {} outputs but the set has {} permutations", model.spec.aux_classes, set.len()));
    }
    if set.len() < 2 {
        return invalid("jigsaw accuracy needs at least one non-identity permutation");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imgs = Vec::with_capacity(d.len());
    let mut labels = Vec::with_capacity(d.len());
    for img in d.images() {
        let (z, p) = shuffle_image(img, rng.gen_range(1..set.len()), set, grid)?;
        imgs.push(prepare(model, &z)?);
        labels.push(p);
    }
    let pred = argmax_all(logits(model, &imgs, true)?);
    Ok(fraction(pred.iter().zip(&labels).filter(|(p, y)| p == y).count(), d.len()))
}

/// Rotate every image by a uniform `k ∈ {1, 2, 3}` and score the rotation head.
pub fn rotation_accuracy(model: &Model, d: &Dataset, seed: u64) -> Result<f64> {
    if model.spec.aux_task != AuxTask::Rotation || !model.has_aux_head() {
        return invalid("rotation accuracy needs a model with a rotation head");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imgs = Vec::with_capacity(d.len());
    let mut labels = Vec::with_capacity(d.len());
    for img in d.images() {
        let (r, k) = rotate(&prepare(model, img)?, rng.gen_range(1..4))?;
        imgs.push(r);
        labels.push(k);
    }
    let pred = argmax_all(logits(model, &imgs, true)?);
    Ok(fraction(pred.iter().zip(&labels).filter(|(p, y)| p == y).count(), d.len()))
}

/// Class activation map normalized to `[0, 1]`, at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = (0..self.values.len()).fold(0, |b, i| if self.values[i] > self.values[b] { i } else { b });
        (i / self.width, i % self.width)
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.width)
            .map(|row| row.iter().map(|v| format!("{:.6}", v)).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    /// Binary 8-bit PGM.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `Σ_k w[k, c]·F_k` over the final feature maps, then min-max normalized.
pub fn cam(model: &Model, img: &ImageTensor, class_index: usize) -> Result<Heatmap> {
    if !model.spec.gap {
        return Err(Error::Unsupported("class activation maps need a global-average-pooled head".into()));
    }
    if class_index >= model.spec.classes {
        return invalid(format!("class {} outside 0..{}", class_index, model.spec.classes));
    }
    let inf = model.infer(images_to_tensor(&[prepare(model, img)?])?)?;
    let fs = inf.features.shape().to_vec();
    let (k, h, w) = (fs[1], fs[2], fs[3]);
    let weights = model.class_head_weight();
    let classes = model.spec.classes;
    let mut raw = vec![0.0f64; h * w];
    for ch in 0..k {
        let wk = weights.data()[ch * classes + class_index] as f64;
        let plane = &inf.features.data()[ch * h * w..(ch + 1) * h * w];
        for (acc, &f) in raw.iter_mut().zip(plane) {
            *acc += wk * f as f64;
        }
    }
    Ok(Heatmap { height: h, width: w, values: min_max(&raw) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ConvSpec, ModelSpec};
    use crate::permgen::generate_permutation_set;

    fn spec(classes: usize, aux_task: AuxTask, aux: usize) -> ModelSpec {
        ModelSpec {
            in_channels: 3,
            input_hw: (12, 12),
            convs: vec![ConvSpec::new(4, 2), ConvSpec::new(5, 0)],
            gap: true,
            classes,
            aux_classes: aux,
            aux_task,
        }
    }

    fn random_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| ImageTensor::new(3, 12, 12, (0..432).map(|_| rng.gen::<f32>()).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new("r", 0, images, labels, classes).unwrap()
    }

    /// Zero the class weights and put a large bias on `class`.
    fn constant_predictor(m: &mut Model, class: usize) {
        let (w, b) = (m.params.find("class.weight").unwrap(), m.params.find("class.bias").unwrap());
        m.params.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias = m.params.get_mut(b).value.data_mut();
        bias.iter_mut().for_each(|v| *v = 0.0);
        bias[class] = 5.0;
    }

    #[test]
    fn constant_predictor_accuracy_and_confusion() {
        let mut m = build_model(&spec(3, AuxTask::Jigsaw, 4), 0).unwrap();
        constant_predictor(&mut m, 2);
        let d = random_dataset(9, 3, 1);
        let only2 = d.select(&[2, 5, 8]);
        assert_eq!(accuracy(&m, &only2).unwrap(), 1.0);
        let cm = confusion_matrix(&m, &d).unwrap();
        for t in 0..3 {
            assert_eq!(cm.get(t, 2), 3);
            assert_eq!(cm.get(t, 0) + cm.get(t, 1), 0);
        }
        assert_eq!(cm.total(), 9);
        assert!(cm.to_csv().starts_with("true\\pred,0,1,2\n0,0,0,3\n"));
    }

    #[test]
    fn confusion_diagonal_matches_accuracy() {
        for seed in 0..5 {
            let m = build_model(&spec(4, AuxTask::Jigsaw, 4), seed).unwrap();
            let d = random_dataset(40, 4, seed + 10);
            let cm = confusion_matrix(&m, &d).unwrap();
            assert_eq!(cm.accuracy(), accuracy(&m, &d).unwrap());
        }
        let perfect = ConfusionMatrix::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(perfect.diagonal(), perfect.total());
        assert!(ConfusionMatrix::from_pairs(3, &[0], &[3]).is_err());
    }

    #[test]
    fn class_count_mismatch() {
        let m = build_model(&spec(3, AuxTask::Jigsaw, 4), 0).unwrap();
        assert!(accuracy(&m, &random_dataset(4, 4, 0)).is_err());
    }

    #[test]
    fn random_model_is_near_chance() {
        // Averaged over several random models, accuracy on balanced labels
        // should sit near 1/C.
        let d = random_dataset(500, 10, 3);
        let mean: f64 = (0..6)
            .map(|s| accuracy(&build_model(&spec(10, AuxTask::Jigsaw, 4), s).unwrap(), &d).unwrap())
            .sum::<f64>()
            / 6.0;
        assert!((mean - 0.1).abs() < 0.06, "{}", mean);
    }

    #[test]
    fn untrained_jigsaw_head_is_at_chance() {
        // Binomial 3σ band around 1/P over 1,200 images.
        let set = generate_permutation_set(9, 30, 0).unwrap();
        let grid = GridSpec::for_image(3, 12, 12).unwrap();
        let d = random_dataset(1200, 2, 4);
        let m = build_model(&spec(2, AuxTask::Jigsaw, 30), 7).unwrap();
        let acc = jigsaw_accuracy(&m, &d, &set, &grid, 0).unwrap();
        let p = 1.0 / 30.0;
        let sigma = (p * (1.0 - p) / 1200.0f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "{}", acc);
        let wrong = build_model(&spec(2, AuxTask::Jigsaw, 5), 7).unwrap();
        assert!(jigsaw_accuracy(&wrong, &d, &set, &grid, 0).is_err());
        let rot = build_model(&spec(2, AuxTask::Rotation, 4), 7).unwrap();
        assert!(jigsaw_accuracy(&rot, &d, &set, &grid, 0).is_err());
        let r = rotation_accuracy(&rot, &d.take(300), 1).unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn cam_matches_weighted_sum_oracle() {
        let m = build_model(&spec(3, AuxTask::Jigsaw, 4), 11).unwrap();
        let data = random_dataset(1, 3, 12);
        let img = &data.images()[0];
        let inf = m.infer(images_to_tensor(&[img.clone()]).unwrap()).unwrap();
        let fs = inf.features.shape().to_vec();
        let w = m.class_head_weight();
        for c in 0..3 {
            let mut direct = vec![0.0f64; fs[2] * fs[3]];
            for k in 0..fs[1] {
                for (i, d) in direct.iter_mut().enumerate() {
                    *d += w.data()[k * 3 + c] as f64 * inf.features.data()[k * fs[2] * fs[3] + i] as f64;
                }
            }
            let want = min_max(&direct);
            let got = cam(&m, img, c).unwrap();
            assert_eq!((got.height, got.width), (fs[2], fs[3]));
            assert!(got.values.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn cam_one_hot_uniform_and_scale() {
        let mut m = build_model(&spec(3, AuxTask::Jigsaw, 4), 13).unwrap();
        let img = random_dataset(1, 3, 14).images()[0].clone();
        let inf = m.infer(images_to_tensor(&[img.clone()]).unwrap()).unwrap();
        let (k, area) = (inf.features.shape()[1], inf.features.shape()[2] * inf.features.shape()[3]);
        let plane = |ch: usize| -> Vec<f64> { inf.features.data()[ch * area..(ch + 1) * area].iter().map(|&v| v as f64).collect() };
        let wid = m.params.find("class.weight").unwrap();
        let before = cam(&m, &img, 1).unwrap();
        m.params.get_mut(wid).value.data_mut().iter_mut().for_each(|v| *v *= 3.5);
        assert_eq!(cam(&m, &img, 1).unwrap().argmax(), before.argmax());
        // One-hot on channel 2.
        let w = m.params.get_mut(wid).value.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        w[2 * 3 + 1] = 1.0;
        let got = cam(&m, &img, 1).unwrap();
        assert!(got.values.iter().zip(min_max(&plane(2))).all(|(a, b)| (a - b).abs() < 1e-6));
        // Uniform weights: normalized channel mean.
        m.params.get_mut(wid).value.data_mut().iter_mut().for_each(|v| *v = 0.25);
        let mean: Vec<f64> = (0..area).map(|i| (0..k).map(|ch| plane(ch)[i]).sum::<f64>() / k as f64).collect();
        let got = cam(&m, &img, 0).unwrap();
        assert!(got.values.iter().zip(min_max(&mean)).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(got.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cam_requires_gap() {
        let mut s = spec(3, AuxTask::Jigsaw, 4);
        s.gap = false;
        let m = build_model(&s, 0).unwrap();
        let img = random_dataset(1, 3, 0).images()[0].clone();
        assert!(matches!(cam(&m, &img, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn heatmap_outputs() {
        let h = Heatmap { height: 2, width: 2, values: vec![0.0, 0.5, 1.0, 0.25] };
        assert_eq!(h.to_csv(), "0.000000,0.500000\n1.000000,0.250000\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        h.write_pgm(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n2 2\n255\n\x00\x80\xff\x40");
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
    }
}
