//! Mixed ordered/shuffled batches.

use rand::Rng;
use tensorgrad::Tensor;

use super::Dataset;
use crate::error::{invalid, Result};
use crate::patchwork::{augment, rotate, shuffle_image, AugConfig, GridSpec, ImageTensor};
use crate::permgen::PermutationSet;

/// One training batch. Ordered rows come first and carry auxiliary label 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    pub class_labels: Vec<usize>,
    /// Jigsaw permutation index, or rotation quarter-turns for rotation batches.
    pub jigsaw_labels: Vec<usize>,
    pub ordered_mask: Vec<bool>,
    pub domain_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ordered_count(&self) -> usize {
        self.ordered_mask.iter().filter(|&&m| m).count()
    }

    /// Mask as loss weights: 1 for ordered rows, 0 otherwise.
    pub fn mask_weights(&self) -> Vec<f64> {
        self.ordered_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Stack into an `N×C×H×W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        images_to_tensor(&self.images)
    }
}

pub fn images_to_tensor(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = match images.first() {
        Some(f) => f,
        None => return invalid("cannot stack an empty image list"),
    };
    let dims = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * first.data().len());
    for img in images {
        if (img.channels(), img.height(), img.width()) != dims {
            return invalid("images in a batch must share one shape");
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(vec![images.len(), dims.0, dims.1, dims.2], data)?)
}

/// `round(β·B)` with halves rounded up.
pub fn ordered_count(batch_size: usize, beta: f64) -> usize {
    ((beta * batch_size as f64 + 0.5 + 1e-9).floor() as usize).min(batch_size)
}

fn check_common(sources: &[Dataset], batch_size: usize, beta: f64) -> Result<()> {
    if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
        return invalid("batch composition needs at least one non-empty source");
    }
    if batch_size == 0 {
        return invalid("batch size must be at least 1");
    }
    if !(0.0..=1.0).contains(&beta) {
        return invalid(format!("data bias {} outside [0, 1]", beta));
    }
    Ok(())
}

/// Round-robin over sources from a random start, uniform within each source.
fn draw_samples<'a>(
    sources: &'a [Dataset],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<(&'a ImageTensor, usize, usize)> {
    let start = rng.gen_range(0..sources.len());
    (0..batch_size)
        .map(|k| {
            let src = &sources[(start + k) % sources.len()];
            let (img, y) = src.get(rng.gen_range(0..src.len()));
            (img, y, src.domain_id)
        })
        .collect()
}

/// Compose a jigsaw batch: `round(β·B)` ordered rows (center-cropped to the
/// grid, label 0) followed by rows shuffled with an index uniform in `1..P`.
pub fn compose_batch(
    sources: &[Dataset],
    batch_size: usize,
    beta: f64,
    set: &PermutationSet,
    grid: &GridSpec,
    aug: &AugConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    check_common(sources, batch_size, beta)?;
    aug.validate()?;
    let n_ord = ordered_count(batch_size, beta);
    if n_ord < batch_size && set.len() < 2 {
        return invalid("shuffled rows need at least two permutations");
    }
    if set.n_tiles() != grid.tiles() {
        return invalid(format!("permutation set has {} tiles but the grid has {}", set.n_tiles(), grid.tiles()));
    }
    let (ch, cw) = grid.cropped_dims();
    let mut batch = Batch {
        images: Vec::with_capacity(batch_size),
        class_labels: Vec::with_capacity(batch_size),
        jigsaw_labels: Vec::with_capacity(batch_size),
        ordered_mask: Vec::with_capacity(batch_size),
        domain_ids: Vec::with_capacity(batch_size),
    };
    for (k, (img, y, d)) in draw_samples(sources, batch_size, rng).into_iter().enumerate() {
        let augmented = augment(img, aug, grid, rng);
        let (out, p) = if k < n_ord {
            (augmented.center_crop(ch, cw)?, 0)
        } else {
            shuffle_image(&augmented, rng.gen_range(1..set.len()), set, grid)?
        };
        batch.images.push(out);
        batch.class_labels.push(y);
        batch.jigsaw_labels.push(p);
        batch.ordered_mask.push(k < n_ord);
        batch.domain_ids.push(d);
    }
    Ok(batch)
}

/// Rotation variant: rows are center-cropped to the grid like jigsaw rows,
/// and non-ordered rows are rotated by `k ∈ {1, 2, 3}` quarter turns.
pub fn compose_rotation_batch(
    sources: &[Dataset],
    batch_size: usize,
    beta: f64,
    grid: &GridSpec,
    aug: &AugConfig,
    rng: &mut impl Rng,
) -> Result<Batch> {
    check_common(sources, batch_size, beta)?;
    aug.validate()?;
    let n_ord = ordered_count(batch_size, beta);
    let (ch, cw) = grid.cropped_dims();
    let mut batch = Batch {
        images: Vec::with_capacity(batch_size),
        class_labels: Vec::with_capacity(batch_size),
        jigsaw_labels: Vec::with_capacity(batch_size),
        ordered_mask: Vec::with_capacity(batch_size),
        domain_ids: Vec::with_capacity(batch_size),
    };
    for (k, (img, y, d)) in draw_samples(sources, batch_size, rng).into_iter().enumerate() {
        let augmented = augment(img, aug, grid, rng);
        let turns = if k < n_ord { 0 } else { rng.gen_range(1..4) };
        let (out, r) = rotate(&augmented.center_crop(ch, cw)?, turns)?;
        batch.images.push(out);
        batch.class_labels.push(y);
        batch.jigsaw_labels.push(r);
        batch.ordered_mask.push(k < n_ord);
        batch.domain_ids.push(d);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchwork::decompose;
    use crate::permgen::generate_permutation_set;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source(domain_id: usize, n: usize, value: f32) -> Dataset {
        let images = (0..n)
            .map(|i| {
                let data = (0..3 * 32 * 32).map(|j| ((i * 31 + j) % 97) as f32 / 96.0 * value).collect();
                ImageTensor::new(3, 32, 32, data).unwrap()
            })
            .collect();
        Dataset::new(format!("d{}", domain_id), domain_id, images, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    fn setup() -> (Vec<Dataset>, PermutationSet, GridSpec) {
        let sources = vec![source(0, 7, 1.0), source(1, 5, 0.7), source(2, 9, 0.4)];
        (sources, crate::permgen::shared_test_set().clone(), GridSpec::for_image(3, 32, 32).unwrap())
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(ordered_count(10, 0.6), 6);
        assert_eq!(ordered_count(128, 0.6), 77);
        assert_eq!(ordered_count(5, 0.5), 3);
        assert_eq!(ordered_count(3, 0.5), 2);
        assert_eq!(ordered_count(7, 0.0), 0);
        assert_eq!(ordered_count(7, 1.0), 7);
    }

    #[test]
    fn ten_rows_split_six_four() {
        let (s, set, grid) = setup();
        let b = compose_batch(&s, 10, 0.6, &set, &grid, &AugConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.ordered_count(), 6);
        assert_eq!(b.jigsaw_labels.iter().filter(|&&p| p != 0).count(), 4);
    }

    #[test]
    fn endpoints() {
        let (s, set, grid) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let all = compose_batch(&s, 16, 1.0, &set, &grid, &AugConfig::default(), &mut rng).unwrap();
        assert!(all.ordered_mask.iter().all(|&m| m) && all.jigsaw_labels.iter().all(|&p| p == 0));
        let none = compose_batch(&s, 16, 0.0, &set, &grid, &AugConfig::default(), &mut rng).unwrap();
        assert!(none.ordered_mask.iter().all(|&m| !m) && none.jigsaw_labels.iter().all(|&p| p != 0));
    }

    #[test]
    fn errors() {
        let (s, set, grid) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aug = AugConfig::none();
        assert!(compose_batch(&[], 4, 0.5, &set, &grid, &aug, &mut rng).is_err());
        let single = generate_permutation_set(9, 1, 0).unwrap();
        assert!(compose_batch(&s, 4, 0.5, &single, &grid, &aug, &mut rng).is_err());
        assert!(compose_batch(&s, 4, 1.0, &single, &grid, &aug, &mut rng).is_ok());
        assert!(compose_batch(&s, 0, 0.5, &set, &grid, &aug, &mut rng).is_err());
        assert!(compose_batch(&s, 4, 1.5, &set, &grid, &aug, &mut rng).is_err());
    }

    #[test]
    fn shuffled_rows_are_recomposed_sources() {
        // Without augmentation every shuffled row must equal some source image
        // recomposed with the permutation named by its label.
        let (s, set, grid) = setup();
        let b = compose_batch(&s, 24, 0.25, &set, &grid, &AugConfig::none(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for i in 0..b.len() {
            let src = s.iter().find(|d| d.domain_id == b.domain_ids[i]).unwrap();
            let found = src.images().iter().zip(src.labels()).any(|(img, &y)| {
                let want = if b.ordered_mask[i] {
                    let (h, w) = grid.cropped_dims();
                    img.center_crop(h, w).unwrap()
                } else {
                    shuffle_image(img, b.jigsaw_labels[i], &set, &grid).unwrap().0
                };
                y == b.class_labels[i] && want == b.images[i]
            });
            assert!(found, "row {} does not match any source image", i);
            assert_eq!(decompose(&b.images[i].clone(), &GridSpec { n: 3, tile_h: 10, tile_w: 10 }).unwrap().len(), 9);
        }
    }

    #[test]
    fn domain_round_robin_balance() {
        let (s, set, grid) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = compose_batch(&s, 11, 0.6, &set, &grid, &AugConfig::none(), &mut rng).unwrap();
            let counts: Vec<usize> = (0..3).map(|d| b.domain_ids.iter().filter(|&&x| x == d).count()).collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{:?}", counts);
        }
    }

    #[test]
    fn thousand_batches_hold_invariants() {
        let (s, set, grid) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let aug = AugConfig::default();
        let mut seen = vec![false; set.len()];
        for i in 0..1000 {
            let bsz = 1 + i % 13;
            let beta = (i % 11) as f64 / 10.0;
            let b = compose_batch(&s, bsz, beta, &set, &grid, &aug, &mut rng).unwrap();
            assert_eq!(b.len(), bsz);
            assert_eq!(b.ordered_count(), ordered_count(bsz, beta));
            for k in 0..bsz {
                assert_eq!(b.ordered_mask[k], b.jigsaw_labels[k] == 0);
                assert!(b.jigsaw_labels[k] < set.len());
                seen[b.jigsaw_labels[k]] = true;
            }
        }
        assert!(seen.iter().all(|&x| x), "every permutation index should appear");
    }

    #[test]
    fn rotation_batches() {
        let (s, _, grid) = setup();
        let b = compose_rotation_batch(&s, 20, 0.5, &grid, &AugConfig::none(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(b.ordered_count(), 10);
        for k in 0..20 {
            assert_eq!(b.ordered_mask[k], b.jigsaw_labels[k] == 0);
            assert!(b.jigsaw_labels[k] < 4);
        }
        assert_eq!(b.to_tensor().unwrap().shape(), &[20, 3, 30, 30]);
    }

    #[test]
    fn stacking() {
        let (s, set, grid) = setup();
        let b = compose_batch(&s, 5, 0.6, &set, &grid, &AugConfig::none(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let t = b.to_tensor().unwrap();
        assert_eq!(t.shape(), &[5, 3, 30, 30]);
        assert_eq!(&t.data()[900 * 3..900 * 6], b.images[1].data());
        assert!(images_to_tensor(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn same_seed_same_batch(seed in any::<u64>(), bsz in 1usize..12, beta in 0.0f64..=1.0) {
            let (s, set, grid) = setup();
            let aug = AugConfig::default();
            let a = compose_batch(&s, bsz, beta, &set, &grid, &aug, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = compose_batch(&s, bsz, beta, &set, &grid, &aug, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
