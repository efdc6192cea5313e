//! Seeded pixel-level domain shifts applied to a base dataset.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{invalid, Error, Result};
use crate::patchwork::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub enum DomainKind {
    Identity,
    /// `v -> 1 - v`.
    Invert,
    /// Random foreground/background colours per image, luma contrast at least `min_contrast`.
    Colorize { min_contrast: f32 },
    /// `|background - v|` against a per-image colour plus per-pixel uniform noise.
    NoiseBackground { amplitude: f32 },
    /// Output channel `i` is input channel `perm[i]`.
    ChannelPermute { perm: [usize; 3] },
    /// Quantize every value to `levels` evenly spaced steps.
    Posterize { levels: u32 },
}

impl DomainKind {
    pub fn name(&self) -> &'static str {
        match self {
            DomainKind::Identity => "identity",
            DomainKind::Invert => "invert",
            DomainKind::Colorize { .. } => "colorize",
            DomainKind::NoiseBackground { .. } => "noise-background",
            DomainKind::ChannelPermute { .. } => "channel-permute",
            DomainKind::Posterize { .. } => "posterize",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransformSpec {
    pub kind: DomainKind,
    pub seed: u64,
}

impl DomainTransformSpec {
    pub fn new(kind: DomainKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

impl fmt::Display for DomainTransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={} seed={}", self.kind.name(), self.seed)?;
        match &self.kind {
            DomainKind::Colorize { min_contrast } => write!(f, " contrast={}", min_contrast),
            DomainKind::NoiseBackground { amplitude } => write!(f, " amplitude={}", amplitude),
            DomainKind::ChannelPermute { perm } => write!(f, " perm={}/{}/{}", perm[0], perm[1], perm[2]),
            DomainKind::Posterize { levels } => write!(f, " levels={}", levels),
            DomainKind::Identity | DomainKind::Invert => Ok(()),
        }
    }
}

impl FromStr for DomainTransformSpec {
    type Err = Error;

    /// `key=value` pairs separated by whitespace or `;`, e.g.
    /// `kind=channel-permute perm=2/0/1 seed=3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut kind = None;
        let mut seed = 0u64;
        let (mut contrast, mut amplitude, mut levels, mut perm) = (0.35f32, 0.35f32, 3u32, [2usize, 0, 1]);
        for pair in s.split(|c: char| c.is_whitespace() || c == ';').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("transform field {:?} is not key=value", pair)))?;
            let num_err = |e: &dyn fmt::Display| Error::InvalidArgument(format!("{}={}: {}", k, v, e));
            match k.trim() {
                "kind" => kind = Some(v.trim().to_string()),
                "seed" => seed = v.parse().map_err(|e| num_err(&e))?,
                "contrast" => contrast = v.parse().map_err(|e| num_err(&e))?,
                "amplitude" => amplitude = v.parse().map_err(|e| num_err(&e))?,
                "levels" => levels = v.parse().map_err(|e| num_err(&e))?,
                "perm" => {
                    let p: Vec<usize> = v
                        .split(['/', ','])
                        .map(|t| t.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| num_err(&e))?;
                    let mut sorted = p.clone();
                    sorted.sort_unstable();
                    if sorted != [0, 1, 2] {
                        return invalid(format!("perm={} is not a permutation of three channels", v));
                    }
                    perm = [p[0], p[1], p[2]];
                }
                other => return invalid(format!("unknown transform key {:?}", other)),
            }
        }
        let kind = match kind.as_deref() {
            Some("identity") => DomainKind::Identity,
            Some("invert") => DomainKind::Invert,
            Some("colorize") => DomainKind::Colorize { min_contrast: contrast },
            Some("noise-background") => DomainKind::NoiseBackground { amplitude },
            Some("channel-permute") => DomainKind::ChannelPermute { perm },
            Some("posterize") => {
                if levels < 2 {
                    return invalid("posterize needs at least 2 levels");
                }
                DomainKind::Posterize { levels }
            }
            Some(other) => return invalid(format!("unknown domain transform kind {:?}", other)),
            None => return invalid(format!("transform spec {:?} has no kind", s)),
        };
        Ok(Self { kind, seed })
    }
}

fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn intensity(img: &ImageTensor, y: usize, x: usize) -> f32 {
    if img.channels() == 3 {
        luma([img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)])
    } else {
        img.at(0, y, x)
    }
}

fn per_pixel_rgb(img: &ImageTensor, mut f: impl FnMut(usize, usize, f32) -> [f32; 3]) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = f(y, x, intensity(img, y, x));
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    ImageTensor::new(3, h, w, data).expect("sized")
}

fn transform(img: &ImageTensor, kind: &DomainKind, rng: &mut ChaCha8Rng) -> ImageTensor {
    match kind {
        DomainKind::Identity => img.clone(),
        DomainKind::Invert => img.map(|v| 1.0 - v),
        DomainKind::Posterize { levels } => {
            let steps = (*levels - 1) as f32;
            img.map(|v| (v * steps).round() / steps)
        }
        DomainKind::ChannelPermute { perm } => {
            let img = img.to_rgb();
            let plane = img.height() * img.width();
            let mut data = Vec::with_capacity(3 * plane);
            for &src in perm {
                data.extend_from_slice(&img.data()[src * plane..(src + 1) * plane]);
            }
            ImageTensor::new(3, img.height(), img.width(), data).expect("sized")
        }
        DomainKind::Colorize { min_contrast } => {
            let (fg, bg) = loop {
                let fg: [f32; 3] = rng.gen();
                let bg: [f32; 3] = rng.gen();
                if (luma(fg) - luma(bg)).abs() >= *min_contrast {
                    break (fg, bg);
                }
            };
            per_pixel_rgb(img, |_, _, v| [0, 1, 2].map(|c| bg[c] + v * (fg[c] - bg[c])))
        }
        DomainKind::NoiseBackground { amplitude } => {
            let base: [f32; 3] = rng.gen();
            let amp = *amplitude;
            per_pixel_rgb(img, |_, _, v| {
                [0, 1, 2].map(|c| {
                    let bg = (base[c] + amp * (2.0 * rng.gen::<f32>() - 1.0)).clamp(0.0, 1.0);
                    (bg - v).abs()
                })
            })
        }
    }
}

/// Apply `spec` to every image of `base`; labels are copied and the result
/// is tagged with `domain_id`.
pub fn synth_domain(base: &Dataset, spec: &DomainTransformSpec, domain_id: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let images = base.map_images(|img| transform(img, &spec.kind, &mut rng));
    Dataset::new(
        format!("{}:{}", base.name, spec.kind.name()),
        domain_id,
        images,
        base.labels().to_vec(),
        base.classes(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn colour_base(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let images = (0..n)
            .map(|_| ImageTensor::new(3, 8, 8, (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap())
            .collect();
        Dataset::new("base", 0, images, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    fn spec(s: &str) -> DomainTransformSpec {
        s.parse().unwrap()
    }

    #[test]
    fn identity_is_bitwise() {
        let base = colour_base(5);
        let out = synth_domain(&base, &spec("kind=identity"), 3).unwrap();
        assert_eq!(out.images(), base.images());
        assert_eq!(out.labels(), base.labels());
        assert_eq!(out.domain_id, 3);
    }

    #[test]
    fn invert_is_an_involution() {
        let base = colour_base(4);
        let once = synth_domain(&base, &spec("kind=invert"), 1).unwrap();
        assert!(once.images()[0].data().iter().zip(base.images()[0].data()).all(|(a, b)| (a - (1.0 - b)).abs() < 1e-7));
        let twice = synth_domain(&once, &spec("kind=invert"), 0).unwrap();
        for (a, b) in twice.images().iter().zip(base.images()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn channel_permute_moves_histograms() {
        let base = colour_base(3);
        let out = synth_domain(&base, &spec("kind=channel-permute perm=2,0,1"), 1).unwrap();
        let hist = |img: &ImageTensor, c: usize| {
            let mut h = [0usize; 16];
            for y in 0..img.height() {
                for x in 0..img.width() {
                    h[((img.at(c, y, x) * 15.999) as usize).min(15)] += 1;
                }
            }
            h
        };
        for (o, b) in out.images().iter().zip(base.images()) {
            assert_eq!(hist(o, 0), hist(b, 2));
            assert_eq!(hist(o, 1), hist(b, 0));
            assert_eq!(hist(o, 2), hist(b, 1));
        }
    }

    #[test]
    fn seeded_kinds_are_deterministic_and_valid() {
        let base = colour_base(6);
        for s in ["kind=colorize seed=4", "kind=noise-background seed=9 amplitude=0.5", "kind=posterize levels=4"] {
            let a = synth_domain(&base, &spec(s), 2).unwrap();
            let b = synth_domain(&base, &spec(s), 2).unwrap();
            assert_eq!(a, b);
            assert!(a.images().iter().all(|i| i.channels() == 3 && i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
        let p = synth_domain(&base, &spec("kind=posterize levels=2"), 0).unwrap();
        assert!(p.images()[0].data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn parse_and_display() {
        for s in ["kind=identity seed=0", "kind=channel-permute seed=1 perm=1/2/0", "kind=noise-background seed=5 amplitude=0.25"] {
            assert_eq!(spec(s).to_string(), s);
        }
        assert_eq!(spec("kind=invert;seed=3").seed, 3);
        assert!("kind=sepia".parse::<DomainTransformSpec>().is_err());
        assert!("seed=3".parse::<DomainTransformSpec>().is_err());
        assert!("kind=channel-permute perm=0,0,1".parse::<DomainTransformSpec>().is_err());
        assert!("kind=invert bogus=1".parse::<DomainTransformSpec>().is_err());
    }
}
