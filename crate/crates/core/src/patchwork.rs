//! Tile-grid decomposition, jigsaw recomposition, augmentation and rotation.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::permgen::{Permutation, PermutationSet};

/// Channel-major (`C×H×W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return invalid(format!("empty image {}x{}x{}", channels, height, width));
        }
        if data.len() != channels * height * width {
            return invalid(format!(
                "{}x{}x{} image needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            ));
        }
        let mut img = Self {
            channels,
            height,
            width,
            data,
        };
        img.clamp();
        Ok(img)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("non-empty")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Apply `f` to every value, clamping the result to `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out.clamp();
        out
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Copy of the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return invalid(format!(
                "crop {}x{} at ({}, {}) outside {}x{} image",
                h, w, y0, x0, self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height || w > self.width {
            return invalid(format!("cannot center-crop {}x{} to {}x{}", self.height, self.width, h, w));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// Bilinear resize with pixel-center alignment (same size is the identity).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, (src - i0 as f64) as f32)
                })
                .collect()
        };
        let (ys, xs) = (axis(h, self.height), axis(w, self.width));
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Self::new(self.channels, h, w, data).expect("sized")
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y, x) = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Replicate a single channel to three.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let plane = &self.data[..self.height * self.width];
        Self {
            channels: 3,
            height: self.height,
            width: self.width,
            data: plane.repeat(3),
        }
    }

    /// Replace the `h×w` region at `(y0, x0)` by its luma, replicated on every channel.
    fn grayscale_region(&mut self, y0: usize, x0: usize, h: usize, w: usize) {
        if self.channels != 3 {
            return;
        }
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let l = (0.299 * self.at(0, y, x) + 0.587 * self.at(1, y, x) + 0.114 * self.at(2, y, x)).clamp(0.0, 1.0);
                for c in 0..3 {
                    *self.at_mut(c, y, x) = l;
                }
            }
        }
    }

    fn paste(&mut self, tile: &ImageTensor, y0: usize, x0: usize) {
        for c in 0..self.channels {
            for y in 0..tile.height {
                let dst = (c * self.height + y0 + y) * self.width + x0;
                let src = (c * tile.height + y) * tile.width;
                self.data[dst..dst + tile.width].copy_from_slice(&tile.data[src..src + tile.width]);
            }
        }
    }

    /// Binary PPM (3 channels) or PGM (1 channel) dump for visual inspection.
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (magic, planes) = if self.channels == 3 { ("P6", 3) } else { ("P5", 1) };
        write!(f, "{}\n{} {}\n255\n", magic, self.width, self.height)?;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..planes {
                    f.write_all(&[(self.at(c, y, x) * 255.0).round() as u8])?;
                }
            }
        }
        Ok(())
    }
}

/// `n×n` tile grid over an image of a given size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub n: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl GridSpec {
    pub fn for_image(n: usize, height: usize, width: usize) -> Result<Self> {
        if n < 2 {
            return invalid(format!("grid side must be at least 2, got {}", n));
        }
        if height < n || width < n {
            return invalid(format!("{}x{} image is smaller than a {}x{} grid", height, width, n, n));
        }
        Ok(Self {
            n,
            tile_h: height / n,
            tile_w: width / n,
        })
    }

    pub fn tiles(&self) -> usize {
        self.n * self.n
    }

    /// Size of the centered region the grid covers.
    pub fn cropped_dims(&self) -> (usize, usize) {
        (self.n * self.tile_h, self.n * self.tile_w)
    }

    /// Top-left of the grid region inside an image of the given size.
    fn origin(&self, height: usize, width: usize) -> (usize, usize) {
        let (ch, cw) = self.cropped_dims();
        ((height - ch) / 2, (width - cw) / 2)
    }
}

/// Center-crop to the grid region and cut it into row-major tiles.
pub fn decompose(img: &ImageTensor, grid: &GridSpec) -> Result<Vec<ImageTensor>> {
    let (ch, cw) = grid.cropped_dims();
    if img.height() < ch || img.width() < cw {
        return invalid(format!(
            "{}x{} image too small for a {}x{} grid of {}x{} tiles",
            img.height(),
            img.width(),
            grid.n,
            grid.n,
            grid.tile_h,
            grid.tile_w
        ));
    }
    let (oy, ox) = grid.origin(img.height(), img.width());
    let mut tiles = Vec::with_capacity(grid.tiles());
    for r in 0..grid.n {
        for c in 0..grid.n {
            tiles.push(img.crop(oy + r * grid.tile_h, ox + c * grid.tile_w, grid.tile_h, grid.tile_w)?);
        }
    }
    Ok(tiles)
}

/// Assemble tiles so that grid position `i` holds `tiles[perm.order[i]]`.
pub fn recompose(tiles: &[ImageTensor], perm: &Permutation, grid: &GridSpec) -> Result<ImageTensor> {
    if tiles.len() != grid.tiles() || perm.len() != grid.tiles() {
        return invalid(format!(
            "recompose needs {} tiles and a length-{} permutation, got {} and {}",
            grid.tiles(),
            grid.tiles(),
            tiles.len(),
            perm.len()
        ));
    }
    let channels = tiles[0].channels();
    if tiles
        .iter()
        .any(|t| t.height() != grid.tile_h || t.width() != grid.tile_w || t.channels() != channels)
    {
        return invalid("tile dimensions disagree with the grid");
    }
    let (h, w) = grid.cropped_dims();
    let mut out = ImageTensor::filled(channels, h, w, 0.0);
    for pos in 0..grid.tiles() {
        let (r, c) = (pos / grid.n, pos % grid.n);
        out.paste(&tiles[perm.get(pos)], r * grid.tile_h, c * grid.tile_w);
    }
    Ok(out)
}

/// Recompose `img` with permutation `perm_index` of `set`; the label is the index.
pub fn shuffle_image(
    img: &ImageTensor,
    perm_index: usize,
    set: &PermutationSet,
    grid: &GridSpec,
) -> Result<(ImageTensor, usize)> {
    let perm = set.get(perm_index)?;
    if perm.len() != grid.tiles() {
        return invalid(format!(
            "permutation set has {} tiles but the grid has {}",
            set.n_tiles(),
            grid.tiles()
        ));
    }
    Ok((recompose(&decompose(img, grid)?, perm, grid)?, perm_index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub crop_retain_min: f64,
    pub crop_retain_max: f64,
    pub hflip_prob: f64,
    pub tile_gray_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_retain_min: 0.8,
            crop_retain_max: 1.0,
            hflip_prob: 0.5,
            tile_gray_prob: 0.1,
        }
    }
}

impl AugConfig {
    /// Configuration under which [`augment`] returns its input unchanged.
    pub fn none() -> Self {
        Self {
            crop_retain_min: 1.0,
            crop_retain_max: 1.0,
            hflip_prob: 0.0,
            tile_gray_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.crop_retain_min > 0.0 && self.crop_retain_min <= self.crop_retain_max && self.crop_retain_max <= 1.0) {
            return invalid(format!(
                "crop retain range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_retain_min, self.crop_retain_max
            ));
        }
        if !prob(self.hflip_prob) || !prob(self.tile_gray_prob) {
            return invalid("augmentation probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Random crop + resize back, horizontal flip, then per-tile grayscale.
pub fn augment(img: &ImageTensor, cfg: &AugConfig, grid: &GridSpec, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let draw = |rng: &mut _| -> f64 {
        if cfg.crop_retain_max > cfg.crop_retain_min {
            Rng::gen_range(rng, cfg.crop_retain_min..=cfg.crop_retain_max)
        } else {
            cfg.crop_retain_min
        }
    };
    let (fh, fw) = (draw(rng), draw(rng));
    let ch = ((fh * h as f64).round() as usize).clamp(1, h);
    let cw = ((fw * w as f64).round() as usize).clamp(1, w);
    let mut out = if ch == h && cw == w {
        img.clone()
    } else {
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        img.crop(y0, x0, ch, cw).expect("inside").resize_bilinear(h, w)
    };
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob) {
        out = out.hflip();
    }
    if cfg.tile_gray_prob > 0.0 && h >= grid.n * grid.tile_h && w >= grid.n * grid.tile_w {
        let (oy, ox) = grid.origin(h, w);
        for r in 0..grid.n {
            for c in 0..grid.n {
                if rng.gen_bool(cfg.tile_gray_prob) {
                    out.grayscale_region(oy + r * grid.tile_h, ox + c * grid.tile_w, grid.tile_h, grid.tile_w);
                }
            }
        }
    }
    out
}

/// Counter-clockwise rotation by `k` quarter turns; the label is `k`.
pub fn rotate(img: &ImageTensor, k: usize) -> Result<(ImageTensor, usize)> {
    if img.height() != img.width() {
        return invalid(format!("rotation needs a square image, got {}x{}", img.height(), img.width()));
    }
    if k > 3 {
        return invalid(format!("rotation label {} outside 0..4", k));
    }
    let n = img.height();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for r in 0..n {
            for col in 0..n {
                let (sr, sc) = match k {
                    0 => (r, col),
                    1 => (col, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - col),
                    _ => (n - 1 - col, r),
                };
                *out.at_mut(c, r, col) = img.at(c, sr, sc);
            }
        }
    }
    Ok((out, k))
}
