//! Bi-temporal change-detection data: samples, tiling, splits, augmentation,
//! PNG persistence, and a synthetic desk-scale dataset generator.
//!
//! On-disk layout is `<root>/{A,B,label}/<id>.png` (A = earlier image,
//! B = later image, label = binary change mask), with line-delimited JSON
//! manifests listing each split's samples.

use crate::error::{Error, Result};
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One co-registered image pair and its pixel-level change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTemporalSample {
    /// Earlier acquisition, `[3, H, W]`, values in [0, 1].
    pub image_t1: Array3<f64>,
    /// Later acquisition, same shape and range.
    pub image_t2: Array3<f64>,
    /// Change mask, `[H, W]`, values exactly 0.0 or 1.0 (1 = changed).
    pub mask: Array2<f64>,
    pub id: String,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    /// Checks every type invariant: matching shapes, binary mask, finite
    /// values inside [0, 1].
    pub fn validate(&self) -> Result<()> {
        let (c1, h1, w1) = self.image_t1.dim();
        let (c2, h2, w2) = self.image_t2.dim();
        let (hm, wm) = self.mask.dim();
        if c1 != 3 || c2 != 3 {
            return Err(Error::Data(format!("sample {}: images must have 3 channels", self.id)));
        }
        if (h1, w1) != (h2, w2) || (h1, w1) != (hm, wm) {
            return Err(Error::Data(format!(
                "sample {}: t1 {h1}x{w1}, t2 {h2}x{w2}, mask {hm}x{wm} disagree",
                self.id
            )));
        }
        for v in self.image_t1.iter().chain(self.image_t2.iter()) {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(Error::Data(format!("sample {}: pixel {v} outside [0,1]", self.id)));
            }
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// Which partition a manifest describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One manifest line: a sample id plus its three file paths, relative to the
/// dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub a: String,
    pub b: String,
    pub label: String,
}

impl ManifestEntry {
    /// Conventional paths under the `{A,B,label}` layout.
    pub fn for_id(id: &str, split: Split) -> Self {
        ManifestEntry {
            id: id.to_string(),
            split,
            a: format!("A/{id}.png"),
            b: format!("B/{id}.png"),
            label: format!("label/{id}.png"),
        }
    }
}

/// An ordered list of samples belonging to one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub tile_size: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, tile_size: usize, ids: &[String]) -> Self {
        DatasetManifest {
            split,
            tile_size,
            samples: ids.iter().map(|id| ManifestEntry::for_id(id, split)).collect(),
        }
    }

    /// Writes one JSON record per line; the first line is a header record
    /// with the split and tile size.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(
            f,
            "{}",
            serde_json::json!({"split": self.split, "tile_size": self.tile_size})
        )?;
        for e in &self.samples {
            writeln!(f, "{}", serde_json::to_string(e).map_err(|e| Error::Data(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))??;
        #[derive(Deserialize)]
        struct Header {
            split: Split,
            tile_size: usize,
        }
        let h: Header = serde_json::from_str(&header)
            .map_err(|e| Error::Data(format!("{}: bad manifest header: {e}", path.display())))?;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("{}: bad manifest line: {e}", path.display())))?,
            );
        }
        Ok(DatasetManifest { split: h.split, tile_size: h.tile_size, samples })
    }
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

/// Cuts each source pair into non-overlapping `tile x tile` patches in
/// row-major order. Tile ids are `"<srcid>_<row>_<col>"`.
pub fn tile_pairs(sources: &[BiTemporalSample], tile: usize) -> Result<Vec<BiTemporalSample>> {
    let mut out = Vec::new();
    for src in sources {
        src.validate()?;
        let (h, w) = (src.height(), src.width());
        if tile == 0 || h % tile != 0 || w % tile != 0 {
            return Err(Error::InvalidSize(format!(
                "tile {tile} does not divide source {} ({h}x{w})",
                src.id
            )));
        }
        for r in 0..h / tile {
            for c in 0..w / tile {
                let (y0, x0) = (r * tile, c * tile);
                out.push(BiTemporalSample {
                    image_t1: src.image_t1.slice(s![.., y0..y0 + tile, x0..x0 + tile]).to_owned(),
                    image_t2: src.image_t2.slice(s![.., y0..y0 + tile, x0..x0 + tile]).to_owned(),
                    mask: src.mask.slice(s![y0..y0 + tile, x0..x0 + tile]).to_owned(),
                    id: format!("{}_{r}_{c}", src.id),
                });
            }
        }
    }
    Ok(out)
}

/// Reassembles a row-major square grid of tiles into one sample — the exact
/// inverse of [`tile_pairs`] on a single source.
pub fn stitch_tiles(tiles: &[BiTemporalSample], grid: usize, id: &str) -> Result<BiTemporalSample> {
    if tiles.len() != grid * grid || tiles.is_empty() {
        return Err(Error::InvalidSize(format!(
            "expected {}x{} = {} tiles, got {}",
            grid,
            grid,
            grid * grid,
            tiles.len()
        )));
    }
    let t = tiles[0].height();
    let size = grid * t;
    let mut image_t1 = Array3::<f64>::zeros((3, size, size));
    let mut image_t2 = Array3::<f64>::zeros((3, size, size));
    let mut mask = Array2::<f64>::zeros((size, size));
    for r in 0..grid {
        for c in 0..grid {
            let tile = &tiles[r * grid + c];
            if tile.height() != t || tile.width() != t {
                return Err(Error::InvalidSize(format!("tile {} has odd size", tile.id)));
            }
            let (y0, x0) = (r * t, c * t);
            image_t1.slice_mut(s![.., y0..y0 + t, x0..x0 + t]).assign(&tile.image_t1);
            image_t2.slice_mut(s![.., y0..y0 + t, x0..x0 + t]).assign(&tile.image_t2);
            mask.slice_mut(s![y0..y0 + t, x0..x0 + t]).assign(&tile.mask);
        }
    }
    Ok(BiTemporalSample { image_t1, image_t2, mask, id: id.to_string() })
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Shuffles source ids with the seed and partitions them by largest-remainder
/// apportionment, so split sizes are within one source of the exact ratios.
/// Tiles cut from one source must all ride on that source's split.
pub fn split_sources(
    source_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[Vec<String>; 3]> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c <= 0.0 {
        return Err(Error::Config(format!("split ratios must be nonnegative and not all zero, got {ratios:?}")));
    }
    let total = a + b + c;
    let shares = [a / total, b / total, c / total];
    let nonzero = shares.iter().filter(|&&r| r > 0.0).count();
    if source_ids.len() < nonzero {
        return Err(Error::Data(format!(
            "{} source images cannot fill {} nonzero splits",
            source_ids.len(),
            nonzero
        )));
    }

    let mut ids: Vec<String> = source_ids.to_vec();
    let mut rng = crate::rng_from_seed(seed);
    // Fisher-Yates with the split's own stream, independent of list order
    // upstream.
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }

    let n = ids.len();
    let exact: Vec<f64> = shares.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    // Hand leftovers to the largest fractional parts, earlier split on ties.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        (exact[j] - exact[j].floor())
            .partial_cmp(&(exact[i] - exact[i].floor()))
            .unwrap()
            .then(i.cmp(&j))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        if shares[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    // Guarantee every nonzero split gets at least one source.
    for i in 0..3 {
        if shares[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }

    let mut it = ids.into_iter();
    let train: Vec<String> = it.by_ref().take(counts[0]).collect();
    let val: Vec<String> = it.by_ref().take(counts[1]).collect();
    let test: Vec<String> = it.collect();
    Ok([train, val, test])
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Sampling ranges for [`augment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Crop side length as a fraction of the input, sampled uniformly from
    /// `[crop_scale_min, crop_scale_max]`; the crop is resized back.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip_p: 0.5, vflip_p: 0.5, crop_scale_min: 0.8, crop_scale_max: 1.0 }
    }
}

/// The exact geometry applied to one sample: crop window first (then resized
/// back to the original size), then horizontal flip, then vertical flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomTransform {
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_size: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeomTransform {
    pub fn identity(size: usize) -> Self {
        GeomTransform { crop_top: 0, crop_left: 0, crop_size: size, hflip: false, vflip: false }
    }
}

fn bilinear_coords(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

pub(crate) fn nearest_coords(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1))
        .collect()
}

/// Bilinear resample of a `[3,H,W]` image to `(oh, ow)`.
pub fn resize_image(img: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let ty = bilinear_coords(h, oh);
    let tx = bilinear_coords(w, ow);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                out[[ci, oy, ox]] = wy0 * (wx0 * img[[ci, y0, x0]] + wx1 * img[[ci, y0, x1]])
                    + wy1 * (wx0 * img[[ci, y1, x0]] + wx1 * img[[ci, y1, x1]]);
            }
        }
    }
    out
}

/// Nearest-neighbor resample of a `[H,W]` mask; binary inputs stay binary.
pub fn resize_mask(mask: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    if (h, w) == (oh, ow) {
        return mask.clone();
    }
    let ty = nearest_coords(h, oh);
    let tx = nearest_coords(w, ow);
    Array2::from_shape_fn((oh, ow), |(oy, ox)| mask[[ty[oy], tx[ox]]])
}

fn flip_image(img: &Array3<f64>, horizontal: bool, vertical: bool) -> Array3<f64> {
    let mut v = img.view();
    if horizontal {
        v.invert_axis(ndarray::Axis(2));
    }
    if vertical {
        v.invert_axis(ndarray::Axis(1));
    }
    v.to_owned()
}

/// Applies a recorded transform to a bare mask; used to verify that images
/// and mask always receive identical geometry.
pub fn apply_geom_mask(mask: &Array2<f64>, t: &GeomTransform) -> Array2<f64> {
    let (h, w) = mask.dim();
    let cropped = mask
        .slice(s![
            t.crop_top..t.crop_top + t.crop_size,
            t.crop_left..t.crop_left + t.crop_size
        ])
        .to_owned();
    let resized = resize_mask(&cropped, h, w);
    let mut v = resized.view();
    if t.hflip {
        v.invert_axis(ndarray::Axis(1));
    }
    if t.vflip {
        v.invert_axis(ndarray::Axis(0));
    }
    v.to_owned()
}

/// Applies a recorded transform to a whole sample.
pub fn apply_geom(sample: &BiTemporalSample, t: &GeomTransform) -> BiTemporalSample {
    let (h, w) = (sample.height(), sample.width());
    let crop = |img: &Array3<f64>| {
        img.slice(s![
            ..,
            t.crop_top..t.crop_top + t.crop_size,
            t.crop_left..t.crop_left + t.crop_size
        ])
        .to_owned()
    };
    let t1 = flip_image(&resize_image(&crop(&sample.image_t1), h, w), t.hflip, t.vflip);
    let t2 = flip_image(&resize_image(&crop(&sample.image_t2), h, w), t.hflip, t.vflip);
    let mask = apply_geom_mask(&sample.mask, t);
    BiTemporalSample {
        image_t1: t1.mapv(|v| v.clamp(0.0, 1.0)),
        image_t2: t2.mapv(|v| v.clamp(0.0, 1.0)),
        mask,
        id: sample.id.clone(),
    }
}

/// Draws one random geometric transform and applies it identically to both
/// images and the mask. Returns the transformed sample and the transform.
pub fn augment(
    sample: &BiTemporalSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (BiTemporalSample, GeomTransform) {
    let size = sample.height();
    assert_eq!(size, sample.width(), "augment expects square samples");
    let scale = if cfg.crop_scale_max > cfg.crop_scale_min {
        rng.gen_range(cfg.crop_scale_min..=cfg.crop_scale_max)
    } else {
        cfg.crop_scale_min
    };
    let crop_size = ((size as f64 * scale).round() as usize).clamp(1, size);
    let crop_top = rng.gen_range(0..=size - crop_size);
    let crop_left = rng.gen_range(0..=size - crop_size);
    let hflip = rng.gen_bool(cfg.hflip_p);
    let vflip = rng.gen_bool(cfg.vflip_p);
    let t = GeomTransform { crop_top, crop_left, crop_size, hflip, vflip };
    (apply_geom(sample, &t), t)
}

/// Stacks samples into network inputs: two `[N,3,H,W]` image tensors plus a
/// `[N,1,H,W]` target array.
pub fn batch_tensors(
    samples: &[&BiTemporalSample],
) -> Result<(crate::autodiff::Tensor, crate::autodiff::Tensor, ndarray::ArrayD<f64>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot batch zero samples".into()));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let n = samples.len();
    let mut t1 = ndarray::Array4::<f64>::zeros((n, 3, h, w));
    let mut t2 = ndarray::Array4::<f64>::zeros((n, 3, h, w));
    let mut target = ndarray::Array4::<f64>::zeros((n, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.height() != h || s.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id,
                s.height(),
                s.width()
            )));
        }
        t1.slice_mut(s![i, .., .., ..]).assign(&s.image_t1);
        t2.slice_mut(s![i, .., .., ..]).assign(&s.image_t2);
        target.slice_mut(s![i, 0, .., ..]).assign(&s.mask);
    }
    Ok((
        crate::autodiff::Tensor::new(t1.into_dyn()),
        crate::autodiff::Tensor::new(t2.into_dyn()),
        target.into_dyn(),
    ))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Quantizes to the 8-bit grid so PNG persistence is lossless.
fn q8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One synthetic pair: a smooth textured background shared by both epochs,
/// with `n_rects` recolored rectangles in the second epoch. The mask marks
/// exactly those rectangles.
pub fn synthetic_pair(rng: &mut ChaCha8Rng, size: usize, n_rects: usize, id: &str) -> BiTemporalSample {
    assert!(size >= 16, "synthetic pairs need size >= 16");
    // Background: per-channel gradient mixed with low-amplitude noise.
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.7)).collect();
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let mut t1 = Array3::<f64>::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let g = gx * x as f64 / size as f64 + gy * y as f64 / size as f64;
                let noise = rng.gen_range(-0.05..0.05);
                t1[[c, y, x]] = q8(base[c] + g + noise);
            }
        }
    }
    let mut t2 = t1.clone();
    let mut mask = Array2::<f64>::zeros((size, size));
    for _ in 0..n_rects {
        // Rectangle extents and offsets are snapped to the detector's 4-pixel
        // output stride so the mask is exactly representable at the scale the
        // change map is predicted at; the overfit smoke then measures
        // optimization rather than sub-stride boundary error.
        const GRID: usize = 4;
        let cells = size / GRID;
        let max_cells = (cells / 3).max(2);
        let rh = GRID * rng.gen_range(2..=max_cells);
        let rw = GRID * rng.gen_range(2..=max_cells);
        let top = GRID * rng.gen_range(0..=cells - rh / GRID);
        let left = GRID * rng.gen_range(0..=cells - rw / GRID);
        // Recolor well away from the background so change is learnable.
        let color: Vec<f64> = (0..3)
            .map(|c| q8(if base[c] > 0.45 { base[c] - rng.gen_range(0.3..0.4) } else { base[c] + rng.gen_range(0.3..0.4) }))
            .collect();
        for y in top..top + rh {
            for x in left..left + rw {
                for c in 0..3 {
                    t2[[c, y, x]] = color[c];
                }
                mask[[y, x]] = 1.0;
            }
        }
    }
    BiTemporalSample { image_t1: t1, image_t2: t2, mask, id: id.to_string() }
}

/// Deterministic synthetic dataset: `n` square pairs of side `size`, one to
/// three changed rectangles each (so both classes are always present).
pub fn make_synthetic_dataset(n: usize, size: usize, seed: u64) -> Vec<BiTemporalSample> {
    assert!(n >= 1, "need at least one sample");
    let mut rng = crate::rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let n_rects = rng.gen_range(1..=3);
            synthetic_pair(&mut rng, size, n_rects, &format!("synth{i:04}"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PNG persistence
// ---------------------------------------------------------------------------

pub fn image_to_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn png_to_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Writes a binary mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn mask_to_png(mask: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask[[y, x]] >= 0.5 { 255 } else { 0 }]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Reads an 8-bit mask PNG, binarizing at 128 (LEVIR-style labels are
/// {0, 255} but may carry interpolation artifacts).
pub fn png_to_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Writes one sample into the `{A,B,label}` layout under `root`.
pub fn save_sample(root: &Path, sample: &BiTemporalSample) -> Result<()> {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(root.join(sub))?;
    }
    image_to_png(&sample.image_t1, &root.join("A").join(format!("{}.png", sample.id)))?;
    image_to_png(&sample.image_t2, &root.join("B").join(format!("{}.png", sample.id)))?;
    mask_to_png(&sample.mask, &root.join("label").join(format!("{}.png", sample.id)))
}

/// Loads one manifest entry's files from under `root`.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<BiTemporalSample> {
    let sample = BiTemporalSample {
        image_t1: png_to_image(&root.join(&entry.a))?,
        image_t2: png_to_image(&root.join(&entry.b))?,
        mask: png_to_mask(&root.join(&entry.label))?,
        id: entry.id.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every sample named by a manifest file that lives in the dataset
/// root directory.
pub fn load_split(root: &Path, manifest: &DatasetManifest) -> Result<Vec<BiTemporalSample>> {
    manifest.samples.iter().map(|e| load_sample(root, e)).collect()
}

/// Writes samples plus per-split manifests (`train.jsonl`, `val.jsonl`,
/// `test.jsonl`) for a whole synthetic dataset.
pub fn write_dataset(
    root: &Path,
    samples: &[BiTemporalSample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    for s in samples {
        s.validate()?;
        save_sample(root, s)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let [train, val, test] = split_sources(&ids, ratios, seed)?;
    let size = samples.first().map(|s| s.height()).unwrap_or(0);
    let manifests = [
        DatasetManifest::new(Split::Train, size, &train),
        DatasetManifest::new(Split::Val, size, &val),
        DatasetManifest::new(Split::Test, size, &test),
    ];
    for m in &manifests {
        m.save(&root.join(format!("{}.jsonl", m.split)))?;
    }
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn checkerboard(size: usize, id: &str) -> BiTemporalSample {
        let image_t1 = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            q8(((c + y + x) % 7) as f64 / 7.0)
        });
        let image_t2 = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            q8(((c + 2 * y + 3 * x) % 5) as f64 / 5.0)
        });
        let mask = Array2::from_shape_fn((size, size), |(y, x)| ((y + x) % 2) as f64);
        BiTemporalSample { image_t1, image_t2, mask, id: id.to_string() }
    }

    #[test]
    fn tiling_a_1024_source_yields_16_patches_of_256() {
        let src = checkerboard(1024, "big");
        let tiles = tile_pairs(&[src], 256).unwrap();
        assert_eq!(tiles.len(), 16);
        assert!(tiles.iter().all(|t| t.height() == 256 && t.width() == 256));
        assert_eq!(tiles[0].id, "big_0_0");
        assert_eq!(tiles[5].id, "big_1_1"); // row-major: index 5 = row 1, col 1
        assert_eq!(tiles[15].id, "big_3_3");
    }

    #[test]
    fn tiling_at_source_size_is_identity() {
        let src = checkerboard(256, "s");
        let tiles = tile_pairs(std::slice::from_ref(&src), 256).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image_t1, src.image_t1);
        assert_eq!(tiles[0].mask, src.mask);
        assert_eq!(tiles[0].id, "s_0_0");
    }

    #[test]
    fn quadrant_mask_lands_in_exactly_one_tile() {
        let mut src = checkerboard(512, "q");
        src.mask.fill(0.0);
        src.mask.slice_mut(s![..256, ..256]).fill(1.0);
        let tiles = tile_pairs(&[src], 256).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles[0].mask.iter().all(|&v| v == 1.0));
        for t in &tiles[1..] {
            assert!(t.mask.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_divisible_tile_is_rejected_with_sizes() {
        let src = checkerboard(100, "bad");
        let err = tile_pairs(&[src], 64).unwrap_err().to_string();
        assert!(err.contains("64") && err.contains("100"), "unhelpful error: {err}");
    }

    #[test]
    fn stitching_inverts_tiling() {
        let src = checkerboard(64, "r");
        let tiles = tile_pairs(std::slice::from_ref(&src), 16).unwrap();
        let back = stitch_tiles(&tiles, 4, "r").unwrap();
        assert_eq!(back.image_t1, src.image_t1);
        assert_eq!(back.image_t2, src.image_t2);
        assert_eq!(back.mask, src.mask);
    }

    #[test]
    fn ten_sources_split_seven_one_two() {
        let ids: Vec<String> = (0..10).map(|i| format!("src{i}")).collect();
        let [train, val, test] = split_sources(&ids, (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));
        // Exhaustive and disjoint.
        let mut all: Vec<&String> = train.iter().chain(&val).chain(&test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn single_source_goes_to_train_when_other_ratios_are_zero() {
        let [train, val, test] = split_sources(&["only".into()], (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(train, vec!["only".to_string()]);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_rejects_underfilled() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i}")).collect();
        let a = split_sources(&ids, (0.5, 0.25, 0.25), 7).unwrap();
        let b = split_sources(&ids, (0.5, 0.25, 0.25), 7).unwrap();
        assert_eq!(a, b);
        assert!(split_sources(&ids[..2], (0.5, 0.25, 0.25), 7).is_err());
    }

    #[test]
    fn double_horizontal_flip_restores_sample() {
        let s = checkerboard(32, "inv");
        let t = GeomTransform { hflip: true, ..GeomTransform::identity(32) };
        let once = apply_geom(&s, &t);
        let twice = apply_geom(&once, &t);
        assert_eq!(twice.image_t1, s.image_t1);
        assert_eq!(twice.mask, s.mask);
    }

    #[test]
    fn flip_moves_single_changed_pixel_to_mirrored_column() {
        let mut s = checkerboard(16, "px");
        s.mask.fill(0.0);
        s.mask[[5, 3]] = 1.0;
        let t = GeomTransform { hflip: true, ..GeomTransform::identity(16) };
        let flipped = apply_geom(&s, &t);
        assert_eq!(flipped.mask[[5, 16 - 1 - 3]], 1.0);
        assert_eq!(flipped.mask.sum(), 1.0);
    }

    #[test]
    fn full_size_crop_is_identity() {
        let s = checkerboard(24, "id");
        let out = apply_geom(&s, &GeomTransform::identity(24));
        assert_eq!(out.image_t1, s.image_t1);
        assert_eq!(out.image_t2, s.image_t2);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_two_class() {
        let a = make_synthetic_dataset(16, 64, 9);
        let b = make_synthetic_dataset(16, 64, 9);
        assert_eq!(a.len(), 16);
        for (sa, sb) in a.iter().zip(&b) {
            sa.validate().unwrap();
            assert_eq!(sa.image_t1, sb.image_t1);
            assert_eq!(sa.image_t2, sb.image_t2);
            assert_eq!(sa.mask, sb.mask);
            let changed = sa.mask.sum();
            assert!(changed > 0.0 && changed < (64 * 64) as f64, "mask must have both classes");
        }
    }

    #[test]
    fn zero_rectangles_means_no_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = synthetic_pair(&mut rng, 32, 0, "still");
        assert_eq!(s.image_t1, s.image_t2);
        assert_eq!(s.mask.sum(), 0.0);
    }

    #[test]
    fn png_round_trip_is_lossless_for_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_synthetic_dataset(1, 32, 5).remove(0);
        save_sample(dir.path(), &s).unwrap();
        let entry = ManifestEntry::for_id(&s.id, Split::Train);
        let loaded = load_sample(dir.path(), &entry).unwrap();
        assert_eq!(loaded.image_t1, s.image_t1);
        assert_eq!(loaded.image_t2, s.image_t2);
        assert_eq!(loaded.mask, s.mask);
    }

    #[test]
    fn manifest_round_trips_and_dataset_writer_emits_all_splits() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_synthetic_dataset(10, 16, 1);
        let manifests = write_dataset(dir.path(), &samples, (0.7, 0.1, 0.2), 11).unwrap();
        assert_eq!(manifests[0].samples.len(), 7);
        assert_eq!(manifests[1].samples.len(), 1);
        assert_eq!(manifests[2].samples.len(), 2);
        let reloaded = DatasetManifest::load(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(reloaded, manifests[0]);
        let train = load_split(dir.path(), &reloaded).unwrap();
        assert_eq!(train.len(), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tile_then_stitch_round_trips(grid in 1usize..4, tile_exp in 2usize..4, seed in 0u64..1000) {
            let tile = 1 << tile_exp; // 4..16 — keep cases small
            let size = grid * tile;
            prop_assume!(size >= 16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = synthetic_pair(&mut rng, size, 1, "rt");
            let tiles = tile_pairs(std::slice::from_ref(&src), tile).unwrap();
            let back = stitch_tiles(&tiles, grid, "rt").unwrap();
            prop_assert_eq!(back.image_t1, src.image_t1);
            prop_assert_eq!(back.image_t2, src.image_t2);
            prop_assert_eq!(back.mask, src.mask);
        }

        #[test]
        fn augment_applies_one_geometry_to_all_three_arrays(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = synthetic_pair(&mut rng, 32, 2, "aug");
            let (out, t) = augment(&s, &AugmentConfig::default(), &mut rng);
            out.validate().unwrap();
            // The mask transformed independently by the recorded geometry
            // must match the mask that came out of augment.
            prop_assert_eq!(out.height(), 32);
            prop_assert_eq!(out.mask, apply_geom_mask(&s.mask, &t));
        }
    }
}
