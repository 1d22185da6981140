//! Synthetic blob datasets, PNG ingestion at both branch resolutions, and the
//! Dice / IoU overlap metrics.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, Tensor};

/// Image/mask triplet at the two branch resolutions plus label resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[3, vit_input, vit_input]` in `[0,1]`.
    pub vit_image: Tensor<f32>,
    /// `[3, cnn_input, cnn_input]` in `[0,1]`.
    pub cnn_image: Tensor<f32>,
    /// `[1, label_res, label_res]`, values in `{0,1}`.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sizes {
    pub vit_input: usize,
    pub cnn_input: usize,
    pub label_res: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            vit_input: 64,
            cnn_input: 32,
            label_res: 64,
        }
    }
}

/// Texture/contrast perturbation applied on top of a [`SynthSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodShift {
    /// Multiplies the foreground/background colour difference.
    pub contrast: f64,
    /// Multiplies `texture_noise`.
    pub noise_scale: f64,
    /// Multiplies `background_freq`.
    pub freq_scale: f64,
    /// Added to every colour channel before clamping.
    pub brightness: f64,
}

impl Default for OodShift {
    fn default() -> Self {
        Self {
            contrast: 0.75,
            noise_scale: 1.6,
            freq_scale: 1.7,
            brightness: 0.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Inclusive range of blob counts.
    pub n_blobs: (usize, usize),
    /// Inclusive base-radius range as a fraction of the image side.
    pub radius: (f64, f64),
    pub texture_noise: f64,
    /// Background stripe frequency in cycles per image; 0 disables the stripes.
    pub background_freq: f64,
    pub ood_shift: Option<OodShift>,
    pub sizes: Sizes,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_blobs: (1, 2),
            radius: (0.15, 0.28),
            texture_noise: 0.05,
            background_freq: 6.0,
            ood_shift: None,
            sizes: Sizes::default(),
        }
    }
}

/// Maximum relative amplitude of the radial perturbation of each blob outline.
const OUTLINE_WOBBLE: f64 = 0.08;
const STRIPE_AMPLITUDE: f64 = 0.08;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_blobs;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("n_blobs range {lo}..={hi} invalid")));
        }
        let (rl, rh) = self.radius;
        if !(rl > 0.0 && rl <= rh && rh < 0.5) {
            return Err(Error::Config(format!("radius range {rl}..={rh} invalid")));
        }
        if !(self.texture_noise >= 0.0) || !(self.background_freq >= 0.0) {
            return Err(Error::Config("texture_noise and background_freq must be >= 0".into()));
        }
        if let Some(s) = self.ood_shift {
            if !(s.contrast >= 0.0 && s.noise_scale >= 0.0 && s.freq_scale >= 0.0) {
                return Err(Error::Config("ood_shift scales must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn with_ood(&self, shift: OodShift) -> Self {
        Self {
            ood_shift: Some(shift),
            ..self.clone()
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, phase))| a * ((k as f64 + 2.0) * theta + phase).cos())
            .sum();
        (dx * dx + dy * dy).sqrt() < self.r0 * (1.0 + wobble)
    }
}

/// Render one sample: textured background with 1..n smooth blobs of a distinct
/// colour and texture. The mask is exactly the rendered foreground.
pub fn synth_sample<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<SamplePair> {
    spec.validate()?;
    let size = spec.sizes.label_res;
    let side = size as f64;
    let shift = spec.ood_shift;
    let noise_amp = spec.texture_noise * shift.map_or(1.0, |s| s.noise_scale);
    let freq = spec.background_freq * shift.map_or(1.0, |s| s.freq_scale);
    let contrast = shift.map_or(1.0, |s| s.contrast);
    let brightness = shift.map_or(0.0, |s| s.brightness);

    let n = rng.random_range(spec.n_blobs.0..=spec.n_blobs.1);
    let blobs: Vec<Blob> = (0..n)
        .map(|_| {
            let r0 = rng.random_range(spec.radius.0..=spec.radius.1) * side;
            let margin = (r0 * (1.0 + 3.0 * OUTLINE_WOBBLE)).min(side / 2.0);
            let cx = rng.random_range(margin..=side - margin);
            let cy = rng.random_range(margin..=side - margin);
            let mut harmonics = [(0.0, 0.0); 3];
            for h in &mut harmonics {
                *h = (
                    rng.random_range(-OUTLINE_WOBBLE..=OUTLINE_WOBBLE),
                    rng.random_range(0.0..2.0 * PI),
                );
            }
            Blob { cx, cy, r0, harmonics }
        })
        .collect();

    let jitter = |rng: &mut R| rng.random_range(-0.05..=0.05);
    let bg = [0.55 + jitter(rng), 0.32 + jitter(rng), 0.28 + jitter(rng)];
    let fg_base = [0.80 + jitter(rng), 0.52 + jitter(rng), 0.30 + jitter(rng)];
    let fg: Vec<f64> = (0..3).map(|c| bg[c] + contrast * (fg_base[c] - bg[c])).collect();
    let stripe_angle = rng.random_range(0.0..PI);
    let stripe_phase = rng.random_range(0.0..2.0 * PI);
    let (sc, ss) = (stripe_angle.cos(), stripe_angle.sin());
    let noise = Normal::new(0.0, noise_amp.max(0.0)).expect("finite std");

    let mut img = vec![0f32; 3 * size * size];
    let mut mask = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = blobs.iter().any(|b| b.contains(px, py));
            mask[y * size + x] = if inside { 1.0 } else { 0.0 };
            let stripe = if freq > 0.0 && !inside {
                STRIPE_AMPLITUDE * (2.0 * PI * freq * (px * sc + py * ss) / side + stripe_phase).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg[c] };
                let n = if noise_amp > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = (base + stripe + n + brightness).clamp(0.0, 1.0);
                img[(c * size + y) * size + x] = v as f32;
            }
        }
    }
    let source = Tensor::new(&[3, size, size], img)?;
    let mask = Tensor::new(&[1, size, size], mask)?;
    pair_from_source(&source, mask, &spec.sizes)
}

fn pair_from_source(source: &Tensor<f32>, mask: Tensor<f32>, sizes: &Sizes) -> Result<SamplePair> {
    let clamp01 = |t: Tensor<f32>| t.map(|v| v.clamp(0.0, 1.0));
    let (h, w) = (source.shape()[1], source.shape()[2]);
    let vit = if (h, w) == (sizes.vit_input, sizes.vit_input) {
        source.clone()
    } else {
        clamp01(resize_bilinear(source, sizes.vit_input, sizes.vit_input)?)
    };
    let cnn = clamp01(resize_bilinear(source, sizes.cnn_input, sizes.cnn_input)?);
    let mask = if mask.shape()[1..] == [sizes.label_res, sizes.label_res] {
        mask
    } else {
        resize_nearest_mask(&mask, sizes.label_res)
    };
    Ok(SamplePair {
        vit_image: vit,
        cnn_image: cnn,
        mask,
    })
}

/// Nearest-neighbour resize of a `[1,H,W]` map to `[1,out,out]` (`src = floor(dst * in / out)`).
pub fn resize_nearest_mask(mask: &Tensor<f32>, out: usize) -> Tensor<f32> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    Tensor::from_fn(&[1, out, out], |i| {
        let (oy, ox) = (i / out, i % out);
        let (sy, sx) = (oy * h / out, ox * w / out);
        mask.data()[sy * w + sx]
    })
}

/// Read an 8-bit RGB image and 8-bit mask, resize to both branch sizes, and binarize
/// the mask at 127 after nearest-neighbour resizing.
pub fn load_pair(image_file: &Path, mask_file: &Path, sizes: &Sizes) -> Result<SamplePair> {
    let img = image::open(image_file)
        .map_err(|e| Error::Image {
            path: image_file.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let m = image::open(mask_file)
        .map_err(|e| Error::Image {
            path: mask_file.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    if img.dimensions() != m.dimensions() {
        return Err(Error::Image {
            path: mask_file.to_path_buf(),
            message: format!(
                "mask is {:?} but image {} is {:?}",
                m.dimensions(),
                image_file.display(),
                img.dimensions()
            ),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    let source = Tensor::new(&[3, h, w], data)?;
    let raw = Tensor::new(&[1, h, w], m.as_raw().iter().map(|&v| v as f32).collect())?;
    let mask = resize_nearest_mask(&raw, sizes.label_res).map(|v| if v > 127.0 { 1.0 } else { 0.0 });
    let mut pair = pair_from_source(&source, mask, sizes)?;
    if (h, w) != (sizes.vit_input, sizes.vit_input) {
        pair.vit_image = resize_bilinear(&source, sizes.vit_input, sizes.vit_input)?.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(pair)
}

pub fn save_pair_png(pair: &SamplePair, image_file: &Path, mask_file: &Path) -> Result<()> {
    let t = &pair.vit_image;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut rgb = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in rgb.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.data()[(c * h + y as usize) * w + x as usize];
            p[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let (mh, mw) = (pair.mask.shape()[1], pair.mask.shape()[2]);
    let gray = GrayImage::from_raw(
        mw as u32,
        mh as u32,
        pair.mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect(),
    )
    .expect("mask buffer sized from its own shape");
    rgb.save(image_file).map_err(|e| Error::Image {
        path: image_file.to_path_buf(),
        message: e.to_string(),
    })?;
    gray.save(mask_file).map_err(|e| Error::Image {
        path: mask_file.to_path_buf(),
        message: e.to_string(),
    })
}

/// `(dice, iou)` from boolean masks. Both empty counts as a perfect match.
pub fn dice_iou_counts(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return (1.0, 1.0);
    }
    let union = a + b - inter;
    (
        2.0 * inter as f64 / (a + b) as f64,
        inter as f64 / union as f64,
    )
}

/// Dice and IoU of two binary masks of equal shape.
pub fn dice_iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "dice_iou shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let to_bool = |t: &Tensor<f32>| -> Result<Vec<bool>> {
        t.data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::invalid(format!("non-binary mask value {v}"))),
            })
            .collect()
    };
    Ok(dice_iou_counts(&to_bool(pred)?, &to_bool(gt)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }

    fn stream(self, ood: bool) -> u64 {
        let base = match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        };
        base + if ood { 16 } else { 0 }
    }
}

/// Seed of sample `index` in a split; the same formula backs the manifest.
pub fn sample_seed(base_seed: u64, split: Split, ood: bool, index: usize) -> u64 {
    base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.stream(ood) << 40)
        .wrapping_add(index as u64)
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub seed: u64,
    pub split: Split,
    pub ood: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `n` samples; OOD splits use `spec.ood_shift` or the default shift.
    pub fn synthetic(spec: &SynthSpec, n: usize, base_seed: u64, split: Split, ood: bool) -> Result<(Self, Vec<ManifestRow>)> {
        let spec = if ood && spec.ood_shift.is_none() {
            spec.with_ood(OodShift::default())
        } else if !ood {
            SynthSpec {
                ood_shift: None,
                ..spec.clone()
            }
        } else {
            spec.clone()
        };
        let mut samples = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let seed = sample_seed(base_seed, split, ood, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            samples.push(synth_sample(&spec, &mut rng)?);
            rows.push(ManifestRow { seed, split, ood });
        }
        Ok((Self { samples }, rows))
    }

    /// Name-matched `images/*.png` and `masks/*.png`, sorted by file name.
    pub fn load_folder(dir: &Path, sizes: &Sizes) -> Result<Self> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        let mut names: Vec<PathBuf> = fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::invalid(format!("no PNG images in {}", images.display())));
        }
        let samples = names
            .iter()
            .map(|img| {
                let m = masks.join(img.file_name().expect("listed entries have names"));
                load_pair(img, &m, sizes)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    /// Gather samples `indices` into batched tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let pick = |f: fn(&SamplePair) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = indices
                .iter()
                .map(|&i| {
                    let t = f(&self.samples[i]);
                    let mut sh = vec![1];
                    sh.extend_from_slice(t.shape());
                    t.clone().reshape(&sh)
                })
                .collect::<Result<_>>()?;
            Tensor::stack0(&parts)
        };
        Ok(Batch {
            vit: pick(|s| &s.vit_image)?,
            cnn: pick(|s| &s.cnn_image)?,
            mask: pick(|s| &s.mask)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub vit: Tensor<f32>,
    pub cnn: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.vit.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn manifest_csv(rows: &[ManifestRow]) -> String {
    let mut s = String::from("seed,split,ood\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.seed, r.split.as_str(), r.ood as u8);
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("seed,split,ood") {
        return Err(Error::invalid("manifest header must be 'seed,split,ood'"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 3 {
                return Err(Error::invalid(format!("bad manifest row '{l}'")));
            }
            Ok(ManifestRow {
                seed: f[0].parse().map_err(|_| Error::invalid(format!("bad seed in '{l}'")))?,
                split: Split::parse(f[1])?,
                ood: match f[2] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(Error::invalid(format!("bad ood flag in '{l}'"))),
                },
            })
        })
        .collect()
}
