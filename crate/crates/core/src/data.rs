//! Paired low-light / ground-truth images: on-disk loading, writing and a
//! synthetic generator.
//!
//! On-disk layout, pairs matched by file name:
//!
//! ```text
//! root/train/low/*.png   root/train/gt/*.png
//! root/test/low/*.png    root/test/gt/*.png
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pair counts of the complete reference dataset.
pub const FULL_TRAIN_PAIRS: usize = 690;
pub const FULL_TEST_PAIRS: usize = 266;
pub const NATIVE_SIZE: usize = 512;

/// Three-channel image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            height: h,
            width: w,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_8bit(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| to_u8(*v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([
                to_u8(self.data[i]),
                to_u8(self.data[plane + i]),
                to_u8(self.data[2 * plane + i]),
            ])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = p[c] as f32 / 255.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    fn from_rgb16(img: &image::ImageBuffer<image::Rgb<u16>, Vec<u16>>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = p[c] as f32 / 65535.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(match img.color().bytes_per_pixel() / img.color().channel_count().max(1) {
            2 => Self::from_rgb16(&img.to_rgb16()),
            _ => Self::from_rgb8(&img.to_rgb8()),
        })
    }

    /// Writes an 8-bit PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub low: Image,
    pub gt: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, low: Image, gt: Image) -> Result<Self> {
        let id = id.into();
        if (low.height, low.width) != (gt.height, gt.width) {
            return Err(Error::Dataset(format!(
                "{id}: low {}x{} and gt {}x{} differ",
                low.height, low.width, gt.height, gt.width
            )));
        }
        Ok(Self { id, low, gt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub pairs: Vec<ImagePair>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, pairs: Vec<ImagePair>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate pair id {}", p.id)));
            }
        }
        Ok(Self { name, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// First `len − n_test` pairs as train, the rest as test.
    pub fn split_off_test(mut self, n_test: usize) -> Result<(DatasetSplit, DatasetSplit)> {
        if n_test > self.pairs.len() {
            return Err(Error::Dataset(format!("cannot hold out {n_test} of {} pairs", self.pairs.len())));
        }
        let test = self.pairs.split_off(self.pairs.len() - n_test);
        Ok((
            DatasetSplit {
                name: SplitName::Train,
                pairs: self.pairs,
            },
            DatasetSplit {
                name: SplitName::Test,
                pairs: test,
            },
        ))
    }

    /// Writes `dir/low/<id>.png` and `dir/gt/<id>.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["low", "gt"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for p in &self.pairs {
            let name = format!("{}.png", p.id);
            p.low.save(&dir.join("low").join(&name))?;
            p.gt.save(&dir.join("gt").join(&name))?;
        }
        Ok(())
    }
}

/// Writes both splits under `root/{train,test}`.
pub fn write_dataset(root: &Path, train: &DatasetSplit, test: &DatasetSplit) -> Result<()> {
    train.write(&root.join(SplitName::Train.as_str()))?;
    test.write(&root.join(SplitName::Test.as_str()))
}

fn list_files(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().is_file() {
            continue;
        }
        names.push(name);
    }
    names.sort();
    Ok(names)
}

fn load_split(root: &Path, name: SplitName, warnings: &mut Vec<String>) -> Result<DatasetSplit> {
    let dir = root.join(name.as_str());
    let (low_dir, gt_dir) = (dir.join("low"), dir.join("gt"));
    let low: BTreeSet<String> = list_files(&low_dir)?.into_iter().collect();
    let gt: BTreeSet<String> = list_files(&gt_dir)?.into_iter().collect();
    let orphans: Vec<String> = low
        .symmetric_difference(&gt)
        .map(|f| {
            let side = if low.contains(f) { "low" } else { "gt" };
            format!("{}/{side}/{f}", name.as_str())
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!("unmatched files: {}", orphans.join(", "))));
    }
    let mut pairs = Vec::with_capacity(low.len());
    let mut off_size = 0;
    for file in &low {
        let id = Path::new(file).file_stem().map_or(file.clone(), |s| s.to_string_lossy().into_owned());
        let pair = ImagePair::new(id, Image::load(&low_dir.join(file))?, Image::load(&gt_dir.join(file))?)?;
        if (pair.gt.height, pair.gt.width) != (NATIVE_SIZE, NATIVE_SIZE) {
            off_size += 1;
        }
        pairs.push(pair);
    }
    if off_size > 0 {
        warnings.push(format!(
            "{}: {off_size} of {} pairs are not {NATIVE_SIZE}x{NATIVE_SIZE}",
            name.as_str(),
            pairs.len()
        ));
    }
    DatasetSplit::new(name, pairs)
}

/// Loaded splits plus any non-fatal warnings (also emitted through `log`).
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
    pub warnings: Vec<String>,
}

pub fn load_paired_dataset(root: &Path) -> Result<LoadedDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut warnings = Vec::new();
    let train = load_split(root, SplitName::Train, &mut warnings)?;
    let test = load_split(root, SplitName::Test, &mut warnings)?;
    if train.is_empty() && test.is_empty() {
        return Err(Error::Dataset(format!("no pairs found under {}", root.display())));
    }
    if (train.len(), test.len()) != (FULL_TRAIN_PAIRS, FULL_TEST_PAIRS) {
        warnings.push(format!(
            "partial dataset: {} train / {} test pairs (complete: {FULL_TRAIN_PAIRS} / {FULL_TEST_PAIRS})",
            train.len(),
            test.len()
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedDataset { train, test, warnings })
}

/// `clamp(gain · gt^gamma + N(0, σ²), 0, 1)` with seeded noise.
pub fn synth_darken(gt: &Image, gamma: f64, gain: f64, noise_sigma: f64, seed: u64) -> Result<Image> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Precondition(format!("gamma must be >= 1, got {gamma}")));
    }
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::Precondition(format!("gain must lie in (0, 1], got {gain}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Precondition(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Precondition(e.to_string()))?;
    let data = gt
        .data
        .iter()
        .map(|&v| {
            let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (gain * (v as f64).powf(gamma) + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Image {
        height: gt.height,
        width: gt.width,
        data,
    })
}

/// Smooth reddish field: base tint, a linear shading ramp, low-frequency
/// sinusoidal texture and a few soft blobs.
fn tissue_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = [rng.random_range(0.55..0.85), rng.random_range(0.3..0.5), rng.random_range(0.25..0.45)];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp = rng.random_range(0.05..0.2);
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let amp = rng.random_range(0.02..0.06);
            (
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                amp,
                [rng.random_range(0.6..1.0), rng.random_range(0.3..0.8), rng.random_range(0.3..0.8)],
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.05..0.2),
                rng.random_range(-0.15..0.15),
            )
        })
        .collect();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let shade = ramp * ((u - 0.5) * ca + (v - 0.5) * sa);
            let mut tex = [0.0; 3];
            for (fx, fy, ph, amp, mix) in &waves {
                let s = amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                for c in 0..3 {
                    tex[c] += s * mix[c];
                }
            }
            let mut blob = 0.0;
            for (bx, by, r, a) in &blobs {
                let d2 = (u - bx).powi(2) + (v - by).powi(2);
                blob += a * (-d2 / (2.0 * r * r)).exp();
            }
            for c in 0..3 {
                let val = base[c] + shade + tex[c] + blob;
                data[c * plane + y * size + x] = val.clamp(0.02, 0.98) as f32;
            }
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

/// `n_pairs` synthetic pairs of `size × size`, quantized to 8 bits so that a
/// PNG round trip is lossless. Ids are `synth_0000`, `synth_0001`, ...
pub fn make_synth_dataset(n_pairs: usize, size: usize, seed: u64) -> Result<DatasetSplit> {
    if n_pairs == 0 {
        return Err(Error::Precondition("n_pairs must be positive".into()));
    }
    if size == 0 || size % 8 != 0 {
        return Err(Error::Precondition(format!("size must be a positive multiple of 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let gt = tissue_image(size, &mut rng).quantize_8bit();
        let gamma = rng.random_range(1.5..=3.0);
        let gain = rng.random_range(0.3..=0.7);
        let sigma = rng.random_range(0.0..=0.02);
        let noise_seed: u64 = rng.random();
        let low = synth_darken(&gt, gamma, gain, sigma, noise_seed)?.quantize_8bit();
        pairs.push(ImagePair::new(format!("synth_{i:04}"), low, gt)?);
    }
    DatasetSplit::new(SplitName::Train, pairs)
}

/// Stacks images into a `(B, 3, H, W)` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>, dtype: DType) -> Result<Tensor> {
    let ts = images.into_iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(Error::Dataset("cannot batch zero images".into()));
    }
    Ok(Tensor::stack(&ts, 0)?)
}

pub fn dataset_path(root: &Path, split: SplitName) -> PathBuf {
    root.join(split.as_str())
}
