//! Images, datasets, synthetic corpora, on-disk loaders and splitting.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A `C × H × W` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Maps `[0, 1]` intensities to the `[-1, 1]` range the networks consume.
    pub fn normalized(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| 2.0 * v - 1.0).collect(),
            ..self.clone()
        }
    }
}

/// A labelled image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// Index-to-name mapping; names sort lexicographically for on-disk sources.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub blur_radius: f64,
    pub imbalance: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            classes: 4,
            count: 2000,
            image_size: 64,
            noise_sigma: 0.15,
            blur_radius: 1.0,
            imbalance: vec![1.0; 4],
            seed,
        }
    }
}

const BACKGROUND: f64 = 0.45;
const SPECKLE: f64 = 0.06;
const LESION_AMPLITUDE: f64 = 0.3;
const LESION_SIGMA: f64 = 8.0;
const LESION_MARGIN: f64 = 0.3;
const RADIAL_FREQ_LOW: f64 = 0.06;
const RADIAL_FREQ_HIGH: f64 = 0.18;

/// Radial frequency (cycles/pixel) of the ring pattern of class `k`.
pub fn class_frequency(k: usize, classes: usize) -> f64 {
    RADIAL_FREQ_LOW + (RADIAL_FREQ_HIGH - RADIAL_FREQ_LOW) * k as f64 / (classes - 1).max(1) as f64
}

fn motif_image<R: Rng + ?Sized>(class: usize, spec: &SynthSpec, rng: &mut R) -> Image {
    let s = spec.image_size;
    let freq = class_frequency(class, spec.classes);
    let lo = LESION_MARGIN * s as f64;
    let hi = (1.0 - LESION_MARGIN) * s as f64;
    let cy = rng.gen_range(lo..hi);
    let cx = rng.gen_range(lo..hi);
    let mut px = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r2 = dx * dx + dy * dy;
            let env = (-r2 / (2.0 * LESION_SIGMA * LESION_SIGMA)).exp();
            let wave = (2.0 * std::f64::consts::PI * freq * r2.sqrt()).cos();
            let speckle = SPECKLE * (rng.gen::<f64>() - 0.5) * 2.0;
            px[y * s + x] = BACKGROUND + speckle + LESION_AMPLITUDE * env * wave;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        px.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if spec.blur_radius > 0.0 {
        px = gaussian_blur(&px, s, s, spec.blur_radius);
    }
    Image {
        channels: 1,
        height: s,
        width: s,
        data: px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    }
}

/// Separable Gaussian blur with standard deviation `sigma`, edges clamped.
pub fn gaussian_blur(px: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let o = j as i64 - r;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w as i64 - 1))
                    } else {
                        ((y + o).clamp(0, h as i64 - 1), x)
                    };
                    acc += k * src[(yy as usize) * w + xx as usize];
                }
                out[(y as usize) * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(px, true), false)
}

/// Deterministic synthetic corpus: one ring-patterned lesion per image at a
/// random position on a speckled background; the ring frequency encodes the
/// class and is unchanged by flips and quarter turns.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.count < spec.classes {
        return Err(Error::Config(format!(
            "synthetic data needs K >= 2 and n >= K, got K={} n={}",
            spec.classes, spec.count
        )));
    }
    if spec.imbalance.len() != spec.classes || spec.imbalance.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("imbalance needs {} non-negative weights", spec.classes)));
    }
    let picker = WeightedIndex::new(&spec.imbalance)
        .map_err(|_| Error::Config("imbalance weights are degenerate (all zero)".into()))?;
    if spec.image_size < 8 {
        return Err(Error::Config("synthetic images must be at least 8 pixels wide".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.count).map(|_| picker.sample(&mut rng)).collect();
    let images = labels.iter().map(|&l| motif_image(l, spec, &mut rng)).collect();
    Ok(Dataset {
        images,
        labels,
        class_names: (0..spec.classes).map(|k| format!("class{k}")).collect(),
    })
}

/// Train/test partition as indices into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split with `round(n_c * ratio)` training samples per
/// class, clamped so both sides keep at least one sample.
pub fn stratified_split(labels: &[usize], classes: usize, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (k, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {k} has {} samples; a split needs at least 2", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len() - 1);
        split.train.extend_from_slice(&idx[..n_train]);
        split.test.extend_from_slice(&idx[n_train..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Random horizontal/vertical flips (p = 0.5 each) and a rotation by a
/// multiple of 90 degrees. Non-square images are flipped only.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    let (h, w) = (image.height, image.width);
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let turns = if h == w { rng.gen_range(0..4) } else { 0 };
    let mut out = Image::zeros(image.channels, h, w);
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let (mut sy, mut sx) = (y, x);
                for _ in 0..turns {
                    (sy, sx) = (sx, h - 1 - sy);
                }
                if vflip {
                    sy = h - 1 - sy;
                }
                if hflip {
                    sx = w - 1 - sx;
                }
                out.data[(c * h + y) * w + x] = image.at(c, sy, sx);
            }
        }
    }
    out
}

/// Center-crops to a square, resizes to `size` (triangle filter) and converts
/// to `channels` (1 = luma, 3 = RGB) in `[0, 1]`.
pub fn prepare_image(img: &DynamicImage, size: usize, channels: usize) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(size as u32, size as u32, FilterType::Triangle);
    let data: Vec<f32> = match channels {
        1 => resized.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let rgb = resized.to_rgb8();
            let mut planes = vec![0.0f32; 3 * size * size];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planes[c * size * size + i] = p.0[c] as f32 / 255.0;
                }
            }
            planes
        }
        other => return Err(Error::Config(format!("unsupported channel count {other}"))),
    };
    Image::new(channels, size, size, data)
}

fn read_image(path: &Path, size: usize, channels: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("{}: cannot decode image: {e}", path.display())))?;
    prepare_image(&img, size, channels)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class_name>/*.png`; class indices follow sorted class names.
pub fn load_image_folder(root: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
    };
    for (k, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("{}: class directory has no PNG images", dir.display())));
        }
        ds.class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for f in files {
            ds.images.push(read_image(&f, size, channels)?);
            ds.labels.push(k);
        }
    }
    Ok(ds)
}

/// Loads one PNG, or every PNG directly inside a folder in sorted order.
pub fn load_inputs(path: &Path, size: usize, channels: usize) -> Result<Vec<(PathBuf, Image)>> {
    let files = if path.is_dir() {
        sorted_entries(path)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect()
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::Data(format!("{}: no such file or directory", path.display())));
    };
    if files.is_empty() {
        return Err(Error::Data(format!("{}: folder has no PNG images", path.display())));
    }
    files
        .into_iter()
        .map(|f| read_image(&f, size, channels).map(|im| (f, im)))
        .collect()
}

#[derive(Debug, Deserialize)]
struct IndexRow {
    path: PathBuf,
    label: String,
}

/// Loads a `path,label` CSV; relative paths resolve against the CSV's folder.
/// Class indices follow the sorted set of label names.
pub fn load_csv_index(csv_path: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let rows = reader
        .deserialize::<IndexRow>()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", csv_path.display()))))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: index has no rows", csv_path.display())));
    }
    let mut names: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    names.sort();
    names.dedup();
    let base = csv_path.parent().unwrap_or(Path::new(""));
    let mut ds = Dataset {
        images: Vec::with_capacity(rows.len()),
        labels: Vec::with_capacity(rows.len()),
        class_names: names,
    };
    for row in rows {
        let path = if row.path.is_absolute() { row.path } else { base.join(row.path) };
        if !path.is_file() {
            return Err(Error::Data(format!("{}: file not found", path.display())));
        }
        ds.images.push(read_image(&path, size, channels)?);
        ds.labels.push(ds.class_names.binary_search(&row.label).expect("label collected above"));
    }
    Ok(ds)
}

fn to_png_bytes(image: &Image) -> Result<Vec<u8>> {
    let (h, w) = (image.height as u32, image.width as u32);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let dynimg = match image.channels {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, image.data.iter().map(|&v| q(v)).collect()).expect("buffer size matches"),
        ),
        3 => {
            let hw = image.height * image.width;
            let raw = (0..hw).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| q(image.data[c * hw + i])).collect();
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size matches"))
        }
        c => return Err(Error::Shape(format!("cannot encode a {c}-channel image"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Runtime(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, to_png_bytes(image)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub parameters: SynthSpec,
    pub class_counts: Vec<usize>,
    pub files: Vec<ManifestEntry>,
}

/// Writes the image-folder layout, `index.csv` and `manifest.json` under `out`.
pub fn write_dataset(ds: &Dataset, spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for name in &ds.class_names {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let index_path = out.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    index
        .write_record(["path", "label"])
        .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    let mut files = Vec::with_capacity(ds.len());
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = &ds.class_names[label];
        let rel = format!("{name}/{i:05}.png");
        let bytes = to_png_bytes(img)?;
        let path = out.join(&rel);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        index
            .write_record([rel.as_str(), name.as_str()])
            .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
        files.push(ManifestEntry {
            path: rel,
            label: name.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    let manifest = Manifest {
        parameters: spec.clone(),
        class_counts: ds.class_counts(),
        files,
    };
    let mpath = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Runtime(e.to_string()))?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
