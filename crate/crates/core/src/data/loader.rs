use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::seed::rng_from;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// The whole source, for layouts without a train/test division.
    All,
}

impl Split {
    fn dir_name(self) -> Option<&'static str> {
        match self {
            Split::Train => Some("train"),
            Split::Test => Some("test"),
            Split::All => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub image_size: usize,
    /// Channel count the models expect; grayscale sources are replicated.
    pub channels: usize,
    /// Fail on the first unreadable file instead of skipping it.
    pub strict: bool,
}

impl LoadOptions {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            channels: 3,
            strict: true,
        }
    }
}

/// Loads a split from either a CIFAR-10 binary layout or a directory tree
/// whose subdirectories name the classes.
///
/// CIFAR-10: `source` is a `.bin` batch file, or a directory holding
/// `data_batch_*.bin` / `test_batch.bin` (directly or inside
/// `cifar-10-batches-bin/`). Directory tree: if `source/<split>` exists it is
/// used, otherwise `source` itself. Class labels follow the sorted
/// subdirectory names.
pub fn load_dataset(source: &Path, split: Split, opts: &LoadOptions) -> Result<Vec<Sample>> {
    if !source.exists() {
        return Err(Error::io(
            source,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
        ));
    }
    if opts.image_size == 0 || !(opts.channels == 1 || opts.channels == 3) {
        return Err(Error::InvalidArgument(format!(
            "image_size {} / channels {}",
            opts.image_size, opts.channels
        )));
    }
    let samples = match cifar_files(source, split)? {
        Some(files) => load_cifar(&files, opts)?,
        None => load_tree(source, split, opts)?,
    };
    if samples.is_empty() {
        return Err(Error::NoSamples(source.to_path_buf()));
    }
    Ok(samples)
}

fn cifar_files(source: &Path, split: Split) -> Result<Option<Vec<PathBuf>>> {
    if source.is_file() {
        return Ok(Some(vec![source.to_path_buf()]));
    }
    let nested = source.join("cifar-10-batches-bin");
    let root = if nested.is_dir() { nested } else { source.to_path_buf() };
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| root.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.is_file())
        .collect();
    let test = root.join("test_batch.bin");
    if train.is_empty() && !test.is_file() {
        return Ok(None);
    }
    let files = match split {
        Split::Train => train,
        Split::Test => vec![test].into_iter().filter(|p| p.is_file()).collect(),
        Split::All => {
            let mut all = train;
            if test.is_file() {
                all.push(test);
            }
            all
        }
    };
    Ok(Some(files))
}

fn load_cifar(files: &[PathBuf], opts: &LoadOptions) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for path in files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Image {
                path: path.clone(),
                message: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            let pixels = &record[1..];
            // planar RGB -> interleaved for the image crate
            let mut rgb = Vec::with_capacity(3 * CIFAR_SIDE * CIFAR_SIDE);
            for i in 0..CIFAR_SIDE * CIFAR_SIDE {
                for c in 0..3 {
                    rgb.push(pixels[c * CIFAR_SIDE * CIFAR_SIDE + i]);
                }
            }
            let img = RgbImage::from_raw(CIFAR_SIDE as u32, CIFAR_SIDE as u32, rgb)
                .expect("buffer sized for 32x32 rgb");
            let image = convert(DynamicImage::ImageRgb8(img), opts);
            out.push(Sample {
                id: out.len() as u64,
                image,
                label,
            });
        }
    }
    Ok(out)
}

fn load_tree(source: &Path, split: Split, opts: &LoadOptions) -> Result<Vec<Sample>> {
    let root = match split.dir_name() {
        Some(name) if source.join(name).is_dir() => source.join(name),
        _ => source.to_path_buf(),
    };
    let mut classes: Vec<PathBuf> = read_dir_sorted(&root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    // a root holding train/test but asked for All: descend into the splits
    if split == Split::All && classes.iter().any(|p| p.ends_with("train")) {
        let mut all = Vec::new();
        for s in [Split::Train, Split::Test] {
            if root.join(s.dir_name().unwrap()).is_dir() {
                all.extend(load_tree(source, s, opts)?);
            }
        }
        for (i, s) in all.iter_mut().enumerate() {
            s.id = i as u64;
        }
        return Ok(all);
    }
    classes.retain(|p| !p.ends_with("train") && !p.ends_with("test"));
    let mut out = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = read_dir_sorted(dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(dir.clone()));
        }
        for path in files {
            match image::open(&path) {
                Ok(img) => out.push(Sample {
                    id: out.len() as u64,
                    image: convert(img, opts),
                    label,
                }),
                Err(e) if opts.strict => {
                    return Err(Error::Image {
                        path,
                        message: e.to_string(),
                    })
                }
                Err(e) => tracing::warn!(file = %path.display(), error = %e, "skipping unreadable image"),
            }
        }
    }
    Ok(out)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn convert(img: DynamicImage, opts: &LoadOptions) -> Image {
    let side = opts.image_size as u32;
    let (h, w) = (opts.image_size, opts.image_size);
    let plane = h * w;
    if opts.channels == 1 {
        let g: GrayImage = image::imageops::resize(&img.to_luma8(), side, side, FilterType::Triangle);
        let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        return Image {
            channels: 1,
            height: h,
            width: w,
            data,
        };
    }
    // to_rgb8 replicates gray sources across the three channels
    let rgb: RgbImage = if img.width() == side && img.height() == side {
        img.to_rgb8()
    } else {
        image::imageops::resize(&img.to_rgb8(), side, side, FilterType::Triangle)
    };
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raw[3 * i + c] as f32 / 255.0;
        }
    }
    Image {
        channels: 3,
        height: h,
        width: w,
        data,
    }
}

/// Writes 32x32 RGB samples as one CIFAR-10 binary batch file.
pub fn write_cifar_bin(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut bytes = Vec::with_capacity(samples.len() * CIFAR_RECORD);
    for s in samples {
        if s.image.shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || s.label > 255 {
            return Err(Error::Shape(format!(
                "cifar records need 3x32x32 images and labels < 256, got {:?} / {}",
                s.image.shape(),
                s.label
            )));
        }
        bytes.push(s.label as u8);
        bytes.extend(
            s.image
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Keeps only the listed classes, relabelled to their position in `classes`.
pub fn select_classes(samples: Vec<Sample>, classes: &[usize]) -> Vec<Sample> {
    samples
        .into_iter()
        .filter_map(|mut s| {
            let pos = classes.iter().position(|&c| c == s.label)?;
            s.label = pos;
            Some(s)
        })
        .collect()
}

/// Seeded random subset of at most `n` samples, in shuffled order.
pub fn subsample(mut samples: Vec<Sample>, n: usize, seed: u64) -> Vec<Sample> {
    if n >= samples.len() {
        return samples;
    }
    samples.shuffle(&mut rng_from(seed));
    samples.truncate(n);
    samples
}

/// Seeded shuffle followed by a split into (train, validation, test).
pub fn split_fractions(
    mut samples: Vec<Sample>,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions val={val_fraction} test={test_fraction}"
        )));
    }
    samples.shuffle(&mut rng_from(seed));
    let n = samples.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let test = samples.split_off(n - n_test);
    let val = samples.split_off(samples.len() - n_val);
    Ok((samples, val, test))
}
