//! CIFAR-10 ingestion, a synthetic stand-in with the same tensor shape, and
//! mini-batch enumeration.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 32;
pub const IMAGE_LEN: usize = CHANNELS * HEIGHT * WIDTH;
/// One label byte followed by the 3072 pixel bytes.
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub const CIFAR10_CLASSES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// One labeled image, channel-major (3 x 32 x 32), pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(vec![CHANNELS, HEIGHT, WIDTH], self.image.clone())
            .expect("sample image has the fixed 3x32x32 layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// SHA-256 over labels and pixel bit patterns of both splits.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, split) in [(b"train", &self.train), (b"test_", &self.test)] {
            hasher.update(tag);
            hasher.update((split.len() as u64).to_le_bytes());
            for s in split {
                hasher.update((s.label as u64).to_le_bytes());
                for p in &s.image {
                    hasher.update(p.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&bytes, &path.display().to_string())
}

pub(crate) fn parse_records(bytes: &[u8], file: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(bytes.len() / RECORD_LEN);
    let mut chunks = bytes.chunks(RECORD_LEN);
    let mut offset = 0u64;
    for record in chunks.by_ref() {
        if record.len() != RECORD_LEN {
            return Err(Error::Format {
                file: file.to_string(),
                offset,
                reason: format!(
                    "truncated record: {} of {RECORD_LEN} bytes",
                    record.len()
                ),
            });
        }
        let label = record[0] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::Format {
                file: file.to_string(),
                offset,
                reason: format!("label {label} out of range 0..{NUM_CLASSES}"),
            });
        }
        let image = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
        samples.push(Sample { image, label });
        offset += RECORD_LEN as u64;
    }
    Ok(samples)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let file = |name: &str| -> PathBuf { dir.join(name) };
    // Check presence of every file before parsing any of them.
    for name in TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)) {
        let p = file(name);
        if !p.is_file() {
            return Err(Error::Load {
                path: p,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing CIFAR-10 file"),
            });
        }
    }
    let mut train = Vec::with_capacity(50_000);
    for name in TRAIN_FILES {
        train.extend(load_cifar10_file(&file(name))?);
    }
    let test = load_cifar10_file(&file(TEST_FILE))?;
    Ok(Dataset {
        train,
        test,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Class-dependent Gaussian-blob images, split 80/20 per class.
///
/// Each class has its own blob position (spread around a circle) and colour;
/// samples jitter the position, width and brightness and add pixel noise.
pub fn make_synthetic(num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::arg(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if per_class < 1 {
        return Err(Error::arg("per_class must be >= 1"));
    }
    let n_train = per_class * 4 / 5;
    let pixel_noise = Normal::new(0.0, 0.05).unwrap();
    let jitter = Normal::new(0.0, 1.5).unwrap();

    let mut by_class: Vec<Vec<Sample>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let theta = 2.0 * PI * class as f64 / num_classes as f64;
        let (cy, cx) = (15.5 + 9.0 * theta.sin(), 15.5 + 9.0 * theta.cos());
        let colour = [
            0.5 + 0.5 * theta.cos(),
            0.5 + 0.5 * (theta - 2.0 * PI / 3.0).cos(),
            0.5 + 0.5 * (theta + 2.0 * PI / 3.0).cos(),
        ];
        let mut samples = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let mut r = rng::stream(seed, &[rng::tag::SYNTH, class as u64, i as u64]);
            let y0 = cy + jitter.sample(&mut r);
            let x0 = cx + jitter.sample(&mut r);
            let width = 4.0 + r.gen_range(-0.5..0.5);
            let amp = r.gen_range(0.7..1.0);
            let mut image = vec![0.0; IMAGE_LEN];
            for (c, plane) in image.chunks_mut(HEIGHT * WIDTH).enumerate() {
                for (k, px) in plane.iter_mut().enumerate() {
                    let (y, x) = ((k / WIDTH) as f64, (k % WIDTH) as f64);
                    let d2 = (y - y0).powi(2) + (x - x0).powi(2);
                    let v = 0.1 + amp * colour[c] * (-d2 / (2.0 * width * width)).exp()
                        + pixel_noise.sample(&mut r);
                    *px = v.clamp(0.0, 1.0);
                }
            }
            samples.push(Sample { image, label: class });
        }
        by_class.push(samples);
    }

    // Interleave classes so that unshuffled batches are still mixed.
    let mut train = Vec::with_capacity(n_train * num_classes);
    let mut test = Vec::with_capacity((per_class - n_train) * num_classes);
    for i in 0..per_class {
        for class in by_class.iter() {
            let s = class[i].clone();
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
    })
}

/// Splits `0..len` into batches of `batch_size`, optionally shuffled.
///
/// Each index appears exactly once; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
