use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// An 8-bit raster stored height × width × channel, with its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: usize,
}

impl Sample {
    pub fn new(image: Vec<u8>, height: usize, width: usize, channels: usize, label: usize) -> Result<Self> {
        if height * width * channels == 0 || image.len() != height * width * channels {
            return Err(Error::Dataset(format!("raster of {} bytes does not match {height}x{width}x{channels}", image.len())));
        }
        Ok(Self { image, height, width, channels, label })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.image[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Dataset("validation split is empty".into()));
        }
        for s in train.iter().chain(&val) {
            if s.label >= num_classes {
                return Err(Error::Dataset(format!("label {} out of range for {num_classes} classes", s.label)));
            }
            if s.channels != 3 {
                return Err(Error::Dataset(format!("expected 3-channel rasters, got {}", s.channels)));
            }
        }
        Ok(Self { train, val, num_classes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A directory holding `data_batch_*.bin` (train) and `test_batch.bin` (val).
    Cifar10 { dir: PathBuf },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

/// Oriented sinusoidal gratings: orientation and frequency are functions of
/// the class, phase and color tint are random, plus pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub num_classes: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise, in 8-bit units.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { seed: 0, train: 256, val: 64, num_classes: 10, size: 32, noise: 8.0 }
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Cifar10 { dir } => load_cifar10_dir(dir),
        DatasetSource::Synthetic(spec) => synthetic(spec),
    }
}

/// Parses whole CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Sample>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Dataset(format!(
            "truncated CIFAR-10 data: {} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Dataset(format!("CIFAR-10 label byte {label} out of range")));
            }
            let planes = &rec[1..];
            let mut image = vec![0u8; 3 * plane];
            for c in 0..3 {
                for i in 0..plane {
                    image[i * 3 + c] = planes[c * plane + i];
                }
            }
            Sample::new(image, CIFAR_SIDE, CIFAR_SIDE, 3, label)
        })
        .collect()
}

pub fn load_cifar10_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn load_cifar10_dir(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut batches: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::Dataset(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let mut train = Vec::new();
    for b in &batches {
        train.extend(load_cifar10_file(b)?);
    }
    let val = load_cifar10_file(&dir.join("test_batch.bin"))?;
    Dataset::new(train, val, CIFAR_CLASSES)
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.size == 0 {
        return Err(Error::Dataset("synthetic dataset needs at least one class and a positive size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.train).map(|i| grating(spec, i % spec.num_classes, &mut rng)).collect();
    let val = (0..spec.val).map(|i| grating(spec, i % spec.num_classes, &mut rng)).collect();
    Dataset::new(train, val, spec.num_classes)
}

fn grating(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let k = spec.num_classes as f64;
    let n = spec.size;
    let theta = PI * label as f64 / k;
    let cycles = 2.0 + (label % 3) as f64;
    let freq = 2.0 * PI * cycles / n as f64;
    let phase = rng.random::<f64>() * 2.0 * PI;
    let tint: [f64; 3] = std::array::from_fn(|_| 0.6 + 0.4 * rng.random::<f64>());
    let (s, c) = theta.sin_cos();
    let mut image = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 * c + y as f64 * s) * freq + phase;
            let wave = 0.5 + 0.5 * u.sin();
            for t in tint {
                let noise = spec.noise * standard_normal(rng);
                image.push((255.0 * wave * t + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Sample { image, height: n, width: n, channels: 3, label }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3 * 1024).map(|i| fill.wrapping_add((i / 1024) as u8)));
        r
    }

    #[test]
    fn two_records_parse() {
        let mut bytes = record(3, 10);
        bytes.extend(record(9, 20));
        let s = parse_cifar10(&bytes).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].label, s[1].label), (3, 9));
        // plane order is R, G, B
        assert_eq!([s[0].pixel(0, 0, 0), s[0].pixel(5, 7, 1), s[0].pixel(31, 31, 2)], [10, 11, 12]);
    }

    #[test]
    fn short_file_is_truncated() {
        assert!(matches!(parse_cifar10(&vec![0u8; 3072]), Err(Error::Dataset(_))));
        assert!(parse_cifar10(&vec![0u8; CIFAR_RECORD_BYTES + 1]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { train: 32, val: 8, ..Default::default() };
        let a = synthetic(&spec).unwrap();
        let b = synthetic(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let other = synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let d = synthetic(&SyntheticSpec { train: 30, val: 10, ..Default::default() }).unwrap();
        for c in 0..10 {
            assert_eq!(d.train.iter().filter(|s| s.label == c).count(), 3);
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(synthetic(&SyntheticSpec { train: 0, ..Default::default() }).is_err());
    }
}
