//! IDX ingestion and the MNIST-scale generator.
//!
//! MNIST-scale: every digit is rescaled by its own factor drawn from
//! `U(0.3, 1.0)`, bilinearly, then zero padded back to 28x28 with the content
//! centered. At 56x56 the padded frame is upscaled by two. Realizations are a
//! pure function of the seed: the pool is shuffled and the factors are drawn
//! from one ChaCha8 stream.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Container, TensorData};
use crate::error::{Error as CrateError, Result};
use crate::image::{center_in_frame, rescale_image};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("header truncated: need {needed} bytes, file has {actual}")]
    TruncatedHeader { needed: usize, actual: usize },
    #[error("bad magic: leading bytes {0:#04x} {1:#04x} must be zero")]
    BadMagic(u8, u8),
    #[error("unsupported dtype code {0:#04x} (only 0x08 unsigned byte)")]
    UnsupportedDtype(u8),
    #[error("header declares zero dimensions")]
    NoDimensions,
    #[error("dimension {axis} has zero extent")]
    ZeroExtent { axis: usize },
    #[error("dimension product overflows")]
    Overflow,
    #[error("payload shorter than header implies: expected {expected} bytes, found {actual}")]
    PayloadTooShort { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("expected rank {expected}, found {actual}")]
    WrongRank { expected: usize, actual: usize },
    #[error("label {value} at index {index} is not a digit")]
    BadLabel { index: usize, value: u8 },
    #[error("images are {0}x{1}, expected square")]
    NonSquare(usize, usize),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// A parsed IDX file with unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader { needed: 4, actual: bytes.len() });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    let dtype = bytes[2];
    if dtype != 0x08 {
        return Err(IdxError::UnsupportedDtype(dtype));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(IdxError::NoDimensions);
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::TruncatedHeader { needed: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(IdxError::ZeroExtent { axis });
    }
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(IdxError::Overflow)?;
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(IdxError::PayloadTooShort { expected, actual });
    }
    if actual > expected {
        return Err(IdxError::TrailingBytes(actual - expected));
    }
    Ok(IdxFile { dtype, dims, payload: bytes[header..].to_vec() })
}

pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = vec![0, 0, file.dtype, file.dims.len() as u8];
    for &d in &file.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&file.payload);
    out
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    Ok(parse_idx(&std::fs::read(path)?)?)
}

/// A pool of square grayscale digits with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitPool {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitPool {
    pub fn from_idx(images: &IdxFile, labels: &IdxFile) -> Result<Self, IdxError> {
        if images.dims.len() != 3 {
            return Err(IdxError::WrongRank { expected: 3, actual: images.dims.len() });
        }
        if labels.dims.len() != 1 {
            return Err(IdxError::WrongRank { expected: 1, actual: labels.dims.len() });
        }
        if images.dims[0] != labels.dims[0] {
            return Err(IdxError::CountMismatch { images: images.dims[0], labels: labels.dims[0] });
        }
        if let Some((index, &value)) = labels.payload.iter().enumerate().find(|(_, &v)| v > 9) {
            return Err(IdxError::BadLabel { index, value });
        }
        if images.dims[1] != images.dims[2] {
            return Err(IdxError::NonSquare(images.dims[1], images.dims[2]));
        }
        Ok(DigitPool { size: images.dims[1], pixels: images.payload.clone(), labels: labels.payload.clone() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: &DigitPool) -> Result<()> {
        if other.size != self.size {
            return Err(CrateError::invalid(format!("cannot merge {}px and {}px digits", self.size, other.size)));
        }
        self.pixels.extend_from_slice(&other.pixels);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.size * self.size;
        Tensor::new(&[1, self.size, self.size], self.pixels[i * n..(i + 1) * n].iter().map(|&p| p as f32).collect())
            .expect("pool image extent")
    }

    /// Loads `train-*` and `t10k-*` from `dir` (either or both) unpacked.
    pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut pool: Option<DigitPool> = None;
        for prefix in ["train", "t10k"] {
            let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
            let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
            if !images.exists() && !labels.exists() {
                continue;
            }
            let part = DigitPool::from_idx(&read_idx(&images)?, &read_idx(&labels)?)?;
            match pool.as_mut() {
                Some(p) => p.extend(&part)?,
                None => pool = Some(part),
            }
        }
        pool.ok_or_else(|| CrateError::invalid(format!("no MNIST IDX files in {}", dir.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleDatasetConfig {
    pub seed: u64,
    pub resolution: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl ScaleDatasetConfig {
    /// Full protocol: 10k / 2k / 50k.
    pub fn full(seed: u64) -> Self {
        ScaleDatasetConfig { seed, resolution: 28, train: 10_000, val: 2_000, test: 50_000, min_factor: 0.3, max_factor: 1.0 }
    }

    /// Reduced protocol: 2k / 500 / 5k.
    pub fn desk(seed: u64) -> Self {
        ScaleDatasetConfig { train: 2_000, val: 500, test: 5_000, ..Self::full(seed) }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Images `[N, 1, R, R]` in raw pixel units (0..255), laid out train, then
/// val, then test.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub factors: Vec<f64>,
    pub config: ScaleDatasetConfig,
}

impl ScaledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        match split {
            Split::Train => 0..c.train,
            Split::Val => c.train..c.train + c.val,
            Split::Test => c.train + c.val..c.total(),
        }
    }

    /// Copy of the samples at `indices` as `([n, 1, R, R], labels)`.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let r = self.config.resolution;
        let n = r * r;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&[indices.len(), 1, r, r], data).expect("gathered extent"), labels)
    }

    pub fn to_container(&self) -> Result<Container> {
        let c = &self.config;
        let mut out = Container::new();
        out.insert("images", TensorData::F32(self.images.clone()))?;
        out.insert("labels", TensorData::U8(vec![self.labels.len()], self.labels.clone()))?;
        out.insert("factors", TensorData::F64(Tensor::new(&[self.factors.len()], self.factors.clone())?))?;
        for (name, v) in [("seed", c.seed as i64), ("resolution", c.resolution as i64), ("train", c.train as i64), ("val", c.val as i64), ("test", c.test as i64)] {
            out.insert(name, TensorData::I64(vec![1], vec![v]))?;
        }
        out.insert("min_factor", TensorData::F64(Tensor::new(&[1], vec![c.min_factor])?))?;
        out.insert("max_factor", TensorData::F64(Tensor::new(&[1], vec![c.max_factor])?))?;
        out.insert_text("generator", "chacha8")?;
        Ok(out)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let int = |name: &str| -> Result<usize> {
            let v = c.scalar_i64(name)?;
            usize::try_from(v).map_err(|_| CrateError::invalid(format!("{name} = {v}")))
        };
        let config = ScaleDatasetConfig {
            seed: c.scalar_i64("seed")? as u64,
            resolution: int("resolution")?,
            train: int("train")?,
            val: int("val")?,
            test: int("test")?,
            min_factor: c.scalar_f64("min_factor")?,
            max_factor: c.scalar_f64("max_factor")?,
        };
        let images = c.f32_tensor("images")?;
        let labels = c.u8_values("labels")?.to_vec();
        let factors = c.f64_tensor("factors")?.into_data();
        let r = config.resolution;
        if images.shape() != [config.total(), 1, r, r] || labels.len() != config.total() || factors.len() != config.total() {
            return Err(CrateError::shape(format!("dataset container tensors disagree with its {} declared samples", config.total())));
        }
        Ok(ScaledDataset { images, labels, factors, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Rescale one digit by `factor`, pad it centered to the source size, then
/// upscale to `resolution`.
pub fn scale_digit(image: &Tensor<f32>, factor: f64, resolution: usize) -> Result<Tensor<f32>> {
    let size = image.shape()[1];
    let framed = center_in_frame(&rescale_image(image, factor)?, size)?;
    if resolution == size {
        Ok(framed)
    } else {
        rescale_image(&framed, resolution as f64 / size as f64)
    }
}

pub fn make_mnist_scale(pool: &DigitPool, config: &ScaleDatasetConfig) -> Result<ScaledDataset> {
    if ![28, 56].contains(&config.resolution) {
        return Err(CrateError::invalid(format!("resolution must be 28 or 56, got {}", config.resolution)));
    }
    if !(0.0 < config.min_factor && config.min_factor <= config.max_factor) {
        return Err(CrateError::invalid(format!("factor range [{}, {}]", config.min_factor, config.max_factor)));
    }
    let total = config.total();
    if total > pool.len() {
        return Err(CrateError::invalid(format!(
            "insufficient images: split needs {total}, pool has {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(total);
    let factors: Vec<f64> = (0..total).map(|_| rng.gen_range(config.min_factor..=config.max_factor)).collect();

    let r = config.resolution;
    let mut data = Vec::with_capacity(total * r * r);
    for (&src, &factor) in order.iter().zip(&factors) {
        data.extend_from_slice(scale_digit(&pool.image(src), factor, r)?.data());
    }
    Ok(ScaledDataset {
        images: Tensor::new(&[total, 1, r, r], data)?,
        labels: order.iter().map(|&i| pool.labels[i]).collect(),
        factors,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dtype: u8, dims: &[u32]) -> Vec<u8> {
        let mut out = vec![0, 0, dtype, dims.len() as u8];
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }

    #[test]
    fn single_image() {
        let mut bytes = header(8, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(7, 784));
        let f = parse_idx(&bytes).unwrap();
        assert_eq!(f.dims, vec![1, 28, 28]);
        assert_eq!(f.payload.len(), 784);
        assert_eq!(encode_idx(&f), bytes);
    }

    #[test]
    fn truncated_payload_message() {
        let mut bytes = header(8, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(0, 700));
        let err = parse_idx(&bytes).unwrap_err();
        assert_eq!(err, IdxError::PayloadTooShort { expected: 784, actual: 700 });
        assert!(err.to_string().starts_with("payload shorter than header implies"));
    }

    fn synthetic_pool(n: usize) -> DigitPool {
        let mut pixels = Vec::with_capacity(n * 784);
        for i in 0..n {
            for y in 0..28 {
                for x in 0..28 {
                    let inside = (8..20).contains(&y) && (8..20).contains(&x);
                    pixels.push(if inside { (50 + i % 200) as u8 } else { 0 });
                }
            }
        }
        DigitPool { size: 28, pixels, labels: (0..n).map(|i| (i % 10) as u8).collect() }
    }

    fn small(seed: u64) -> ScaleDatasetConfig {
        ScaleDatasetConfig { train: 30, val: 10, test: 20, ..ScaleDatasetConfig::full(seed) }
    }

    #[test]
    fn unit_factor_keeps_digit() {
        let pool = synthetic_pool(1);
        assert_eq!(scale_digit(&pool.image(0), 1.0, 28).unwrap(), pool.image(0));
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let pool = synthetic_pool(100);
        let a = make_mnist_scale(&pool, &small(3)).unwrap();
        let b = make_mnist_scale(&pool, &small(3)).unwrap();
        assert_eq!(a, b);
        let realizations: Vec<ScaledDataset> = (0..6).map(|s| make_mnist_scale(&pool, &small(s)).unwrap()).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(realizations[i].factors, realizations[j].factors);
            }
        }
    }

    #[test]
    fn factors_in_range_and_labels_preserved() {
        let pool = synthetic_pool(100);
        let d = make_mnist_scale(&pool, &small(9)).unwrap();
        assert!(d.factors.iter().all(|f| (0.3..=1.0).contains(f)));
        assert_eq!(d.images.shape(), &[60, 1, 28, 28]);
        assert_eq!(d.range(Split::Val), 30..40);
        let mut counts = [0usize; 10];
        d.labels.iter().for_each(|&l| counts[l as usize] += 1);
        assert_eq!(counts.iter().sum::<usize>(), 60);
    }

    #[test]
    fn padding_is_centered() {
        let pool = synthetic_pool(1);
        for factor in [0.3, 0.45, 0.62, 0.8, 0.97] {
            let out = scale_digit(&pool.image(0), factor, 28).unwrap();
            let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
            for y in 0..28 {
                for x in 0..28 {
                    if out.at(&[0, y, x]) > 0.0 {
                        lo = [lo[0].min(y), lo[1].min(x)];
                        hi = [hi[0].max(y), hi[1].max(x)];
                    }
                }
            }
            for axis in 0..2 {
                let center = (lo[axis] + hi[axis]) as f64 / 2.0;
                assert!((center - 13.5).abs() <= 1.0, "factor {factor} axis {axis} center {center}");
            }
        }
    }

    #[test]
    fn upscaled_resolution() {
        let pool = synthetic_pool(70);
        let d = make_mnist_scale(&pool, &ScaleDatasetConfig { resolution: 56, ..small(1) }).unwrap();
        assert_eq!(d.images.shape(), &[60, 1, 56, 56]);
        assert!(make_mnist_scale(&pool, &ScaleDatasetConfig { resolution: 32, ..small(1) }).is_err());
    }

    #[test]
    fn insufficient_images() {
        let pool = synthetic_pool(10);
        let err = make_mnist_scale(&pool, &small(0)).unwrap_err();
        assert!(err.to_string().contains("insufficient images"));
    }

    #[test]
    fn container_round_trip() {
        let pool = synthetic_pool(80);
        let d = make_mnist_scale(&pool, &small(4)).unwrap();
        let back = ScaledDataset::from_container(&Container::from_bytes(&d.to_container().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
