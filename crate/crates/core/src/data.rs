//! MNIST IDX ingestion, subset selection, pooling and angle scaling.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::head::NUM_CLASSES;
use crate::rng::SplitMix64;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory with the four MNIST files.
pub const DATA_DIR_ENV: &str = "QHB_DATA_DIR";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// The digit classes used by the benchmark.
pub const PAPER_CLASSES: [u8; 4] = [0, 1, 2, 3];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    /// `len() * rows * cols` grayscale bytes, image-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

/// Angle-encoded samples ready for the quantum layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n_qubits: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            what,
            expected: offset + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0, what)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX3 image container into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    check_magic(bytes, IMAGE_MAGIC, "image header")?;
    let count = read_u32(bytes, 4, "image header")? as usize;
    let rows = read_u32(bytes, 8, "image header")? as usize;
    let cols = read_u32(bytes, 12, "image header")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            what: "image payload",
            expected,
            actual: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC, "label header")?;
    let count = read_u32(bytes, 4, "label header")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            what: "label payload",
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn parse_idx_pair(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawDataset, IdxError> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    Ok(RawDataset {
        rows,
        cols,
        pixels,
        labels,
    })
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<RawDataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let image_bytes = read(images.as_ref())?;
    let label_bytes = read(labels.as_ref())?;
    Ok(parse_idx_pair(&image_bytes, &label_bytes)?)
}

/// Loads the standard train and test splits from `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(RawDataset, RawDataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// `override_dir` if given, else `$QHB_DATA_DIR`.
pub fn resolve_data_dir(override_dir: Option<&Path>) -> Option<PathBuf> {
    override_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn gather(raw: &RawDataset, indices: &[usize]) -> RawDataset {
    let mut pixels = Vec::with_capacity(indices.len() * raw.rows * raw.cols);
    for &i in indices {
        pixels.extend_from_slice(raw.image(i));
    }
    RawDataset {
        rows: raw.rows,
        cols: raw.cols,
        pixels,
        labels: indices.iter().map(|&i| raw.labels[i]).collect(),
    }
}

/// First `n` samples in file order whose label is in `classes`.
pub fn select_subset(raw: &RawDataset, classes: &[u8], n: usize) -> Result<RawDataset> {
    let indices: Vec<usize> = (0..raw.len())
        .filter(|&i| classes.contains(&raw.labels[i]))
        .take(n)
        .collect();
    if indices.len() < n {
        return Err(IdxError::Insufficient {
            wanted: n,
            found: indices.len(),
            classes: classes.to_vec(),
        }
        .into());
    }
    Ok(gather(raw, &indices))
}

/// Balanced variant: the first `n / |classes|` of each class (the remainder
/// going to the earliest classes), kept in file order.
pub fn select_stratified(raw: &RawDataset, classes: &[u8], n: usize) -> Result<RawDataset> {
    if classes.is_empty() {
        return Err(Error::validation("no classes given"));
    }
    let per = n / classes.len();
    let extra = n % classes.len();
    let mut quota: Vec<usize> = (0..classes.len())
        .map(|c| per + usize::from(c < extra))
        .collect();
    let mut indices = Vec::with_capacity(n);
    for i in 0..raw.len() {
        if let Some(c) = classes.iter().position(|&c| c == raw.labels[i]) {
            if quota[c] > 0 {
                quota[c] -= 1;
                indices.push(i);
            }
        }
    }
    if indices.len() < n {
        return Err(IdxError::Insufficient {
            wanted: n,
            found: indices.len(),
            classes: classes.to_vec(),
        }
        .into());
    }
    Ok(gather(raw, &indices))
}

/// Half-open pixel range covered by output bin `b` of `k`.
pub fn bin_bounds(b: usize, k: usize, size: usize) -> (usize, usize) {
    (b * size / k, (b + 1) * size / k)
}

/// Adaptive average pooling of a `rows × cols` image to `k × k` bin means
/// (0–255 scale), row-major.
pub fn downscale(image: &[u8], rows: usize, cols: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > rows || k > cols {
        return Err(Error::validation(format!("cannot pool {rows}x{cols} to {k}x{k}")));
    }
    if image.len() != rows * cols {
        return Err(Error::Length {
            what: "image pixels",
            expected: rows * cols,
            actual: image.len(),
        });
    }
    let mut out = Vec::with_capacity(k * k);
    for br in 0..k {
        let (r0, r1) = bin_bounds(br, k, rows);
        for bc in 0..k {
            let (c0, c1) = bin_bounds(bc, k, cols);
            let sum: u64 = (r0..r1)
                .flat_map(|r| &image[r * cols + c0..r * cols + c1])
                .map(|&p| u64::from(p))
                .sum();
            out.push(sum as f64 / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    Ok(out)
}

/// Maps pooled intensities in `[0, 255]` to rotation angles in `[0, π]`.
pub fn to_angles(pooled: &[f64]) -> Result<Vec<f64>> {
    pooled
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) {
                Ok(v / 255.0 * PI)
            } else {
                Err(Error::validation(format!("pixel value {v} outside [0, 255]")))
            }
        })
        .collect()
}

/// Side length of the pooling grid for a qubit count.
pub fn pool_side(n_qubits: usize) -> Result<usize> {
    match n_qubits {
        4 => Ok(2),
        9 => Ok(3),
        16 => Ok(4),
        _ => Err(Error::validation(
            "qubit count must be a perfect square in {4,9,16} for pooled encoding",
        )),
    }
}

pub fn to_feature_set(raw: &RawDataset, n_qubits: usize) -> Result<FeatureSet> {
    let k = pool_side(n_qubits)?;
    let mut features = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        let label = raw.labels[i] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::validation(format!(
                "label {label} is not one of the {NUM_CLASSES} benchmark classes"
            )));
        }
        features.push(to_angles(&downscale(raw.image(i), raw.rows, raw.cols, k)?)?);
        labels.push(label);
    }
    Ok(FeatureSet {
        n_qubits,
        features,
        labels,
    })
}

/// Corner of `[0, π]^d` used as the mean of `class`.
fn class_corner(class: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if (class >> (i % 2)) & 1 == 1 { PI } else { 0.0 })
        .collect()
}

pub fn synthetic_dataset(seed: u64, n_per_class: usize, n_qubits: usize) -> Result<FeatureSet> {
    synthetic_dataset_with_sigma(seed, n_per_class, n_qubits, 0.1 * PI)
}

/// Four Gaussian blobs centred on distinct corners of `[0, π]^n_qubits`,
/// clipped to the box. Classes are interleaved `0, 1, 2, 3, 0, …`.
pub fn synthetic_dataset_with_sigma(
    seed: u64,
    n_per_class: usize,
    n_qubits: usize,
    sigma: f64,
) -> Result<FeatureSet> {
    if n_per_class == 0 {
        return Err(Error::validation("need at least one sample per class"));
    }
    if n_qubits < 2 {
        return Err(Error::validation("synthetic blobs need at least 2 features"));
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::validation(format!("bad sigma {sigma}: {e}")))?;
    let mut rng = SplitMix64::new(seed);
    let corners: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|c| class_corner(c, n_qubits)).collect();
    let mut features = Vec::with_capacity(n_per_class * NUM_CLASSES);
    let mut labels = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for _ in 0..n_per_class {
        for (class, corner) in corners.iter().enumerate() {
            features.push(
                corner
                    .iter()
                    .map(|&m| (m + normal.sample(&mut rng)).clamp(0.0, PI))
                    .collect(),
            );
            labels.push(class);
        }
    }
    Ok(FeatureSet {
        n_qubits,
        features,
        labels,
    })
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Mnist {
        dir: PathBuf,
        train_samples: usize,
        test_samples: usize,
        stratified: bool,
    },
    Synthetic {
        seed: u64,
        train_per_class: usize,
        test_per_class: usize,
    },
}

impl DataSource {
    /// Loads and featurizes both splits for `n_qubits`.
    pub fn load(&self, n_qubits: usize) -> Result<(FeatureSet, FeatureSet)> {
        match self {
            DataSource::Mnist {
                dir,
                train_samples,
                test_samples,
                stratified,
            } => {
                let (train, test) = load_mnist_dir(dir)?;
                self.featurize_mnist(&train, &test, n_qubits, *train_samples, *test_samples, *stratified)
            }
            DataSource::Synthetic {
                seed,
                train_per_class,
                test_per_class,
            } => Ok((
                synthetic_dataset(*seed, *train_per_class, n_qubits)?,
                synthetic_dataset(seed.wrapping_add(1), *test_per_class, n_qubits)?,
            )),
        }
    }

    fn featurize_mnist(
        &self,
        train: &RawDataset,
        test: &RawDataset,
        n_qubits: usize,
        n_train: usize,
        n_test: usize,
        stratified: bool,
    ) -> Result<(FeatureSet, FeatureSet)> {
        let select = if stratified {
            select_stratified
        } else {
            select_subset
        };
        let train = select(train, &PAPER_CLASSES, n_train)?;
        let test = select(test, &PAPER_CLASSES, n_test)?;
        Ok((to_feature_set(&train, n_qubits)?, to_feature_set(&test, n_qubits)?))
    }

    /// Short description stored alongside experiment records.
    pub fn describe(&self) -> String {
        match self {
            DataSource::Mnist {
                dir,
                train_samples,
                test_samples,
                stratified,
            } => format!(
                "mnist:{}:{train_samples}/{test_samples}{}",
                dir.display(),
                if *stratified { ":stratified" } else { "" }
            ),
            DataSource::Synthetic {
                seed,
                train_per_class,
                test_per_class,
            } => format!("synthetic:{seed}:{train_per_class}/{test_per_class}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn tiny_raw(labels: &[u8]) -> RawDataset {
        let images: Vec<Vec<u8>> = labels.iter().map(|&l| vec![l * 10; 16]).collect();
        parse_idx_pair(&idx_images(&images, 4, 4), &idx_labels(labels)).unwrap()
    }

    #[test]
    fn parses_headers() {
        let raw = tiny_raw(&[3, 1, 4]);
        assert_eq!((raw.rows, raw.cols, raw.len()), (4, 4, 3));
        assert_eq!(raw.image(2), &[40u8; 16][..]);
    }

    #[test]
    fn idx_error_paths() {
        let images = vec![vec![0u8; 4]; 10];
        let mut bytes = idx_images(&images, 2, 2);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(IdxError::Truncated { what: "image payload", .. })
        ));

        let mut wrong = idx_images(&images, 2, 2);
        wrong[3] = 0x01;
        assert_eq!(
            parse_idx_images(&wrong).unwrap_err(),
            IdxError::BadMagic { expected: IMAGE_MAGIC, found: 0x0801 }
        );
        assert!(matches!(
            parse_idx_labels(&idx_images(&images, 2, 2)),
            Err(IdxError::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx_pair(&idx_images(&images, 2, 2), &idx_labels(&[0; 9])),
            Err(IdxError::CountMismatch { images: 10, labels: 9 })
        ));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn subset_selection_rules() {
        let raw = tiny_raw(&[7, 0, 3, 0, 9, 0, 1, 0]);
        let zeros = select_subset(&raw, &[0], 3).unwrap();
        assert_eq!(zeros.labels, vec![0, 0, 0]);
        assert_eq!(zeros.len(), 3);
        let mixed = select_subset(&raw, &PAPER_CLASSES, 4).unwrap();
        assert_eq!(mixed.labels, vec![0, 3, 0, 0]);
        assert!(select_subset(&raw, &PAPER_CLASSES, 0).unwrap().is_empty());
        let err = select_subset(&raw, &[1], 2).unwrap_err();
        assert!(err.to_string().contains("wanted 2"), "{err}");

        let strat = select_stratified(&raw, &[0, 3], 2).unwrap();
        assert_eq!(strat.labels, vec![0, 3]);
    }

    #[test]
    fn pooling_examples() {
        let white = vec![255u8; 28 * 28];
        assert_eq!(downscale(&white, 28, 28, 4).unwrap(), vec![255.0; 16]);
        assert_eq!(
            (0..3).map(|b| bin_bounds(b, 3, 28)).collect::<Vec<_>>(),
            vec![(0, 9), (9, 18), (18, 28)]
        );
        assert!(downscale(&white, 28, 28, 0).is_err());
    }

    #[test]
    fn angle_examples() {
        let a = to_angles(&[0.0, 255.0, 127.5]).unwrap();
        assert_eq!(a[0], 0.0);
        assert!((a[1] - PI).abs() < 1e-15);
        assert!((a[2] - PI / 2.0).abs() < 1e-15);
        assert!(to_angles(&[256.0]).is_err());
        assert!(to_angles(&[-0.5]).is_err());
    }

    #[test]
    fn pool_side_rejects_non_square() {
        assert_eq!(pool_side(9).unwrap(), 3);
        let err = pool_side(5).unwrap_err().to_string();
        assert!(err.contains("perfect square in {4,9,16}"));
    }

    #[test]
    fn synthetic_examples() {
        let a = synthetic_dataset(3, 25, 4).unwrap();
        assert_eq!(a, synthetic_dataset(3, 25, 4).unwrap());
        assert_eq!(a.len(), 100);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        assert!(a.features.iter().flatten().all(|v| (0.0..=PI).contains(v)));
        assert_ne!(a, synthetic_dataset(4, 25, 4).unwrap());
    }
}
