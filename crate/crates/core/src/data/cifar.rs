//! CIFAR-10 / CIFAR-100 binary version.
//!
//! CIFAR-10 records are one label byte followed by 3072 pixel bytes; CIFAR-100
//! records carry a coarse and a fine label byte before the pixels. Pixels are
//! stored as the red, green and blue 32x32 planes, each row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
const RECORDS_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }

    fn expected_records(self, file: &str) -> usize {
        match (self, file) {
            (CifarVariant::Cifar100, "train.bin") => 5 * RECORDS_PER_FILE,
            _ => RECORDS_PER_FILE,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

/// Decodes raw records. For CIFAR-100 the fine label is kept.
pub fn parse_cifar(
    bytes: &[u8],
    variant: CifarVariant,
    split: Split,
    source: &Path,
) -> Result<Dataset, DataError> {
    let record = variant.record_len();
    if !bytes.len().is_multiple_of(record) {
        return Err(DataError::Size {
            path: source.to_path_buf(),
            expected: (bytes.len() / record + 1) * record,
            actual: bytes.len(),
        });
    }
    let n = bytes.len() / record;
    let classes = variant.classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label_at = variant.label_bytes() - 1;
        let label = rec[label_at] as usize;
        if label >= classes {
            return Err(DataError::Corrupt {
                path: source.to_path_buf(),
                offset: i * record + label_at,
                reason: format!("label {label} is not below {classes}"),
            });
        }
        labels.push(label);
        pixels.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, classes, split)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = dir.join(variant.subdir());
    if nested.join(variant.test_file()).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn load_split(
    dir: &Path,
    variant: CifarVariant,
    files: &[&str],
    split: Split,
) -> Result<Dataset, DataError> {
    let mut all = Vec::new();
    for file in files {
        let path = dir.join(file);
        let bytes = read_file(&path)?;
        let expected = variant.expected_records(file) * variant.record_len();
        if bytes.len() != expected {
            return Err(DataError::Size {
                path,
                expected,
                actual: bytes.len(),
            });
        }
        all.extend(bytes);
    }
    parse_cifar(&all, variant, split, &dir.join(files[0]))
}

/// Loads the train and test splits from `dir` (or from the archive's
/// standard subdirectory inside it).
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset), DataError> {
    let dir = resolve_dir(dir, variant);
    let train = load_split(&dir, variant, &variant.train_files(), Split::Train)?;
    let test = load_split(&dir, variant, &[variant.test_file()], Split::Test)?;
    Ok((train, test))
}

/// Writes `[N, 3, 32, 32]` images in the binary layout. Pixel values are
/// rounded to the nearest multiple of 1/255; CIFAR-100 coarse labels are
/// written as zero.
pub fn write_cifar<W: Write>(ds: &Dataset, variant: CifarVariant, mut out: W) -> Result<(), DataError> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(DataError::Invalid(format!(
            "binary layout needs 3x32x32 images, got {:?}",
            ds.sample_shape()
        )));
    }
    if ds.classes() > variant.classes() {
        return Err(DataError::Invalid(format!(
            "{} classes do not fit {variant:?}",
            ds.classes()
        )));
    }
    let mut buf = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == CifarVariant::Cifar100 {
            buf.push(0);
        }
        buf.push(ds.labels()[i] as u8);
        buf.extend(ds.sample(i).iter().map(|v| (v * 255.0).round() as u8));
    }
    out.write_all(&buf).map_err(|source| DataError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })
}
