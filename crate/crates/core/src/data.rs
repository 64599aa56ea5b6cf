//! Dataset loading: MNIST IDX files and CIFAR binary batches, plus
//! stratified subsetting for desk-scale runs.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng as _;

/// Images as `[N, C, H, W]` floats in [0,1] with integer labels and the
/// per-channel normalization statistics of the originating train split.
#[derive(Debug)]
pub struct Dataset<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub split: String,
    pub num_classes: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Per-channel mean/std over every pixel of this split (population
    /// variance; constant channels get std 1).
    pub fn compute_stats(&mut self) {
        let s = self.images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self.images.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for &v in &data[base..base + hw] {
                    mean[ci] += v.as_f64();
                }
            }
        }
        let count = (n * hw) as f64;
        for m in &mut mean {
            *m /= count;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for &v in &data[base..base + hw] {
                    let d = v.as_f64() - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        drop(data);
        self.mean = mean.iter().map(|&m| T::from_f64(m)).collect();
        self.std = var
            .iter()
            .map(|&v| {
                let s = (v / count).sqrt();
                T::from_f64(if s > 0.0 { s } else { 1.0 })
            })
            .collect();
    }

    /// Copy normalization statistics from the train split.
    pub fn adopt_stats(&mut self, reference: &Dataset<T>) {
        self.mean = reference.mean.clone();
        self.std = reference.std.clone();
    }

    /// Class-balanced subset of `total` examples (class c receives
    /// `total/k` examples plus one of the remainder), sampled with `seed`.
    pub fn subset_stratified(&self, total: usize, seed: u64) -> Result<Dataset<T>> {
        if total == 0 || total > self.len() {
            return Err(Error::invalid_argument(format!(
                "cannot take a {total}-example subset of {} examples",
                self.len()
            )));
        }
        let k = self.num_classes;
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l].push(i);
        }
        let mut rng = seeded(seed);
        let mut picked = Vec::with_capacity(total);
        for (c, members) in per_class.iter_mut().enumerate() {
            let want = total / k + usize::from(c < total % k);
            if members.len() < want {
                return Err(Error::Data(format!(
                    "class {c} has only {} examples, need {want} for a stratified subset",
                    members.len()
                )));
            }
            // Partial Fisher-Yates.
            for i in 0..want {
                let j = rng.gen_range(i..members.len());
                members.swap(i, j);
                picked.push(members[i]);
            }
        }
        picked.sort_unstable();
        Ok(self.select(&picked))
    }

    /// Fractional form of [`subset_stratified`](Self::subset_stratified).
    pub fn subset_fraction(&self, fraction: f64, seed: u64) -> Result<Dataset<T>> {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid_argument(format!(
                "subset fraction {fraction} outside (0, 1]"
            )));
        }
        let total = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        self.subset_stratified(total, seed)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset<T> {
        let s = self.images.shape();
        let img_len: usize = s[1..].iter().product();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&data[i * img_len..(i + 1) * img_len]);
            labels.push(self.labels[i]);
        }
        drop(data);
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new_unchecked(shape, out),
            labels,
            split: self.split.clone(),
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Gather a batch `(images, labels)` by example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let ds = self.select(indices);
        (ds.images, ds.labels)
    }
}

struct ByteReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            message: format!("truncated file: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parse an IDX image file (magic 0x00000803) into `[N, 1, rows, cols]`.
fn read_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let magic = r.read_u32_be()?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let n = r.read_u32_be()? as usize;
    let rows = r.read_u32_be()? as usize;
    let cols = r.read_u32_be()? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    r.read_exact(&mut bytes)?;
    let data: Vec<T> = bytes
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[n, 1, rows, cols], data)
}

/// Parse an IDX label file (magic 0x00000801).
fn read_idx_labels(path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(BufReader::new(File::open(path)?));
    let magic = r.read_u32_be()?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let n = r.read_u32_be()? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes)?;
    for (i, &b) in bytes.iter().enumerate() {
        if b as usize >= num_classes {
            return Err(Error::Parse {
                offset: 8 + i as u64,
                message: format!("label {b} out of range 0..{num_classes}"),
            });
        }
    }
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Load an MNIST split from the standard IDX file pair. Normalization
/// statistics are computed on train splits; attach them to test splits with
/// [`Dataset::adopt_stats`].
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let (img_name, label_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let images = read_idx_images::<T>(&dir.join(img_name))?;
    let labels = read_idx_labels(&dir.join(label_name), 10)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "MNIST {}: {} images but {} labels",
            split.name(),
            images.shape()[0],
            labels.len()
        )));
    }
    let mut ds = Dataset {
        images,
        labels,
        split: split.name().to_string(),
        num_classes: 10,
        mean: vec![T::zero()],
        std: vec![T::one()],
    };
    if split == Split::Train {
        ds.compute_stats();
    }
    Ok(ds)
}

/// Load a CIFAR split from the binary batch format: per record one label
/// byte (CIFAR-100: coarse then fine label byte), then 3072 channel-major
/// pixel bytes.
pub fn load_cifar<T: Scalar>(
    dir: impl AsRef<Path>,
    variant: CifarVariant,
    split: Split,
) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let files: Vec<PathBuf> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        (CifarVariant::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
        (CifarVariant::Cifar100, Split::Train) => vec![dir.join("train.bin")],
        (CifarVariant::Cifar100, Split::Test) => vec![dir.join("test.bin")],
    };
    let num_classes = match variant {
        CifarVariant::Cifar10 => 10,
        CifarVariant::Cifar100 => 100,
    };
    let label_bytes = match variant {
        CifarVariant::Cifar10 => 1,
        CifarVariant::Cifar100 => 2,
    };
    let record = label_bytes + 3072;

    let mut data: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file)?;
        if bytes.len() % record != 0 {
            return Err(Error::Parse {
                offset: (bytes.len() - bytes.len() % record) as u64,
                message: format!(
                    "{}: {} bytes is not a whole number of {record}-byte records",
                    file.display(),
                    bytes.len()
                ),
            });
        }
        for (ri, rec) in bytes.chunks(record).enumerate() {
            // CIFAR-100 records carry coarse + fine labels; the fine label
            // is the class.
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                return Err(Error::Parse {
                    offset: (ri * record) as u64 + (label_bytes as u64 - 1),
                    message: format!("label {label} out of range 0..{num_classes}"),
                });
            }
            labels.push(label);
            data.extend(
                rec[label_bytes..]
                    .iter()
                    .map(|&b| T::from_f64(b as f64 / 255.0)),
            );
        }
    }
    let n = labels.len();
    let mut ds = Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
        split: split.name().to_string(),
        num_classes,
        mean: vec![T::zero(); 3],
        std: vec![T::one(); 3],
    };
    if split == Split::Train {
        ds.compute_stats();
    }
    Ok(ds)
}

/// Dataset root: `$PEERLAB_DATA` if set, else the nearest `data/` directory
/// (checked in the working directory, then two levels up so tests running
/// from a workspace member find the workspace copy).
pub fn data_root() -> PathBuf {
    if let Some(p) = std::env::var_os("PEERLAB_DATA") {
        return PathBuf::from(p);
    }
    for candidate in ["data", "../data", "../../data"] {
        let p = PathBuf::from(candidate);
        if p.is_dir() {
            return p;
        }
    }
    PathBuf::from("data")
}
