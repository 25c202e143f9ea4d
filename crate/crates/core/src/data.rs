//! Datasets: IDX files, synthetic generators and seeded batching.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Labelled examples. Features are `f32`; image data is scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim("labels", inputs.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn inputs(&self) -> &Matrix<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {i} out of range")));
        }
        Self::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.split,
        )
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// One mini-batch view produced by [`batches`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    inputs: Matrix<f32>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs<T: Real>(&self) -> Matrix<T> {
        self.inputs.cast()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Iterator over a seeded per-epoch shuffle of the dataset.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            inputs: self.dataset.inputs.select_rows(&indices),
            labels: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        })
    }
}

/// Order of examples for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches for `epoch`; the last partial batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be positive");
    Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        batch_size,
        pos: 0,
    }
}

/// Gaussian clusters around the vertices of a unit simplex (`scale * e_k`
/// when `dim >= num_classes`, otherwise seeded points on a sphere).
pub fn gen_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Dataset {
    assert!(num_classes >= 2 && per_class >= 1 && dim >= 1, "positive counts required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f64>> = if dim >= num_classes {
        (0..num_classes)
            .map(|k| (0..dim).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect()
    } else {
        // Centroid placement is fixed (independent of `seed`) so that train
        // and test sets drawn with different seeds share the same task.
        let mut crng = ChaCha8Rng::seed_from_u64(0xB10B);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| std.sample(&mut crng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let noise = Normal::new(0.0, spread.max(0.0)).expect("non-negative spread");
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (k, c) in centroids.iter().enumerate() {
            for &cj in c {
                let e = if spread > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((cj + e) as f32);
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Matrix::from_vec(labels.len(), dim, data).expect("consistent shape"),
        labels,
        num_classes,
        Split::Train,
    )
    .expect("valid dataset")
}

/// Two interleaved planar spirals with `turns` revolutions each.
pub fn gen_spirals(turns: f64, per_class: usize, noise: f64, seed: u64) -> Dataset {
    assert!(per_class >= 1, "positive counts required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("non-negative noise");
    let mut data = Vec::with_capacity(4 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        let r = (i as f64 + 0.5) / per_class as f64;
        for class in 0..2 {
            let angle = 2.0 * PI * turns * r + PI * class as f64;
            let mut jitter = || if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            let x = r * angle.cos() + jitter();
            let y = r * angle.sin() + jitter();
            data.push(x as f32);
            data.push(y as f32);
            labels.push(class);
        }
    }
    Dataset::new(
        Matrix::from_vec(labels.len(), 2, data).expect("consistent shape"),
        labels,
        2,
        Split::Train,
    )
    .expect("valid dataset")
}

pub const IDX_UBYTE_IMAGES: u32 = 0x0000_0803;
pub const IDX_UBYTE_LABELS: u32 = 0x0000_0801;
/// Float32 element type with two dimensions (examples x features).
pub const IDX_F32_MATRIX: u32 = 0x0000_0D02;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos;
        let end = start + n;
        if end > self.bytes.len() {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated {what}: missing bytes {}..{end} (file is {} bytes)",
                    self.bytes.len(),
                    self.bytes.len()
                ),
            ));
        }
        self.pos = end;
        Ok(&self.bytes[start..end])
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(
                self.pos,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<Matrix<f32>> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    let magic = r.u32_be("magic number")?;
    match magic {
        IDX_UBYTE_IMAGES => {
            let n = r.u32_be("image count")? as usize;
            let rows = r.u32_be("row count")? as usize;
            let cols = r.u32_be("column count")? as usize;
            let d = rows * cols;
            let raw = r.take(n * d, "pixel data")?;
            r.finish()?;
            let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
            Matrix::from_vec(n, d, data)
        }
        IDX_F32_MATRIX => {
            let n = r.u32_be("example count")? as usize;
            let d = r.u32_be("feature count")? as usize;
            let raw = r.take(n * d * 4, "feature data")?;
            r.finish()?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Matrix::from_vec(n, d, data)
        }
        other => Err(r.err(
            0,
            format!("bad image magic {other:#010x}, expected {IDX_UBYTE_IMAGES:#010x}"),
        )),
    }
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    let magic = r.u32_be("magic number")?;
    if magic != IDX_UBYTE_LABELS {
        return Err(r.err(
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_UBYTE_LABELS:#010x}"),
        ));
    }
    let n = r.u32_be("label count")? as usize;
    let raw = r.take(n, "label data")?;
    r.finish()?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and its label file.
///
/// Unsigned-byte images are scaled by `1/255` and flattened row-major.
/// Float32 matrices (written by [`write_idx`]) are read verbatim.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let inputs = parse_images(ip, &read_file(ip)?)?;
    let labels = parse_labels(lp, &read_file(lp)?)?;
    if inputs.rows() != labels.len() {
        return Err(Error::Parse {
            path: PathBuf::from(lp),
            offset: 4,
            message: format!(
                "{} labels for {} images in {}",
                labels.len(),
                inputs.rows(),
                ip.display()
            ),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(inputs, labels, num_classes, Split::Train)
}

/// Element encoding used by [`write_idx`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxEncoding {
    /// `0x0803` images of `rows x cols` pixels; features must be `k / 255`.
    UnsignedByte { rows: usize, cols: usize },
    /// `0x0D02` big-endian float32 matrix; exact for any features.
    Float32,
}

/// Writes the dataset as an IDX image/label file pair.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    encoding: IdxEncoding,
) -> Result<()> {
    let n = dataset.len();
    let d = dataset.dim();
    let mut img = Vec::new();
    match encoding {
        IdxEncoding::UnsignedByte { rows, cols } => {
            if rows * cols != d {
                return Err(Error::dim("image pixels", d, rows * cols));
            }
            img.extend_from_slice(&IDX_UBYTE_IMAGES.to_be_bytes());
            for v in [n, rows, cols] {
                img.extend_from_slice(&(v as u32).to_be_bytes());
            }
            for &v in dataset.inputs().as_slice() {
                let b = (v * 255.0).round();
                if !(0.0..=255.0).contains(&b) || b / 255.0 != v {
                    return Err(Error::InvalidArgument(format!(
                        "feature {v} is not representable as an unsigned byte pixel"
                    )));
                }
                img.push(b as u8);
            }
        }
        IdxEncoding::Float32 => {
            img.extend_from_slice(&IDX_F32_MATRIX.to_be_bytes());
            img.extend_from_slice(&(n as u32).to_be_bytes());
            img.extend_from_slice(&(d as u32).to_be_bytes());
            for &v in dataset.inputs().as_slice() {
                img.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_UBYTE_LABELS.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in dataset.labels() {
        let b = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds 255")))?;
        lab.push(b);
    }
    std::fs::File::create(images_path)?.write_all(&img)?;
    std::fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn handcrafted_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_UBYTE_IMAGES, &[2, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        let mut lab = header(IDX_UBYTE_LABELS, &[2]);
        lab.extend_from_slice(&[3, 1]);
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.inputs().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.inputs().row(1), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.num_classes(), 4);
    }

    #[test]
    fn truncated_file_names_missing_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_UBYTE_IMAGES, &[2, 2, 2]);
        img.extend_from_slice(&[0, 1, 2]);
        let mut lab = header(IDX_UBYTE_LABELS, &[2]);
        lab.extend_from_slice(&[0, 1]);
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        match load_idx(&ip, &lp) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 19);
                assert!(message.contains("19..24"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_UBYTE_IMAGES, &[2, 1, 1]);
        img.extend_from_slice(&[0, 1]);
        let mut lab = header(IDX_UBYTE_LABELS, &[3]);
        lab.extend_from_slice(&[0, 1, 1]);
        let ip = write(dir.path(), "img", &img);
        let lp = write(dir.path(), "lab", &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
        let swapped = load_idx(&lp, &ip);
        assert!(matches!(swapped, Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn blobs_without_spread_sit_on_centroids() {
        let ds = gen_blobs(3, 5, 4, 0.0, 1);
        for r in 0..ds.len() {
            let k = ds.labels()[r];
            for (j, &v) in ds.inputs().row(r).iter().enumerate() {
                assert_eq!(v, if j == k { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(gen_blobs(3, 5, 4, 0.3, 9), gen_blobs(3, 5, 4, 0.3, 9));
        assert_eq!(gen_spirals(1.5, 20, 0.05, 9), gen_spirals(1.5, 20, 0.05, 9));
    }

    #[test]
    fn tight_blobs_are_linearly_separable() {
        // Nearest-centroid is a linear classifier: argmax_k <x, c_k> - |c_k|^2 / 2.
        let ds = gen_blobs(4, 200, 6, 0.05, 3);
        let mut correct = 0;
        for r in 0..ds.len() {
            let x = ds.inputs().row(r);
            let pred = (0..4)
                .max_by(|&a, &b| {
                    let s = |k: usize| x[k] as f64 - 0.5;
                    s(a).partial_cmp(&s(b)).unwrap()
                })
                .unwrap();
            correct += usize::from(pred == ds.labels()[r]);
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn spirals_are_two_class() {
        let ds = gen_spirals(1.0, 50, 0.0, 0);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn single_batch_when_large() {
        let ds = gen_blobs(2, 5, 2, 0.1, 0);
        let all: Vec<Batch> = batches(&ds, 100, 1, 0).collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].len(), 10);
    }

    #[test]
    fn ubyte_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = Matrix::from_vec(2, 4, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.8]).unwrap();
        let ds = Dataset::new(inputs, vec![3, 1], 4, Split::Train).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp, IdxEncoding::UnsignedByte { rows: 2, cols: 2 }).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap(), ds);
        let raw = gen_blobs(2, 3, 2, 0.1, 0);
        assert!(write_idx(&raw, &ip, &lp, IdxEncoding::UnsignedByte { rows: 1, cols: 2 }).is_err());
    }

    proptest! {
        #[test]
        fn batches_cover_dataset_once(n in 1usize..200, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
            let ds = gen_blobs(2, n, 3, 0.1, 0).head(n).unwrap();
            let mut seen: Vec<usize> = batches(&ds, bs, seed, epoch).flat_map(|b| b.indices).collect();
            let again: Vec<usize> = batches(&ds, bs, seed, epoch).flat_map(|b| b.indices).collect();
            prop_assert_eq!(&seen, &again);
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn float_idx_roundtrip_is_exact(classes in 2usize..6, per in 1usize..20, dim in 1usize..8, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let ds = gen_blobs(classes, per, dim, 0.7, seed);
            let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
            write_idx(&ds, &ip, &lp, IdxEncoding::Float32).unwrap();
            let back = load_idx(&ip, &lp).unwrap();
            prop_assert_eq!(back.inputs().as_slice().len(), ds.inputs().as_slice().len());
            for (a, b) in back.inputs().as_slice().iter().zip(ds.inputs().as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.labels(), ds.labels());
        }
    }
}
