use super::{HarnessError, Result};
use crate::net::{forward, LayerSpec, LossKind, NetworkSpec, Params, Targets};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes {
        labels: Vec<usize>,
        classes: usize,
    },
    /// `n × k` regression targets.
    Values(Tensor),
}

/// Samples as rows of an `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Labels,
    /// `[channels, height, width]` of one sample.
    pub sample_shape: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of network outputs the labels call for.
    pub fn outputs(&self) -> usize {
        match &self.labels {
            Labels::Classes { classes, .. } => *classes,
            Labels::Values(y) => y.cols(),
        }
    }

    /// Features of `idx` as a `d × m` batch, with matching targets.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Targets) {
        let (d, m) = (self.dim(), idx.len());
        let mut x = vec![0.0; d * m];
        for (j, &i) in idx.iter().enumerate() {
            for (f, &v) in self.features.row(i).iter().enumerate() {
                x[f * m + j] = v;
            }
        }
        let x = Tensor::matrix(d, m, x).expect("sizes agree by construction");
        let t = match &self.labels {
            Labels::Classes { labels, .. } => Targets::Classes(idx.iter().map(|&i| labels[i]).collect()),
            Labels::Values(y) => {
                let k = y.cols();
                Targets::Values(Tensor::from_fn(k, m, |c, j| y.get(idx[j], c)))
            }
        };
        (x, t)
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    /// Samples `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut feats = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            feats.extend_from_slice(self.features.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes { labels, classes } => {
                Labels::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Labels::Values(y) => Labels::Values(Tensor::from_fn(idx.len(), y.cols(), |r, c| y.get(idx[r], c))),
        };
        Dataset {
            features: Tensor::matrix(idx.len(), d, feats).expect("sizes agree by construction"),
            labels,
            sample_shape: self.sample_shape,
        }
    }

    /// Splits into the first `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n_train = n_train.min(self.len());
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

fn format_err(path: &str, offset: u64, msg: impl Into<String>) -> HarnessError {
    HarnessError::Format { path: path.to_string(), offset, msg: msg.into() }
}

fn read_be_u32<R: Read>(r: &mut R, path: &str, offset: u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err(path, offset, format!("truncated header while reading {}", what)))?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload<R: Read>(r: &mut R, path: &str, offset: u64, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    let got = r.take(len as u64).read_to_end(&mut buf)?;
    if got < len {
        return Err(format_err(
            path,
            offset + got as u64,
            format!("truncated payload: expected {} bytes, found {}", len, got),
        ));
    }
    Ok(buf)
}

/// Parses an IDX image file: `[count, rows, cols]` and the pixels scaled to
/// `[0, 1]` as a `count × rows·cols` matrix.
pub fn read_idx_images<R: Read>(mut r: R, path: &str) -> Result<([usize; 3], Tensor)> {
    let magic = read_be_u32(&mut r, path, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad magic 0x{:08x}, expected 0x{:08x}", magic, IDX_IMAGES_MAGIC)));
    }
    let count = read_be_u32(&mut r, path, 4, "image count")? as usize;
    let rows = read_be_u32(&mut r, path, 8, "row count")? as usize;
    let cols = read_be_u32(&mut r, path, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 8, format!("invalid image size {}x{}", rows, cols)));
    }
    let bytes = read_payload(&mut r, path, 16, count * rows * cols)?;
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(([count, rows, cols], Tensor::matrix(count, rows * cols, data)?))
}

/// Parses an IDX label file.
pub fn read_idx_labels<R: Read>(mut r: R, path: &str) -> Result<Vec<usize>> {
    let magic = read_be_u32(&mut r, path, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, 0, format!("bad magic 0x{:08x}, expected 0x{:08x}", magic, IDX_LABELS_MAGIC)));
    }
    let count = read_be_u32(&mut r, path, 4, "label count")? as usize;
    Ok(read_payload(&mut r, path, 8, count)?.into_iter().map(usize::from).collect())
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ipath = images.display().to_string();
    let lpath = labels.display().to_string();
    let ([count, rows, cols], features) = read_idx_images(std::io::BufReader::new(open(images)?), &ipath)?;
    let labels = read_idx_labels(std::io::BufReader::new(open(labels)?), &lpath)?;
    if labels.len() != count {
        return Err(format_err(&lpath, 4, format!("{} labels for {} images", labels.len(), count)));
    }
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    Ok(Dataset { features, labels: Labels::Classes { labels, classes }, sample_shape: [1, rows, cols] })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| HarnessError::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))
}

/// Writes an IDX image file from `count × rows·cols` pixels in `[0, 1]`.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, pixels.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// How synthetic targets are produced from the inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    /// `y = Wᵀx` for a fixed `d × k` matrix.
    Linear(Tensor),
    /// A randomly initialized bias-free ReLU network.
    Mlp { hidden: Vec<usize>, outputs: usize },
}

impl Teacher {
    fn network(&self, d: usize) -> Result<NetworkSpec> {
        let (hidden, outputs): (&[usize], usize) = match self {
            Teacher::Linear(w) => (&[], w.cols()),
            Teacher::Mlp { hidden, outputs } => (hidden, *outputs),
        };
        let mut specs = Vec::new();
        let mut width = d;
        for &h in hidden {
            specs.push(LayerSpec::Dense { d_in: width, d_out: h, bias: false });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense { d_in: width, d_out: outputs, bias: false });
        Ok(NetworkSpec::new([d, 1, 1], specs, LossKind::SquaredError)?)
    }
}

/// `n` Gaussian inputs in `d` dimensions, each scaled to unit norm, with
/// targets from `teacher` plus `N(0, noise²)` noise. Deterministic in `seed`.
pub fn gen_synthetic(n: usize, d: usize, teacher: &Teacher, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(HarnessError::Config {
            field: if n == 0 { "data.n" } else { "data.d" }.into(),
            line: None,
            msg: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    for row in feats.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row[0] = 1.0;
        }
    }
    let features = Tensor::matrix(n, d, feats)?;
    let spec = teacher.network(d)?;
    let params = match teacher {
        Teacher::Linear(w) => {
            if w.rows() != d {
                return Err(HarnessError::Config {
                    field: "teacher".into(),
                    line: None,
                    msg: format!("linear teacher has {} rows for {} input dimensions", w.rows(), d),
                });
            }
            Params::from_weights(vec![w.clone()])
        }
        Teacher::Mlp { .. } => Params::init(&spec, &mut rng),
    };
    let (u, _) = forward(&spec, &params, &features.transpose())?;
    let mut y = u.transpose();
    if noise > 0.0 {
        for v in y.data_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Dataset { features, labels: Labels::Values(y), sample_shape: [d, 1, 1] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn two_image_fixture() {
        let bytes = fixture(&[0, 255, 51, 102, 0, 0, 0, 0]);
        let (dims, x) = read_idx_images(bytes.as_slice(), "fixture").unwrap();
        assert_eq!(dims, [2, 2, 2]);
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(x.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(x.row(1), &[0.0; 4]);
    }

    #[test]
    fn bad_files_report_offsets() {
        let mut bytes = fixture(&[0; 8]);
        bytes[3] = 0x02;
        let err = read_idx_images(bytes.as_slice(), "f").unwrap_err().to_string();
        assert!(err.contains("byte 0") && err.contains("magic"), "{}", err);
        let bytes = fixture(&[0; 5]);
        let err = read_idx_images(bytes.as_slice(), "f").unwrap_err().to_string();
        assert!(err.contains("byte 21"), "{}", err);
        let err = read_idx_labels(&[0u8, 0, 8, 1, 0][..], "l").unwrap_err().to_string();
        assert!(err.contains("byte 4"), "{}", err);
    }

    #[test]
    fn synthetic_is_normalized_and_deterministic() {
        let teacher = Teacher::Mlp { hidden: vec![8], outputs: 2 };
        let a = gen_synthetic(20, 5, &teacher, 0.1, 3).unwrap();
        let b = gen_synthetic(20, 5, &teacher, 0.1, 3).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let norm: f64 = a.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let w = Tensor::identity(5);
        let lin = gen_synthetic(4, 5, &Teacher::Linear(w), 0.0, 9).unwrap();
        assert_eq!(lin.labels, Labels::Values(lin.features.clone()));
    }

    #[test]
    fn batches_are_column_major_samples() {
        let ds = Dataset {
            features: Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap(),
            labels: Labels::Classes { labels: vec![0, 1, 2], classes: 3 },
            sample_shape: [2, 1, 1],
        };
        let (x, t) = ds.batch(&[2, 0]);
        assert_eq!(x.data(), &[5.0, 1.0, 6.0, 2.0]);
        assert_eq!(t, Targets::Classes(vec![2, 0]));
    }
}
