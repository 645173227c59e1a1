//! Image-classification datasets: IDX ingestion, synthetic generators, and
//! resolution reduction.
//!
//! All pixel values live in `[0, 1]`. Images are stored `[N, C, H, W]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Default edge length for synthetic images.
pub const SYNTH_RESOLUTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mnist,
    Synthetic,
    Custom,
}

/// Immutable labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N,C,H,W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images vs {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Dataset { images, labels, num_classes, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of a single image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// Copy of image `i` as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.image_dims();
        let d = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * d..(i + 1) * d].to_vec())
            .expect("image slice shape")
    }

    /// Gather `[B, C, H, W]` batch plus labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let d = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn read_u32_be(buf: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > buf.len() {
        return Err(Error::Format {
            offset: offset as u64,
            message: format!("truncated: need 4 bytes, file has {}", buf.len()),
        });
    }
    Ok(u32::from_be_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]]))
}

/// Load an MNIST-layout IDX image/label file pair. Pixels are scaled to
/// `[0, 1]`; the label space is the canonical 10 digit classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_buf = std::fs::read(images_path)?;
    let lbl_buf = std::fs::read(labels_path)?;

    let magic = read_u32_be(&img_buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&img_buf, 4)? as usize;
    let h = read_u32_be(&img_buf, 8)? as usize;
    let w = read_u32_be(&img_buf, 12)? as usize;
    let pixel_count = n * h * w;
    if img_buf.len() != 16 + pixel_count {
        return Err(Error::Format {
            offset: img_buf.len() as u64,
            message: format!(
                "image payload is {} bytes, header implies {}",
                img_buf.len() - 16.min(img_buf.len()),
                pixel_count
            ),
        });
    }

    let magic = read_u32_be(&lbl_buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_u32_be(&lbl_buf, 4)? as usize;
    if lbl_buf.len() != 8 + n_labels {
        return Err(Error::Format {
            offset: lbl_buf.len() as u64,
            message: format!(
                "label payload is {} bytes, header implies {n_labels}",
                lbl_buf.len() - 8.min(lbl_buf.len())
            ),
        });
    }
    if n_labels != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {n_labels} labels"),
        });
    }

    let data: Vec<f32> = img_buf[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbl_buf[8..].iter().map(|&b| b as usize).collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(images, labels, 10, Split::Train, Provenance::Mnist)
}

/// Class-mean image for the synthetic generator: two Gaussian bumps at
/// class-determined positions on a ring, so classes never collide.
fn class_mean(class: usize, num_classes: usize, res: usize, jitter: &mut ChaCha8Rng) -> Vec<f32> {
    let r = res as f32;
    let center = r / 2.0;
    let angle = std::f32::consts::TAU * class as f32 / num_classes as f32;
    let jx: f32 = jitter.gen_range(-0.5..0.5);
    let jy: f32 = jitter.gen_range(-0.5..0.5);
    let bumps = [
        (
            center + (r / 3.2) * angle.cos() + jx,
            center + (r / 3.2) * angle.sin() + jy,
            0.75 + 0.2 * class as f32 / num_classes as f32,
            r / 5.0,
        ),
        (
            center + (r / 4.5) * (angle + 2.4).cos(),
            center + (r / 4.5) * (angle + 2.4).sin(),
            0.45,
            r / 6.0,
        ),
    ];
    let mut mean = vec![0.0f32; res * res];
    for row in 0..res {
        for col in 0..res {
            let mut v = 0.0f32;
            for &(cy, cx, amp, sigma) in &bumps {
                let dy = row as f32 - cy;
                let dx = col as f32 - cx;
                v += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
            mean[row * res + col] = v.min(1.0);
        }
    }
    mean
}

/// Synthesize `n` single-channel images over `num_classes` separable
/// classes. Labels interleave as `i % num_classes`. Pure in `(n,
/// num_classes, resolution, seed)`.
pub fn synth_classes(n: usize, num_classes: usize, resolution: usize, seed: u64) -> Dataset {
    assert!(num_classes >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f32>> =
        (0..num_classes).map(|c| class_mean(c, num_classes, resolution, &mut rng)).collect();

    let d = resolution * resolution;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let brightness: f32 = rng.gen_range(0.8..1.1);
        for &m in &means[class] {
            let noise: f32 = rng.gen_range(-0.12..0.12);
            data.push((brightness * m + noise).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, resolution, resolution], data).expect("synth shape");
    Dataset::new(images, labels, num_classes, Split::Train, Provenance::Synthetic)
        .expect("synth dataset validates by construction")
}

/// Two separable Gaussian-blob classes at the default resolution.
/// Class counts are `ceil(n/2)` and `floor(n/2)`.
pub fn synth_binary(n: usize, seed: u64) -> Dataset {
    assert!(n >= 2, "need at least one sample per class");
    synth_classes(n, 2, SYNTH_RESOLUTION, seed)
}

/// Draw disjoint train/test splits from one seeded stream.
pub fn synth_split(
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    resolution: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    let all = synth_classes(n_train + n_test, num_classes, resolution, seed);
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
    let train = all.subset(&train_idx).with_split(Split::Train);
    let test = all.subset(&test_idx).with_split(Split::Test);
    (train, test)
}

/// Average-pool every image by `factor` along both spatial axes.
pub fn downsample(d: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(d.clone());
    }
    let (c, h, w) = d.image_dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "factor {factor} does not divide image extent {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let n = d.len();
    let src = d.images.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    let inv = 1.0 / (factor * factor) as f32;
    for img in 0..n * c {
        let in_base = img * h * w;
        let out_base = img * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0f32;
                for dh in 0..factor {
                    for dw in 0..factor {
                        acc += src[in_base + (oh * factor + dh) * w + (ow * factor + dw)];
                    }
                }
                out[out_base + oh * wo + ow] = acc * inv;
            }
        }
    }
    let images = Tensor::new(vec![n, c, ho, wo], out)?;
    Dataset::new(images, d.labels.clone(), d.num_classes, d.split, d.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synth_binary_is_pure_in_seed() {
        let a = synth_binary(100, 1);
        let b = synth_binary(100, 1);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_binary(100, 2);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synth_binary_class_counts() {
        let d = synth_binary(101, 3);
        let zeros = d.labels.iter().filter(|&&l| l == 0).count();
        let ones = d.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(zeros, 51); // ceil(101/2)
        assert_eq!(ones, 50); // floor(101/2)
    }

    #[test]
    fn downsample_identity_factor() {
        let d = synth_binary(10, 7);
        let same = downsample(&d, 1).unwrap();
        assert_eq!(same.images, d.images);
    }

    #[test]
    fn downsample_constant_image() {
        let images = Tensor::ones(vec![1, 1, 4, 4]);
        let d = Dataset::new(images, vec![0], 2, Split::Train, Provenance::Custom).unwrap();
        let half = downsample(&d, 2).unwrap();
        assert_eq!(half.image_dims(), (1, 2, 2));
        assert!(half.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsample_matches_block_mean_oracle() {
        let d = synth_classes(6, 2, 8, 9);
        let half = downsample(&d, 2).unwrap();
        let src = d.images.data();
        let dst = half.images.data();
        for img in 0..6 {
            for oh in 0..4 {
                for ow in 0..4 {
                    let mut expect = 0.0f32;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            expect += src[img * 64 + (oh * 2 + dh) * 8 + (ow * 2 + dw)];
                        }
                    }
                    expect /= 4.0;
                    let got = dst[img * 16 + oh * 4 + ow];
                    assert!((got - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn downsample_preserves_global_mean() {
        let d = synth_classes(20, 4, 16, 11);
        let half = downsample(&d, 2).unwrap();
        let mean = |t: &Tensor| t.sum_f64() / t.len() as f64;
        assert!((mean(&d.images) - mean(&half.images)).abs() < 1e-6);
    }

    #[test]
    fn downsample_rejects_indivisible() {
        let d = synth_classes(4, 2, 15, 1);
        assert!(matches!(downsample(&d, 2), Err(Error::Config(_))));
    }

    fn write_idx_pair(
        dir: &Path,
        n: usize,
        h: usize,
        w: usize,
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let mut f = std::fs::File::create(&images_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        f.write_all(&vec![128u8; n * h * w]).unwrap();
        let mut f = std::fs::File::create(&labels_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn load_idx_happy_path() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 4, 4, &[0, 5, 9]);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.image_dims(), (1, 4, 4));
        assert_eq!(d.num_classes, 10);
        assert_eq!(d.labels, vec![0, 5, 9]);
        assert!((d.images.data()[0] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn load_idx_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 4, 4, &[0, 1, 2]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn load_idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 1, 2, 2, &[0]);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0xff;
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn load_idx_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2, &[3, 10]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Validation(_))));
    }

    #[test]
    fn splits_are_disjoint_draws() {
        let (train, test) = synth_split(30, 10, 2, 8, 5);
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 10);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        // first test image differs from every train image
        let probe = test.image(0);
        for i in 0..train.len() {
            assert_ne!(train.image(i).data(), probe.data());
        }
    }
}
