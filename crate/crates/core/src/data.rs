//! Datasets: a deterministic synthetic shape-classification set (circle,
//! square, triangle, cross on 32x32 RGB) and the CIFAR-10 binary format.
//!
//! Synthetic classes are distinguished by shape geometry only; hue,
//! brightness and position are randomized per image so semantic attacks move
//! images around without erasing the class evidence.

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::INPUT_SIDE;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

/// Images `[N,3,H,W]` in [0,1] with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One sample as a `[1,C,H,W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let shape = self.images.shape();
        let img_len: usize = shape[1..].iter().product();
        let mut sub = vec![1usize];
        sub.extend_from_slice(&shape[1..]);
        Tensor::from_vec(&sub, self.images.data()[i * img_len..(i + 1) * img_len].to_vec())
            .unwrap()
    }

    /// Samples at the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> ImageBatch {
        let shape = self.images.shape();
        let img_len: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * img_len..(i + 1) * img_len]);
            labels.push(self.labels[i]);
        }
        let mut sub = vec![indices.len()];
        sub.extend_from_slice(&shape[1..]);
        ImageBatch {
            images: Tensor::from_vec(&sub, data).unwrap(),
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: ImageBatch,
    pub test: ImageBatch,
    pub num_classes: usize,
}

pub const SYNTHETIC_CLASSES: usize = 4;

/// Deterministic synthetic dataset; classes cycle round-robin so counts are
/// exactly n/4 per class when n divides evenly.
pub fn generate_synthetic_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("need at least one sample per split".into()));
    }
    Ok(Dataset {
        train: synth_split(seed, 0, n_train),
        test: synth_split(seed, 1, n_test),
        num_classes: SYNTHETIC_CLASSES,
    })
}

fn synth_split(seed: u64, split: u64, n: usize) -> ImageBatch {
    let side = INPUT_SIDE;
    let mut data = vec![0.0f32; n * 3 * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % SYNTHETIC_CLASSES) as u8;
        labels.push(class);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split << 48) | (i as u64 + 1));
        let img = &mut data[i * 3 * side * side..(i + 1) * 3 * side * side];
        draw_sample(img, side, class, &mut rng);
    }
    ImageBatch {
        images: Tensor::from_vec(&[n, 3, side, side], data).unwrap(),
        labels,
    }
}

fn hsv_pixel(h: f32, s: f32, v: f32) -> [f32; 3] {
    let hsv = [h, s, v];
    let mut rgb = [0.0f32; 3];
    kernels::hsv_to_rgb(&hsv, 1, 1, &mut rgb);
    rgb
}

fn draw_sample<R: Rng>(img: &mut [f32], side: usize, class: u8, rng: &mut R) {
    let plane = side * side;
    let bg = hsv_pixel(
        rng.gen_range(0.0..kernels::HUE_MAX),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.08..0.28),
    );
    let fg = hsv_pixel(
        rng.gen_range(0.0..kernels::HUE_MAX),
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.62..0.92),
    );
    let cx = side as f32 / 2.0 - 0.5 + rng.gen_range(-4.0..4.0);
    let cy = side as f32 / 2.0 - 0.5 + rng.gen_range(-4.0..4.0);
    let r = rng.gen_range(5.5..7.5f32);

    // 2x2 supersampled coverage keeps edges soft enough to carry gradients.
    for py in 0..side {
        for px in 0..side {
            let mut cover = 0.0f32;
            for (ox, oy) in [(0.25f32, 0.25f32), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = px as f32 + ox - cx;
                let dy = py as f32 + oy - cy;
                if inside_shape(class, dx, dy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                img[c * plane + py * side + px] =
                    (bg[c] + cover * (fg[c] - bg[c])).clamp(0.0, 1.0);
            }
        }
    }
}

fn inside_shape(class: u8, dx: f32, dy: f32, r: f32) -> bool {
    match class {
        // circle
        0 => dx * dx + dy * dy <= r * r,
        // square (area-matched shrink)
        1 => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
        // upward triangle: vertices at angles 90, 210, 330 degrees
        2 => {
            let v = [
                (0.0f32, -1.1 * r),
                (-0.953 * r, 0.55 * r),
                (0.953 * r, 0.55 * r),
            ];
            let cross = |a: (f32, f32), b: (f32, f32), p: (f32, f32)| {
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
            };
            let p = (dx, dy);
            let d0 = cross(v[0], v[1], p);
            let d1 = cross(v[1], v[2], p);
            let d2 = cross(v[2], v[0], p);
            (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
        }
        // cross / plus sign
        _ => (dx.abs() <= 0.38 * r && dy.abs() <= 1.05 * r)
            || (dy.abs() <= 0.38 * r && dx.abs() <= 1.05 * r),
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of 3073 bytes
// (1 label byte, then 1024 R + 1024 G + 1024 B bytes, row-major 32x32)
// ---------------------------------------------------------------------------

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses one CIFAR-10 binary file into an image batch.
pub fn parse_cifar_file(path: &Path) -> Result<ImageBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::DatasetFormat(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    parse_cifar_bytes(&bytes, &path.display().to_string())
}

pub fn parse_cifar_bytes(bytes: &[u8], origin: &str) -> Result<ImageBatch> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::DatasetFormat(format!(
            "{}: {} bytes is not a whole number of {}-byte records",
            origin,
            bytes.len(),
            CIFAR_RECORD_BYTES
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::DatasetFormat(format!(
                "{}: record {} has label {} > 9",
                origin, i, label
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|b| *b as f32 / 255.0));
    }
    Ok(ImageBatch {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
        labels,
    })
}

/// Serializes a batch back to the binary record layout (round-trips exactly
/// for data that originated as bytes).
pub fn write_cifar_file(batch: &ImageBatch, path: &Path) -> Result<()> {
    let n = batch.len();
    let img_len = 3072;
    let mut bytes = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
    for i in 0..n {
        bytes.push(batch.labels[i]);
        for v in &batch.images.data()[i * img_len..(i + 1) * img_len] {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads the official CIFAR-10 binary layout from a directory containing
/// data_batch_1..5.bin and test_batch.bin.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut train_parts = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        train_parts.push(parse_cifar_file(&dir.join(name))?);
    }
    let test = parse_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for part in &train_parts {
        labels.extend_from_slice(&part.labels);
        data.extend_from_slice(part.images.data());
    }
    let n = labels.len();
    Ok(Dataset {
        train: ImageBatch {
            images: Tensor::from_vec(&[n, 3, 32, 32], data)?,
            labels,
        },
        test,
        num_classes: CIFAR_CLASSES,
    })
}

/// Stores a synthetic dataset on disk in the CIFAR-10 binary layout so the
/// same loader serves both sources. Labels still range over 4 classes.
pub fn write_dataset_as_cifar(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = ds.train.len();
    let per = n.div_ceil(5);
    for (f, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let lo = (f * per).min(n);
        let hi = ((f + 1) * per).min(n);
        let indices: Vec<usize> = (lo..hi).collect();
        write_cifar_file(&ds.train.subset(&indices), &dir.join(name))?;
    }
    write_cifar_file(&ds.test, &dir.join(CIFAR_TEST_FILE))?;
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_vec_pretty(&serde_json::json!({ "num_classes": ds.num_classes }))?,
    )?;
    Ok(())
}

/// Loads a directory written by [`write_dataset_as_cifar`] or a real
/// CIFAR-10 binary directory (meta.json optional, defaults to 10 classes).
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut ds = load_cifar10(dir)?;
    let meta = dir.join("meta.json");
    if meta.exists() {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(meta)?)?;
        if let Some(c) = v.get("num_classes").and_then(|c| c.as_u64()) {
            ds.num_classes = c as usize;
        }
    }
    Ok(ds)
}
