//! Procedurally generated 10-class shape dataset.
//!
//! Each 3x32x32 image composites one class-defining shape (soft-edged signed
//! distance field) over a noisy gradient background, with jittered position,
//! scale, rotation, and colors. Generation is fully determined by the seed;
//! the packed file layout is `dataset.json` (metadata) + `dataset.bin`
//! (train images, train labels, test images, test labels as raw u8).

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBatch, LabelledExample};
use crate::rng::{normal_f64, uniform_f64, RngSeed};
use crate::scalar::Scalar;

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "ring", "square", "triangle", "plus", "diamond", "hbars", "vbars", "xcross", "dots",
];

pub const IMAGE_SHAPE: (usize, usize, usize) = (3, 32, 32);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub format: String,
    pub dataset_id: String,
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub n_train: usize,
    pub n_test: usize,
}

/// In-memory dataset with u8 pixel storage.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    train_images: Vec<u8>,
    train_labels: Vec<u8>,
    test_images: Vec<u8>,
    test_labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    /// Generates the dataset from a seed. Classes are balanced by
    /// construction (`label = index mod 10`); every image draws from its own
    /// derived stream so slices are order-independent.
    pub fn generate(seed: RngSeed, n_train: usize, n_test: usize) -> Dataset {
        let gen_split = |split: &str, n: usize| -> (Vec<u8>, Vec<u8>) {
            let px = IMAGE_SHAPE.0 * IMAGE_SHAPE.1 * IMAGE_SHAPE.2;
            let mut images = Vec::with_capacity(n * px);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % CLASS_NAMES.len();
                let img_seed = seed.derive(&["data", split, &i.to_string()]);
                render_image(class, img_seed, &mut images);
                labels.push(class as u8);
            }
            (images, labels)
        };
        let (train_images, train_labels) = gen_split("train", n_train);
        let (test_images, test_labels) = gen_split("test", n_test);
        Dataset {
            meta: DatasetMeta {
                format: "fia-pack-v1".into(),
                dataset_id: format!("synthshapes10-s{}-{}x{}", seed.0, n_train, n_test),
                seed: seed.0,
                num_classes: CLASS_NAMES.len(),
                class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                image_shape: [IMAGE_SHAPE.0, IMAGE_SHAPE.1, IMAGE_SHAPE.2],
                n_train,
                n_test,
            },
            train_images,
            train_labels,
            test_images,
            test_labels,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("dataset.json"),
            serde_json::to_vec_pretty(&self.meta)?,
        )?;
        let mut blob = Vec::with_capacity(
            self.train_images.len()
                + self.train_labels.len()
                + self.test_images.len()
                + self.test_labels.len(),
        );
        blob.extend_from_slice(&self.train_images);
        blob.extend_from_slice(&self.train_labels);
        blob.extend_from_slice(&self.test_images);
        blob.extend_from_slice(&self.test_labels);
        fs::write(dir.join("dataset.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta =
            serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
        if meta.format != "fia-pack-v1" {
            return Err(Error::Contract(format!(
                "unsupported dataset format `{}`",
                meta.format
            )));
        }
        let blob = fs::read(dir.join("dataset.bin"))?;
        let px: usize = meta.image_shape.iter().product();
        let (tr_i, tr_l) = (meta.n_train * px, meta.n_train);
        let (te_i, te_l) = (meta.n_test * px, meta.n_test);
        if blob.len() != tr_i + tr_l + te_i + te_l {
            return Err(Error::Contract(format!(
                "dataset.bin holds {} bytes, metadata implies {}",
                blob.len(),
                tr_i + tr_l + te_i + te_l
            )));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let part = blob[off..off + n].to_vec();
            off += n;
            part
        };
        Ok(Dataset {
            train_images: take(tr_i),
            train_labels: take(tr_l),
            test_images: take(te_i),
            test_labels: take(te_l),
            meta,
        })
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.meta.n_train,
            Split::Test => self.meta.n_test,
        }
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    pub fn label(&self, split: Split, index: usize) -> usize {
        match split {
            Split::Train => self.train_labels[index] as usize,
            Split::Test => self.test_labels[index] as usize,
        }
    }

    /// Raw u8 pixels of one image (C-order `(c, h, w)`).
    pub fn raw_image(&self, split: Split, index: usize) -> &[u8] {
        let px = IMAGE_SHAPE.0 * IMAGE_SHAPE.1 * IMAGE_SHAPE.2;
        let store = match split {
            Split::Train => &self.train_images,
            Split::Test => &self.test_images,
        };
        &store[index * px..(index + 1) * px]
    }

    /// One image as a batch-1 pixel batch.
    pub fn image<F: Scalar>(&self, split: Split, index: usize) -> ImageBatch<F> {
        self.batch(split, &[index]).0
    }

    /// One labelled example.
    pub fn example<F: Scalar>(&self, split: Split, index: usize) -> LabelledExample<F> {
        LabelledExample::new(self.image(split, index), self.label(split, index))
            .expect("batch-1 by construction")
    }

    /// Gathers images at `indices` into a batch with their labels.
    pub fn batch<F: Scalar>(&self, split: Split, indices: &[usize]) -> (ImageBatch<F>, Vec<usize>) {
        let (c, h, w) = IMAGE_SHAPE;
        let px = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(
                self.raw_image(split, i)
                    .iter()
                    .map(|&b| F::from_f64_lossy(b as f64)),
            );
            labels.push(self.label(split, i));
        }
        let arr = Array4::from_shape_vec((indices.len(), c, h, w), data).expect("batch shape");
        (
            ImageBatch::new_default_range(arr).expect("u8 pixels are in range"),
            labels,
        )
    }

    /// Seed-selected evaluation slice of `n` held-out test indices
    /// (partial Fisher–Yates over the test split).
    pub fn eval_slice(&self, seed: RngSeed, n: usize) -> Vec<usize> {
        let total = self.meta.n_test;
        let n = n.min(total);
        let mut rng = seed.derive(&["eval-slice"]).rng();
        let mut indices: Vec<usize> = (0..total).collect();
        for i in 0..n {
            let j = i + crate::rng::uniform_usize(&mut rng, total - i);
            indices.swap(i, j);
        }
        indices.truncate(n);
        indices
    }
}

fn rotate(px: f64, py: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * px - s * py, c * py + s * px)
}

fn edge_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (ex, ey) = (bx - ax, by - ay);
    let len = (ex * ex + ey * ey).sqrt();
    (ex * (py - ay) - ey * (px - ax)) / len
}

/// Signed distance (negative inside) for one class shape of size `r`.
fn shape_sdf(class: usize, px: f64, py: f64, r: f64) -> f64 {
    let bar = |qx: f64, qy: f64, hx: f64, hy: f64| (qx.abs() - hx).max(qy.abs() - hy);
    match class {
        0 => (px * px + py * py).sqrt() - 0.85 * r,
        1 => ((px * px + py * py).sqrt() - 0.78 * r).abs() - 0.22 * r,
        2 => px.abs().max(py.abs()) - 0.8 * r,
        3 => {
            // Equilateral triangle pointing up (screen y grows downward);
            // vertices traversed so the interior is negative.
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (0.866 * r, 0.5 * r);
            let (cx, cy) = (-0.866 * r, 0.5 * r);
            edge_dist(px, py, ax, ay, cx, cy)
                .max(edge_dist(px, py, cx, cy, bx, by))
                .max(edge_dist(px, py, bx, by, ax, ay))
        }
        4 => bar(px, py, r, 0.32 * r).min(bar(px, py, 0.32 * r, r)),
        5 => (px.abs() + py.abs()) - 1.15 * r,
        6 => bar(px, py - 0.55 * r, r, 0.22 * r).min(bar(px, py + 0.55 * r, r, 0.22 * r)),
        7 => bar(px - 0.55 * r, py, 0.22 * r, r).min(bar(px + 0.55 * r, py, 0.22 * r, r)),
        8 => {
            let (qx, qy) = rotate(px, py, std::f64::consts::FRAC_PI_4);
            bar(qx, qy, 1.1 * r, 0.3 * r).min(bar(qx, qy, 0.3 * r, 1.1 * r))
        }
        9 => {
            let mut d = f64::INFINITY;
            for sx in [-0.6, 0.6] {
                for sy in [-0.6, 0.6] {
                    let (dx, dy) = (px - sx * r, py - sy * r);
                    d = d.min((dx * dx + dy * dy).sqrt() - 0.38 * r);
                }
            }
            d
        }
        _ => unreachable!("class index"),
    }
}

/// Renders one image into `out` (appends `3 * 32 * 32` bytes).
/// Draw order from the image stream: background color (3), gradient
/// (direction 2, amplitude), contrast sign and per-channel offsets (1 + 3),
/// center (2), size, rotation, clutter count then per-blob (x, y, radius,
/// sign, contrast), noise sigma, then one normal draw per pixel per channel.
fn render_image(class: usize, seed: RngSeed, out: &mut Vec<u8>) {
    let mut rng = seed.rng();
    let (c, h, w) = IMAGE_SHAPE;

    let bg: Vec<f64> = (0..c).map(|_| uniform_f64(&mut rng, 70.0, 150.0)).collect();
    let gx = uniform_f64(&mut rng, -1.0, 1.0);
    let gy = uniform_f64(&mut rng, -1.0, 1.0);
    let g_amp = uniform_f64(&mut rng, 5.0, 20.0);
    // Foreground sits a modest, sign-random offset from the background, so
    // class margins stay narrow.
    let dir = if uniform_f64(&mut rng, 0.0, 1.0) < 0.5 {
        -1.0
    } else {
        1.0
    };
    let fg: Vec<f64> = bg
        .iter()
        .map(|&b| (b + dir * uniform_f64(&mut rng, 36.0, 95.0)).clamp(0.0, 255.0))
        .collect();
    let cx = 16.0 + uniform_f64(&mut rng, -5.0, 5.0);
    let cy = 16.0 + uniform_f64(&mut rng, -5.0, 5.0);
    let r = uniform_f64(&mut rng, 7.5, 12.0);
    let theta = uniform_f64(&mut rng, -0.3, 0.3);

    // Label-uncorrelated clutter: small, weak blobs the models can latch
    // onto but that carry no class signal.
    let n_blobs = 2 + (uniform_f64(&mut rng, 0.0, 1.0) * 3.0) as usize;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let bx = uniform_f64(&mut rng, 2.0, 30.0);
            let by = uniform_f64(&mut rng, 2.0, 30.0);
            let br = uniform_f64(&mut rng, 1.5, 3.2);
            let sign = if uniform_f64(&mut rng, 0.0, 1.0) < 0.5 {
                -1.0
            } else {
                1.0
            };
            let amp = sign * uniform_f64(&mut rng, 18.0, 40.0);
            (bx, by, br, amp)
        })
        .collect();
    let sigma = uniform_f64(&mut rng, 8.0, 14.0);

    let edge = 1.6;
    let mut alpha = vec![0.0f64; h * w];
    let mut grad = vec![0.0f64; h * w];
    let mut clutter = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = rotate(x as f64 - cx, y as f64 - cy, -theta);
            let d = shape_sdf(class, px, py, r);
            alpha[y * w + x] = (0.5 - d / edge).clamp(0.0, 1.0);
            grad[y * w + x] =
                g_amp * (gx * (x as f64 - 16.0) / 16.0 + gy * (y as f64 - 16.0) / 16.0);
            let mut cl = 0.0;
            for &(bx, by, br, amp) in &blobs {
                let dd = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt() - br;
                cl += amp * (0.5 - dd / edge).clamp(0.0, 1.0);
            }
            clutter[y * w + x] = cl;
        }
    }

    for ch in 0..c {
        for i in 0..h * w {
            let base = bg[ch] + grad[i];
            let v = base
                + (fg[ch] - base) * alpha[i]
                + clutter[i] * (1.0 - alpha[i])
                + normal_f64(&mut rng) * sigma;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = Dataset::generate(RngSeed(5), 40, 20);
        let b = Dataset::generate(RngSeed(5), 40, 20);
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.test_images, b.test_images);
        let mut counts = [0usize; 10];
        for i in 0..40 {
            counts[a.label(Split::Train, i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn shapes_cover_center_for_filled_classes() {
        for class in [0, 2, 3, 5] {
            assert!(shape_sdf(class, 0.0, 0.0, 10.0) < 0.0, "class {class}");
        }
        // Far corner is outside every shape.
        for class in 0..10 {
            assert!(shape_sdf(class, 40.0, 40.0, 10.0) > 0.0, "class {class}");
        }
    }

    #[test]
    fn pack_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = Dataset::generate(RngSeed(11), 20, 10);
        a.save(dir.path()).unwrap();
        let b = Dataset::load(dir.path()).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.test_labels, b.test_labels);
    }

    #[test]
    fn eval_slice_is_stable_and_unique() {
        let d = Dataset::generate(RngSeed(3), 20, 50);
        let s1 = d.eval_slice(RngSeed(9), 30);
        let s2 = d.eval_slice(RngSeed(9), 30);
        assert_eq!(s1, s2);
        let mut sorted = s1.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
    }
}
