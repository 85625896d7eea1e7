//! Dataset ingestion, synthetic data for CI, patch-grid utilities, and the
//! fair evaluation-set protocol (images correctly classified by every model
//! under comparison).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng::{rng_from, shuffle};
use crate::tensor::Tensor;

/// Images in [0,1], stored as one `[n, C, H, W]` tensor.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: String,
    pub source: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, index: usize) -> Result<Tensor<f32>> {
        self.images.index_axis0(index)
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    /// Gathers the listed indices into one `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut items = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            items.push(self.image(i)?);
            labels.push(self.label(i));
        }
        Ok((Tensor::stack(&items)?, labels))
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        let (images, _) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: split.to_string(),
            source: self.source.clone(),
        })
    }
}

/// Bijection between patch indices and pixel rectangles. Patch `i` walks the
/// grid row-major; its rectangle is `p x p` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "patch grid: {h}x{w} not divisible by patch size {p}"
            )));
        }
        Ok(PatchGrid { h, w, p })
    }

    pub fn rows(&self) -> usize {
        self.h / self.p
    }

    pub fn cols(&self) -> usize {
        self.w / self.p
    }

    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Top-left pixel (y0, x0) of patch `index`.
    pub fn rect(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.num_patches() {
            return Err(Error::invalid(format!(
                "patch index {index} out of range (grid has {})",
                self.num_patches()
            )));
        }
        let gy = index / self.cols();
        let gx = index % self.cols();
        Ok((gy * self.p, gx * self.p))
    }

    pub fn index_at(&self, y: usize, x: usize) -> usize {
        (y / self.p) * self.cols() + x / self.p
    }
}

/// Indices into a dataset that every listed model classified correctly at
/// construction time. Fooling-rate comparisons only accept these.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSet {
    pub indices: Vec<usize>,
    /// Ids of the models that vetted every index.
    pub provenance: Vec<String>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Anything that can argmax-classify a batch of images. Ties break toward
/// the lowest class index.
pub trait Classifier: Sync {
    fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>>;
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Builds the fair evaluation set: up to `max_n` dataset indices (ascending)
/// where every model's prediction equals the label. An empty result is an
/// explicit error condition, not an empty set.
pub fn select_correct(
    models: &[(&str, &dyn Classifier)],
    dataset: &Dataset,
    max_n: usize,
) -> Result<EvalSet> {
    if models.is_empty() {
        return Err(Error::invalid("select_correct: no models given"));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut correct: Vec<bool> = vec![true; dataset.len()];
    for chunk in all.chunks(64) {
        let (batch, labels) = dataset.batch(chunk)?;
        for (_, model) in models {
            let preds = model.predict(&batch)?;
            for (j, &idx) in chunk.iter().enumerate() {
                if preds[j] != labels[j] {
                    correct[idx] = false;
                }
            }
        }
    }
    let indices: Vec<usize> = correct
        .iter()
        .enumerate()
        .filter_map(|(i, &ok)| ok.then_some(i))
        .take(max_n)
        .collect();
    if indices.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(EvalSet {
        indices,
        provenance: models.iter().map(|(id, _)| id.to_string()).collect(),
    })
}

// ---- CIFAR-10 binary ingestion ----

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_SIDE: usize = 32;

/// Loads CIFAR-10 binary records (1 label byte, then R/G/B planes of 1024
/// bytes each, 32x32 row-major). `path` may be a single `.bin` file or a
/// directory of them (read in sorted filename order). Pixels scale to [0,1]
/// by /255; record order is preserved.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "bin").unwrap_or(false))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(FormatError::Cifar(format!("no .bin files in {}", path.display())).into());
        }
        v
    } else {
        vec![path.to_path_buf()]
    };

    let mut labels = Vec::new();
    let mut pixels: Vec<f32> = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(FormatError::Cifar(format!(
                "{}: length {} is not a positive multiple of {CIFAR_RECORD}",
                file.display(),
                bytes.len()
            ))
            .into());
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0];
            if label > 9 {
                return Err(FormatError::Cifar(format!(
                    "{}: label byte {label} out of range 0..=9",
                    file.display()
                ))
                .into());
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        num_classes: 10,
        split: "unspecified".to_string(),
        source: format!("cifar10:{}", path.display()),
    })
}

// ---- synthetic shapes ----

pub const SYNTH_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { height: 32, width: 32 }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Cross,
    Stripes,
}

/// Deterministic 4-class dataset: colored disks / squares / crosses /
/// striped blocks at random positions and scales on noise backgrounds.
/// Class counts are exactly balanced (remainder round-robin), order shuffled
/// by seed.
pub fn synth_shapes(n: usize, seed: u64, spec: &SynthSpec) -> Dataset {
    assert!(n >= 1, "synth_shapes: n must be >= 1");
    let (h, w) = (spec.height, spec.width);

    let mut labels: Vec<u8> = (0..n).map(|i| (i % SYNTH_CLASSES) as u8).collect();
    let mut order_rng = rng_from(&[seed, 0]);
    shuffle(&mut labels, &mut order_rng);

    let mut pixels = vec![0.0f32; n * 3 * h * w];
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = rng_from(&[seed, 1, i as u64]);
        let img = &mut pixels[i * 3 * h * w..(i + 1) * 3 * h * w];
        // low-contrast noise background around mid gray
        for v in img.iter_mut() {
            *v = 0.4 + 0.2 * rng.gen::<f32>();
        }
        // vivid color per image: each channel pinned near 0 or 1
        let color: [f32; 3] = std::array::from_fn(|_| {
            if rng.gen::<bool>() {
                0.85 + 0.15 * rng.gen::<f32>()
            } else {
                0.15 * rng.gen::<f32>()
            }
        });
        let shape = match label {
            0 => Shape::Disk,
            1 => Shape::Square,
            2 => Shape::Cross,
            _ => Shape::Stripes,
        };
        // large shapes so class evidence lands in many patches
        let min_side = h.min(w) as i64;
        let r = rng.gen_range((min_side * 5 / 16)..=(min_side * 7 / 16));
        let cy = rng.gen_range(r as usize..h - r as usize) as i64;
        let cx = rng.gen_range(r as usize..w - r as usize) as i64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dy, dx) = (y - cy, x - cx);
                let inside = match shape {
                    Shape::Disk => dy * dy + dx * dx <= r * r,
                    Shape::Square => dy.abs() <= r && dx.abs() <= r,
                    Shape::Cross => {
                        let t = (r / 2).max(1);
                        (dy.abs() <= t && dx.abs() <= r) || (dx.abs() <= t && dy.abs() <= r)
                    }
                    Shape::Stripes => dy.abs() <= r && dx.abs() <= r && (dy.rem_euclid(4) < 2),
                };
                if inside {
                    for (c, &cv) in color.iter().enumerate() {
                        img[c * h * w + (y as usize) * w + x as usize] = cv;
                    }
                }
            }
        }
    }

    Dataset {
        images: Tensor::new(vec![n, 3, h, w], pixels).expect("synth shape"),
        labels,
        num_classes: SYNTH_CLASSES,
        split: "synth".to_string(),
        source: format!("synth:{n}:seed={seed}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_tiles_exactly() {
        let grid = PatchGrid::new(32, 32, 4).unwrap();
        assert_eq!(grid.num_patches(), 64);
        let mut seen = vec![0u32; 32 * 32];
        for i in 0..grid.num_patches() {
            let (y0, x0) = grid.rect(i).unwrap();
            for y in y0..y0 + 4 {
                for x in x0..x0 + 4 {
                    seen[y * 32 + x] += 1;
                    assert_eq!(grid.index_at(y, x), i);
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "every pixel in exactly one patch");
        assert!(PatchGrid::new(6, 6, 4).is_err());
        assert!(grid.rect(64).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_labeled() {
        let a = synth_shapes(8, 0, &SynthSpec::default());
        let b = synth_shapes(8, 0, &SynthSpec::default());
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 8);
        assert!(a.labels.iter().all(|&l| l < 4));
        let c = synth_shapes(8, 1, &SynthSpec::default());
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn synth_class_histogram_is_balanced() {
        let ds = synth_shapes(4000, 7, &SynthSpec::default());
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 4000.0;
            assert!((frac - 0.25).abs() < 0.05 * 0.25, "class fraction {frac}");
        }
    }

    #[test]
    fn synth_pixels_in_unit_range() {
        let ds = synth_shapes(16, 3, &SynthSpec::default());
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cifar_loader_examples() {
        let dir = std::env::temp_dir().join(format!("ppcifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        // two handcrafted records, first label 7, one pixel at 255
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 3;
        let ok_path = dir.join("two.bin");
        std::fs::write(&ok_path, &bytes).unwrap();
        let ds = load_cifar10_binary(&ok_path).unwrap();
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[0], 1.0, "byte 255 -> exactly 1.0");
        assert_eq!(ds.len(), 2);

        // 3072 bytes is not a whole record
        let bad_path = dir.join("short.bin");
        std::fs::write(&bad_path, vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar10_binary(&bad_path),
            Err(Error::Format(FormatError::Cifar(_)))
        ));

        // label byte out of range
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        let bad_label = dir.join("label.bin");
        std::fs::write(&bad_label, &bad).unwrap();
        assert!(load_cifar10_binary(&bad_label).is_err());

        std::fs::remove_dir_all(&dir).ok();
    }

    struct FixedClassifier(Vec<usize>);
    impl Classifier for FixedClassifier {
        fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
            // cycles through its canned answers by batch position hash; for
            // tests we instead key on the first pixel which encodes the index
            let b = images.shape()[0];
            let inner: usize = images.shape()[1..].iter().product();
            Ok((0..b)
                .map(|i| {
                    let tag = images.data()[i * inner] as usize;
                    self.0[tag]
                })
                .collect())
        }
    }

    fn tagged_dataset(labels: &[u8]) -> Dataset {
        // image i has first pixel = i so FixedClassifier can identify it
        let n = labels.len();
        let mut pixels = vec![0.0f32; n * 3 * 4 * 4];
        for i in 0..n {
            pixels[i * 48] = i as f32;
        }
        Dataset {
            images: Tensor::new(vec![n, 3, 4, 4], pixels).unwrap(),
            labels: labels.to_vec(),
            num_classes: 4,
            split: "test".into(),
            source: "test".into(),
        }
    }

    #[test]
    fn select_correct_full_disjoint_and_partial() {
        let ds = tagged_dataset(&[0, 1, 2, 3]);

        // perfect model: evalset is the full set
        let perfect = FixedClassifier(vec![0, 1, 2, 3]);
        let es = select_correct(&[("m", &perfect)], &ds, 10).unwrap();
        assert_eq!(es.indices, vec![0, 1, 2, 3]);

        // two models correct on disjoint halves: explicit empty condition
        let first_half = FixedClassifier(vec![0, 1, 0, 0]);
        let second_half = FixedClassifier(vec![1, 2, 2, 3]);
        let err = select_correct(&[("a", &first_half), ("b", &second_half)], &ds, 10);
        assert!(matches!(err, Err(Error::EmptyEvalSet)));

        // perfect + half-right: size equals the weaker model's correct count
        let half = FixedClassifier(vec![0, 1, 0, 0]);
        let es = select_correct(&[("p", &perfect), ("h", &half)], &ds, 10).unwrap();
        assert_eq!(es.indices, vec![0, 1]);
        assert_eq!(es.provenance, vec!["p".to_string(), "h".to_string()]);

        // max_n truncates after filtering
        let es = select_correct(&[("m", &perfect)], &ds, 2).unwrap();
        assert_eq!(es.indices, vec![0, 1]);
    }
}
