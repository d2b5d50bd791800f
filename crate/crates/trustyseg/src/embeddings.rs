//! Frozen embedding provider: seeded synthetic benchmarks plus a bit-exact
//! import/export path for externally produced embeddings.
//!
//! The synthetic generator draws one unit prototype per class and derives
//! both the text token and the patch embeddings of that class from it under
//! independent noise, which reproduces the only property the decoder relies
//! on: text and image embeddings of the same class point the same way.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensor_file::{read_tensor_file, write_tensor_file};

/// Class ids, names, and the seen/unseen partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    unseen: Vec<bool>,
}

impl ClassVocabulary {
    /// Builds a vocabulary where `unseen_ids` marks the novel classes.
    pub fn new(names: Vec<String>, unseen_ids: &[usize]) -> Result<ClassVocabulary> {
        let count = names.len();
        if count < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 2 classes, got {count}"
            )));
        }
        let mut unseen = vec![false; count];
        for &id in unseen_ids {
            if id >= count {
                return Err(Error::InvalidVocabulary(format!(
                    "unseen id {id} out of range for {count} classes"
                )));
            }
            unseen[id] = true;
        }
        if unseen.iter().all(|&u| u) {
            return Err(Error::InvalidVocabulary(
                "at least one class must be seen".into(),
            ));
        }
        Ok(ClassVocabulary { names, unseen })
    }

    /// `class_N` names with the last `unseen_count` ids marked unseen.
    pub fn synthetic(class_count: usize, unseen_count: usize) -> Result<ClassVocabulary> {
        let names = (0..class_count).map(|c| format!("class_{c}")).collect();
        let unseen: Vec<usize> = (class_count.saturating_sub(unseen_count)..class_count).collect();
        ClassVocabulary::new(names, &unseen)
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_seen(&self, id: usize) -> bool {
        id < self.unseen.len() && !self.unseen[id]
    }

    pub fn is_unseen(&self, id: usize) -> bool {
        id < self.unseen.len() && self.unseen[id]
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.class_count()).filter(|&c| !self.unseen[c]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.class_count()).filter(|&c| self.unseen[c]).collect()
    }

    /// Sentinel written over annotations that are hidden from training.
    pub fn masked_label(&self) -> usize {
        self.class_count()
    }
}

/// Integer label map over the patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::Dataset(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.data[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Frozen text tokens, global image token, and patch embeddings of one image.
///
/// None of the tensors here ever require gradients; the decoder trains only
/// its own parameters against them.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub text_tokens: Tensor,
    pub global_token: Tensor,
    pub patch_embeddings: Tensor,
    /// Patch grid as (rows, cols); `patch_embeddings` has rows*cols rows.
    pub grid: (usize, usize),
    /// Pixels per patch side; 1 on the synthetic benchmark.
    pub patch_size: usize,
}

impl EmbeddingBundle {
    pub fn new(
        text_tokens: Tensor,
        global_token: Tensor,
        patch_embeddings: Tensor,
        grid: (usize, usize),
        patch_size: usize,
    ) -> Result<EmbeddingBundle> {
        let (_, d) = text_tokens.dims2("embedding bundle")?;
        let (gr, gd) = global_token.dims2("embedding bundle")?;
        let (n, ed) = patch_embeddings.dims2("embedding bundle")?;
        if gr != 1 || gd != d || ed != d {
            return Err(Error::ShapeMismatch {
                op: "embedding bundle",
                left: text_tokens.shape().to_vec(),
                right: global_token.shape().to_vec(),
            });
        }
        if n != grid.0 * grid.1 {
            return Err(Error::Dataset(format!(
                "patch count {n} does not match grid {}x{}",
                grid.0, grid.1
            )));
        }
        if patch_size == 0 {
            return Err(Error::Dataset("patch size must be at least 1".into()));
        }
        Ok(EmbeddingBundle {
            text_tokens,
            global_token,
            patch_embeddings,
            grid,
            patch_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_tokens.shape()[1]
    }

    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// One synthetic image: its embeddings plus per-patch ground truth.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub bundle: EmbeddingBundle,
    pub labels: LabelMap,
}

/// Knobs of the synthetic benchmark generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub class_count: usize,
    pub unseen_count: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub samples: usize,
    /// Patch noise scale; text tokens are perturbed at half this scale.
    pub noise: f64,
}

fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn sample_unit_vector(rng: &mut ChaCha8Rng, dim: usize, center: &[f64], sigma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim)
        .map(|i| center.get(i).copied().unwrap_or(0.0) + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    unit_normalize(&mut v);
    v
}

/// Splits the grid into `regions` contiguous rectangles by repeated
/// guillotine cuts of the largest remaining rectangle.
fn partition_grid(
    rng: &mut ChaCha8Rng,
    grid: (usize, usize),
    regions: usize,
) -> Vec<(usize, usize, usize, usize)> {
    // (row, col, height, width)
    let mut rects = vec![(0usize, 0usize, grid.0, grid.1)];
    while rects.len() < regions {
        let (idx, _) = rects
            .iter()
            .enumerate()
            .filter(|(_, r)| r.2 > 1 || r.3 > 1)
            .max_by_key(|(_, r)| r.2 * r.3)
            .expect("caller guarantees enough cells");
        let (row, col, h, w) = rects.swap_remove(idx);
        let split_rows = if h > 1 && w > 1 {
            rng.gen_bool(0.5)
        } else {
            h > 1
        };
        if split_rows {
            let at = rng.gen_range(1..h);
            rects.push((row, col, at, w));
            rects.push((row + at, col, h - at, w));
        } else {
            let at = rng.gen_range(1..w);
            rects.push((row, col, h, at));
            rects.push((row, col + at, h, w - at));
        }
    }
    rects
}

/// Deterministic synthetic benchmark: vocabulary plus samples.
///
/// Per class, a unit prototype is drawn from a seeded isotropic Gaussian;
/// the text token is the prototype re-noised at half the patch noise scale.
/// Each sample partitions the grid into 2-5 rectangular regions with one
/// class per region, and the global token is the normalized mean of the
/// patch embeddings.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Result<(ClassVocabulary, Vec<ToySample>)> {
    if cfg.class_count < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 classes, got {}",
            cfg.class_count
        )));
    }
    if cfg.dim < 4 {
        return Err(Error::Dataset(format!(
            "embedding dim must be at least 4, got {}",
            cfg.dim
        )));
    }
    if cfg.noise < 0.0 {
        return Err(Error::Dataset(format!(
            "noise must be non-negative, got {}",
            cfg.noise
        )));
    }
    let cells = cfg.grid.0 * cfg.grid.1;
    if cells < 2 {
        return Err(Error::GridTooSmall {
            cells,
            requested: 2,
        });
    }
    let vocab = ClassVocabulary::synthetic(cfg.class_count, cfg.unseen_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let zero = vec![0.0; cfg.dim];
    let prototypes: Vec<Vec<f64>> = (0..cfg.class_count)
        .map(|_| sample_unit_vector(&mut rng, cfg.dim, &zero, 1.0))
        .collect();
    let text_sigma = cfg.noise / 2.0;
    let mut text = Vec::with_capacity(cfg.class_count * cfg.dim);
    for proto in &prototypes {
        text.extend(sample_unit_vector(&mut rng, cfg.dim, proto, text_sigma));
    }
    let text_tokens = Tensor::from_vec(vec![cfg.class_count, cfg.dim], text)?;

    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let regions = rng.gen_range(2..=5.min(cells));
        let rects = partition_grid(&mut rng, cfg.grid, regions);
        let mut labels = vec![0usize; cells];
        for (row, col, h, w) in rects {
            let class = rng.gen_range(0..cfg.class_count);
            for r in row..row + h {
                for c in col..col + w {
                    labels[r * cfg.grid.1 + c] = class;
                }
            }
        }
        let mut patches = Vec::with_capacity(cells * cfg.dim);
        for &label in &labels {
            patches.extend(sample_unit_vector(
                &mut rng,
                cfg.dim,
                &prototypes[label],
                cfg.noise,
            ));
        }
        let mut global = vec![0.0; cfg.dim];
        for p in 0..cells {
            for j in 0..cfg.dim {
                global[j] += patches[p * cfg.dim + j];
            }
        }
        for v in global.iter_mut() {
            *v /= cells as f64;
        }
        unit_normalize(&mut global);

        let bundle = EmbeddingBundle::new(
            text_tokens.clone(),
            Tensor::from_vec(vec![1, cfg.dim], global)?,
            Tensor::from_vec(vec![cells, cfg.dim], patches)?,
            cfg.grid,
            1,
        )?;
        samples.push(ToySample {
            bundle,
            labels: LabelMap::new(cfg.grid.0, cfg.grid.1, labels)?,
        });
    }
    Ok((vocab, samples))
}

/// Replaces unseen-class annotations with the masked sentinel.
pub fn mask_unseen_annotations(sample: &ToySample, vocab: &ClassVocabulary) -> ToySample {
    let data = sample
        .labels
        .data
        .iter()
        .map(|&l| if vocab.is_unseen(l) { vocab.masked_label() } else { l })
        .collect();
    ToySample {
        bundle: sample.bundle.clone(),
        labels: LabelMap {
            height: sample.labels.height,
            width: sample.labels.width,
            data,
        },
    }
}

// ── dataset directories ──────────────────────────────────────────────

const META_FILE: &str = "dataset.txt";
const TEXT_TOKENS_FILE: &str = "text_tokens.tgt";

/// Writes a dataset as a directory of `TGT1` files plus a plain-text header.
///
/// Layout: `dataset.txt`, `text_tokens.tgt`, and one `sample_NNNNN/`
/// directory per sample holding `global_token.tgt`, `patch_embeddings.tgt`
/// and `labels.tgt`.
pub fn save_dataset(dir: &Path, vocab: &ClassVocabulary, samples: &[ToySample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot save an empty dataset".into()))?;
    let mut meta = String::new();
    meta.push_str(&format!("class_count = {}\n", vocab.class_count()));
    meta.push_str(&format!("names = {}\n", vocab.names().join(",")));
    meta.push_str(&format!(
        "unseen = {}\n",
        vocab
            .unseen_ids()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    meta.push_str(&format!("samples = {}\n", samples.len()));
    meta.push_str(&format!("patch_size = {}\n", first.bundle.patch_size));
    fs::write(dir.join(META_FILE), meta)?;
    write_tensor_file(
        &dir.join(TEXT_TOKENS_FILE),
        "text_tokens",
        &first.bundle.text_tokens,
    )?;
    for (i, sample) in samples.iter().enumerate() {
        let sub = dir.join(format!("sample_{i:05}"));
        fs::create_dir_all(&sub)?;
        write_tensor_file(
            &sub.join("global_token.tgt"),
            "global_token",
            &sample.bundle.global_token,
        )?;
        write_tensor_file(
            &sub.join("patch_embeddings.tgt"),
            "patch_embeddings",
            &sample.bundle.patch_embeddings,
        )?;
        let labels = Tensor::from_vec(
            vec![sample.labels.height, sample.labels.width],
            sample.labels.data.iter().map(|&l| l as f64).collect(),
        )?;
        write_tensor_file(&sub.join("labels.tgt"), "labels", &labels)?;
    }
    Ok(())
}

fn meta_value<'a>(meta: &'a str, key: &str, dir: &Path) -> Result<&'a str> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| Error::Dataset(format!("{}: missing `{key}`", dir.display())))
}

/// Reads a dataset directory written by [`save_dataset`] (or by any
/// producer following the same file schema).
pub fn load_dataset(dir: &Path) -> Result<(ClassVocabulary, Vec<ToySample>)> {
    let meta = fs::read_to_string(dir.join(META_FILE))?;
    let class_count: usize = meta_value(&meta, "class_count", dir)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad class_count", dir.display())))?;
    let names: Vec<String> = meta_value(&meta, "names", dir)?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if names.len() != class_count {
        return Err(Error::Dataset(format!(
            "{}: {} names for {class_count} classes",
            dir.display(),
            names.len()
        )));
    }
    let unseen_raw = meta_value(&meta, "unseen", dir)?;
    let unseen: Vec<usize> = if unseen_raw.is_empty() {
        Vec::new()
    } else {
        unseen_raw
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Dataset(format!("{}: bad unseen ids", dir.display())))?
    };
    let sample_count: usize = meta_value(&meta, "samples", dir)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad sample count", dir.display())))?;
    let patch_size: usize = meta_value(&meta, "patch_size", dir)?
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: bad patch size", dir.display())))?;

    let vocab = ClassVocabulary::new(names, &unseen)?;
    let (_, text_tokens) = read_tensor_file(&dir.join(TEXT_TOKENS_FILE))?;

    let mut samples = Vec::with_capacity(sample_count);
    for i in 0..sample_count {
        let sub = dir.join(format!("sample_{i:05}"));
        let (_, global_token) = read_tensor_file(&sub.join("global_token.tgt"))?;
        let (_, patch_embeddings) = read_tensor_file(&sub.join("patch_embeddings.tgt"))?;
        let (_, label_tensor) = read_tensor_file(&sub.join("labels.tgt"))?;
        let [h, w] = label_tensor.shape() else {
            return Err(Error::Dataset(format!(
                "{}: labels must be rank 2",
                sub.display()
            )));
        };
        let data = label_tensor
            .values()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) <= vocab.masked_label() {
                    Ok(v as usize)
                } else {
                    Err(Error::Dataset(format!(
                        "{}: label value {v} is not a class id",
                        sub.display()
                    )))
                }
            })
            .collect::<Result<Vec<usize>>>()?;
        let bundle = EmbeddingBundle::new(
            text_tokens.clone(),
            global_token,
            patch_embeddings,
            (*h, *w),
            patch_size,
        )?;
        samples.push(ToySample {
            bundle,
            labels: LabelMap::new(*h, *w, data)?,
        });
    }
    Ok((vocab, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64, noise: f64) -> ToyConfig {
        ToyConfig {
            seed,
            class_count: 8,
            unseen_count: 2,
            dim: 32,
            grid: (8, 8),
            samples: 3,
            noise,
        }
    }

    fn nearest_prototype(patch: &[f64], text: &Tensor) -> usize {
        let (classes, d) = (text.shape()[0], text.shape()[1]);
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..classes {
            let dot: f64 = (0..d).map(|j| patch[j] * text.values()[c * d + j]).sum();
            if dot > best.1 {
                best = (c, dot);
            }
        }
        best.0
    }

    #[test]
    fn zero_noise_recovers_labels_exactly() {
        let (_, samples) = generate_toy_dataset(&toy(5, 0.0)).unwrap();
        for sample in &samples {
            let d = sample.bundle.dim();
            for (p, &label) in sample.labels.data.iter().enumerate() {
                let patch = &sample.bundle.patch_embeddings.values()[p * d..(p + 1) * d];
                assert_eq!(nearest_prototype(patch, &sample.bundle.text_tokens), label);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (va, a) = generate_toy_dataset(&toy(123, 0.3)).unwrap();
        let (vb, b) = generate_toy_dataset(&toy(123, 0.3)).unwrap();
        assert_eq!(va, vb);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.bundle.patch_embeddings), bits(&y.bundle.patch_embeddings));
            assert_eq!(bits(&x.bundle.global_token), bits(&y.bundle.global_token));
            assert_eq!(bits(&x.bundle.text_tokens), bits(&y.bundle.text_tokens));
        }
    }

    #[test]
    fn low_noise_keeps_nearest_prototype_accuracy_high() {
        // nearest-neighbor oracle across 100 seeds
        let mut hits = 0usize;
        let mut total = 0usize;
        for seed in 0..100 {
            let mut cfg = toy(seed, 0.1);
            cfg.samples = 1;
            let (_, samples) = generate_toy_dataset(&cfg).unwrap();
            for sample in &samples {
                let d = sample.bundle.dim();
                for (p, &label) in sample.labels.data.iter().enumerate() {
                    let patch = &sample.bundle.patch_embeddings.values()[p * d..(p + 1) * d];
                    if nearest_prototype(patch, &sample.bundle.text_tokens) == label {
                        hits += 1;
                    }
                    total += 1;
                }
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc > 0.99, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn embeddings_are_unit_norm_and_frozen() {
        let (_, samples) = generate_toy_dataset(&toy(9, 0.4)).unwrap();
        let sample = &samples[0];
        for t in [
            &sample.bundle.text_tokens,
            &sample.bundle.global_token,
            &sample.bundle.patch_embeddings,
        ] {
            assert!(!t.requires_grad());
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            for r in 0..rows {
                let norm: f64 = (0..d).map(|j| t.values()[r * d + j].powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12, "row norm {norm}");
            }
        }
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let mut cfg = toy(1, 0.1);
        cfg.grid = (1, 1);
        assert!(matches!(
            generate_toy_dataset(&cfg),
            Err(Error::GridTooSmall { cells: 1, .. })
        ));
    }

    #[test]
    fn masking_touches_exactly_the_unseen_positions() {
        let vocab = ClassVocabulary::synthetic(4, 2).unwrap();
        let (_, samples) = generate_toy_dataset(&ToyConfig {
            seed: 2,
            class_count: 4,
            unseen_count: 2,
            dim: 8,
            grid: (4, 4),
            samples: 1,
            noise: 0.2,
        })
        .unwrap();
        let sample = &samples[0];
        let masked = mask_unseen_annotations(sample, &vocab);
        let mut changed = 0;
        for (before, after) in sample.labels.data.iter().zip(&masked.labels.data) {
            if vocab.is_unseen(*before) {
                assert_eq!(*after, vocab.masked_label());
                changed += 1;
            } else {
                assert_eq!(after, before);
            }
        }
        let expected = sample.labels.data.iter().filter(|&&l| vocab.is_unseen(l)).count();
        assert_eq!(changed, expected);
        assert_eq!(masked.labels.len(), sample.labels.len());
    }

    #[test]
    fn masking_is_identity_on_all_seen() {
        let vocab = ClassVocabulary::synthetic(4, 1).unwrap();
        let bundle_cfg = ToyConfig {
            seed: 3,
            class_count: 4,
            unseen_count: 1,
            dim: 8,
            grid: (2, 2),
            samples: 1,
            noise: 0.0,
        };
        let (_, samples) = generate_toy_dataset(&bundle_cfg).unwrap();
        let mut sample = samples[0].clone();
        sample.labels.data = vec![0, 1, 2, 0]; // all seen
        let masked = mask_unseen_annotations(&sample, &vocab);
        assert_eq!(masked.labels, sample.labels);

        sample.labels.data = vec![3, 3, 3, 3]; // all unseen
        let masked = mask_unseen_annotations(&sample, &vocab);
        assert!(masked.labels.data.iter().all(|&l| l == vocab.masked_label()));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, samples) = generate_toy_dataset(&toy(77, 0.25)).unwrap();
        save_dataset(dir.path(), &vocab, &samples).unwrap();
        let (vocab2, samples2) = load_dataset(dir.path()).unwrap();
        assert_eq!(vocab, vocab2);
        assert_eq!(samples.len(), samples2.len());
        for (a, b) in samples.iter().zip(&samples2) {
            assert_eq!(a.labels, b.labels);
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.bundle.patch_embeddings), bits(&b.bundle.patch_embeddings));
            assert_eq!(bits(&a.bundle.global_token), bits(&b.bundle.global_token));
            assert_eq!(bits(&a.bundle.text_tokens), bits(&b.bundle.text_tokens));
            assert_eq!(a.bundle.grid, b.bundle.grid);
            assert_eq!(a.bundle.patch_size, b.bundle.patch_size);
        }
    }
}
