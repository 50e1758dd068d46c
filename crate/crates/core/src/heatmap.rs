//! Per-class image classifiers applied fully-convolutionally to obtain class
//! heatmaps, and the thresholding of those heatmaps into localization masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::params::{gaussian_kernel, ParamSet};
use crate::tensor::{resize_bilinear, Tensor};

pub const DEFAULT_MASK_RATIO: f64 = 0.2;

/// Class score map at the classifier's output resolution, 1×1×h×w.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub class: usize,
    pub map: Tensor,
}

impl Heatmap {
    pub fn new(class: usize, map: Tensor) -> Result<Self> {
        let (n, c, h, w) = map.dims4()?;
        if n != 1 || c != 1 || h == 0 || w == 0 {
            return Err(Error::shape(format!("heatmap must be 1×1×h×w, got {:?}", map.shape())));
        }
        if !map.is_finite() {
            return Err(Error::NonFinite(format!("heatmap for class {class}")));
        }
        Ok(Heatmap { class, map })
    }

    pub fn height(&self) -> usize {
        self.map.shape()[self.map.shape().len() - 2]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[self.map.shape().len() - 1]
    }
}

/// Full-resolution 0/1 localization mask B_k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    class: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl BinaryMask {
    pub fn from_bits(class: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{} mask bits for a {height}×{width} mask", bits.len())));
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(BinaryMask { class, height, width, bits, count })
    }

    pub fn empty(class: usize, height: usize, width: usize) -> Self {
        BinaryMask { class, height, width, bits: vec![false; height * width], count: 0 }
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// |B_k|.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Upsamples the heatmap bilinearly to the target resolution and keeps pixels
/// strictly above `ratio · max`. A heatmap whose maximum is not positive
/// yields an empty mask.
pub fn binarize(heatmap: &Heatmap, target_h: usize, target_w: usize, ratio: f64) -> Result<BinaryMask> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("mask target resolution must be positive"));
    }
    let up = resize_bilinear(heatmap.map.data(), heatmap.height(), heatmap.width(), target_h, target_w);
    let peak = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return Ok(BinaryMask::empty(heatmap.class, target_h, target_w));
    }
    let threshold = ratio * peak;
    BinaryMask::from_bits(heatmap.class, target_h, target_w, up.iter().map(|&v| v > threshold).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Side of the non-overlapping patches the first layer reads; also the
    /// receptive field and downsampling factor of the heatmap.
    pub patch: usize,
    pub hidden: usize,
    pub init_std: f64,
    pub epochs: usize,
    pub sgd: SgdConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            patch: 4,
            hidden: 16,
            init_std: 1.0,
            epochs: 30,
            sgd: SgdConfig { base_lr: 0.01, decay_interval: usize::MAX, momentum: 0.9, weight_decay: 0.0 },
        }
    }
}

/// One-vs-all image classifier: patch convolution → relu → 1×1 → relu → 1×1
/// score. Training pools the score map by its global average.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub class: usize,
    pub patch: usize,
    pub params: ParamSet,
}

impl Classifier {
    pub fn init(class: usize, cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let (p, h) = (cfg.patch, cfg.hidden);
        let mut params = ParamSet::new();
        params.push("patch.weight", gaussian_kernel(rng, [h, 3, p, p], cfg.init_std));
        params.push("patch.bias", Tensor::zeros(&[h]));
        params.push("mix.weight", gaussian_kernel(rng, [h, h, 1, 1], cfg.init_std));
        params.push("mix.bias", Tensor::zeros(&[h]));
        params.push("score.weight", gaussian_kernel(rng, [1, h, 1, 1], cfg.init_std));
        params.push("score.bias", Tensor::zeros(&[1]));
        Classifier { class, patch: p, params }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("classifier expects 3-channel images, got {c}")));
        }
        if h < self.patch || w < self.patch {
            return Err(Error::invalid(format!(
                "image {h}×{w} is smaller than the classifier receptive field {}×{}",
                self.patch, self.patch
            )));
        }
        Ok(())
    }

    /// Score map on the tape given parameter leaves.
    fn score_map(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Var> {
        let x = tape.conv2d(image, vars[0], vars[1], self.patch, 0)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, vars[2], vars[3], 1, 0)?;
        let x = tape.relu(x);
        tape.conv2d(x, vars[4], vars[5], 1, 0)
    }

    /// Applies the classifier fully-convolutionally; no pooling.
    pub fn heatmap(&self, image: &Tensor) -> Result<Heatmap> {
        self.check_image(image)?;
        let image = as_batch(image)?;
        let mut tape = Tape::new();
        let vars = self.params.to_tape(&mut tape);
        let x = tape.leaf(image);
        let map = self.score_map(&mut tape, &vars, x)?;
        Heatmap::new(self.class, tape.value(map).clone())
    }

    /// The image-level logit: global average of the score map.
    pub fn pooled_score(&self, image: &Tensor) -> Result<f64> {
        let hm = self.heatmap(image)?;
        Ok(hm.map.data().iter().sum::<f64>() / hm.map.len() as f64)
    }
}

/// Reshapes to N×C×H×W and centers [0, 1] intensities on zero.
fn as_batch(image: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    let centered = image.data().iter().map(|v| v - 0.5).collect();
    Tensor::new(&[n, c, h, w], centered)
}

/// Image with a single image-level class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// 3×H×W or 1×3×H×W, values in [0, 1].
    pub image: Tensor,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub positives: usize,
    pub negatives: usize,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Binary logistic loss `softplus(z) − y·z` with its derivative in `z`.
fn logistic_loss(z: f64, positive: bool) -> (f64, f64) {
    let y = if positive { 1.0 } else { 0.0 };
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    let sigmoid = 1.0 / (1.0 + (-z).exp());
    (softplus - y * z, sigmoid - y)
}

/// Trains a one-vs-all classifier for `class`: images labelled `class` are
/// positives, all others negatives. Deterministic for a given seed.
pub fn train_classifier(
    images: &[LabeledImage],
    class: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TrainedClassifier> {
    let positives = images.iter().filter(|s| s.class == class).count();
    let negatives = images.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(Error::InsufficientSamples(format!(
            "class {class}: {positives} positives and {negatives} negatives (need at least 2 of each)"
        )));
    }
    cfg.sgd.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut clf = Classifier::init(class, cfg, &mut rng);
    for s in images {
        clf.check_image(&s.image)?;
    }
    let batched: Vec<Tensor> = images.iter().map(|s| as_batch(&s.image)).collect::<Result<_>>()?;
    let mut state = SgdState::zeros_like(&clf.params);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let vars = clf.params.to_tape(&mut tape);
            let x = tape.leaf(batched[i].clone());
            let map = clf.score_map(&mut tape, &vars, x)?;
            let logit = tape.mean(map)?;
            let z = tape.value(logit).data()[0];
            let (loss, dz) = logistic_loss(z, images[i].class == class);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("classifier {class} loss diverged at step {step}")));
            }
            epoch_loss += loss;
            let out = tape.reduce(logit, loss, vec![dz])?;
            let mut grads = tape.backward(out)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            sgd_step(&mut clf.params, &g, &mut state, &cfg.sgd, step)?;
            step += 1;
        }
        final_loss = epoch_loss / images.len() as f64;
    }
    let correct = images
        .iter()
        .map(|s| clf.pooled_score(&s.image).map(|z| (z > 0.0) == (s.class == class)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    Ok(TrainedClassifier {
        classifier: clf,
        positives,
        negatives,
        train_accuracy: correct as f64 / images.len() as f64,
        final_loss,
    })
}

/// One classifier per class, foreground and background alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    pub classifiers: Vec<TrainedClassifier>,
}

impl ClassifierBank {
    pub fn train(images: &[LabeledImage], num_classes: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let classifiers = (0..num_classes)
            .map(|k| {
                let t = train_classifier(images, k, cfg, seed)?;
                log::info!(
                    "classifier {k}: {} positives, {} negatives, train accuracy {:.3}",
                    t.positives,
                    t.negatives,
                    t.train_accuracy
                );
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(ClassifierBank { classifiers })
    }

    pub fn num_classes(&self) -> usize {
        self.classifiers.len()
    }

    pub fn heatmaps(&self, image: &Tensor) -> Result<Vec<Heatmap>> {
        self.classifiers.iter().map(|c| c.classifier.heatmap(image)).collect()
    }
}

pub fn extract_heatmap(classifier: &Classifier, image: &Tensor) -> Result<Heatmap> {
    classifier.heatmap(image)
}

/// `<frame_id>.<class_id>.hm` inside the cache directory.
pub fn heatmap_cache_path(dir: &Path, frame_id: &str, class: usize) -> PathBuf {
    dir.join(format!("{frame_id}.{class}.hm"))
}

pub fn write_heatmap(dir: &Path, frame_id: &str, heatmap: &Heatmap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    heatmap.map.write_snapshot(&heatmap_cache_path(dir, frame_id, heatmap.class))
}

pub fn read_heatmap(dir: &Path, frame_id: &str, class: usize) -> Result<Heatmap> {
    let path = heatmap_cache_path(dir, frame_id, class);
    if !path.exists() {
        return Err(Error::Missing(format!("heatmap cache entry {}", path.display())));
    }
    Heatmap::new(class, Tensor::read_snapshot(&path)?)
}
