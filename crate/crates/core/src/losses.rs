//! The weakly-supervised objective: log-sum-exp tag loss, heatmap localization
//! loss and the KL consistency term against a dense-CRF target.
//!
//! Each loss is available as a plain function returning its value and its
//! gradient with respect to the network probabilities, and as a tape
//! operation built from that pair.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::heatmap::BinaryMask;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before every log.
pub const PROB_EPS: f64 = 1e-8;

/// Sharpness of the log-sum-exp pooling.
pub const DEFAULT_LSE_R: f64 = 5.0;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// d clamp(p) / dp.
fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Clip-level tags: classes present somewhere in the clip, out of `num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    present: BTreeSet<usize>,
    num_classes: usize,
}

impl TagSet {
    pub fn new(present: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let present: BTreeSet<usize> = present.into_iter().collect();
        if present.is_empty() {
            return Err(Error::invalid("tag set must contain at least one present class"));
        }
        if let Some(&bad) = present.iter().find(|&&k| k >= num_classes) {
            return Err(Error::invalid(format!("class {bad} outside 0..{num_classes}")));
        }
        Ok(TagSet { present, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().copied()
    }

    pub fn absent(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(|k| !self.present.contains(k))
    }

    pub fn contains(&self, class: usize) -> bool {
        self.present.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }
}

/// Splits a K×H×W (or 1×K×H×W) probability tensor into (K, H·W).
fn class_planes(probs: &Tensor) -> Result<(usize, usize)> {
    let (n, k, h, w) = probs.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("losses take a single frame, got batch {n}")));
    }
    Ok((k, h * w))
}

/// Soft maximum `(1/r) ln[(1/|I|) Σ exp(r·S)]` of one class map, with its
/// gradient (a softmax over `r·S`).
pub fn lse_pool_with_grad(map: &[f64], r: f64) -> Result<(f64, Vec<f64>)> {
    if map.is_empty() {
        return Err(Error::invalid("lse_pool of an empty map"));
    }
    if !(r > 0.0) {
        return Err(Error::invalid(format!("lse sharpness must be positive, got {r}")));
    }
    let peak = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = map.iter().map(|&s| (r * (s - peak)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let value = peak + (total / map.len() as f64).ln() / r;
    Ok((value, weights.into_iter().map(|e| e / total).collect()))
}

pub fn lse_pool(map: &[f64], r: f64) -> Result<f64> {
    lse_pool_with_grad(map, r).map(|(v, _)| v)
}

/// Per-class pooled scores S̃^k.
pub fn lse_scores(probs: &Tensor, r: f64) -> Result<Vec<f64>> {
    let (k, hw) = class_planes(probs)?;
    (0..k).map(|c| lse_pool(&probs.data()[c * hw..][..hw], r)).collect()
}

/// Tag loss and its gradient with respect to `probs`.
pub fn tag_loss_with_grad(probs: &Tensor, tags: &TagSet, r: f64) -> Result<(f64, Vec<f64>)> {
    let (k, hw) = class_planes(probs)?;
    if k != tags.num_classes() {
        return Err(Error::shape(format!("probs have {k} classes, tags expect {}", tags.num_classes())));
    }
    let n_present = tags.len() as f64;
    let n_absent = (k - tags.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for c in 0..k {
        let plane = &probs.data()[c * hw..][..hw];
        let (pooled, dpool) = lse_pool_with_grad(plane, r)?;
        let s = clamp_prob(pooled);
        let dloss_dpooled = if tags.contains(c) {
            loss -= s.ln() / n_present;
            -clamp_slope(pooled) / (s * n_present)
        } else {
            loss -= (1.0 - s).ln() / n_absent;
            clamp_slope(pooled) / ((1.0 - s) * n_absent)
        };
        for (g, d) in grad[c * hw..][..hw].iter_mut().zip(&dpool) {
            *g = dloss_dpooled * d;
        }
    }
    Ok((loss, grad))
}

pub fn tag_loss(probs: &Tensor, tags: &TagSet, r: f64) -> Result<f64> {
    tag_loss_with_grad(probs, tags, r).map(|(v, _)| v)
}

/// Heatmap loss over present classes with nonempty masks, with its gradient.
pub fn heatmap_loss_with_grad(probs: &Tensor, masks: &[BinaryMask], tags: &TagSet) -> Result<(f64, Vec<f64>)> {
    let (n, k, h, w) = probs.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("losses take a single frame, got batch {n}")));
    }
    let hw = h * w;
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape(format!(
                "mask for class {} is {}×{}, probabilities are {h}×{w}",
                m.class(),
                m.height(),
                m.width()
            )));
        }
        if m.class() >= k {
            return Err(Error::shape(format!("mask class {} outside 0..{k}", m.class())));
        }
    }
    let active: Vec<&BinaryMask> = masks.iter().filter(|m| tags.contains(m.class()) && m.count() > 0).collect();
    let mut grad = vec![0.0; probs.len()];
    if active.is_empty() {
        log::warn!("heatmap loss: no present class has a nonempty mask; term is 0");
        return Ok((0.0, grad));
    }
    let n_active = active.len() as f64;
    let mut loss = 0.0;
    for m in active {
        let base = m.class() * hw;
        let size = m.count() as f64;
        let mut class_sum = 0.0;
        for (i, _) in m.bits().iter().enumerate().filter(|(_, &b)| b) {
            let p = probs.data()[base + i];
            let s = clamp_prob(p);
            class_sum += s.ln();
            grad[base + i] -= clamp_slope(p) / (s * size * n_active);
        }
        loss -= class_sum / size / n_active;
    }
    Ok((loss, grad))
}

pub fn heatmap_loss(probs: &Tensor, masks: &[BinaryMask], tags: &TagSet) -> Result<f64> {
    heatmap_loss_with_grad(probs, masks, tags).map(|(v, _)| v)
}

/// Which KL divergence the CRF consistency term measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlDirection {
    /// KL(CRF ‖ network): cross-entropy toward the CRF target.
    #[default]
    CrfToNet,
    /// KL(network ‖ CRF).
    NetToCrf,
}

/// Mean per-pixel KL divergence between the network distribution and a fixed
/// CRF target, with its gradient with respect to the network probabilities.
pub fn crf_consistency_loss_with_grad(
    net_probs: &Tensor,
    crf_probs: &Tensor,
    direction: KlDirection,
) -> Result<(f64, Vec<f64>)> {
    if net_probs.shape() != crf_probs.shape() {
        return Err(Error::shape(format!(
            "network probs {:?} vs CRF probs {:?}",
            net_probs.shape(),
            crf_probs.shape()
        )));
    }
    let (_, hw) = class_planes(net_probs)?;
    let inv_pixels = 1.0 / hw as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net_probs.len()];
    for (i, (&p, &q)) in net_probs.data().iter().zip(crf_probs.data()).enumerate() {
        let (lp, lq) = (clamp_prob(p).ln(), clamp_prob(q).ln());
        match direction {
            KlDirection::CrfToNet => {
                if q > 0.0 {
                    loss += q * (lq - lp);
                    grad[i] = -q * clamp_slope(p) / clamp_prob(p) * inv_pixels;
                }
            }
            KlDirection::NetToCrf => {
                if p > 0.0 {
                    loss += p * (lp - lq);
                }
                grad[i] = (lp - lq + p * clamp_slope(p) / clamp_prob(p)) * inv_pixels;
            }
        }
    }
    Ok((loss * inv_pixels, grad))
}

pub fn crf_consistency_loss(net_probs: &Tensor, crf_probs: &Tensor, direction: KlDirection) -> Result<f64> {
    crf_consistency_loss_with_grad(net_probs, crf_probs, direction).map(|(v, _)| v)
}

pub fn tag_loss_op(tape: &mut Tape, probs: Var, tags: &TagSet, r: f64) -> Result<Var> {
    let (v, g) = tag_loss_with_grad(tape.value(probs), tags, r)?;
    tape.reduce(probs, v, g)
}

pub fn heatmap_loss_op(tape: &mut Tape, probs: Var, masks: &[BinaryMask], tags: &TagSet) -> Result<Var> {
    let (v, g) = heatmap_loss_with_grad(tape.value(probs), masks, tags)?;
    tape.reduce(probs, v, g)
}

/// The CRF target is a constant: no gradient flows into it.
pub fn crf_consistency_op(tape: &mut Tape, probs: Var, crf_target: &Tensor, direction: KlDirection) -> Result<Var> {
    let (v, g) = crf_consistency_loss_with_grad(tape.value(probs), crf_target, direction)?;
    tape.reduce(probs, v, g)
}

/// Relative weights of the heatmap and CRF terms; the tag loss has weight 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub heatmap: f64,
    pub crf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { heatmap: 1.0, crf: 1.0 }
    }
}

/// Inputs of the full objective for one frame.
pub struct WeakTargets<'a> {
    pub tags: &'a TagSet,
    pub masks: &'a [BinaryMask],
    /// Dense-CRF refinement of the current prediction, when the CRF term is active.
    pub crf_target: Option<&'a Tensor>,
    pub weights: LossWeights,
    pub lse_r: f64,
    pub kl_direction: KlDirection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub tag_loss: f64,
    pub heatmap_loss: f64,
    pub crf_loss: f64,
    pub total: f64,
    pub lse_scores: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,tag_loss,heatmap_loss,crf_loss,total";

    pub fn csv_row(&self, iter: usize) -> String {
        let mut s = String::new();
        write!(s, "{iter},{},{},{},{}", self.tag_loss, self.heatmap_loss, self.crf_loss, self.total).unwrap();
        s
    }
}

/// Records tag + λ_h·heatmap + λ_c·crf on the tape and returns the total
/// together with its breakdown.
pub fn weak_loss(tape: &mut Tape, probs: Var, targets: &WeakTargets<'_>) -> Result<(Var, LossReport)> {
    let tag = tag_loss_op(tape, probs, targets.tags, targets.lse_r)?;
    let mut terms = vec![(tag, 1.0)];
    let mut heatmap_value = 0.0;
    if targets.weights.heatmap != 0.0 {
        let h = heatmap_loss_op(tape, probs, targets.masks, targets.tags)?;
        heatmap_value = tape.value(h).data()[0];
        terms.push((h, targets.weights.heatmap));
    }
    let mut crf_value = 0.0;
    if let (Some(target), true) = (targets.crf_target, targets.weights.crf != 0.0) {
        let c = crf_consistency_op(tape, probs, target, targets.kl_direction)?;
        crf_value = tape.value(c).data()[0];
        terms.push((c, targets.weights.crf));
    }
    let total = tape.weighted_sum(&terms)?;
    let report = LossReport {
        tag_loss: tape.value(tag).data()[0],
        heatmap_loss: heatmap_value,
        crf_loss: crf_value,
        total: tape.value(total).data()[0],
        lse_scores: lse_scores(tape.value(probs), targets.lse_r)?,
    };
    Ok((total, report))
}
