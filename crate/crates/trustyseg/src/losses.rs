//! Pseudo-label construction and the training objective.
//!
//! The objective is `cls + alpha*focal + beta*dice + gamma*trusty_dice`:
//! binary cross entropy on per-channel presence, focal and dice terms on the
//! raw class maps against one-hot maps of the ground truth, and a dice term
//! that pushes the trusty map toward the seen/unseen indicator.

use crate::embeddings::{ClassVocabulary, LabelMap};
use crate::error::{Error, Result};
use crate::head::SegOutputs;
use crate::tensor::Tensor;

/// Probability clamp applied before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 20.0,
            beta: 1.0,
            gamma: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// How the objective treats channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Supervise unseen channels too (fully supervised training, or the
    /// self-training phase once pseudo labels exist).
    pub include_unseen_channels: bool,
    /// Let the trusty channel contribute a presence target.
    pub include_trusty_presence: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            include_unseen_channels: false,
            include_trusty_presence: true,
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub focal: f64,
    pub dice: f64,
    pub trusty: f64,
    pub total: f64,
}

/// Binary supervision for the trusty map: 1 on seen-class pixels, 0 on
/// unseen or masked pixels.
pub fn make_pseudo_trusty_labels(labels: &LabelMap, vocab: &ClassVocabulary) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len());
    for &l in &labels.data {
        if vocab.is_seen(l) {
            data.push(1.0);
        } else if vocab.is_unseen(l) || l == vocab.masked_label() {
            data.push(0.0);
        } else {
            return Err(Error::UnknownLabel {
                label: l,
                classes: vocab.class_count(),
            });
        }
    }
    Tensor::from_vec(vec![labels.height, labels.width], data)
}

/// Dice loss `1 - (2*intersection + eps) / (sum_pred + sum_target + eps)`.
///
/// A rank-3 input is treated as channels along the first axis and the
/// per-channel losses are averaged; lower ranks are a single map.
pub fn dice_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let (channels, per) = match *pred.shape() {
        [c, h, w] => (c, h * w),
        _ => (1, pred.numel()),
    };
    let pred_flat = pred.reshape(vec![channels, per])?;
    let target_flat = target.reshape(vec![channels, per])?;
    let mut acc: Option<Tensor> = None;
    for c in 0..channels {
        let p = pred_flat.slice_rows(c, c + 1)?;
        let t = target_flat.slice_rows(c, c + 1)?;
        let intersection = p.mul(&t)?.sum_all();
        let numerator = intersection.mul_scalar(2.0).add_scalar(eps);
        let denominator = p.sum_all().add(&t.sum_all())?.add_scalar(eps);
        let channel = numerator.div(&denominator)?.mul_scalar(-1.0).add_scalar(1.0);
        acc = Some(match acc {
            None => channel,
            Some(sum) => sum.add(&channel)?,
        });
    }
    Ok(acc.expect("at least one channel").mul_scalar(1.0 / channels as f64))
}

/// Per-element focal terms `alpha_t (1 - p_t)^gamma ln(p_t)` (pre-negation).
fn focal_elements(pred: &Tensor, target: &Tensor, params: &FocalParams) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    // p_t = t*p + (1-t)*(1-p) = (2t - 1) * p + (1 - t)
    let sign = Tensor::from_vec(
        target.shape().to_vec(),
        target.values().iter().map(|t| 2.0 * t - 1.0).collect(),
    )?;
    let offset = Tensor::from_vec(
        target.shape().to_vec(),
        target.values().iter().map(|t| 1.0 - t).collect(),
    )?;
    let alpha_t = Tensor::from_vec(
        target.shape().to_vec(),
        target
            .values()
            .iter()
            .map(|t| t * params.alpha + (1.0 - t) * (1.0 - params.alpha))
            .collect(),
    )?;
    let p_t = pred
        .mul(&sign)?
        .add(&offset)?
        .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let focus = p_t.mul_scalar(-1.0).add_scalar(1.0).powf_scalar(params.gamma);
    alpha_t.mul(&focus)?.mul(&p_t.ln())
}

/// Focal loss, mean over elements of `-alpha_t (1 - p_t)^gamma ln(p_t)`.
///
/// `p_t` is the prediction where the target is 1 and its complement where
/// the target is 0; predictions are clamped away from 0 and 1 before the
/// logarithm.
pub fn focal_loss(pred: &Tensor, target: &Tensor, params: &FocalParams) -> Result<Tensor> {
    Ok(focal_elements(pred, target, params)?
        .mean_all()
        .mul_scalar(-1.0))
}

/// Presence BCE over the channels selected by `weights` (0/1 per channel).
fn masked_bce(presence: &Tensor, targets: &[f64], weights: &[f64]) -> Result<Tensor> {
    let k = presence.numel();
    debug_assert_eq!(targets.len(), k);
    debug_assert_eq!(weights.len(), k);
    let y = Tensor::from_vec(vec![k], targets.to_vec())?;
    let y_off = Tensor::from_vec(vec![k], targets.iter().map(|t| 1.0 - t).collect())?;
    let w = Tensor::from_vec(vec![k], weights.to_vec())?;
    let included: f64 = weights.iter().sum();
    let p = presence.reshape(vec![k])?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let one_minus = p.mul_scalar(-1.0).add_scalar(1.0);
    let bce = y
        .mul(&p.ln())?
        .add(&y_off.mul(&one_minus.ln())?)?
        .mul_scalar(-1.0);
    Ok(bce.mul(&w)?.sum_all().mul_scalar(1.0 / included))
}

/// Binary cross entropy between presence probabilities and per-channel
/// "class occurs in this image" indicators.
pub fn cls_loss(
    presence: &Tensor,
    labels: &LabelMap,
    vocab: &ClassVocabulary,
    include_unseen: bool,
    include_trusty: bool,
) -> Result<Tensor> {
    let k = presence.numel();
    let classes = vocab.class_count();
    let has_trusty = k == classes + 1;
    if !has_trusty && k != classes {
        return Err(Error::InvalidShape {
            op: "cls_loss",
            shape: presence.shape().to_vec(),
            reason: format!("expected {classes} or {} presence entries", classes + 1),
        });
    }
    let mut targets = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for c in 0..classes {
        let included = vocab.is_seen(c) || include_unseen;
        if included {
            weights[c] = 1.0;
            if labels.data.iter().any(|&l| l == c) {
                targets[c] = 1.0;
            }
        }
    }
    if has_trusty && include_trusty {
        weights[classes] = 1.0;
        if labels.data.iter().any(|&l| vocab.is_seen(l)) {
            targets[classes] = 1.0;
        }
    }
    masked_bce(presence, &targets, &weights)
}

/// One-hot map of class `c` over the labels; masked pixels are zero.
fn channel_target(labels: &LabelMap, class: usize) -> Vec<f64> {
    labels
        .data
        .iter()
        .map(|&l| if l == class { 1.0 } else { 0.0 })
        .collect()
}

pub const DICE_EPS: f64 = 1.0;

/// Full objective; returns the differentiable total and its components.
pub fn total_loss(
    outputs: &SegOutputs,
    labels: &LabelMap,
    vocab: &ClassVocabulary,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    let (h, w) = outputs.grid;
    if labels.height != h || labels.width != w {
        return Err(Error::Dataset(format!(
            "labels {}x{} do not match the {h}x{w} output grid",
            labels.height, labels.width
        )));
    }
    let n = h * w;
    let classes = vocab.class_count();
    let included: Vec<usize> = (0..classes)
        .filter(|&c| vocab.is_seen(c) || cfg.include_unseen_channels)
        .collect();

    let raw_flat = outputs.raw_maps.reshape(vec![classes, n])?;
    let picked = raw_flat.gather_rows(&included)?;
    let mut target_values = Vec::with_capacity(included.len() * n);
    for &c in &included {
        target_values.extend(channel_target(labels, c));
    }
    let target_flat = Tensor::from_vec(vec![included.len(), n], target_values)?;

    let focal = focal_loss(&picked, &target_flat, &cfg.focal)?;
    let dice = dice_loss(
        &picked.reshape(vec![included.len(), h, w])?,
        &target_flat.reshape(vec![included.len(), h, w])?,
        DICE_EPS,
    )?;
    let cls = cls_loss(
        &outputs.presence,
        labels,
        vocab,
        cfg.include_unseen_channels,
        cfg.include_trusty_presence,
    )?;
    let trusty = match &outputs.trusty_map {
        Some(map) => dice_loss(map, &make_pseudo_trusty_labels(labels, vocab)?, DICE_EPS)?,
        None => Tensor::scalar(0.0),
    };

    let total = cls
        .add(&focal.mul_scalar(cfg.weights.alpha))?
        .add(&dice.mul_scalar(cfg.weights.beta))?
        .add(&trusty.mul_scalar(cfg.weights.gamma))?;
    let report = LossReport {
        cls: cls.item(),
        focal: focal.item(),
        dice: dice.item(),
        trusty: trusty.item(),
        total: total.item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{generate_toy_dataset, ToyConfig};
    use crate::head::{forward, HeadConfig, HeadParams};

    fn vocab_2_2() -> ClassVocabulary {
        ClassVocabulary::synthetic(4, 2).unwrap()
    }

    #[test]
    fn pseudo_labels_follow_the_seen_rule() {
        let vocab = vocab_2_2();
        let all_seen = LabelMap::new(1, 4, vec![0, 1, 0, 1]).unwrap();
        assert_eq!(
            make_pseudo_trusty_labels(&all_seen, &vocab).unwrap().values(),
            [1.0, 1.0, 1.0, 1.0]
        );
        let all_masked = LabelMap::new(2, 2, vec![4, 4, 4, 4]).unwrap();
        assert_eq!(
            make_pseudo_trusty_labels(&all_masked, &vocab).unwrap().values(),
            [0.0; 4]
        );
        // seen, unseen, seen, masked
        let mixed = LabelMap::new(2, 2, vec![0, 2, 1, 4]).unwrap();
        assert_eq!(
            make_pseudo_trusty_labels(&mixed, &vocab).unwrap().values(),
            [1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn pseudo_labels_reject_out_of_range() {
        let vocab = vocab_2_2();
        let bad = LabelMap::new(1, 1, vec![9]).unwrap();
        assert!(matches!(
            make_pseudo_trusty_labels(&bad, &vocab),
            Err(Error::UnknownLabel { label: 9, .. })
        ));
    }

    #[test]
    fn pseudo_labels_invariant_to_relabeling_within_partitions() {
        let vocab = vocab_2_2();
        let a = LabelMap::new(1, 4, vec![0, 2, 1, 3]).unwrap();
        let b = LabelMap::new(1, 4, vec![1, 3, 0, 2]).unwrap(); // swap within seen and within unseen
        assert_eq!(
            make_pseudo_trusty_labels(&a, &vocab).unwrap().values(),
            make_pseudo_trusty_labels(&b, &vocab).unwrap().values()
        );
    }

    #[test]
    fn dice_identity_and_disjoint_cases() {
        let target = Tensor::from_vec(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let same = dice_loss(&target, &target, 1e-12).unwrap();
        assert!(same.item().abs() < 1e-9);

        let opposite = Tensor::from_vec(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let loss = dice_loss(&opposite, &target, 1e-12).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_hand_oracle() {
        let pred = Tensor::from_vec(vec![2], vec![0.5, 0.5]).unwrap();
        let target = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let loss = dice_loss(&pred, &target, 1e-12).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dice_eps_bias_is_small_on_large_match() {
        let n = 1200;
        let target = Tensor::filled(vec![n], 1.0);
        let loss = dice_loss(&target, &target, DICE_EPS).unwrap();
        assert!(loss.item().abs() < 1e-3, "bias {}", loss.item());
    }

    #[test]
    fn dice_multichannel_averages() {
        let pred = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let target = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // channel 0 perfect (0), channel 1 disjoint (1) => mean 0.5
        let loss = dice_loss(&pred, &target, 1e-12).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn focal_hand_oracle() {
        let pred = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let target = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let loss = focal_loss(&pred, &target, &FocalParams::default()).unwrap();
        let want = -0.25 * 0.25 * 0.5f64.ln();
        assert!((loss.item() - want).abs() < 1e-12, "{} vs {want}", loss.item());
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let pred = Tensor::from_vec(vec![5], vec![0.9, 0.2, 0.5, 0.7, 0.01]).unwrap();
        let target = Tensor::from_vec(vec![5], vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let focal = focal_loss(
            &pred,
            &target,
            &FocalParams {
                alpha: 0.5,
                gamma: 0.0,
            },
        )
        .unwrap();
        let mut bce = 0.0;
        for (p, t) in pred.values().iter().zip(target.values()) {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        bce /= 5.0;
        assert!((focal.item() - 0.5 * bce).abs() < 1e-9);
    }

    #[test]
    fn focal_vanishes_for_confident_correct() {
        let pred = Tensor::from_vec(vec![1], vec![1.0 - 1e-9]).unwrap();
        let target = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let loss = focal_loss(&pred, &target, &FocalParams::default()).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn cls_examples() {
        let vocab = vocab_2_2();
        // channels: 2 seen + 2 unseen + trusty; inductive excludes unseen
        let labels = LabelMap::new(1, 2, vec![0, 4]).unwrap();
        // class 0 present, class 1 absent, trusty target 1 (a seen pixel exists)
        let exact = Tensor::from_vec(
            vec![5],
            vec![1.0 - PROB_CLAMP, PROB_CLAMP, 0.5, 0.5, 1.0 - PROB_CLAMP],
        )
        .unwrap();
        let loss = cls_loss(&exact, &labels, &vocab, false, true).unwrap();
        assert!(loss.item() < 1e-6, "loss {}", loss.item());

        let uniform = Tensor::filled(vec![5], 0.5);
        let loss = cls_loss(&uniform, &labels, &vocab, false, true).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-9);

        // single included channel: y = 1, P = 0.75 => -ln 0.75
        let single_vocab = ClassVocabulary::new(
            vec!["a".into(), "b".into()],
            &[1],
        )
        .unwrap();
        let labels = LabelMap::new(1, 1, vec![0]).unwrap();
        let p = Tensor::from_vec(vec![2], vec![0.75, 0.9]).unwrap();
        let loss = cls_loss(&p, &labels, &single_vocab, false, true).unwrap();
        assert!((loss.item() - -(0.75f64.ln())).abs() < 1e-9);
    }

    fn toy_outputs(
        gamma: f64,
        use_learner: bool,
        include_trusty_presence: bool,
    ) -> (HeadParams, LossReport, Option<Vec<f64>>) {
        let (vocab, samples) = generate_toy_dataset(&ToyConfig {
            seed: 40,
            class_count: 4,
            unseen_count: 1,
            dim: 8,
            grid: (4, 4),
            samples: 1,
            noise: 0.3,
        })
        .unwrap();
        let sample = &samples[0];
        let params = HeadParams::init(41, 8, 2).unwrap();
        let head_cfg = HeadConfig {
            use_learner,
            ..HeadConfig::default()
        };
        let outputs = forward(&params, &sample.bundle, &head_cfg).unwrap();
        let cfg = LossConfig {
            weights: LossWeights {
                gamma,
                ..LossWeights::default()
            },
            include_trusty_presence,
            ..LossConfig::default()
        };
        let (total, report) = total_loss(&outputs, &sample.labels, &vocab, &cfg).unwrap();
        total.backward().unwrap();
        let grad = params.trusty_token.grad();
        (params, report, grad)
    }

    #[test]
    fn trusty_gradient_flows_when_weighted() {
        let (_, _, grad) = toy_outputs(10.0, true, true);
        let norm: f64 = grad.unwrap().iter().map(|g| g * g).sum();
        assert!(norm > 0.0, "expected a nonzero trusty-token gradient");
    }

    #[test]
    fn trusty_gradient_is_isolated_without_mixing() {
        // No learner attention, no trusty presence target, gamma = 0: the
        // trusty row cannot influence any supervised channel, so its
        // gradient must vanish identically.
        let (_, _, grad) = toy_outputs(0.0, false, false);
        let grad = grad.unwrap_or_default();
        assert!(
            grad.iter().all(|&g| g == 0.0),
            "expected an identically zero gradient, got {grad:?}"
        );
    }

    #[test]
    fn report_total_recomposes_exactly() {
        let (_, report, _) = toy_outputs(10.0, true, true);
        let w = LossWeights::default();
        let recomposed =
            ((report.cls + w.alpha * report.focal) + w.beta * report.dice) + w.gamma * report.trusty;
        assert_eq!(recomposed.to_bits(), report.total.to_bits());
    }

    #[test]
    fn all_components_non_negative_and_dice_bounded() {
        let (_, report, _) = toy_outputs(10.0, true, true);
        assert!(report.cls >= 0.0);
        assert!(report.focal >= 0.0);
        assert!(report.dice >= 0.0 && report.dice <= 1.0 + DICE_EPS);
        assert!(report.trusty >= 0.0 && report.trusty <= 1.0 + DICE_EPS);
    }

    #[test]
    fn gamma_zero_drops_the_trusty_term_from_the_total() {
        let (_, with_gamma, _) = toy_outputs(10.0, true, true);
        let (_, without, _) = toy_outputs(0.0, true, true);
        assert_eq!(with_gamma.cls.to_bits(), without.cls.to_bits());
        assert_eq!(with_gamma.focal.to_bits(), without.focal.to_bits());
        assert_eq!(with_gamma.dice.to_bits(), without.dice.to_bits());
        let baseline = without.cls + 20.0 * without.focal + without.dice;
        assert!((without.total - baseline).abs() < 1e-15);
    }

    #[test]
    fn saturated_predictions_make_every_component_small() {
        let (vocab, samples) = generate_toy_dataset(&ToyConfig {
            seed: 50,
            class_count: 3,
            unseen_count: 1,
            dim: 8,
            grid: (16, 16),
            samples: 1,
            noise: 0.0,
        })
        .unwrap();
        let sample = &samples[0];
        let n = sample.labels.len();
        let classes = vocab.class_count();
        let clamp = |v: f64| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let mut raw = Vec::with_capacity(classes * n);
        for c in 0..classes {
            for &l in &sample.labels.data {
                raw.push(clamp(if l == c { 1.0 } else { 0.0 }));
            }
        }
        let trusty: Vec<f64> = sample
            .labels
            .data
            .iter()
            .map(|&l| clamp(if vocab.is_seen(l) { 1.0 } else { 0.0 }))
            .collect();
        let mut presence: Vec<f64> = (0..classes)
            .map(|c| clamp(if sample.labels.data.contains(&c) { 1.0 } else { 0.0 }))
            .collect();
        presence.push(clamp(1.0));
        let mut combined = raw.clone();
        combined.extend_from_slice(&trusty);
        let outputs = SegOutputs {
            mask_logits: Tensor::zeros(vec![classes + 1, n]),
            mask: Tensor::from_vec(vec![classes + 1, n], combined.clone()).unwrap(),
            presence: Tensor::from_vec(vec![classes + 1], presence).unwrap(),
            combined: Tensor::from_vec(vec![classes + 1, 16, 16], combined).unwrap(),
            trusty_map: Some(Tensor::from_vec(vec![16, 16], trusty).unwrap()),
            raw_maps: Tensor::from_vec(vec![classes, 16, 16], raw).unwrap(),
            grid: (16, 16),
        };
        let cfg = LossConfig {
            include_unseen_channels: true,
            ..LossConfig::default()
        };
        let (_, report) = total_loss(&outputs, &sample.labels, &vocab, &cfg).unwrap();
        assert!(report.cls < 1e-3, "cls {}", report.cls);
        assert!(report.focal < 1e-3, "focal {}", report.focal);
        assert!(report.dice < 1e-2, "dice {}", report.dice);
        assert!(report.trusty < 1e-2, "trusty {}", report.trusty);
    }
}
