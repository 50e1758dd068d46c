use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagseg::autodiff::grad_check;
use tagseg::heatmap::BinaryMask;
use tagseg::losses::{
    crf_consistency_loss, heatmap_loss, lse_pool, lse_scores, tag_loss, weak_loss, KlDirection, LossWeights, TagSet,
    WeakTargets, PROB_EPS,
};
use tagseg::Tensor;

/// K×H×W per-pixel distributions from random scores.
fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let raw: Vec<f64> = (0..k * hw).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
    Tensor::from_fn(&[k, h, w], |i| {
        let p = i % hw;
        raw[i] / (0..k).map(|c| raw[c * hw + p]).sum::<f64>()
    })
}

#[test]
fn lse_examples() {
    assert_eq!(lse_pool(&[0.37; 10], 5.0).unwrap(), 0.37);
    let direct = ((1f64.exp() + 4f64.exp()) / 2.0).ln() / 5.0;
    assert!((lse_pool(&[0.2, 0.8], 5.0).unwrap() - direct).abs() < 1e-12);
    assert!((lse_pool(&[0.2, 0.8], 5.0).unwrap() - 0.6711).abs() < 1e-4);
    let large = lse_pool(&[0.2, 0.8], 50.0).unwrap();
    assert!((0.8 - large).abs() < 0.02);
}

proptest! {
    #[test]
    fn lse_between_mean_and_max_and_monotone_in_r(map in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut prev = f64::NEG_INFINITY;
        for r in [0.1, 0.5, 1.0, 5.0, 20.0, 50.0] {
            let s = lse_pool(&map, r).unwrap();
            prop_assert!(s >= mean - 1e-12 && s <= max + 1e-12);
            prop_assert!(s >= prev - 1e-12);
            prev = s;
        }
    }
}

#[test]
fn tag_loss_examples() {
    let tags = TagSet::new([0], 2).unwrap();
    let uniform = Tensor::full(&[2, 3, 3], 0.5);
    assert!((tag_loss(&uniform, &tags, 5.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);

    let tags = TagSet::new([1, 2], 4).unwrap();
    let perfect = Tensor::from_fn(&[4, 2, 2], |i| if i / 4 == 1 || i / 4 == 2 { 0.5 } else { 0.0 });
    // Both present channels at 0.5; absent channels at 0 only pay the log clamp.
    let expected = 2f64.ln() - (1.0 - PROB_EPS).ln();
    assert!((tag_loss(&perfect, &tags, 5.0).unwrap() - expected).abs() < 1e-12);
    let one_hot = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
    assert!(tag_loss(&one_hot, &TagSet::new([0], 2).unwrap(), 5.0).unwrap() <= 1e-6);
}

#[test]
fn tag_loss_matches_recomputation_from_lse() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let k = rng.random_range(2..6);
        let probs = random_probs(&mut rng, k, 5, 4);
        let present: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        let present = if present.is_empty() { vec![0] } else { present };
        let tags = TagSet::new(present.clone(), k).unwrap();
        let s = lse_scores(&probs, 5.0).unwrap();
        let clamp = |v: f64| v.clamp(1e-8, 1.0 - 1e-8);
        let absent: Vec<usize> = (0..k).filter(|c| !present.contains(c)).collect();
        let mut expected = -present.iter().map(|&c| clamp(s[c]).ln()).sum::<f64>() / present.len() as f64;
        if !absent.is_empty() {
            expected -= absent.iter().map(|&c| (1.0 - clamp(s[c])).ln()).sum::<f64>() / absent.len() as f64;
        }
        assert!((tag_loss(&probs, &tags, 5.0).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn heatmap_loss_examples() {
    let tags = TagSet::new([0], 2).unwrap();
    let probs = Tensor::new(&[2, 1, 3], vec![0.5, 0.25, 0.9, 0.5, 0.75, 0.1]).unwrap();
    let mask = BinaryMask::from_bits(0, 1, 3, vec![true, true, false]).unwrap();
    let v = heatmap_loss(&probs, &[mask], &tags).unwrap();
    assert!((v - 1.5 * 2f64.ln()).abs() < 1e-12);

    let sure = Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let full = BinaryMask::from_bits(0, 1, 2, vec![true, true]).unwrap();
    let clamped = -(1.0 - PROB_EPS).ln();
    assert!((heatmap_loss(&sure, &[full], &tags).unwrap() - clamped).abs() < 1e-15);
    assert_eq!(heatmap_loss(&sure, &[BinaryMask::empty(0, 1, 2)], &tags).unwrap(), 0.0);
    let wrong = BinaryMask::from_bits(0, 2, 1, vec![true, true]).unwrap();
    assert!(heatmap_loss(&sure, &[wrong], &tags).is_err());
}

#[test]
fn losses_fall_as_present_probability_rises() {
    let tags = TagSet::new([0], 3).unwrap();
    let mask = BinaryMask::from_bits(0, 2, 2, vec![true; 4]).unwrap();
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for step in 1..=9 {
        let p = step as f64 / 10.0;
        let probs = Tensor::from_fn(&[3, 2, 2], |i| if i < 4 { p } else { (1.0 - p) / 2.0 });
        let t = tag_loss(&probs, &tags, 5.0).unwrap();
        let h = heatmap_loss(&probs, std::slice::from_ref(&mask), &tags).unwrap();
        assert!(t >= 0.0 && h >= 0.0);
        assert!(t < prev.0 && h < prev.1);
        prev = (t, h);
    }
}

#[test]
fn crf_consistency_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = random_probs(&mut rng, 3, 4, 4);
    assert_eq!(crf_consistency_loss(&p, &p, KlDirection::CrfToNet).unwrap(), 0.0);
    let crf = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
    let net = Tensor::new(&[2, 1, 1], vec![0.5, 0.5]).unwrap();
    let expected = 2f64.ln() + (1.0 - PROB_EPS).ln();
    assert!((crf_consistency_loss(&net, &crf, KlDirection::CrfToNet).unwrap() - expected).abs() < 1e-12);
    assert!(crf_consistency_loss(&net, &p, KlDirection::CrfToNet).is_err());
    for _ in 0..1000 {
        let (a, b) = (random_probs(&mut rng, 3, 2, 2), random_probs(&mut rng, 3, 2, 2));
        for d in [KlDirection::CrfToNet, KlDirection::NetToCrf] {
            assert!(crf_consistency_loss(&a, &b, d).unwrap() >= 0.0);
        }
    }
}

#[test]
fn total_loss_gradient_wrt_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for direction in [KlDirection::CrfToNet, KlDirection::NetToCrf] {
        for _ in 0..3 {
            let (k, h, w) = (3, 8, 8);
            let scores = Tensor::from_fn(&[1, k, h, w], |_| rng.random_range(-2.0..2.0));
            let tags = TagSet::new([0, 2], k).unwrap();
            let masks: Vec<BinaryMask> = [0, 2]
                .iter()
                .map(|&c| BinaryMask::from_bits(c, h, w, (0..h * w).map(|_| rng.random_bool(0.4)).collect()).unwrap())
                .collect();
            let target = random_probs(&mut rng, k, h, w).reshape(&[1, k, h, w]).unwrap();
            let err = grad_check(
                |tape, s| {
                    let p = tape.softmax_channels(s)?;
                    let targets = WeakTargets {
                        tags: &tags,
                        masks: &masks,
                        crf_target: Some(&target),
                        weights: LossWeights { heatmap: 0.7, crf: 1.3 },
                        lse_r: 5.0,
                        kl_direction: direction,
                    };
                    Ok(weak_loss(tape, p, &targets)?.0)
                },
                &scores,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{direction:?}: {err}");
        }
    }
}

#[test]
fn report_total_is_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let probs = random_probs(&mut rng, 3, 4, 4).reshape(&[1, 3, 4, 4]).unwrap();
    let tags = TagSet::new([1], 3).unwrap();
    let masks = [BinaryMask::from_bits(1, 4, 4, (0..16).map(|i| i % 3 == 0).collect()).unwrap()];
    let target = random_probs(&mut rng, 3, 4, 4).reshape(&[1, 3, 4, 4]).unwrap();
    let mut tape = tagseg::autodiff::Tape::new();
    let p = tape.leaf(probs);
    let weights = LossWeights { heatmap: 0.5, crf: 2.0 };
    let targets = WeakTargets {
        tags: &tags,
        masks: &masks,
        crf_target: Some(&target),
        weights,
        lse_r: 5.0,
        kl_direction: KlDirection::default(),
    };
    let (total, r) = weak_loss(&mut tape, p, &targets).unwrap();
    let expected = r.tag_loss + 0.5 * r.heatmap_loss + 2.0 * r.crf_loss;
    assert!((r.total - expected).abs() < 1e-12);
    assert_eq!(tape.value(total).data()[0], r.total);
    assert_eq!(r.lse_scores.len(), 3);
    assert_eq!(r.csv_row(3).split(',').count(), 5);
}
