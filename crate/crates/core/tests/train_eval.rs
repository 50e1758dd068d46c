use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagseg::crf::CrfConfig;
use tagseg::eval::{evaluate, ConfusionMatrix};
use tagseg::heatmap::Heatmap;
use tagseg::losses::LossWeights;
use tagseg::net::{NetConfig, StreamWeights};
use tagseg::optim::{sgd_step, SgdConfig, SgdState};
use tagseg::params::ParamSet;
use tagseg::pipeline::{ablation_arms, RunConfig};
use tagseg::synth::{generate_clip, LabelMap, SceneSpec};
use tagseg::train::{infer, prepare_example, train, HeatmapMode, TrainConfig, TrainingExample};
use tagseg::Tensor;

#[test]
fn sgd_step_examples() {
    let mut params = ParamSet::new();
    params.push("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let mut state = SgdState::zeros_like(&params);
    let cfg = SgdConfig { base_lr: 0.1, decay_interval: 2, momentum: 0.5, weight_decay: 0.0 };
    let g = [Tensor::new(&[2], vec![1.0, 1.0]).unwrap()];
    sgd_step(&mut params, &g, &mut state, &cfg, 0).unwrap();
    assert_eq!(params.tensors()[0].data(), &[0.9, -2.1]);
    sgd_step(&mut params, &g, &mut state, &cfg, 1).unwrap();
    // v = 0.5·(−0.1) − 0.1 = −0.15
    assert!((params.tensors()[0].data()[0] - 0.75).abs() < 1e-15);
    // Iteration 2 runs at lr 0.01: v = 0.5·(−0.15) − 0.01 = −0.085
    sgd_step(&mut params, &g, &mut state, &cfg, 2).unwrap();
    assert!((params.tensors()[0].data()[0] - 0.665).abs() < 1e-15);

    let mut p = ParamSet::new();
    p.push("w", Tensor::new(&[1], vec![2.0]).unwrap());
    let mut s = SgdState::zeros_like(&p);
    let decay = SgdConfig { base_lr: 0.5, decay_interval: 10, momentum: 0.0, weight_decay: 0.1 };
    sgd_step(&mut p, &[Tensor::zeros(&[1])], &mut s, &decay, 0).unwrap();
    assert!((p.tensors()[0].data()[0] - 1.9).abs() < 1e-15);
    assert!(sgd_step(&mut p, &[], &mut s, &decay, 0).is_err());
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap { height: h, width: w, labels: (0..h * w).map(|_| rng.random_range(0..k) as u8).collect() }
}

#[test]
fn evaluate_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let n = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let preds: Vec<_> = (0..n).map(|_| random_map(&mut rng, h, w, k)).collect();
        let gts: Vec<_> = (0..n).map(|_| random_map(&mut rng, h, w, k)).collect();
        let report = evaluate(&preds, &gts, k).unwrap();

        let pairs: Vec<(usize, usize)> = preds
            .iter()
            .zip(&gts)
            .flat_map(|(p, g)| p.labels.iter().zip(&g.labels).map(|(&a, &b)| (a as usize, b as usize)))
            .collect();
        let count = |f: &dyn Fn(usize, usize) -> bool| pairs.iter().filter(|&&(p, g)| f(p, g)).count() as f64;
        let (mut ious, mut accs) = (Vec::new(), Vec::new());
        for c in 0..k {
            let tp = count(&|p, g| p == c && g == c);
            let union = count(&|p, g| p == c || g == c);
            let in_gt = count(&|_, g| g == c);
            let iou = (union > 0.0).then(|| tp / union);
            let acc = (in_gt > 0.0).then(|| tp / in_gt);
            assert_eq!(report.class_iou[c], iou);
            assert_eq!(report.class_accuracy[c], acc);
            ious.extend(iou);
            accs.extend(acc);
        }
        assert_eq!(report.miou, ious.iter().sum::<f64>() / ious.len() as f64);
        assert_eq!(report.mean_class_accuracy, accs.iter().sum::<f64>() / accs.len() as f64);
        assert_eq!(report.global_accuracy, count(&|p, g| p == g) / pairs.len() as f64);
    }
}

#[test]
fn metrics_of_the_two_class_example() {
    let m = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    let r = m.report();
    assert!((r.miou - 0.6).abs() < 1e-15);
    assert!((r.global_accuracy - 0.75).abs() < 1e-15);
    let csv = r.to_csv();
    assert!(csv.starts_with("class,iou,acc\n0,"));
    assert!(csv.contains("\nmiou,0.6"));
}

#[test]
fn metrics_are_invariant_to_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let (p, g) = (random_map(&mut rng, 5, 7, 4), random_map(&mut rng, 5, 7, 4));
    let mut perm: Vec<usize> = (0..35).collect();
    perm.shuffle(&mut rng);
    let shuffle = |m: &LabelMap| LabelMap { height: 5, width: 7, labels: perm.iter().map(|&i| m.labels[i]).collect() };
    assert_eq!(evaluate(&[p.clone()], &[g.clone()], 4).unwrap(), evaluate(&[shuffle(&p)], &[shuffle(&g)], 4).unwrap());
    assert!(evaluate(&[p.clone()], &[], 4).is_err());
    assert!(evaluate(&[p], &[g], 3).is_err());
}

fn tiny_setup(two_stream: bool, train_cfg: TrainConfig) -> (Vec<TrainingExample>, NetConfig, TrainConfig) {
    let spec = SceneSpec { height: 16, width: 16, clip_length: 6, object_size_min: 4, object_size_max: 8, ..SceneSpec::default() };
    let net = NetConfig { widths: vec![4, 8], fusion_width: 8, height: 16, width: 16, flow_frames: 2, two_stream, ..NetConfig::default() };
    let examples = (0..4)
        .map(|id| prepare_example(&generate_clip(&spec, id).unwrap(), &[], &[], &net, &train_cfg).unwrap())
        .collect();
    (examples, net, train_cfg)
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        sgd: SgdConfig { base_lr: 0.01, ..SgdConfig::default() },
        max_iterations: 50,
        heatmap_mode: HeatmapMode::Off,
        crf: CrfConfig { iterations: 2, ..CrfConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn short_training_lowers_the_loss_and_is_reproducible() {
    let (examples, net, cfg) = tiny_setup(true, smoke_config());
    let a = train(&examples, &net, &cfg).unwrap();
    assert_eq!(a.losses.len(), 50);
    let mean = |r: std::ops::Range<usize>| a.losses[r.clone()].iter().map(|l| l.total).sum::<f64>() / r.len() as f64;
    assert!(mean(40..50) < mean(0..10), "{} vs {}", mean(40..50), mean(0..10));
    let b = train(&examples, &net, &cfg).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.loss_csv(), b.loss_csv());
    let c = train(&examples, &net, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn zero_weights_reduce_to_the_tag_loss() {
    let zero = TrainConfig { weights: LossWeights { heatmap: 0.0, crf: 0.0 }, max_iterations: 10, ..smoke_config() };
    let (examples, net, cfg) = tiny_setup(false, zero);
    let out = train(&examples, &net, &cfg).unwrap();
    assert!(out.losses.iter().all(|l| l.total == l.tag_loss && l.crf_loss == 0.0));
    assert!(examples.iter().all(|e| e.crf.is_none()));
}

#[test]
fn inference_checks_resolution_and_crf_identity() {
    let (examples, net, cfg) = tiny_setup(false, TrainConfig { max_iterations: 5, ..smoke_config() });
    let weights: StreamWeights = train(&examples, &net, &cfg).unwrap().weights;
    let image = &examples[0].image;
    let plain = infer(&weights, &net, image, None, None).unwrap();
    let identity = CrfConfig { w_bilateral: 0.0, w_spatial: 0.0, ..CrfConfig::default() };
    assert_eq!(infer(&weights, &net, image, None, Some(&identity)).unwrap(), plain);
    assert_eq!((plain.height, plain.width), (16, 16));
    assert!(infer(&weights, &net, &Tensor::zeros(&[1, 3, 8, 8]), None, None).is_err());
}

#[test]
fn ablation_arms_differ_only_in_two_fields() {
    let base = RunConfig::default();
    let arms = ablation_arms(&base);
    let names: Vec<_> = arms.iter().map(|a| a.name).collect();
    assert_eq!(names, ["no_heatmap", "foreground_heatmap", "our_heatmap", "two_stream"]);
    let settings: Vec<_> = arms.iter().map(|a| (a.config.train.heatmap_mode, a.config.net.two_stream)).collect();
    assert_eq!(
        settings,
        [(HeatmapMode::Off, false), (HeatmapMode::Foreground, false), (HeatmapMode::All, false), (HeatmapMode::All, true)]
    );
    for arm in &arms {
        let mut normalized = arm.config.clone();
        normalized.train.heatmap_mode = base.train.heatmap_mode;
        normalized.net.two_stream = base.net.two_stream;
        assert_eq!(normalized, base, "{}", arm.name);
        // The text form differs in exactly the two lines.
        let diff: Vec<_> = arm
            .config
            .to_key_values()
            .lines()
            .zip(base.to_key_values().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.split('=').next().unwrap().trim().to_string())
            .collect();
        assert!(diff.iter().all(|k| k == "train.heatmap_mode" || k == "net.two_stream"), "{diff:?}");
    }
}

#[test]
fn each_ablated_ingredient_changes_the_model() {
    let base_cfg = TrainConfig { max_iterations: 8, heatmap_mode: HeatmapMode::All, ..smoke_config() };
    let spec = SceneSpec { height: 16, width: 16, clip_length: 6, object_size_min: 4, object_size_max: 8, ..SceneSpec::default() };
    let run = |two_stream: bool, cfg: &TrainConfig| {
        let net = NetConfig { widths: vec![4, 8], fusion_width: 8, height: 16, width: 16, flow_frames: 2, two_stream, ..NetConfig::default() };
        let classes: Vec<usize> = if cfg.heatmap_mode == HeatmapMode::Off { vec![] } else { (0..5).collect() };
        let examples: Vec<_> = (0..3)
            .map(|id| {
                let clip = generate_clip(&spec, id).unwrap();
                // Ground-truth regions stand in for heatmaps: only the plumbing is under test.
                let gt = &clip.gt[clip.reference()];
                let heatmaps: Vec<Heatmap> = clip
                    .tags
                    .present()
                    .map(|k| {
                        let map = Tensor::from_fn(&[1, 1, 16, 16], |p| if gt.labels[p] as usize == k { 1.0 } else { 0.0 });
                        Heatmap::new(k, map).unwrap()
                    })
                    .collect();
                prepare_example(&clip, &heatmaps, &classes, &net, cfg).unwrap()
            })
            .collect();
        train(&examples, &net, cfg).unwrap().weights
    };
    let full = run(true, &base_cfg);
    let no_heatmap = run(true, &TrainConfig { heatmap_mode: HeatmapMode::Off, ..base_cfg.clone() });
    let no_crf = run(true, &TrainConfig { weights: LossWeights { crf: 0.0, ..LossWeights::default() }, ..base_cfg.clone() });
    let no_motion = run(false, &base_cfg);
    assert_ne!(full, no_heatmap);
    assert_ne!(full, no_crf);
    assert_ne!(no_heatmap, no_crf);
    assert_ne!(full.params.len(), no_motion.params.len());
    assert_eq!(full, run(true, &base_cfg));
}
