use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagseg::crf::{free_energy, mean_field, CrfConfig, DenseCrf, DenseKernel, PixelFeatures, UpdateMode};
use tagseg::Tensor;

fn random_probs(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let raw: Vec<f64> = (0..k * hw).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
    Tensor::from_fn(&[k, h, w], |i| raw[i] / (0..k).map(|c| raw[c * hw + i % hw]).sum::<f64>())
}

fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PixelFeatures {
    let colors = (0..h * w).map(|_| [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]).collect();
    PixelFeatures::new(h, w, colors).unwrap()
}

fn kappa(cfg: &CrfConfig, width: usize, dp: f64, dc: f64) -> f64 {
    let sa = if cfg.scale_sigma_alpha { cfg.sigma_alpha * width as f64 / 500.0 } else { cfg.sigma_alpha };
    cfg.w_bilateral * (-dp / (2.0 * sa * sa) - dc / (2.0 * cfg.sigma_beta * cfg.sigma_beta)).exp()
        + cfg.w_spatial * (-dp / (2.0 * cfg.sigma_gamma * cfg.sigma_gamma)).exp()
}

/// Q_i(k) ∝ p_i(k) · exp(−κ Σ_{k'≠k} Q_j(k')) for a two-pixel image.
fn update(p: [f64; 2], q_other: [f64; 2], kappa: f64) -> [f64; 2] {
    let a = p[0] * (-kappa * q_other[1]).exp();
    let b = p[1] * (-kappa * q_other[0]).exp();
    [a / (a + b), b / (a + b)]
}

#[test]
fn two_pixel_update_matches_exhaustive_formula() {
    let colors = vec![[40.0, 50.0, 60.0]; 2];
    let features = PixelFeatures::new(1, 2, colors).unwrap();
    for scale in [false, true] {
        let cfg = CrfConfig { iterations: 1, scale_sigma_alpha: scale, ..CrfConfig::default() };
        let k = kappa(&cfg, 2, 1.0, 0.0);
        let unary = Tensor::new(&[2, 1, 2], vec![0.6, 0.6, 0.4, 0.4]).unwrap();

        let seq = mean_field(&unary, &features, &CrfConfig { update_mode: UpdateMode::Sequential, ..cfg.clone() }).unwrap();
        let q0 = update([0.6, 0.4], [0.6, 0.4], k);
        let q1 = update([0.6, 0.4], q0, k);
        let d = seq.data();
        for (got, want) in [(d[0], q0[0]), (d[2], q0[1]), (d[1], q1[0]), (d[3], q1[1])] {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }

        let par = mean_field(&unary, &features, &cfg).unwrap();
        let both = update([0.6, 0.4], [0.6, 0.4], k);
        let d = par.data();
        for (got, want) in [(d[0], both[0]), (d[1], both[0]), (d[2], both[1]), (d[3], both[1])] {
            assert!((got - want).abs() < 1e-10);
        }
    }
}

#[test]
fn kernel_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let f = random_features(&mut rng, 3, 4);
    let cfg = CrfConfig::default();
    let kernel = DenseKernel::new(&f, &cfg).unwrap();
    for i in 0..12 {
        assert_eq!(kernel.get(i, i), 0.0);
        for j in 0..12 {
            if i == j {
                continue;
            }
            let dp = ((i % 4) as f64 - (j % 4) as f64).powi(2) + ((i / 4) as f64 - (j / 4) as f64).powi(2);
            let dc: f64 = (0..3).map(|c| (f.colors[i][c] - f.colors[j][c]).powi(2)).sum();
            assert!((kernel.get(i, j) - kappa(&cfg, 4, dp, dc)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_pairwise_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = CrfConfig { w_bilateral: 0.0, w_spatial: 0.0, ..CrfConfig::default() };
    for _ in 0..20 {
        let p = random_probs(&mut rng, 4, 5, 6);
        let out = mean_field(&p, &random_features(&mut rng, 5, 6), &cfg).unwrap();
        assert_eq!(out, p);
    }
}

#[test]
fn sequential_free_energy_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for instance in 0..200 {
        let (h, w, k) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(2..=4));
        let unary = random_probs(&mut rng, k, h, w);
        let features = random_features(&mut rng, h, w);
        let cfg = CrfConfig {
            update_mode: UpdateMode::Sequential,
            w_bilateral: rng.random_range(0.0..10.0),
            w_spatial: rng.random_range(0.0..3.0),
            ..CrfConfig::default()
        };
        let mut prev = free_energy(&unary, &unary, &features, &cfg).unwrap();
        for sweeps in 1..=5 {
            let q = mean_field(&unary, &features, &CrfConfig { iterations: sweeps, ..cfg.clone() }).unwrap();
            let e = free_energy(&q, &unary, &features, &cfg).unwrap();
            assert!(e <= prev + 1e-9 * prev.abs().max(1.0), "instance {instance}, sweep {sweeps}: {e} > {prev}");
            prev = e;
        }
    }
}

#[test]
fn free_energy_without_pairwise_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let cfg = CrfConfig { w_bilateral: 0.0, w_spatial: 0.0, ..CrfConfig::default() };
    let p = random_probs(&mut rng, 3, 4, 4);
    let q = random_probs(&mut rng, 3, 4, 4);
    let f = random_features(&mut rng, 4, 4);
    let direct: f64 = q.data().iter().zip(p.data()).map(|(&qv, &pv)| qv * (qv.ln() - pv.ln())).sum();
    assert!((free_energy(&q, &p, &f, &cfg).unwrap() - direct).abs() < 1e-12);
    assert!(free_energy(&p, &p, &f, &cfg).unwrap().abs() < 1e-12);
}

#[test]
fn outputs_are_distributions_and_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for mode in [UpdateMode::Parallel, UpdateMode::Sequential] {
        let cfg = CrfConfig { update_mode: mode, ..CrfConfig::default() };
        let (k, h, w) = (3, 5, 5);
        let p = random_probs(&mut rng, k, h, w);
        let f = random_features(&mut rng, h, w);
        let out = mean_field(&p, &f, &cfg).unwrap();
        let hw = h * w;
        for i in 0..hw {
            let s: f64 = (0..k).map(|c| out.data()[c * hw + i]).sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert!((0..k).all(|c| out.data()[c * hw + i] >= 0.0));
        }
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| Tensor::from_fn(&[k, h, w], |i| t.data()[perm[i / hw] * hw + i % hw]);
        let out_p = mean_field(&permute(&p), &f, &cfg).unwrap();
        assert!(out_p.max_abs_diff(&permute(&out)) < 1e-12);
    }
}

#[test]
fn vanishing_potts_weight_recovers_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let p = random_probs(&mut rng, 3, 6, 6);
    let f = random_features(&mut rng, 6, 6);
    for (weight, tol) in [(1e-6, 1e-4), (1e-9, 1e-7)] {
        let cfg = CrfConfig { w_bilateral: weight, w_spatial: weight, ..CrfConfig::default() };
        assert!(mean_field(&p, &f, &cfg).unwrap().max_abs_diff(&p) < tol);
    }
}

#[test]
fn solver_reuse_matches_one_shot() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let f = random_features(&mut rng, 4, 4);
    let cfg = CrfConfig::default();
    let crf = DenseCrf::new(&f, &cfg).unwrap();
    for _ in 0..3 {
        let p = random_probs(&mut rng, 2, 4, 4).reshape(&[1, 2, 4, 4]).unwrap();
        assert_eq!(crf.infer(&p).unwrap(), mean_field(&p, &f, &cfg).unwrap());
    }
}
