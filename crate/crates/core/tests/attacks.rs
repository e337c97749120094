use fastat_core::attacks::{fgsm, perturb, pgd, AttackSpec, InitMode, Objective};
use fastat_core::{build_linear, build_toy_cnn, one_hot, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `loss_i = w·x_i`, gradient `w` for every row.
struct Affine {
    w: Vec<f64>,
}

impl Objective<f64> for Affine {
    fn losses(&self, x: &Tensor<f64>, _: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok((0..x.dim0())
            .map(|i| x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn losses_and_input_grad(&self, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        let g = Tensor::from_fn(x.shape(), |i| self.w[i % self.w.len()]);
        Ok((self.losses(x, y)?, g))
    }
}

#[test]
fn fgsm_matches_corner_enumeration_on_affine_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = 0.1;
    for _ in 0..20 {
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obj = Affine { w: w.clone() };
        let x = Tensor::from_fn(&[1, 1, 2, 2], |_| rng.random_range(0.2..0.8));
        let y = Tensor::zeros(&[1, 2]);
        let d = fgsm(&obj, &x, &y, &AttackSpec::fgsm_eval(eps), &mut rng).unwrap();
        let attained = obj.losses(&d.apply(&x).unwrap(), &y).unwrap()[0];
        let mut best = f64::NEG_INFINITY;
        for code in 0..81 {
            let mut c = code;
            let delta: Vec<f64> = (0..4)
                .map(|_| {
                    let v = (c % 3) as f64 - 1.0;
                    c /= 3;
                    v * eps
                })
                .collect();
            let xd = Tensor::from_fn(&[1, 1, 2, 2], |i| x.data()[i] + delta[i]);
            best = best.max(obj.losses(&xd, &y).unwrap()[0]);
        }
        assert!((attained - best).abs() < 1e-12, "{attained} vs {best}");
    }
}

#[test]
fn pgd_reaches_grid_maximum_in_two_dimensions() {
    let model = build_linear::<f64>([1, 1, 2], 3, true, 5).unwrap();
    let eps = 0.2;
    let x = Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 0.4]).unwrap();
    for label in 0..3 {
        let y = one_hot::<f64>(&[label], 3);
        let mut spec = AttackSpec::pgd_eval(eps, 40, 3);
        spec.clip_image_range = false;
        let mut rng = ChaCha8Rng::seed_from_u64(label as u64);
        let d = pgd(&model, &x, &y, &spec, &mut rng).unwrap();
        let attained = model.losses(&d.apply(&x).unwrap(), &y).unwrap()[0];
        let mut best = f64::NEG_INFINITY;
        for i in 0..41 {
            for j in 0..41 {
                let a = -eps + 2.0 * eps * i as f64 / 40.0;
                let b = -eps + 2.0 * eps * j as f64 / 40.0;
                let xd = Tensor::from_f64(&[1, 1, 1, 2], &[0.5 + a, 0.4 + b]).unwrap();
                best = best.max(model.losses(&xd, &y).unwrap()[0]);
            }
        }
        assert!(attained >= best - 1e-9, "label {label}: {attained} < {best}");
    }
}

fn setup(seed: u64, rows: usize) -> (fastat_core::Model<f64>, Tensor<f64>, Tensor<f64>) {
    let model = build_toy_cnn::<f64>(2, [1, 4, 4], 3, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = Tensor::from_fn(&[rows, 1, 4, 4], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    (model, x, one_hot(&labels, 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_stays_in_budget(
        seed in 0u64..1000,
        eps in 0.0f64..0.1,
        alpha_ratio in 0.1f64..2.0,
        steps in 1usize..5,
        restarts in 1usize..3,
        clip in any::<bool>(),
        random in any::<bool>(),
    ) {
        let (model, x, y) = setup(seed, 3);
        let spec = AttackSpec {
            init: if random { InitMode::Random } else { InitMode::Zero },
            clip_image_range: clip,
            alpha: alpha_ratio * eps,
            ..AttackSpec::pgd_eval(eps, steps, restarts)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = perturb(&model, &x, &y, &spec, &mut rng).unwrap();
        prop_assert!(d.delta.max_abs() <= eps + 1e-7);
        if clip {
            let adv = d.apply(&x).unwrap();
            prop_assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fgsm_equals_one_step_pgd(seed in 0u64..1000, eps in 0.0f64..0.1, clip in any::<bool>()) {
        let (model, x, y) = setup(seed, 2);
        let f = AttackSpec { clip_image_range: clip, ..AttackSpec::fgsm_train(eps) };
        let p = AttackSpec {
            alpha: f.alpha,
            init: InitMode::Zero,
            clip_image_range: clip,
            ..AttackSpec::pgd_train(eps, 1)
        };
        let a = fgsm(&model, &x, &y, &f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = pgd(&model, &x, &y, &p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.delta, b.delta);
    }

    #[test]
    fn restarts_never_lower_the_loss(seed in 0u64..1000, eps in 0.001f64..0.1, restarts in 2usize..5) {
        let (model, x, y) = setup(seed, 4);
        let one = AttackSpec::pgd_eval(eps, 3, 1);
        let many = AttackSpec::pgd_eval(eps, 3, restarts);
        let a = pgd(&model, &x, &y, &one, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = pgd(&model, &x, &y, &many, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let la = model.losses(&a.apply(&x).unwrap(), &y).unwrap();
        let lb = model.losses(&b.apply(&x).unwrap(), &y).unwrap();
        for (u, v) in la.iter().zip(&lb) {
            prop_assert!(v >= u);
        }
    }
}

#[test]
fn zero_budget_is_the_identity() {
    let (model, x, y) = setup(1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [AttackSpec::fgsm_eval(0.0), AttackSpec::pgd_eval(0.0, 5, 2)] {
        let d = perturb(&model, &x, &y, &spec, &mut rng).unwrap();
        assert_eq!(d.apply(&x).unwrap(), x);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let (model, x, y) = setup(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = [
        AttackSpec { eps: -0.1, ..AttackSpec::fgsm_eval(0.1) },
        AttackSpec { steps: 0, ..AttackSpec::pgd_eval(0.1, 1, 1) },
        AttackSpec { restarts: 0, ..AttackSpec::pgd_eval(0.1, 1, 1) },
        AttackSpec { steps: 3, ..AttackSpec::fgsm_eval(0.1) },
    ];
    for spec in bad {
        assert!(perturb(&model, &x, &y, &spec, &mut rng).is_err());
    }
    assert!(fgsm(&model, &x, &y, &AttackSpec::pgd_eval(0.1, 1, 1), &mut rng).is_err());
}
