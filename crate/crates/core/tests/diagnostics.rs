use fastat_core::attacks::{rand_init, AttackSpec, Objective};
use fastat_core::data::synth_blobs;
use fastat_core::{
    build_small_cnn, build_toy_cnn, cosine_similarity, detect_co, evaluate, finite_diff_grad, local_linearity,
    noise_sensitivity_profile, CoThresholds, Model, Result, Tensor,
};
use fastat_core::kernels::cross_entropy_rows;
use fastat_core::tensor::mean_row_cosine;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Affine {
    w: Vec<f64>,
}

impl Objective<f64> for Affine {
    fn losses(&self, x: &Tensor<f64>, _: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok((0..x.dim0())
            .map(|i| x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + 0.3)
            .collect())
    }

    fn losses_and_input_grad(&self, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
        let g = Tensor::from_fn(x.shape(), |i| self.w[i % self.w.len()]);
        Ok((self.losses(x, y)?, g))
    }
}

fn fixture(seed: u64, rows: usize) -> (Model<f64>, Tensor<f64>, Tensor<f64>) {
    let data = synth_blobs(rows, [3, 6, 6], 4, 2.0, seed).unwrap();
    let (x, y, _) = data.batch_one_hot::<f64>(&(0..rows).collect::<Vec<_>>());
    (build_small_cnn::<f64>(&[4, 6], [3, 6, 6], 4, seed).unwrap(), x, y)
}

#[test]
fn linearity_of_affine_loss_is_one() {
    let obj = Affine {
        w: (0..12).map(|i| (i as f64 - 5.5) / 7.0).collect(),
    };
    let x = Tensor::from_fn(&[5, 12], |i| (i % 9) as f64 / 9.0);
    let y = Tensor::zeros(&[5, 2]);
    let v = local_linearity(&obj, &x, &y, 0.3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!((v - 1.0).abs() < 1e-6);
}

#[test]
fn linearity_is_exactly_one_at_zero_budget() {
    let (model, x, y) = fixture(1, 10);
    let v = local_linearity(&model, &x, &y, 0.0, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(v, 1.0);
    assert!(local_linearity(&model, &x, &y, 0.1, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn linearity_matches_finite_difference_recomputation() {
    let (model, x, y) = fixture(3, 4);
    let eps = 8.0 / 255.0;
    let n_noise = 8;
    let got = local_linearity(&model, &x, &y, eps, n_noise, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

    let fd_grad = |input: &Tensor<f64>| {
        finite_diff_grad(
            |p| cross_entropy_rows(&model.forward(p).unwrap(), &y).unwrap().iter().sum::<f64>(),
            input,
            1e-6,
        )
        .unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g0 = fd_grad(&x);
    let mut total = 0.0;
    for _ in 0..n_noise {
        let eta = rand_init::<f64>(x.shape(), eps, &mut rng);
        total += mean_row_cosine(&g0, &fd_grad(&x.add(&eta).unwrap())).unwrap();
    }
    let oracle = total / n_noise as f64;
    assert!((got - oracle).abs() < 0.05, "{got} vs {oracle}");
}

#[test]
fn profile_consistency() {
    let (model, x, y) = fixture(5, 6);
    let eps = 8.0 / 255.0;
    let p0 = noise_sensitivity_profile(&model, &x, &y, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(p0.forward_cos.iter().chain(&p0.backward_cos).all(|&c| c == 1.0));
    assert_eq!(p0.layers.len(), p0.forward_cos.len());
    assert_eq!(p0.layers[0], "input");
    assert_eq!(p0.layers.last().unwrap(), "logits");

    let p = noise_sensitivity_profile(&model, &x, &y, eps, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(p.forward_cos.iter().chain(&p.backward_cos).all(|c| (-1.0..=1.0).contains(c)));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eta = rand_init::<f64>(x.shape(), eps, &mut rng);
    let logits_cos = mean_row_cosine(&model.forward(&x).unwrap(), &model.forward(&x.add(&eta).unwrap()).unwrap()).unwrap();
    assert!((p.forward_cos.last().unwrap() - logits_cos).abs() < 1e-12);
    let lin = local_linearity(&model, &x, &y, eps, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!((p.backward_cos[0] - lin).abs() < 1e-12);
    let again = noise_sensitivity_profile(&model, &x, &y, eps, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(p, again);
}

#[test]
fn untrained_model_is_near_chance() {
    let data = synth_blobs(1000, [1, 4, 4], 10, 0.0, 0).unwrap();
    let mut total = 0.0;
    for seed in 0..5 {
        let model = build_toy_cnn::<f32>(4, [1, 4, 4], 10, seed).unwrap();
        total += evaluate(&model, &data, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    }
    let mean = total / 5.0;
    assert!((7.0..=13.0).contains(&mean), "{mean}");
}

#[test]
fn evaluation_relations() {
    let data = synth_blobs(64, [3, 6, 6], 4, 3.0, 2).unwrap();
    let model = build_small_cnn::<f64>(&[4, 6], [3, 6, 6], 4, 8).unwrap();
    let before = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let std = evaluate(&model, &data, None, &mut rng).unwrap();
    let zero_fgsm = evaluate(&model, &data, Some(&AttackSpec::fgsm_eval(0.0)), &mut rng).unwrap();
    let zero_pgd = evaluate(&model, &data, Some(&AttackSpec::pgd_eval(0.0, 5, 2)), &mut rng).unwrap();
    assert_eq!(std, zero_fgsm);
    assert_eq!(std, zero_pgd);
    let eps = 16.0 / 255.0;
    let fgsm = evaluate(&model, &data, Some(&AttackSpec::fgsm_eval(eps)), &mut rng).unwrap();
    let pgd = evaluate(&model, &data, Some(&AttackSpec::pgd_eval(eps, 50, 10)), &mut rng).unwrap();
    assert!(fgsm >= pgd, "fgsm {fgsm} < pgd {pgd}");
    assert!(pgd <= std);
    assert_eq!(model.params(), before.params());
    let empty = data.select(&[]);
    assert!(evaluate(&model, &empty, None, &mut rng).is_err());
}

#[test]
fn cosine_examples() {
    let a = Tensor::<f64>::from_f64(&[2], &[1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]).unwrap();
    assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
    assert_eq!(cosine_similarity(&a, &a.scale(-1.0)).unwrap(), -1.0);
}

proptest! {
    #[test]
    fn non_decreasing_histories_never_fire(start in 6.0f64..50.0, steps in prop::collection::vec(0.0f64..5.0, 1..30)) {
        let mut pgd = vec![start];
        for s in &steps {
            let last = *pgd.last().unwrap();
            pgd.push((last + s).min(100.0));
        }
        let n = pgd.len();
        let epochs: Vec<usize> = (1..=n).collect();
        let v = detect_co(&epochs, &pgd, &vec![90.0; n], &CoThresholds::default()).unwrap();
        prop_assert!(!v.detected);
    }

    #[test]
    fn verdict_epoch_within_history(pgd in prop::collection::vec(0.0f64..100.0, 1..30)) {
        let n = pgd.len();
        let epochs: Vec<usize> = (1..=n).collect();
        let fgsm: Vec<f64> = pgd.iter().map(|p| (p + 40.0).min(100.0)).collect();
        let v = detect_co(&epochs, &pgd, &fgsm, &CoThresholds::default()).unwrap();
        if let Some(e) = v.epoch {
            prop_assert!(v.detected);
            prop_assert!(e <= n);
        }
        prop_assert!(v.final_pgd_acc <= v.peak_pgd_acc);
    }

    #[test]
    fn linearity_stays_in_range(seed in 0u64..200, eps in 0.0f64..0.5) {
        let (model, x, y) = fixture(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = local_linearity(&model, &x, &y, eps, 2, &mut rng).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        let _ = rng.random::<u8>();
    }
}
