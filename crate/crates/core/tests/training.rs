use fastat_core::attacks::{fgsm, AttackSpec, InitMode};
use fastat_core::augment::{noise_aug, NoiseSpec};
use fastat_core::data::synth_blobs;
use fastat_core::kernels::cross_entropy_rows;
use fastat_core::training::{
    cyclic_lr, grad_align_penalty, logit_align_loss, noiseaug_mixed_objective, train_fgsm_at, train_pgd_at,
    train_standard, Augmentation, ProbeConfig, RngStreams,
};
use fastat_core::{build_linear, build_toy_cnn, one_hot, Dataset, Model, Regularizer, RunHistory, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_probe() -> ProbeConfig {
    ProbeConfig {
        examples: 16,
        pgd_steps: 2,
        pgd_restarts: 1,
        linearity_examples: 8,
        linearity_noise: 1,
    }
}

fn small_cfg(eps: f64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        max_lr: 0.1,
        noise: NoiseSpec::uniform(3.0, eps),
        attack: AttackSpec::fgsm_train(eps),
        probe: tiny_probe(),
        seed: 17,
        ..TrainConfig::default()
    }
}

fn blobs() -> Dataset {
    synth_blobs(24, [2, 4, 4], 3, 4.0, 5).unwrap()
}

fn toy() -> Model<f64> {
    build_toy_cnn::<f64>(3, [2, 4, 4], 3, 9).unwrap()
}

type Trainer = fn(&mut Model<f64>, &Dataset, &Dataset, &TrainConfig) -> fastat_core::Result<RunHistory>;

fn run(trainer: Trainer, cfg: &TrainConfig) -> (Model<f64>, RunHistory) {
    let data = blobs();
    let mut model = toy();
    let history = trainer(&mut model, &data, &data, cfg).unwrap();
    (model, history)
}

// ---------- hand-stepped oracle on a 2-parameter linear model ----------

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `∂CE/∂x` for logits `z_k = w_k·x` with scalar input.
fn input_grad(w: &[f64], x: f64, label: usize) -> f64 {
    let p = softmax(&[w[0] * x, w[1] * x]);
    (0..2).map(|k| (p[k] - (k == label) as u8 as f64) * w[k]).sum()
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

enum Inner {
    None,
    Fgsm { alpha: f64, eps: f64 },
    Pgd { alpha: f64, eps: f64, steps: usize },
}

/// One SGD-with-momentum step from zero velocity; returns the new weights
/// and the batch loss at the attacked inputs.
fn oracle_step(w: &[f64], xs: &[f64], labels: &[usize], inner: &Inner, lr: f64, wd: f64) -> (Vec<f64>, f64) {
    let attacked: Vec<f64> = xs
        .iter()
        .zip(labels)
        .map(|(&x, &l)| match *inner {
            Inner::None => x,
            Inner::Fgsm { alpha, eps } => x + (alpha * sgn(input_grad(w, x, l))).clamp(-eps, eps),
            Inner::Pgd { alpha, eps, steps } => {
                let mut d = 0.0;
                for _ in 0..steps {
                    d = (d + alpha * sgn(input_grad(w, x + d, l))).clamp(-eps, eps);
                }
                x + d
            }
        })
        .collect();
    let n = xs.len() as f64;
    let mut grad = [0.0; 2];
    let mut loss = 0.0;
    for (&x, &l) in attacked.iter().zip(labels) {
        let p = softmax(&[w[0] * x, w[1] * x]);
        loss -= p[l].ln() / n;
        for k in 0..2 {
            grad[k] += (p[k] - (k == l) as u8 as f64) * x / n;
        }
    }
    let new_w = (0..2).map(|k| w[k] - lr * (grad[k] + wd * w[k])).collect();
    (new_w, loss)
}

fn oracle_fixture() -> (Dataset, Model<f64>, Vec<f64>, Vec<usize>) {
    let xs = [0.2f32, 0.9, 0.5, 0.7];
    let labels = vec![0, 1, 1, 0];
    let images = Tensor::new(vec![4, 1, 1, 1], xs.to_vec()).unwrap();
    let data = Dataset::new(images, labels.clone(), 2).unwrap();
    let model = build_linear::<f64>([1, 1, 1], 2, false, 3).unwrap();
    (data, model, xs.iter().map(|&v| v as f64).collect(), labels)
}

fn oracle_cfg(attack: AttackSpec) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        max_lr: 0.3,
        shuffle: false,
        attack,
        probe: tiny_probe(),
        ..TrainConfig::default()
    }
}

fn check_oracle(trainer: Trainer, attack: AttackSpec, inner: Inner) {
    let (data, mut model, xs, labels) = oracle_fixture();
    let w0 = model.params().get("fc.weight").unwrap().data().to_vec();
    let cfg = oracle_cfg(attack);
    let history = trainer(&mut model, &data, &data, &cfg).unwrap();
    // Two single-batch epochs: the first step runs at the peak rate, the
    // second at rate zero, so the weights reflect the first step only.
    let (expect, loss) = oracle_step(&w0, &xs, &labels, &inner, 0.3, cfg.weight_decay);
    let got = model.params().get("fc.weight").unwrap().data();
    for k in 0..2 {
        assert!((got[k] - expect[k]).abs() < 1e-12, "weight {k}: {} vs {}", got[k], expect[k]);
    }
    assert!((history.records[0].train_loss - loss).abs() < 1e-12);
    assert_eq!(history.records[0].lr, 0.3);
    assert_eq!(history.records[1].lr, 0.0);
}

#[test]
fn fgsm_at_matches_hand_stepped_oracle() {
    let eps = 8.0 / 255.0;
    check_oracle(train_fgsm_at, AttackSpec::fgsm_train(eps), Inner::Fgsm { alpha: 1.25 * eps, eps });
}

#[test]
fn pgd_at_matches_hand_stepped_oracle() {
    let eps = 8.0 / 255.0;
    let attack = AttackSpec {
        init: InitMode::Zero,
        ..AttackSpec::pgd_train(eps, 3)
    };
    check_oracle(train_pgd_at, attack, Inner::Pgd { alpha: eps / 2.0, eps, steps: 3 });
}

#[test]
fn standard_matches_hand_stepped_oracle() {
    check_oracle(train_standard, AttackSpec::fgsm_train(8.0 / 255.0), Inner::None);
}

// ---------- degenerations and determinism ----------

fn assert_same(a: &(Model<f64>, RunHistory), b: &(Model<f64>, RunHistory)) {
    assert_eq!(a.0.params(), b.0.params());
    assert_eq!(a.1.to_csv(), b.1.to_csv());
}

#[test]
fn mixed_objective_endpoints_match_plain_and_noiseaug_trajectories() {
    let eps = 8.0 / 255.0;
    let plain = small_cfg(eps);
    let noiseaug = TrainConfig {
        regularizer: Regularizer::Noiseaug,
        ..small_cfg(eps)
    };
    let mixed = |l: f64| TrainConfig {
        regularizer: Regularizer::NoiseaugMixed,
        lambda: Some(l),
        ..small_cfg(eps)
    };
    assert_same(&run(train_fgsm_at, &mixed(0.0)), &run(train_fgsm_at, &plain));
    assert_same(&run(train_fgsm_at, &mixed(1.0)), &run(train_fgsm_at, &noiseaug));
    assert_ne!(run(train_fgsm_at, &mixed(0.5)).0.params(), run(train_fgsm_at, &plain).0.params());
}

#[test]
fn zero_radius_random_start_equals_zero_init() {
    let eps = 8.0 / 255.0;
    let zero = small_cfg(eps);
    let rand0 = TrainConfig {
        attack: AttackSpec {
            init: InitMode::Random,
            init_radius: Some(0.0),
            ..AttackSpec::fgsm_train(eps)
        },
        ..small_cfg(eps)
    };
    assert_same(&run(train_fgsm_at, &zero), &run(train_fgsm_at, &rand0));
}

#[test]
fn one_step_pgd_at_equals_fgsm_at() {
    let eps = 8.0 / 255.0;
    let fgsm_cfg = small_cfg(eps);
    let pgd_cfg = TrainConfig {
        attack: AttackSpec {
            alpha: 1.25 * eps,
            init: InitMode::Zero,
            ..AttackSpec::pgd_train(eps, 1)
        },
        ..small_cfg(eps)
    };
    assert_same(&run(train_fgsm_at, &fgsm_cfg), &run(train_pgd_at, &pgd_cfg));
}

#[test]
fn every_trainer_is_deterministic() {
    let eps = 8.0 / 255.0;
    let regs = [
        Regularizer::None,
        Regularizer::Noiseaug,
        Regularizer::Gradalign,
        Regularizer::Logitalign,
    ];
    for reg in regs {
        let cfg = TrainConfig {
            regularizer: reg,
            ..small_cfg(eps)
        };
        assert_same(&run(train_fgsm_at, &cfg), &run(train_fgsm_at, &cfg));
    }
    let pgd = TrainConfig {
        attack: AttackSpec::pgd_train(eps, 2),
        regularizer: Regularizer::Noiseaug,
        ..small_cfg(eps)
    };
    assert_same(&run(train_pgd_at, &pgd), &run(train_pgd_at, &pgd));
    let std = small_cfg(eps);
    assert_same(&run(train_standard, &std), &run(train_standard, &std));
    for aug in [
        Augmentation::Cutout { patch: 2 },
        Augmentation::Mixup { alpha: 1.0 },
        Augmentation::Cutmix { alpha: 1.0 },
    ] {
        let cfg = TrainConfig {
            augmentation: aug,
            ..small_cfg(eps)
        };
        assert_same(&run(train_fgsm_at, &cfg), &run(train_fgsm_at, &cfg));
    }
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg(0.03)
    };
    for trainer in [train_fgsm_at as Trainer, train_standard] {
        let (model, history) = run(trainer, &cfg);
        assert!(history.is_empty());
        assert_eq!(model.params(), toy().params());
    }
    let pgd = TrainConfig {
        attack: AttackSpec::pgd_train(0.03, 2),
        ..cfg
    };
    let (model, history) = run(train_pgd_at, &pgd);
    assert!(history.is_empty());
    assert_eq!(model.params(), toy().params());
}

#[test]
fn inconsistent_configs_are_rejected() {
    let data = blobs();
    let mut model = toy();
    let pgd_attack = TrainConfig {
        attack: AttackSpec::pgd_train(0.03, 2),
        ..small_cfg(0.03)
    };
    assert!(train_fgsm_at(&mut model, &data, &data, &pgd_attack).is_err());
    assert!(train_pgd_at(&mut model, &data, &data, &small_cfg(0.03)).is_err());
    let gradalign_pgd = TrainConfig {
        regularizer: Regularizer::Gradalign,
        ..pgd_attack
    };
    assert!(train_pgd_at(&mut model, &data, &data, &gradalign_pgd).is_err());
    let mut wrong = build_toy_cnn::<f64>(3, [2, 4, 4], 4, 0).unwrap();
    assert!(train_fgsm_at(&mut wrong, &data, &data, &small_cfg(0.03)).is_err());
}

#[test]
fn standard_training_lowers_the_loss_on_separable_data() {
    let data = synth_blobs(120, [1, 4, 4], 3, 6.0, 1).unwrap();
    let mut model = build_toy_cnn::<f64>(4, [1, 4, 4], 3, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 20,
        max_lr: 0.1,
        probe: tiny_probe(),
        ..TrainConfig::default()
    };
    let h = train_standard(&mut model, &data, &data, &cfg).unwrap();
    assert!(h.records.last().unwrap().train_loss < h.records[0].train_loss);
}

#[test]
fn zero_learning_rate_keeps_history_constant() {
    let cfg = TrainConfig {
        max_lr: 0.0,
        shuffle: false,
        epochs: 3,
        ..small_cfg(0.03)
    };
    let (model, h) = run(train_standard, &cfg);
    assert_eq!(model.params(), toy().params());
    for r in &h.records[1..] {
        assert_eq!(r.train_loss, h.records[0].train_loss);
        assert_eq!(r.std_acc, h.records[0].std_acc);
    }
}

// ---------- objective-level oracles ----------

fn batch_fixture(seed: u64) -> (Model<f64>, Tensor<f64>, Tensor<f64>) {
    let data = blobs();
    let (x, y, _) = data.batch_one_hot::<f64>(&(0..6).collect::<Vec<_>>());
    (build_toy_cnn::<f64>(3, [2, 4, 4], 3, seed).unwrap(), x, y)
}

fn mean_ce(model: &Model<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let rows = cross_entropy_rows(&model.forward(x).unwrap(), y).unwrap();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn mixed_objective_is_linear_in_lambda() {
    let (model, x, y) = batch_fixture(4);
    let cfg = small_cfg(8.0 / 255.0);
    let value = |l: f64| noiseaug_mixed_objective(&model, &x, &y, &cfg, l, &mut RngStreams::new(1)).unwrap();
    let (v0, v1, vh) = (value(0.0), value(1.0), value(0.5));
    assert!((vh - 0.5 * (v0 + v1)).abs() < 1e-12);
    assert!(noiseaug_mixed_objective(&model, &x, &y, &cfg, 1.5, &mut RngStreams::new(1)).is_err());
}

#[test]
fn logit_align_matches_compositional_oracle() {
    let (model, x, y) = batch_fixture(6);
    let cfg = small_cfg(8.0 / 255.0);
    let got = logit_align_loss(&model, &x, &y, &cfg, &mut RngStreams::new(3)).unwrap();

    let mut streams = RngStreams::new(3);
    let noisy = noise_aug(&x, &cfg.noise, &mut streams.noise).unwrap();
    let d1 = fgsm(&model, &x, &y, &cfg.attack, &mut streams.attack).unwrap();
    let d2 = fgsm(&model, &noisy, &y, &cfg.attack, &mut streams.attack).unwrap();
    let adv1 = d1.apply(&x).unwrap();
    let p = model.forward(&adv1).unwrap();
    let q = model.forward(&d2.apply(&noisy).unwrap()).unwrap();
    let ce = mean_ce(&model, &adv1, &y);
    let mut kl = 0.0;
    for r in 0..p.dim0() {
        let (a, b) = (softmax(p.row(r)), softmax(q.row(r)));
        kl += a.iter().zip(&b).map(|(u, v)| u * (u / v).ln()).sum::<f64>();
    }
    kl /= p.dim0() as f64;
    assert!(kl >= 0.0);
    assert!((got - (ce + kl)).abs() < 1e-10, "{got} vs {}", ce + kl);

    let quiet = TrainConfig {
        noise: NoiseSpec::uniform(0.0, cfg.attack.eps),
        ..cfg
    };
    let same = logit_align_loss(&model, &x, &y, &quiet, &mut RngStreams::new(3)).unwrap();
    assert!((same - ce).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_align_penalty_in_range(seed in 0u64..500, eps in 0.0f64..0.2) {
        let (model, x, y) = batch_fixture(seed);
        let p = grad_align_penalty(&model, &x, &y, eps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&p));
    }

    #[test]
    fn lr_trace_integrates_to_triangle_area(total in 1usize..500, max_lr in 0.01f64..1.0) {
        let area: f64 = (1..=total).map(|s| cyclic_lr(s, total, max_lr)).sum();
        let triangle = max_lr * total as f64 / 2.0;
        prop_assert!((area - triangle).abs() <= max_lr + 1e-9);
        let peak = (0..=total).map(|s| cyclic_lr(s, total, max_lr)).fold(0.0, f64::max);
        prop_assert!(peak <= max_lr + 1e-12);
    }
}

#[test]
fn soft_targets_are_accepted() {
    let (model, x, _) = batch_fixture(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = one_hot::<f64>(&(0..6).map(|_| rng.random_range(0..3)).collect::<Vec<_>>(), 3);
    let soft = y.map(|v| 0.8 * v + 0.2 / 3.0);
    assert!(mean_ce(&model, &x, &soft).is_finite());
}
