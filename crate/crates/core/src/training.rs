//! Outer minimization: standard training, FGSM AT with an optional
//! noise-based regularizer, PGD AT, the cyclic learning rate and SGD with
//! momentum.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb, rand_init, AttackFamily, AttackSpec};
use crate::augment::{cutmix, cutout, mixup, noise_aug, NoiseSpec};
use crate::data::{batch_iter, BatchOrder, Dataset};
use crate::diagnostics::{evaluate, local_linearity};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{Bound, Model, ParamSet};
use crate::tensor::{one_hot, Real, Tensor};

/// How GradAlign differentiates its penalty with respect to the parameters.
pub const GRADALIGN_MODE: &str = "double-backward";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// Noise is added to the image before the FGSM step.
    Noiseaug,
    /// `(1−λ)·CE(x+δ₁) + λ·CE(x+η+δ₂)`.
    NoiseaugMixed,
    /// `CE(x+δ) + λ·(1 − cos(∇ₓℓ(x), ∇ₓℓ(x+η)))`.
    Gradalign,
    /// `CE(x+δ₁) + KL(f(x+δ₁) ‖ f(x+η+δ₂))`.
    Logitalign,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Augmentation {
    None,
    Cutout { patch: usize },
    /// Mixing weight drawn from `Beta(alpha, alpha)` per batch.
    Mixup { alpha: f64 },
    Cutmix { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Held-out examples used for the per-epoch accuracies.
    pub examples: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    pub linearity_examples: usize,
    pub linearity_noise: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            examples: 1000,
            pgd_steps: 10,
            pgd_restarts: 1,
            linearity_examples: 256,
            linearity_noise: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub regularizer: Regularizer,
    /// GradAlign weight or mixing weight; `None` picks the regularizer default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Stop gradients through the clean branch inside the LogitAlign KL term.
    pub detach_clean: bool,
    pub noise: NoiseSpec,
    pub attack: AttackSpec,
    pub augmentation: Augmentation,
    pub probe: ProbeConfig,
    pub shuffle: bool,
    pub drop_last: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        Self {
            epochs: 30,
            batch_size: 128,
            max_lr: 0.3,
            momentum: 0.9,
            weight_decay: 5e-4,
            regularizer: Regularizer::None,
            lambda: None,
            detach_clean: false,
            noise: NoiseSpec::uniform(3.0, eps),
            attack: AttackSpec::fgsm_train(eps),
            augmentation: Augmentation::None,
            probe: ProbeConfig::default(),
            shuffle: true,
            drop_last: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// λ after defaults: GradAlign uses 2 at ε = 16/255 and 0.2 otherwise.
    pub fn effective_lambda(&self) -> Option<f64> {
        match (self.regularizer, self.lambda) {
            (_, Some(l)) => Some(l),
            (Regularizer::Gradalign, None) => {
                Some(if (self.attack.eps - 16.0 / 255.0).abs() < 1e-9 { 2.0 } else { 0.2 })
            }
            _ => None,
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be finite and ≥ 0, got {}", self.max_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and ≥ 0, got {}", self.weight_decay));
        }
        self.attack.validate()?;
        self.noise.validate()?;
        if self.probe.examples == 0 || self.probe.pgd_steps == 0 || self.probe.pgd_restarts == 0 {
            return bad("probe examples, pgd_steps and pgd_restarts must be ≥ 1".into());
        }
        if self.probe.linearity_examples == 0 || self.probe.linearity_noise == 0 {
            return bad("probe linearity_examples and linearity_noise must be ≥ 1".into());
        }
        match self.augmentation {
            Augmentation::Mixup { alpha } | Augmentation::Cutmix { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return bad(format!("augmentation alpha must be finite and > 0, got {alpha}"));
            }
            _ => {}
        }
        match (mode, self.attack.family) {
            (Mode::Fgsm, AttackFamily::Pgd) => return bad("FGSM AT needs an fgsm attack".into()),
            (Mode::Pgd, AttackFamily::Fgsm) => return bad("PGD AT needs a pgd attack".into()),
            _ => {}
        }
        let allowed = match mode {
            Mode::Standard => matches!(self.regularizer, Regularizer::None),
            Mode::Pgd => matches!(self.regularizer, Regularizer::None | Regularizer::Noiseaug),
            Mode::Fgsm => true,
        };
        if !allowed {
            return bad(format!("regularizer {:?} is not available for {mode:?} training", self.regularizer));
        }
        match (self.regularizer, self.effective_lambda()) {
            (Regularizer::NoiseaugMixed, None) => bad("noiseaug_mixed needs lambda".into()),
            (Regularizer::NoiseaugMixed, Some(l)) if !(0.0..=1.0).contains(&l) => {
                bad(format!("noiseaug_mixed lambda must lie in [0, 1], got {l}"))
            }
            (_, Some(l)) if !(l >= 0.0 && l.is_finite()) => bad(format!("lambda must be finite and ≥ 0, got {l}")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Fgsm,
    Pgd,
}

/// Independent random streams derived from one seed. Batch order uses its
/// own per-epoch stream inside [`batch_iter`].
pub struct RngStreams {
    pub attack: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub probe: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream((1 << 32) + k);
            r
        };
        Self {
            attack: stream(0),
            noise: stream(1),
            augment: stream(2),
            probe: stream(3),
        }
    }
}

/// Triangular schedule: `0 → max_lr` over the first half of `total_steps`,
/// back to 0 over the second half.
pub fn cyclic_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let half = total / 2.0;
    if t <= half {
        max_lr * t / half
    } else {
        max_lr * (total - t) / (total - half)
    }
}

/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    velocity: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.expect_congruent(grads, "gradients")?;
    params.expect_congruent(velocity, "velocity")?;
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (((_, p), (_, g)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + (gi + wd * *pi);
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Value of a scalar loss built on a fresh graph and its gradient with
/// respect to every model parameter.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    build: impl FnOnce(&mut Graph<T>, &Bound) -> Result<NodeId>,
) -> Result<(T, ParamSet<T>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let entries = model
        .params()
        .iter()
        .zip(&bound.params)
        .map(|((name, t), &id)| {
            let grad = grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape()));
            (name.to_string(), grad)
        })
        .collect();
    Ok((value, ParamSet::new(entries)?))
}

fn ce_node<T: Real>(model: &Model<T>, g: &mut Graph<T>, bound: &Bound, x: &Tensor<T>, y: &Tensor<T>) -> Result<(NodeId, NodeId)> {
    let xn = g.constant(x.clone());
    let logits = model.forward_bound(g, bound, xn)?.logits;
    Ok((g.softmax_cross_entropy(logits, y)?, logits))
}

/// Mean cross-entropy of the model at `x + δ`, `δ` from `attack`.
fn adversarial_ce<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    attack: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId)> {
    let adv = perturb(model, x, y, attack, rng)?.apply(x)?;
    ce_node(model, g, bound, &adv, y)
}

#[allow(clippy::too_many_arguments)]
fn noiseaug_mixed_node<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    lambda: f64,
    rngs: &mut RngStreams,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixing weight must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(adversarial_ce(model, g, bound, x, y, &cfg.attack, &mut rngs.attack)?.0);
    }
    let noisy = noise_aug(x, &cfg.noise, &mut rngs.noise)?;
    if lambda == 1.0 {
        return Ok(adversarial_ce(model, g, bound, &noisy, y, &cfg.attack, &mut rngs.attack)?.0);
    }
    let (ce1, _) = adversarial_ce(model, g, bound, x, y, &cfg.attack, &mut rngs.attack)?;
    let (ce2, _) = adversarial_ce(model, g, bound, &noisy, y, &cfg.attack, &mut rngs.attack)?;
    let a = g.scale(ce1, 1.0 - lambda);
    let b = g.scale(ce2, lambda);
    g.add(a, b)
}

/// Mixed clean/noisy adversarial objective. `λ = 0` is plain FGSM AT and `λ = 1` is NoiseAug,
/// both consuming the random streams exactly as those trainers do.
pub fn noiseaug_mixed_objective<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    lambda: f64,
    rngs: &mut RngStreams,
) -> Result<T> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = noiseaug_mixed_node(model, &mut g, &bound, x, y, cfg, lambda, rngs)?;
    g.value(loss).item()
}

fn logit_align_node<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    rngs: &mut RngStreams,
) -> Result<NodeId> {
    let noisy = noise_aug(x, &cfg.noise, &mut rngs.noise)?;
    let (ce, clean_logits) = adversarial_ce(model, g, bound, x, y, &cfg.attack, &mut rngs.attack)?;
    let adv2 = perturb(model, &noisy, y, &cfg.attack, &mut rngs.attack)?.apply(&noisy)?;
    let xn2 = g.constant(adv2);
    let noisy_logits = model.forward_bound(g, bound, xn2)?.logits;
    let p = if cfg.detach_clean {
        g.constant(g.value(clean_logits).clone())
    } else {
        clean_logits
    };
    let kl = g.kl_divergence(p, noisy_logits)?;
    g.add(ce, kl)
}

/// LogitAlign loss `CE(f(x+δ₁), y) + KL(f(x+δ₁) ‖ f(x+η+δ₂))`.
pub fn logit_align_loss<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    rngs: &mut RngStreams,
) -> Result<T> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = logit_align_node(model, &mut g, &bound, x, y, cfg, rngs)?;
    g.value(loss).item()
}

/// `1 − mean_i cos(∇ₓℓ(x_i), ∇ₓℓ(x_i+η_i))` for an arbitrary scalar loss
/// builder `loss_of(graph, input) → Σ_i ℓ_i`, recorded on the graph so its
/// parameter gradient flows through both input gradients.
pub fn input_grad_alignment_penalty<T: Real>(
    g: &mut Graph<T>,
    mut loss_of: impl FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
    x: &Tensor<T>,
    eta: &Tensor<T>,
) -> Result<NodeId> {
    let mut input_grad = |g: &mut Graph<T>, input: Tensor<T>| -> Result<NodeId> {
        let xn = g.input(input);
        let loss = loss_of(g, xn)?;
        Ok(match g.grad(loss, &[xn])?[0] {
            Some(id) => id,
            None => g.constant(Tensor::zeros(g.shape(xn))),
        })
    };
    let g0 = input_grad(g, x.clone())?;
    let g1 = input_grad(g, x.add(eta)?)?;
    let cos = g.row_cosine(g0, g1)?;
    let rows = x.dim0().max(1);
    let total = g.sum(cos);
    let mean = g.scale(total, -1.0 / rows as f64);
    Ok(g.add_const(mean, 1.0))
}

/// GradAlign penalty of the model's summed cross-entropy.
pub fn grad_align_penalty_node<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eta: &Tensor<T>,
) -> Result<NodeId> {
    input_grad_alignment_penalty(
        g,
        |g, xn| {
            let logits = model.forward_bound(g, bound, xn)?.logits;
            g.cross_entropy_sum(logits, y)
        },
        x,
        eta,
    )
}

/// GradAlign penalty value and its parameter gradient for a given `η`.
pub fn grad_align_penalty_with_grads<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eta: &Tensor<T>,
) -> Result<(T, ParamSet<T>)> {
    loss_and_grads(model, |g, bound| grad_align_penalty_node(model, g, bound, x, y, eta))
}

/// GradAlign penalty with a single draw `η ~ U(−eps, eps)`.
pub fn grad_align_penalty<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
    rng: &mut impl rand::Rng,
) -> Result<T> {
    let eta = rand_init::<T>(x.shape(), eps, rng);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let p = grad_align_penalty_node(model, &mut g, &bound, x, y, &eta)?;
    g.value(p).item()
}

/// Training objective for one batch, recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &TrainConfig,
    mode: Mode,
    rngs: &mut RngStreams,
) -> Result<NodeId> {
    if mode == Mode::Standard {
        return Ok(ce_node(model, g, bound, x, y)?.0);
    }
    match cfg.regularizer {
        Regularizer::None => Ok(adversarial_ce(model, g, bound, x, y, &cfg.attack, &mut rngs.attack)?.0),
        Regularizer::Noiseaug => noiseaug_mixed_node(model, g, bound, x, y, cfg, 1.0, rngs),
        Regularizer::NoiseaugMixed => {
            let lambda = cfg.effective_lambda().unwrap_or(1.0);
            noiseaug_mixed_node(model, g, bound, x, y, cfg, lambda, rngs)
        }
        Regularizer::Gradalign => {
            let lambda = cfg.effective_lambda().unwrap_or(0.0);
            let (ce, _) = adversarial_ce(model, g, bound, x, y, &cfg.attack, &mut rngs.attack)?;
            let eta = rand_init::<T>(x.shape(), cfg.attack.eps, &mut rngs.noise);
            let pen = grad_align_penalty_node(model, g, bound, x, y, &eta)?;
            let pen = g.scale(pen, lambda);
            g.add(ce, pen)
        }
        Regularizer::Logitalign => logit_align_node(model, g, bound, x, y, cfg, rngs),
    }
}

fn augment_batch<T: Real>(
    x: Tensor<T>,
    y: Tensor<T>,
    aug: &Augmentation,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let partner = |x: &Tensor<T>, y: &Tensor<T>, rng: &mut ChaCha8Rng| {
        let mut perm: Vec<usize> = (0..x.dim0()).collect();
        perm.shuffle(rng);
        (x.gather_rows(&perm), y.gather_rows(&perm))
    };
    let beta = |alpha: f64| Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("augmentation alpha: {e}")));
    match *aug {
        Augmentation::None => Ok((x, y)),
        Augmentation::Cutout { patch } => Ok((cutout(&x, patch, rng)?, y)),
        Augmentation::Mixup { alpha } => {
            let lam = beta(alpha)?.sample(rng);
            let (x2, y2) = partner(&x, &y, rng);
            mixup(&x, &y, &x2, &y2, lam)
        }
        Augmentation::Cutmix { alpha } => {
            let lam = beta(alpha)?.sample(rng);
            let (x2, y2) = partner(&x, &y, rng);
            let (xm, ym, _) = cutmix(&x, &y, &x2, &y2, lam, rng)?;
            Ok((xm, ym))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub std_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub local_linearity: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_COLUMNS: [&str; 7] = [
    "epoch",
    "train_loss",
    "std_acc",
    "fgsm_acc",
    "pgd_acc",
    "local_linearity",
    "lr",
];

impl RunHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn column(&self, f: impl Fn(&EpochRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    /// One header line plus one row per epoch; floats use shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = HISTORY_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.std_acc, r.fgsm_acc, r.pgd_acc, r.local_linearity, r.lr
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty history CSV".into()))?;
        if header.trim() != HISTORY_COLUMNS.join(",") {
            return Err(Error::Format(format!("unexpected history header {header:?}")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != HISTORY_COLUMNS.len() {
                return Err(Error::Format(format!("history row {} has {} cells", i + 1, cells.len())));
            }
            let num = |k: usize| -> Result<f64> {
                cells[k]
                    .parse()
                    .map_err(|_| Error::Format(format!("history row {}: bad {} {:?}", i + 1, HISTORY_COLUMNS[k], cells[k])))
            };
            records.push(EpochRecord {
                epoch: cells[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("history row {}: bad epoch {:?}", i + 1, cells[0])))?,
                train_loss: num(1)?,
                std_acc: num(2)?,
                fgsm_acc: num(3)?,
                pgd_acc: num(4)?,
                local_linearity: num(5)?,
                lr: num(6)?,
            });
        }
        Ok(Self { records })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_data<T: Real>(model: &Model<T>, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract(format!("{what} set is empty")));
    }
    if data.image_shape() != model.input_shape() || data.num_classes() != model.num_classes() {
        return Err(Error::contract(format!(
            "{what} set has images {:?} with {} classes, model expects {:?} with {}",
            data.image_shape(),
            data.num_classes(),
            model.input_shape(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// End-of-epoch robustness and linearity probe on a prefix of `eval`.
fn probe<T: Real>(model: &Model<T>, eval: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64, f64)> {
    let eps = cfg.attack.eps;
    let n = cfg.probe.examples.min(eval.len());
    let held = eval.select(&(0..n).collect::<Vec<_>>());
    let std_acc = evaluate(model, &held, None, rng)?;
    let fgsm_acc = evaluate(model, &held, Some(&AttackSpec::fgsm_eval(eps)), rng)?;
    let pgd = AttackSpec::pgd_eval(eps, cfg.probe.pgd_steps, cfg.probe.pgd_restarts);
    let pgd_acc = evaluate(model, &held, Some(&pgd), rng)?;
    let m = cfg.probe.linearity_examples.min(eval.len());
    let (x, y, _) = eval.batch_one_hot::<f32>(&(0..m).collect::<Vec<_>>());
    let lin = local_linearity(&model.cast::<f32>(), &x, &y, eps, cfg.probe.linearity_noise, rng)?;
    Ok((std_acc, fgsm_acc, pgd_acc, lin))
}

/// Generic trainer behind [`train_standard`], [`train_fgsm_at`] and [`train_pgd_at`].
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<RunHistory> {
    Ok(train_observed(model, train_set, eval_set, cfg, mode, &mut |_, _| {})?.0)
}

/// [`train`] that also reports each finished epoch together with the
/// wall-clock seconds spent on parameter updates (probes excluded), and
/// returns those timings alongside the history.
pub fn train_observed<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    mode: Mode,
    on_epoch: &mut dyn FnMut(&EpochRecord, f64),
) -> Result<(RunHistory, Vec<f64>)> {
    cfg.validate(mode)?;
    check_data(model, train_set, "training")?;
    check_data(model, eval_set, "evaluation")?;
    let order = BatchOrder {
        batch_size: cfg.batch_size,
        shuffle: cfg.shuffle,
        drop_last: cfg.drop_last,
    };
    let per_epoch = batch_iter(train_set.len(), order, cfg.seed, 0)?.len();
    let total_steps = per_epoch * cfg.epochs;
    let mut velocity = model.params().zeros_like();
    let mut rngs = RngStreams::new(cfg.seed);
    let mut history = RunHistory::default();
    let mut seconds = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for idx in batch_iter(train_set.len(), order, cfg.seed, epoch as u64)? {
            let (x, labels) = train_set.batch::<T>(&idx);
            let y = one_hot::<T>(&labels, train_set.num_classes());
            let (x, y) = augment_batch(x, y, &cfg.augmentation, &mut rngs.augment)?;
            let current: &Model<T> = model;
            let (loss, grads) = loss_and_grads(current, |g, bound| {
                batch_objective(current, g, bound, &x, &y, cfg, mode, &mut rngs)
            })?;
            step += 1;
            lr = cyclic_lr(step, total_steps, cfg.max_lr);
            sgd_momentum_step(model.params_mut(), &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss.as_f64() * idx.len() as f64;
            seen += idx.len();
        }
        seconds.push(started.elapsed().as_secs_f64());
        let (std_acc, fgsm_acc, pgd_acc, local_linearity) = probe(model, eval_set, cfg, &mut rngs.probe)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            std_acc,
            fgsm_acc,
            pgd_acc,
            local_linearity,
            lr,
        };
        on_epoch(&record, seconds[epoch]);
        history.records.push(record);
    }
    Ok((history, seconds))
}

pub fn train_standard<T: Real>(model: &mut Model<T>, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train(model, train_set, eval_set, cfg, Mode::Standard)
}

pub fn train_fgsm_at<T: Real>(model: &mut Model<T>, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train(model, train_set, eval_set, cfg, Mode::Fgsm)
}

pub fn train_pgd_at<T: Real>(model: &mut Model<T>, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train(model, train_set, eval_set, cfg, Mode::Pgd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_triangle() {
        assert_eq!(cyclic_lr(0, 100, 0.3), 0.0);
        assert_eq!(cyclic_lr(50, 100, 0.3), 0.3);
        assert_eq!(cyclic_lr(100, 100, 0.3), 0.0);
        assert!((cyclic_lr(25, 100, 0.3) - 0.15).abs() < 1e-15);
        assert!((cyclic_lr(3, 7, 1.0) - 3.0 / 3.5).abs() < 1e-15);
    }

    #[test]
    fn momentum_unroll() {
        let mk = |v: f64| ParamSet::new(vec![("w".into(), Tensor::<f64>::from_f64(&[2], &[v, v]).unwrap())]).unwrap();
        let mut p = mk(1.0);
        let g = mk(0.5);
        let mut v = mk(0.0);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        let expect: f64 = 1.0 - 0.1 * 0.5 * 2.9;
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        let other = ParamSet::new(vec![("u".into(), Tensor::<f64>::zeros(&[2]))]).unwrap();
        assert!(sgd_momentum_step(&mut p, &other, &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let h = RunHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: std::f64::consts::LN_10,
                std_acc: 10.0,
                fgsm_acc: 0.1 + 0.2,
                pgd_acc: 0.0,
                local_linearity: -0.25,
                lr: 1e-7,
            }],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,std_acc,fgsm_acc,pgd_acc,local_linearity,lr\n"));
        assert_eq!(RunHistory::from_csv(&csv).unwrap(), h);
        assert!(RunHistory::from_csv("a,b\n").is_err());
    }

    #[test]
    fn config_rules() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate(Mode::Fgsm).is_ok());
        assert!(cfg.validate(Mode::Pgd).is_err());
        cfg.regularizer = Regularizer::NoiseaugMixed;
        assert!(cfg.validate(Mode::Fgsm).is_err());
        cfg.lambda = Some(1.5);
        assert!(cfg.validate(Mode::Fgsm).is_err());
        cfg.lambda = Some(0.5);
        assert!(cfg.validate(Mode::Fgsm).is_ok());
        cfg.regularizer = Regularizer::Gradalign;
        cfg.lambda = None;
        assert_eq!(cfg.effective_lambda(), Some(0.2));
        cfg.attack = AttackSpec::fgsm_train(16.0 / 255.0);
        assert_eq!(cfg.effective_lambda(), Some(2.0));
        cfg.batch_size = 0;
        assert!(cfg.validate(Mode::Fgsm).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let text = r#"{"epochs": 1, "bogus": 3}"#;
        assert!(serde_json::from_str::<TrainConfig>(text).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
        assert_eq!(cfg.epochs, 2);
    }
}
