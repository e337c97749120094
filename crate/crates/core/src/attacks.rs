//! ℓ∞-bounded sign-gradient attacks: FGSM and PGD with restarts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels;
use crate::models::Model;
use crate::tensor::{sign, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// ℓ∞ budget in pixel units.
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub init: InitMode,
    /// Radius of the random start; `None` means `eps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_radius: Option<f64>,
    pub clip_image_range: bool,
}

impl AttackSpec {
    /// Training FGSM: `α = 1.25ε`, zero start, no pixel-range clamp.
    pub fn fgsm_train(eps: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            eps,
            alpha: 1.25 * eps,
            steps: 1,
            restarts: 1,
            init: InitMode::Zero,
            init_radius: None,
            clip_image_range: false,
        }
    }

    /// Training PGD-N: `α = ε/2`, random start, no pixel-range clamp.
    pub fn pgd_train(eps: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            eps,
            alpha: eps / 2.0,
            steps,
            restarts: 1,
            init: InitMode::Random,
            init_radius: None,
            clip_image_range: false,
        }
    }

    /// Evaluation FGSM: one step of size `ε` from zero, clamped to `[0, 1]`.
    pub fn fgsm_eval(eps: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            eps,
            alpha: eps,
            steps: 1,
            restarts: 1,
            init: InitMode::Zero,
            init_radius: None,
            clip_image_range: true,
        }
    }

    /// Evaluation PGD-`steps`-`restarts` with `α = ε/4`, random starts, clamped.
    pub fn pgd_eval(eps: f64, steps: usize, restarts: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            eps,
            alpha: eps / 4.0,
            steps,
            restarts,
            init: InitMode::Random,
            init_radius: None,
            clip_image_range: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("attack eps must be finite and ≥ 0, got {}", self.eps));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("attack alpha must be finite and ≥ 0, got {}", self.alpha));
        }
        if self.steps == 0 || self.restarts == 0 {
            return bad("attack steps and restarts must be ≥ 1".into());
        }
        if self.family == AttackFamily::Fgsm && self.steps != 1 {
            return bad(format!("FGSM takes exactly one step, got {}", self.steps));
        }
        if let Some(r) = self.init_radius {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("init_radius must be finite and ≥ 0, got {r}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T> {
    pub delta: Tensor<T>,
}

impl<T: Real> Perturbation<T> {
    /// `x + δ`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&self.delta)
    }
}

/// Something an attack can climb: per-example losses and their input gradient.
pub trait Objective<T: Real> {
    fn losses(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<T>>;

    /// Per-example losses and `∇_x Σ_i loss_i`.
    fn losses_and_input_grad(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)>;
}

impl<T: Real> Objective<T> for Model<T> {
    fn losses(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<T>> {
        kernels::cross_entropy_rows(&self.forward(x)?, y)
    }

    fn losses_and_input_grad(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let (_, trace) = self.forward_graph(&mut g, xn)?;
        let loss = g.cross_entropy_sum(trace.logits, y)?;
        let grad = g.grad(loss, &[xn])?[0]
            .map(|id| g.value(id).clone())
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let losses = kernels::cross_entropy_rows(g.value(trace.logits), y)?;
        Ok((losses, grad))
    }
}

/// I.i.d. uniform samples in `[−eps, eps]`.
pub fn rand_init<T: Real>(shape: &[usize], eps: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-eps..=eps)))
}

/// Elementwise clamp to `[−eps, eps]`.
pub fn project_linf<T: Real>(delta: &Tensor<T>, eps: f64) -> Tensor<T> {
    let e = T::of(eps);
    delta.map(|d| d.max(-e).min(e))
}

fn initial_delta<T: Real>(x: &Tensor<T>, spec: &AttackSpec, rng: &mut impl Rng) -> Tensor<T> {
    match spec.init {
        InitMode::Zero => Tensor::zeros(x.shape()),
        InitMode::Random => {
            let radius = spec.init_radius.unwrap_or(spec.eps);
            let d = project_linf(&rand_init(x.shape(), radius, rng), spec.eps);
            if spec.clip_image_range {
                clamp_to_image(x, &d, spec.eps)
            } else {
                d
            }
        }
    }
}

/// `δ ← clamp(x+δ, 0, 1) − x`, then back inside the ε-ball against rounding.
fn clamp_to_image<T: Real>(x: &Tensor<T>, delta: &Tensor<T>, eps: f64) -> Tensor<T> {
    let e = T::of(eps);
    let mut out = delta.clone();
    for (d, &xi) in out.data_mut().iter_mut().zip(x.data()) {
        let v = (xi + *d).max(T::zero()).min(T::one()) - xi;
        *d = v.max(-e).min(e);
    }
    out
}

/// `δ ← proj(δ + α·sign(g))` with the optional pixel-range clamp.
fn sign_step<T: Real>(x: &Tensor<T>, delta: &Tensor<T>, grad: &Tensor<T>, spec: &AttackSpec) -> Tensor<T> {
    let a = T::of(spec.alpha);
    let e = T::of(spec.eps);
    let mut out = delta.clone();
    for (d, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        *d = (*d + a * sign(g)).max(-e).min(e);
    }
    if spec.clip_image_range {
        clamp_to_image(x, &out, spec.eps)
    } else {
        out
    }
}

fn check_batch<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.ndim() == 0 || y.ndim() != 2 || x.dim0() != y.dim0() {
        return Err(Error::shape(
            "attack",
            format!("inputs {:?} and labels {:?} disagree", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// Single sign-gradient step from the spec's initial δ.
pub fn fgsm<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    x: &Tensor<T>,
    y: &Tensor<T>,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Perturbation<T>> {
    spec.validate()?;
    if spec.family != AttackFamily::Fgsm {
        return Err(Error::Config("fgsm called with a PGD spec".into()));
    }
    check_batch(x, y)?;
    let delta = initial_delta(x, spec, rng);
    let (_, grad) = objective.losses_and_input_grad(&x.add(&delta)?, y)?;
    Ok(Perturbation {
        delta: sign_step(x, &delta, &grad, spec),
    })
}

/// Projected sign-gradient ascent with restarts; per example, the restart
/// with the highest final loss wins and ties keep the earliest restart.
pub fn pgd<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    x: &Tensor<T>,
    y: &Tensor<T>,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Perturbation<T>> {
    spec.validate()?;
    if spec.family != AttackFamily::Pgd {
        return Err(Error::Config("pgd called with an FGSM spec".into()));
    }
    check_batch(x, y)?;
    let rows = x.dim0();
    let width = x.row_len();
    let mut best = Tensor::zeros(x.shape());
    let mut best_loss = vec![T::neg_infinity(); rows];
    for _ in 0..spec.restarts {
        let mut delta = initial_delta(x, spec, rng);
        for _ in 0..spec.steps {
            let (_, grad) = objective.losses_and_input_grad(&x.add(&delta)?, y)?;
            delta = sign_step(x, &delta, &grad, spec);
        }
        if spec.restarts == 1 {
            return Ok(Perturbation { delta });
        }
        let losses = objective.losses(&x.add(&delta)?, y)?;
        for (i, &l) in losses.iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                best.data_mut()[i * width..(i + 1) * width].copy_from_slice(delta.row(i));
            }
        }
    }
    Ok(Perturbation { delta: best })
}

/// Dispatches on `spec.family`.
pub fn perturb<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    x: &Tensor<T>,
    y: &Tensor<T>,
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Perturbation<T>> {
    match spec.family {
        AttackFamily::Fgsm => fgsm(objective, x, y, spec, rng),
        AttackFamily::Pgd => pgd(objective, x, y, spec, rng),
    }
}
