//! Measurement instruments: local linearity, layerwise noise sensitivity,
//! robustness evaluation and catastrophic-overfitting detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{perturb, rand_init, AttackSpec, Objective};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::argmax_rows;
use crate::models::Model;
use crate::tensor::{mean_row_cosine, one_hot, Real, Tensor};

/// Default number of examples for the final local-linearity estimate.
pub const LINEARITY_EXAMPLES: usize = 512;
/// Default noise draws per example for the final local-linearity estimate.
pub const LINEARITY_NOISE_DRAWS: usize = 8;
/// Examples per forward/backward chunk inside the instruments.
pub const CHUNK: usize = 256;

/// Monte-Carlo mean over examples and `n_noise` draws of
/// `cos(∇ₓℓ(x), ∇ₓℓ(x+η))` with `η ~ U(−eps, eps)`.
pub fn local_linearity<T: Real, O: Objective<T> + ?Sized>(
    model: &O,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
    n_noise: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_noise == 0 {
        return Err(Error::contract("local linearity needs n_noise ≥ 1"));
    }
    if x.is_empty() || x.dim0() == 0 {
        return Err(Error::contract("local linearity needs at least one example"));
    }
    let rows = x.dim0();
    let mut total = 0.0;
    for start in (0..rows).step_by(CHUNK) {
        let end = (start + CHUNK).min(rows);
        let xb = x.slice_rows(start, end);
        let yb = y.slice_rows(start, end);
        let (_, g0) = model.losses_and_input_grad(&xb, &yb)?;
        for _ in 0..n_noise {
            let eta = rand_init::<T>(xb.shape(), eps, rng);
            let (_, g1) = model.losses_and_input_grad(&xb.add(&eta)?, &yb)?;
            total += mean_row_cosine(&g0, &g1)? * (end - start) as f64;
        }
    }
    Ok((total / (rows * n_noise) as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// Boundary names: `input` followed by every layer output.
    pub layers: Vec<String>,
    pub forward_cos: Vec<f64>,
    pub backward_cos: Vec<f64>,
}

/// Per-boundary cosine between clean and noised activations (forward) and
/// between the loss gradients at those activations (backward), for a single
/// draw `η ~ U(−eps, eps)`. Each entry is a mean of per-example cosines.
pub fn noise_sensitivity_profile<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<SensitivityProfile> {
    let eta = rand_init::<T>(x.shape(), eps, rng);
    let clean = boundary_values(model, x, y)?;
    let noisy = boundary_values(model, &x.add(&eta)?, y)?;
    let mut forward_cos = Vec::with_capacity(clean.len());
    let mut backward_cos = Vec::with_capacity(clean.len());
    for ((fa, ga), (fb, gb)) in clean.iter().zip(&noisy) {
        forward_cos.push(mean_row_cosine(fa, fb)?);
        backward_cos.push(mean_row_cosine(ga, gb)?);
    }
    let mut layers = vec!["input".to_string()];
    layers.extend(model.feature_names());
    Ok(SensitivityProfile {
        layers,
        forward_cos,
        backward_cos,
    })
}

/// (activation, ∂Σloss/∂activation) at the input and every layer boundary.
fn boundary_values<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let (_, trace) = model.forward_graph(&mut g, xn)?;
    let loss = g.cross_entropy_sum(trace.logits, y)?;
    let mut nodes = vec![xn];
    nodes.extend(&trace.activations);
    let grads = g.grad(loss, &nodes)?;
    Ok(nodes
        .iter()
        .zip(grads)
        .map(|(&n, gn)| {
            let value = g.value(n).clone();
            let grad = gn
                .map(|id| g.value(id).clone())
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            (value, grad)
        })
        .collect())
}

/// Top-1 accuracy in percent on clean inputs (`attack = None`) or on
/// per-example adversarial inputs. Always computed in single precision.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    attack: Option<&AttackSpec>,
    rng: &mut impl Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    if let Some(spec) = attack {
        spec.validate()?;
    }
    let model32: Model<f32> = model.cast();
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let (x, labels) = data.batch::<f32>(chunk);
        let x = match attack {
            None => x,
            Some(spec) => {
                let y = one_hot::<f32>(&labels, data.num_classes());
                perturb(&model32, &x, &y, spec, rng)?.apply(&x)?
            }
        };
        let pred = argmax_rows(&model32.forward(&x)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoThresholds {
    pub drop_pts: f64,
    pub floor_pts: f64,
    pub fgsm_floor: f64,
}

impl Default for CoThresholds {
    fn default() -> Self {
        Self {
            drop_pts: 20.0,
            floor_pts: 5.0,
            fgsm_floor: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoVerdict {
    pub detected: bool,
    pub epoch: Option<usize>,
    pub peak_pgd_acc: f64,
    pub final_pgd_acc: f64,
}

/// Flags catastrophic overfitting in an accuracy trace.
///
/// Drop rule: some epoch's PGD accuracy sits at least `drop_pts` below the
/// maximum of all earlier epochs. Floor rule: the final PGD accuracy is at
/// most `floor_pts` while the final FGSM accuracy is at least `fgsm_floor`;
/// its epoch is the start of the trailing run of such epochs.
pub fn detect_co(epochs: &[usize], pgd_acc: &[f64], fgsm_acc: &[f64], th: &CoThresholds) -> Result<CoVerdict> {
    let n = pgd_acc.len();
    if n == 0 {
        return Err(Error::contract("CO detection needs a non-empty history"));
    }
    if epochs.len() != n || fgsm_acc.len() != n {
        return Err(Error::contract("history columns differ in length"));
    }
    let mut drop_at = None;
    let mut running = pgd_acc[0];
    for (i, &v) in pgd_acc.iter().enumerate().skip(1) {
        if v <= running - th.drop_pts {
            drop_at = Some(i);
            break;
        }
        running = running.max(v);
    }
    let floored = |i: usize| pgd_acc[i] <= th.floor_pts && fgsm_acc[i] >= th.fgsm_floor;
    let floor_at = if floored(n - 1) {
        let mut i = n - 1;
        while i > 0 && floored(i - 1) {
            i -= 1;
        }
        Some(i)
    } else {
        None
    };
    let first = match (drop_at, floor_at) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    Ok(CoVerdict {
        detected: first.is_some(),
        epoch: first.map(|i| epochs[i]),
        peak_pgd_acc: pgd_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_pgd_acc: pgd_acc[n - 1],
    })
}
