//! Input augmentations: additive noise plus the Cutout / Mixup / CutMix contrast set.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::dims4;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    Uniform,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub dist: NoiseDist,
    /// Multiplier of `eps`; uniform noise lives in `[−scale·eps, scale·eps]`,
    /// gaussian noise has standard deviation `scale·eps`.
    pub scale: f64,
    pub eps: f64,
    #[serde(default)]
    pub clip_image_range: bool,
}

impl NoiseSpec {
    pub fn uniform(scale: f64, eps: f64) -> Self {
        Self {
            dist: NoiseDist::Uniform,
            scale,
            eps,
            clip_image_range: false,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.scale * self.eps
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite() && self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "noise scale and eps must be finite and ≥ 0, got scale={} eps={}",
                self.scale, self.eps
            )));
        }
        Ok(())
    }

    /// A fresh noise tensor `η` shaped like `shape`.
    pub fn sample<T: Real>(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let m = self.magnitude();
        match self.dist {
            NoiseDist::Uniform => Tensor::from_fn(shape, |_| T::of(rng.random_range(-m..=m))),
            NoiseDist::Gaussian => Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(m * z)
            }),
        }
    }
}

/// `x + η` with fresh noise; clamped to `[0, 1]` only when the spec asks.
pub fn noise_aug<T: Real>(x: &Tensor<T>, spec: &NoiseSpec, rng: &mut impl Rng) -> Result<Tensor<T>> {
    spec.validate()?;
    let eta = spec.sample::<T>(x.shape(), rng);
    let mut out = x.add(&eta)?;
    if spec.clip_image_range {
        out = out.map(|v| v.max(T::zero()).min(T::one()));
    }
    Ok(out)
}

/// Zeroes one `patch × patch` square per image across all channels. The
/// square's top-left corner is uniform over positions that keep it inside
/// the image.
pub fn cutout<T: Real>(x: &Tensor<T>, patch: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(x, "cutout")?;
    if patch > h.min(w) {
        return Err(Error::contract(format!("cutout patch {patch} exceeds image {h}x{w}")));
    }
    let mut out = x.clone();
    if patch == 0 {
        return Ok(out);
    }
    for bi in 0..b {
        let top = rng.random_range(0..=h - patch);
        let left = rng.random_range(0..=w - patch);
        for ch in 0..c {
            let plane = ((bi * c) + ch) * h * w;
            for y in top..top + patch {
                let row = plane + y * w;
                out.data_mut()[row + left..row + left + patch].fill(T::zero());
            }
        }
    }
    Ok(out)
}

fn check_pair<T: Real>(x1: &Tensor<T>, y1: &Tensor<T>, x2: &Tensor<T>, y2: &Tensor<T>, lam: f64) -> Result<()> {
    x1.expect_same_shape("mix", x2)?;
    y1.expect_same_shape("mix", y2)?;
    if y1.ndim() != 2 || x1.dim0() != y1.dim0() {
        return Err(Error::shape(
            "mix",
            format!("images {:?} vs labels {:?}", x1.shape(), y1.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::contract(format!("mixing weight must lie in [0, 1], got {lam}")));
    }
    Ok(())
}

/// Convex combination of two image/label batches.
pub fn mixup<T: Real>(
    x1: &Tensor<T>,
    y1: &Tensor<T>,
    x2: &Tensor<T>,
    y2: &Tensor<T>,
    lam: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(x1, y1, x2, y2, lam)?;
    if lam == 1.0 {
        return Ok((x1.clone(), y1.clone()));
    }
    let (a, b) = (T::of(lam), T::of(1.0 - lam));
    let mix = |p: &Tensor<T>, q: &Tensor<T>| p.zip_map(q, |u, v| a * u + b * v);
    Ok((mix(x1, x2)?, mix(y1, y2)?))
}

/// Pastes a box of relative area `≈ 1 − lam` from `x2` into `x1` (same box for
/// the whole batch, placed fully inside the image). Labels are weighted by the
/// pasted pixel fraction actually realized.
pub fn cutmix<T: Real>(
    x1: &Tensor<T>,
    y1: &Tensor<T>,
    x2: &Tensor<T>,
    y2: &Tensor<T>,
    lam: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>, f64)> {
    check_pair(x1, y1, x2, y2, lam)?;
    let [b, c, h, w] = dims4(x1, "cutmix")?;
    let ratio = (1.0 - lam).sqrt();
    let cut_h = ((h as f64 * ratio).floor() as usize).min(h);
    let cut_w = ((w as f64 * ratio).floor() as usize).min(w);
    let top = rng.random_range(0..=h - cut_h);
    let left = rng.random_range(0..=w - cut_w);
    let mut out = x1.clone();
    for bi in 0..b {
        for ch in 0..c {
            let plane = ((bi * c) + ch) * h * w;
            for y in top..top + cut_h {
                let row = plane + y * w;
                out.data_mut()[row + left..row + left + cut_w]
                    .copy_from_slice(&x2.data()[row + left..row + left + cut_w]);
            }
        }
    }
    let pasted = (cut_h * cut_w) as f64 / (h * w) as f64;
    let labels = if pasted == 0.0 {
        y1.clone()
    } else if pasted == 1.0 {
        y2.clone()
    } else {
        let (a, bw) = (T::of(1.0 - pasted), T::of(pasted));
        y1.zip_map(y2, |u, v| a * u + bw * v)?
    };
    Ok((out, labels, pasted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::one_hot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn positive(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| 0.1 + (i % 7) as f64 * 0.1)
    }

    #[test]
    fn noise_support_and_identity() {
        let x = positive(&[2, 3, 8, 8]);
        let eps = 8.0 / 255.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = noise_aug(&x, &NoiseSpec::uniform(3.0, eps), &mut rng).unwrap();
        let diff = out.sub(&x).unwrap();
        assert!(diff.max_abs() <= 24.0 / 255.0 + 1e-15);
        assert!(diff.max_abs() > 0.0);
        let same = noise_aug(&x, &NoiseSpec::uniform(0.0, eps), &mut rng).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn noise_is_seeded() {
        let x = positive(&[1, 3, 4, 4]);
        let spec = NoiseSpec {
            dist: NoiseDist::Gaussian,
            scale: 1.0,
            eps: 0.1,
            clip_image_range: false,
        };
        let a = noise_aug(&x, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = noise_aug(&x, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_clip_only_on_request() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let mut spec = NoiseSpec::uniform(3.0, 0.1);
        let raw = noise_aug(&x, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(raw.data().iter().any(|&v| v > 1.0));
        spec.clip_image_range = true;
        let clipped = noise_aug(&x, &spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(clipped.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cutout_examples() {
        let x = positive(&[3, 3, 32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(cutout(&x, 0, &mut rng).unwrap(), x);
        let all = cutout(&x, 32, &mut rng).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
        let out = cutout(&x, 8, &mut rng).unwrap();
        for b in 0..3 {
            let zeroed = out.row(b).iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeroed, 8 * 8 * 3);
        }
        assert!(cutout(&x, 33, &mut rng).is_err());
    }

    #[test]
    fn mixup_examples() {
        let x1 = positive(&[2, 1, 2, 2]);
        let x2 = x1.scale(2.0);
        let y1 = one_hot::<f64>(&[0, 0], 3);
        let y2 = one_hot::<f64>(&[1, 2], 3);
        let (x, y) = mixup(&x1, &y1, &x2, &y2, 1.0).unwrap();
        assert_eq!((x, y), (x1.clone(), y1.clone()));
        let (_, y) = mixup(&x1, &y1, &x2, &y2, 0.5).unwrap();
        assert_eq!(y.row(0), &[0.5, 0.5, 0.0]);
        assert!(mixup(&x1, &y1, &x2, &y2, 1.5).is_err());
        assert!(mixup(&x1, &y1, &x2, &y2, -0.1).is_err());
    }

    #[test]
    fn cutmix_examples() {
        let x1 = positive(&[2, 3, 8, 8]);
        let x2 = x1.scale(-1.0);
        let y1 = one_hot::<f64>(&[0, 1], 2);
        let y2 = one_hot::<f64>(&[1, 0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y, frac) = cutmix(&x1, &y1, &x2, &y2, 1.0, &mut rng).unwrap();
        assert_eq!((x, y, frac), (x1.clone(), y1.clone(), 0.0));
        let (x, y, frac) = cutmix(&x1, &y1, &x2, &y2, 0.0, &mut rng).unwrap();
        assert_eq!((x, y, frac), (x2.clone(), y2.clone(), 1.0));
        let (x, y, frac) = cutmix(&x1, &y1, &x2, &y2, 0.6, &mut rng).unwrap();
        let pasted = x.row(0).iter().filter(|&&v| v < 0.0).count() as f64 / (3.0 * 64.0);
        assert_eq!(pasted, frac);
        assert!((y.row(0)[1] - frac).abs() < 1e-12);
    }
}
