//! Noise schedule, forward corruption, per-modality timesteps, the joint
//! ε-prediction loss, the ancestral reverse step and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normals;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ScaledLinear,
}

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl ScheduleConfig {
    pub const REFERENCE_STEPS: usize = 1000;
    pub const BETA_START: f64 = 8.5e-4;
    pub const BETA_END: f64 = 1.2e-2;

    pub fn reference() -> Self {
        ScheduleConfig {
            steps: Self::REFERENCE_STEPS,
            beta_start: Self::BETA_START,
            beta_end: Self::BETA_END,
            kind: ScheduleKind::ScaledLinear,
        }
    }

    /// Shorter chain whose betas are scaled by `1000 / steps`, so the final
    /// ᾱ stays close to the reference chain's.
    pub fn shortened(steps: usize) -> Self {
        let k = Self::REFERENCE_STEPS as f64 / steps as f64;
        ScheduleConfig {
            steps,
            beta_start: Self::BETA_START * k,
            beta_end: Self::BETA_END * k,
            kind: ScheduleKind::ScaledLinear,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::ScaledLinear => {
            let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
            (0..steps)
                .map(|t| match t {
                    0 => beta_start,
                    t if t + 1 == steps => beta_end,
                    t => {
                        let r = a + (t as f64 / (steps - 1) as f64) * (b - a);
                        r * r
                    }
                })
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::OutOfRange(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }

    /// β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t); zero at t = 0.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }
}

/// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`
pub fn q_sample<F: Scalar>(s: &NoiseSchedule, z0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
    s.check(t)?;
    if z0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "z0 has {} values, eps {}",
            z0.len(),
            eps.len()
        )));
    }
    let ab = s.alpha_bars[t];
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
}

/// One diffusion timestep per unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepVector(pub Vec<usize>);

impl TimestepVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Independent uniform timesteps on `[0, steps)` for `units` units.
pub fn sample_timesteps(rng: &mut impl rand::Rng, units: usize, steps: usize) -> TimestepVector {
    assert!(units >= 1 && steps >= 1);
    TimestepVector((0..units).map(|_| rng.random_range(0..steps)).collect())
}

fn check_pairs<F>(a: &[Vec<F>], b: &[Vec<F>]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} true vs {} predicted modalities",
            a.len(),
            b.len()
        )));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::Shape(format!(
                "modality {i}: {} vs {} values",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(())
}

/// `Σ_i ‖ε_i − ε̂_i‖²` over all modalities.
pub fn joint_loss<F: Scalar>(eps_true: &[Vec<F>], eps_pred: &[Vec<F>]) -> Result<F> {
    check_pairs(eps_true, eps_pred)?;
    Ok(eps_true
        .iter()
        .zip(eps_pred)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>())
        .sum())
}

/// Per-element mean of the joint loss, for logging only.
pub fn joint_loss_per_element<F: Scalar>(eps_true: &[Vec<F>], eps_pred: &[Vec<F>]) -> Result<F> {
    let total = joint_loss(eps_true, eps_pred)?;
    let n: usize = eps_true.iter().map(Vec::len).sum();
    Ok(total / F::of_usize(n.max(1)))
}

/// Ancestral reverse step from `z_t` to `z_{t−1}` given predicted noise.
pub fn ddpm_step<F: Scalar>(
    s: &NoiseSchedule,
    z_t: &[F],
    eps_hat: &[F],
    t: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<F>> {
    s.check(t)?;
    if z_t.len() != eps_hat.len() {
        return Err(Error::Shape(format!(
            "z_t has {} values, eps {}",
            z_t.len(),
            eps_hat.len()
        )));
    }
    let coef = F::of(s.betas[t] / (1.0 - s.alpha_bars[t]).sqrt());
    let inv = F::of(1.0 / s.alphas[t].sqrt());
    let mut out: Vec<F> = z_t
        .iter()
        .zip(eps_hat)
        .map(|(&z, &e)| (z - coef * e) * inv)
        .collect();
    if t > 0 {
        let sigma = F::of(s.posterior_variance(t).sqrt());
        let noise: Vec<F> = normals(rng, out.len());
        out.iter_mut().zip(noise).for_each(|(o, n)| *o += sigma * n);
    }
    Ok(out)
}

/// Exponential moving average of a set of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<F> {
    pub shadow: Vec<Vec<F>>,
    pub decay: f64,
}

impl<F: Scalar> EmaState<F> {
    pub const DEFAULT_DECAY: f64 = 0.9999;

    pub fn new(params: &[Vec<F>], decay: f64) -> Self {
        EmaState {
            shadow: params.to_vec(),
            decay,
        }
    }

    /// `shadow ← decay·shadow + (1−decay)·params`
    pub fn update(&mut self, params: &[Vec<F>]) -> Result<()> {
        if params.len() != self.shadow.len()
            || params
                .iter()
                .zip(&self.shadow)
                .any(|(p, s)| p.len() != s.len())
        {
            return Err(Error::Shape("EMA shadow does not match parameters".into()));
        }
        let d = F::of(self.decay);
        let k = F::one() - d;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, &b) in s.iter_mut().zip(p) {
                *a = d * *a + k * b;
            }
        }
        Ok(())
    }
}
