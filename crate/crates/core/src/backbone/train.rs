//! Training state and a single optimisation step.

use serde::{Deserialize, Serialize};

use super::{Backbone, DenoiserInput};
use crate::diffusion::{q_sample, sample_timesteps, EmaState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::normals;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            steps: 20_000,
            ema_decay: EmaState::<f32>::DEFAULT_DECAY,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub params: ParamStore<F>,
    pub ema: EmaState<F>,
    pub opt: AdamW<F>,
    pub step: usize,
    pub losses: Vec<F>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(params: ParamStore<F>, config: &TrainConfig) -> Self {
        let ema = EmaState::new(&params.values(), config.ema_decay);
        let opt = AdamW::new(config.optim, &params);
        TrainState {
            params,
            ema,
            opt,
            step: 0,
            losses: Vec::new(),
        }
    }

    /// Parameters with the EMA shadow swapped in.
    pub fn ema_params(&self) -> ParamStore<F> {
        let mut p = self.params.clone();
        p.set_values(&self.ema.shadow)
            .expect("shadow mirrors params");
        p
    }

    /// Corrupts `clean` (per unit, `batch` latents back to back) with one
    /// timestep vector per example, then takes an AdamW and EMA step.
    pub fn train_step(
        &mut self,
        model: &Backbone,
        schedule: &NoiseSchedule,
        clean: &[Vec<F>],
        batch: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<F> {
        let units = &model.schema.units;
        if clean.len() != units.len() {
            return Err(Error::Shape(format!(
                "{} clean arrays for {} units",
                clean.len(),
                units.len()
            )));
        }
        let timesteps: Vec<_> = (0..batch)
            .map(|_| sample_timesteps(rng, units.len(), schedule.steps()))
            .collect();
        let mut noisy = Vec::with_capacity(units.len());
        let mut noise = Vec::with_capacity(units.len());
        for (ui, (u, z0)) in units.iter().zip(clean).enumerate() {
            let n = u.latent_len();
            if z0.len() != batch * n {
                return Err(Error::Shape(format!(
                    "`{}`: {} values for batch {batch}",
                    u.name,
                    z0.len()
                )));
            }
            let eps: Vec<F> = normals(rng, z0.len());
            let mut zt = Vec::with_capacity(z0.len());
            for (b, tv) in timesteps.iter().enumerate() {
                zt.extend(q_sample(
                    schedule,
                    &z0[b * n..(b + 1) * n],
                    tv.0[ui],
                    &eps[b * n..(b + 1) * n],
                )?);
            }
            noisy.push(zt);
            noise.push(eps);
        }
        let input = DenoiserInput {
            batch,
            latents: noisy,
            timesteps,
        };
        self.params.zero_grads();
        let loss = model
            .loss_and_grads(&mut self.params, &input, &noise)
            .map_err(|e| match e {
                Error::NonFinite { name } => Error::Diverged {
                    step: self.step,
                    detail: format!("non-finite {name}"),
                },
                other => other,
            })?;
        self.opt.update(&mut self.params);
        self.ema.update(&self.params.values())?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_schema};
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::diffusion::{joint_loss, ScheduleConfig, TimestepVector};
    use crate::rng::seeded;

    fn batch(model: &Backbone, b: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        model
            .schema
            .units
            .iter()
            .map(|u| normals(&mut rng, b * u.latent_len()))
            .collect()
    }

    #[test]
    fn finite_difference_gradients() {
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let mut p = m.init_params::<f64>(11);
        let mut rng = seeded(12);
        // move biases and gains off their trivial init so every path is exercised
        for prm in p.iter_mut() {
            let jitter: Vec<f64> = normals(&mut rng, prm.value.len());
            prm.value
                .iter_mut()
                .zip(jitter)
                .for_each(|(v, j)| *v += 0.1 * j);
        }
        let latents = batch(&m, 2, 13);
        let targets = batch(&m, 2, 14);
        let timesteps = vec![
            TimestepVector(vec![3, 40, 7]),
            TimestepVector(vec![0, 12, 49]),
        ];
        let input = DenoiserInput {
            batch: 2,
            latents,
            timesteps,
        };
        p.zero_grads();
        m.loss_and_grads(&mut p, &input, &targets).unwrap();
        let analytic = p.clone();

        let loss_at = |q: &ParamStore<f64>| {
            let pred = m.forward(q, &input).unwrap();
            joint_loss(&targets, &pred).unwrap() / 2.0
        };
        let names: Vec<String> = p.iter().map(|x| x.name.clone()).collect();
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for k in 0..160 {
            let name = &names[k % names.len()];
            let len = p.get(name).value.len();
            let i = (k * 7919 + 13) % len;
            let mut q = p.clone();
            q.get_mut(name).value[i] += h;
            let up = loss_at(&q);
            q.get_mut(name).value[i] -= 2.0 * h;
            let down = loss_at(&q);
            let fd = (up - down) / (2.0 * h);
            let an = analytic.get(name).grad[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            assert!(rel < 1e-3, "{name}[{i}]: analytic {an} vs fd {fd}");
        }
        assert!(checked >= 100, "{worst}");
    }

    #[test]
    fn doubled_targets_scale_linearly() {
        // loss(2·x) gradient at zero-output heads equals 2× loss(x) gradient on heads
        let schema = tiny_schema();
        let m = Backbone::new(
            &schema,
            BackboneConfig {
                zero_init_heads: true,
                ..tiny_config()
            },
        )
        .unwrap();
        let input = DenoiserInput {
            batch: 1,
            latents: batch(&m, 1, 1),
            timesteps: vec![TimestepVector(vec![1, 2, 3])],
        };
        let t1 = batch(&m, 1, 2);
        let t2: Vec<Vec<f64>> = t1
            .iter()
            .map(|v| v.iter().map(|x| 2.0 * x).collect())
            .collect();
        let mut a = m.init_params::<f64>(3);
        let mut b = a.clone();
        m.loss_and_grads(&mut a, &input, &t1).unwrap();
        m.loss_and_grads(&mut b, &input, &t2).unwrap();
        for u in &schema.units {
            let ga = &a.get(&format!("head.{}.w", u.name)).grad;
            let gb = &b.get(&format!("head.{}.w", u.name)).grad;
            for (x, y) in ga.iter().zip(gb) {
                assert!((2.0 * x - y).abs() < 1e-10 * (1.0 + y.abs()));
            }
        }
    }

    fn run(seed: u64, steps: usize, lr: f64) -> (TrainState<f64>, Vec<f64>) {
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let sched = ScheduleConfig::shortened(50).build().unwrap();
        let cfg = TrainConfig {
            batch: 2,
            steps,
            ema_decay: 0.9,
            optim: AdamWConfig {
                lr,
                warmup_steps: 0,
                ..AdamWConfig::default()
            },
        };
        let mut st = TrainState::new(m.init_params::<f64>(seed), &cfg);
        let clean = batch(&m, 2, seed + 1);
        let mut rng = seeded(seed + 2);
        for _ in 0..steps {
            st.train_step(&m, &sched, &clean, 2, &mut rng).unwrap();
        }
        let losses = st.losses.clone();
        (st, losses)
    }

    #[test]
    fn seeded_runs_repeat_and_zero_lr_freezes() {
        let (_, a) = run(5, 5, 1e-3);
        let (_, b) = run(5, 5, 1e-3);
        assert_eq!(a, b);
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let (st, _) = run(5, 3, 0.0);
        assert_eq!(st.params.values(), m.init_params::<f64>(5).values());
    }

    #[test]
    fn overfits_a_fixed_problem() {
        // fixed noise and timesteps: the objective is deterministic, so the
        // loss should fall monotonically under a small learning rate
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let mut p = m.init_params::<f64>(21);
        let input = DenoiserInput {
            batch: 2,
            latents: batch(&m, 2, 22),
            timesteps: vec![
                TimestepVector(vec![5, 10, 20]),
                TimestepVector(vec![30, 1, 45]),
            ],
        };
        let targets = batch(&m, 2, 23);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 2e-4,
                warmup_steps: 0,
                grad_clip: None,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &p,
        );
        let mut losses = Vec::new();
        for _ in 0..200 {
            p.zero_grads();
            losses.push(m.loss_and_grads(&mut p, &input, &targets).unwrap());
            opt.update(&mut p);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{} -> {}", w[0], w[1]);
        }
        assert!(
            losses[199] < 0.5 * losses[0],
            "{} -> {}",
            losses[0],
            losses[199]
        );
    }

    #[test]
    fn nan_input_reports_divergence() {
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let sched = ScheduleConfig::shortened(50).build().unwrap();
        let mut st = TrainState::new(m.init_params::<f64>(1), &TrainConfig::default());
        let mut clean = batch(&m, 1, 1);
        clean[0][0] = f64::NAN;
        let err = st
            .train_step(&m, &sched, &clean, 1, &mut seeded(0))
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}
