//! Joint, conditional and band-infilling generation.
//!
//! Units in the conditioning set are held at their clean latents with a zero
//! timestep token at every reverse step. All generated units share one
//! timestep, walking from `T − 1` down to `0`.

mod ensemble;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DenoiserInput};
use crate::codec::{CodecSet, Decoded, LatentStats};
use crate::diffusion::{ddpm_step, NoiseSchedule, TimestepVector};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{normals, stream, Rng};
use crate::scalar::Scalar;
use crate::schema::Schema;

pub use ensemble::{
    read_ensembles, write_ensembles, EnsembleManifest, EnsembleTile, StoredEnsemble,
};

/// Largest number of chains pushed through the network at once.
pub const CHAIN_BATCH: usize = 64;

/// Anything that predicts per-unit noise for a batch.
pub trait Denoiser<F: Scalar> {
    fn schema(&self) -> &Schema;
    fn predict(&self, input: &DenoiserInput<F>) -> Result<Vec<Vec<F>>>;
}

/// A backbone bound to a set of weights.
#[derive(Debug, Clone, Copy)]
pub struct Network<'a, F> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamStore<F>,
}

impl<F: Scalar> Denoiser<F> for Network<'_, F> {
    fn schema(&self) -> &Schema {
        &self.backbone.schema
    }

    fn predict(&self, input: &DenoiserInput<F>) -> Result<Vec<Vec<F>>> {
        self.backbone.forward(self.params, input)
    }
}

/// Names in a spec, without values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecNames {
    pub condition: Vec<String>,
    pub generate: Vec<String>,
}

/// Conditioning set `C` with clean latents, generation set `G` by name.
///
/// Names may be unit names or modality names. A conditioning entry must name
/// a single unit, so multi-group modalities are conditioned per band group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSpec<F> {
    pub condition: BTreeMap<String, Vec<F>>,
    pub generate: Vec<String>,
}

impl<F: Scalar> ConditioningSpec<F> {
    pub fn unconditional(schema: &Schema) -> Self {
        ConditioningSpec {
            condition: BTreeMap::new(),
            generate: schema.unit_names(),
        }
    }

    /// Conditions on `names` taken from a full tile, generates the rest.
    pub fn from_tile(schema: &Schema, names: &[&str], tile: &[Vec<F>]) -> Result<Self> {
        if tile.len() != schema.units.len() {
            return Err(Error::Shape(format!(
                "tile has {} units, schema {}",
                tile.len(),
                schema.units.len()
            )));
        }
        let mut cond = vec![false; schema.units.len()];
        for n in names {
            for ui in schema.resolve(n)? {
                cond[ui] = true;
            }
        }
        let mut condition = BTreeMap::new();
        let mut generate = Vec::new();
        for (ui, u) in schema.units.iter().enumerate() {
            if cond[ui] {
                condition.insert(u.name.clone(), tile[ui].clone());
            } else {
                generate.push(u.name.clone());
            }
        }
        Ok(ConditioningSpec {
            condition,
            generate,
        })
    }

    pub fn names(&self) -> SpecNames {
        SpecNames {
            condition: self.condition.keys().cloned().collect(),
            generate: self.generate.clone(),
        }
    }

    /// Per-unit clean latent for conditioned units, `None` for generated ones.
    pub fn resolve(&self, schema: &Schema) -> Result<Vec<Option<Vec<F>>>> {
        let mut plan: Vec<Option<Option<Vec<F>>>> = vec![None; schema.units.len()];
        for (name, value) in &self.condition {
            let hits = schema.resolve(name)?;
            if hits.len() != 1 {
                let parts: Vec<&str> = hits
                    .iter()
                    .map(|&i| schema.units[i].name.as_str())
                    .collect();
                return Err(Error::InvalidSpec(format!(
                    "`{name}` spans {}; give a value for each",
                    parts.join(", ")
                )));
            }
            let u = &schema.units[hits[0]];
            if value.len() != u.latent_len() {
                return Err(Error::Shape(format!(
                    "`{}`: conditioning latent has {} values, expected {}",
                    u.name,
                    value.len(),
                    u.latent_len()
                )));
            }
            if plan[hits[0]].is_some() {
                return Err(Error::InvalidSpec(format!(
                    "`{}` conditioned twice",
                    u.name
                )));
            }
            plan[hits[0]] = Some(Some(value.clone()));
        }
        for name in &self.generate {
            for ui in schema.resolve(name)? {
                match plan[ui] {
                    Some(Some(_)) => {
                        return Err(Error::InvalidSpec(format!(
                            "`{}` is in both the conditioning and generation sets",
                            schema.units[ui].name
                        )))
                    }
                    _ => plan[ui] = Some(None),
                }
            }
        }
        plan.into_iter()
            .zip(&schema.units)
            .map(|(p, u)| {
                p.ok_or_else(|| {
                    Error::InvalidSpec(format!("`{}` is neither conditioned nor generated", u.name))
                })
            })
            .collect()
    }
}

/// Runs one reverse chain per `(plan, rng)` pair; returns per-chain, per-unit latents.
///
/// Each chain draws its starting noise and its step noise from its own
/// generator, so a chain's result does not depend on which chains share its batch.
pub fn run_chains<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    plans: &[&[Option<Vec<F>>]],
    rngs: &mut [Rng],
) -> Result<Vec<Vec<Vec<F>>>> {
    if plans.len() != rngs.len() {
        return Err(Error::Shape(format!(
            "{} plans for {} generators",
            plans.len(),
            rngs.len()
        )));
    }
    let mut out = Vec::with_capacity(plans.len());
    for (pc, rc) in plans.chunks(CHAIN_BATCH).zip(rngs.chunks_mut(CHAIN_BATCH)) {
        out.extend(run_batch(model, schedule, pc, rc)?);
    }
    Ok(out)
}

fn run_batch<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    plans: &[&[Option<Vec<F>>]],
    rngs: &mut [Rng],
) -> Result<Vec<Vec<Vec<F>>>> {
    let units = &model.schema().units;
    let mut state: Vec<Vec<Vec<F>>> = Vec::with_capacity(plans.len());
    for (plan, rng) in plans.iter().zip(rngs.iter_mut()) {
        if plan.len() != units.len() {
            return Err(Error::Shape(format!(
                "plan has {} units, schema {}",
                plan.len(),
                units.len()
            )));
        }
        state.push(
            plan.iter()
                .zip(units)
                .map(|(p, u)| match p {
                    Some(clean) => clean.clone(),
                    None => normals(rng, u.latent_len()),
                })
                .collect(),
        );
    }
    let active: Vec<usize> = (0..plans.len())
        .filter(|&c| plans[c].iter().any(Option::is_none))
        .collect();
    if active.is_empty() {
        return Ok(state);
    }
    for t in (0..schedule.steps()).rev() {
        let latents: Vec<Vec<F>> = (0..units.len())
            .map(|ui| {
                active
                    .iter()
                    .flat_map(|&c| state[c][ui].iter().copied())
                    .collect()
            })
            .collect();
        let timesteps = active
            .iter()
            .map(|&c| {
                TimestepVector(
                    plans[c]
                        .iter()
                        .map(|p| if p.is_some() { 0 } else { t })
                        .collect(),
                )
            })
            .collect();
        let eps = model.predict(&DenoiserInput {
            batch: active.len(),
            latents,
            timesteps,
        })?;
        for (b, &c) in active.iter().enumerate() {
            for (ui, u) in units.iter().enumerate() {
                if plans[c][ui].is_some() {
                    continue;
                }
                let n = u.latent_len();
                state[c][ui] = ddpm_step(
                    schedule,
                    &state[c][ui],
                    &eps[ui][b * n..(b + 1) * n],
                    t,
                    &mut rngs[c],
                )?;
            }
        }
    }
    Ok(state)
}

/// Unconditional sample of every unit.
pub fn sample_joint<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<Vec<F>>> {
    sample_conditional(
        model,
        schedule,
        &ConditioningSpec::unconditional(model.schema()),
        rng,
    )
}

/// Returned conditioning latents are the inputs, bit for bit.
pub fn sample_conditional<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    spec: &ConditioningSpec<F>,
    rng: &mut Rng,
) -> Result<Vec<Vec<F>>> {
    let plan = spec.resolve(model.schema())?;
    let mut own = rng.clone();
    let mut out = run_chains(model, schedule, &[&plan], std::slice::from_mut(&mut own))?;
    *rng = own;
    Ok(out.remove(0))
}

/// Generates everything except the supplied band groups.
pub fn band_infill<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    available: BTreeMap<String, Vec<F>>,
    rng: &mut Rng,
) -> Result<Vec<Vec<F>>> {
    let schema = model.schema();
    let mut taken = vec![false; schema.units.len()];
    for name in available.keys() {
        for ui in schema.resolve(name)? {
            taken[ui] = true;
        }
    }
    let generate = schema
        .units
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| !t)
        .map(|(u, _)| u.name.clone())
        .collect();
    sample_conditional(
        model,
        schedule,
        &ConditioningSpec {
            condition: available,
            generate,
        },
        rng,
    )
}

/// Independently seeded samples sharing one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationEnsemble<F> {
    pub spec: SpecNames,
    pub seeds: Vec<u64>,
    /// `samples[j][unit]`, standardized latents.
    pub samples: Vec<Vec<Vec<F>>>,
}

/// Generator of the chain seeded with `seed`.
pub fn chain_rng(seed: u64) -> Rng {
    stream(seed, "sampler")
}

/// `n` chains with seeds `base_seed..base_seed + n`.
pub fn sample_ensemble<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    spec: &ConditioningSpec<F>,
    n: usize,
    base_seed: u64,
) -> Result<GenerationEnsemble<F>> {
    Ok(sample_ensembles(model, schedule, std::slice::from_ref(spec), n, &[base_seed])?.remove(0))
}

/// One ensemble per spec, every chain batched together.
pub fn sample_ensembles<F: Scalar, D: Denoiser<F>>(
    model: &D,
    schedule: &NoiseSchedule,
    specs: &[ConditioningSpec<F>],
    n: usize,
    base_seeds: &[u64],
) -> Result<Vec<GenerationEnsemble<F>>> {
    if n == 0 {
        return Err(Error::Empty("ensemble size must be at least 1".into()));
    }
    if specs.len() != base_seeds.len() {
        return Err(Error::Shape(format!(
            "{} specs for {} base seeds",
            specs.len(),
            base_seeds.len()
        )));
    }
    let resolved: Vec<Vec<Option<Vec<F>>>> = specs
        .iter()
        .map(|s| s.resolve(model.schema()))
        .collect::<Result<_>>()?;
    let seeds: Vec<Vec<u64>> = base_seeds
        .iter()
        .map(|&b| (0..n as u64).map(|j| b + j).collect())
        .collect();
    let plans: Vec<&[Option<Vec<F>>]> = resolved
        .iter()
        .flat_map(|r| std::iter::repeat_n(r.as_slice(), n))
        .collect();
    let mut rngs: Vec<Rng> = seeds.iter().flatten().map(|&s| chain_rng(s)).collect();
    let mut all = run_chains(model, schedule, &plans, &mut rngs)?.into_iter();
    Ok(specs
        .iter()
        .zip(seeds)
        .map(|(spec, seeds)| GenerationEnsemble {
            spec: spec.names(),
            seeds,
            samples: all.by_ref().take(n).collect(),
        })
        .collect())
}

/// Unstandardizes and decodes one sample's latents.
pub fn decode_sample<F: Scalar>(
    codecs: &CodecSet<F>,
    stats: &LatentStats,
    latents: &[Vec<F>],
) -> Result<Vec<Decoded<F>>> {
    let schema = &codecs.schema;
    if latents.len() != schema.units.len() {
        return Err(Error::Shape(format!(
            "{} latents for {} units",
            latents.len(),
            schema.units.len()
        )));
    }
    latents
        .iter()
        .enumerate()
        .map(|(ui, z)| {
            let mut z = z.clone();
            stats.unstandardize(schema, ui, &mut z);
            codecs.decode_unit(ui, &z)
        })
        .collect()
}
