//! Evaluation protocols over ensembles and trained models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::analysis::{band_spreads, peak_capability, BandSpread, Direction, Summary};
use super::metrics::{categorical_metrics, geodesic_km, mae, psnr, rmse, ssim, SSIM_WINDOW};
use crate::codec::{CodecSet, Decoded, LatentStats, LatentStore};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geo::{decode_latlon, GeoVec};
use crate::rng::stream;
use crate::sampler::{decode_sample, sample_ensembles, ConditioningSpec, Denoiser, StoredEnsemble};
use crate::scalar::Scalar;
use crate::schema::{ModalityKind, Schema, Unit};
use crate::world::{resample_nuisance, Dataset, TileRecord, UnitValue, WorldConfig, LATLON};

/// Ground truth of one tile: raw unit values and location.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTruth {
    pub tile: usize,
    pub values: BTreeMap<String, UnitValue>,
    pub latlon: (f64, f64),
}

impl TileTruth {
    pub fn from_record(tile: usize, rec: &TileRecord, world: &WorldConfig) -> Result<Self> {
        Ok(TileTruth {
            tile,
            values: rec.unit_values(world)?,
            latlon: (rec.lat, rec.lon),
        })
    }
}

/// Ground truth and standardized latents of the listed tiles.
pub fn eval_tiles(
    dataset: &Dataset,
    store: &LatentStore,
    indices: &[usize],
) -> Result<Vec<EvalTile<f32>>> {
    indices
        .iter()
        .map(|&i| {
            let rec = dataset
                .records
                .get(i)
                .ok_or_else(|| Error::OutOfRange(format!("tile {i}")))?;
            let latents = store
                .latents
                .get(i)
                .ok_or_else(|| Error::OutOfRange(format!("latents of tile {i}")))?;
            Ok(EvalTile {
                latents: latents.clone(),
                truth: TileTruth::from_record(i, rec, dataset.world())?,
            })
        })
        .collect()
}

/// `n` draws of `unit` from the tile's conditional distribution given its
/// structure (fresh nuisances), passed through the unit's codec.
pub fn oracle_draws<F: Scalar>(
    world: &WorldConfig,
    rec: &TileRecord,
    codecs: &CodecSet<F>,
    unit: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let ui = codecs
        .schema
        .unit_index(unit)
        .ok_or_else(|| Error::MissingModality(unit.into()))?;
    let mut rng = stream(seed, "oracle");
    (0..n)
        .map(|_| {
            let draw = resample_nuisance(world, rec, &mut rng);
            let values = draw.unit_values(world)?;
            let z = codecs.encode_unit(ui, &values[unit])?;
            match codecs.decode_unit(ui, &z)? {
                Decoded::Continuous(v) => Ok(v.iter().map(|x| x.f64()).collect()),
                Decoded::Classes { .. } => Err(Error::Config(format!("`{unit}` is categorical"))),
            }
        })
        .collect()
}

/// A tile prepared for model-driven protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTile<F> {
    /// Standardized latents per unit.
    pub latents: Vec<Vec<F>>,
    pub truth: TileTruth,
}

/// Everything needed to go from a spec to decoded samples.
pub struct Generator<'a, F: Scalar, D> {
    pub model: &'a D,
    pub schedule: &'a NoiseSchedule,
    pub codecs: &'a CodecSet<F>,
    pub stats: &'a LatentStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: &'static str,
    pub value: f64,
    pub direction: Direction,
}

fn value_range(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Metrics of one decoded unit against ground truth. PSNR and SSIM use the
/// ground truth's dynamic range (1 when constant).
pub fn unit_metrics<F: Scalar>(
    u: &Unit,
    decoded: &Decoded<F>,
    truth: &TileTruth,
) -> Result<Vec<MetricValue>> {
    let gt = truth
        .values
        .get(&u.name)
        .ok_or_else(|| Error::MissingModality(u.name.clone()))?;
    let lower = |name, value| MetricValue {
        name,
        value,
        direction: Direction::Lower,
    };
    let higher = |name, value| MetricValue {
        name,
        value,
        direction: Direction::Higher,
    };
    match (decoded, gt) {
        (Decoded::Continuous(pred), UnitValue::Continuous(gt)) => {
            let pred: Vec<f64> = pred.iter().map(|v| v.f64()).collect();
            let gt: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
            let mut out = vec![
                lower("mae", mae(&pred, &gt)?),
                lower("rmse", rmse(&pred, &gt)?),
            ];
            if u.kind == ModalityKind::ContinuousImage {
                let range = value_range(&gt);
                out.push(higher("psnr", psnr(&pred, &gt, range)?));
                if u.grid >= SSIM_WINDOW {
                    out.push(higher("ssim", ssim(&pred, &gt, u.channels, u.grid, range)?));
                }
            }
            if u.name == LATLON {
                if let Ok(ll) = decode_latlon(GeoVec {
                    x: pred[0],
                    y: pred[1],
                    z: pred[2],
                }) {
                    out.push(lower("km", geodesic_km(ll, truth.latlon)));
                }
            }
            Ok(out)
        }
        (Decoded::Classes { map, scores }, UnitValue::Classes(gt)) => {
            let k = u.classes.unwrap_or(0);
            let m = categorical_metrics(map, gt, Some(scores), k)?;
            let mut out = vec![higher("top1", m.top1)];
            if let Some(t3) = m.top3 {
                out.push(higher("top3", t3));
            }
            out.extend([
                higher("miou", m.miou),
                higher("fw_iou", m.fw_iou),
                higher("mean_f1", m.mean_f1),
            ]);
            Ok(out)
        }
        _ => Err(Error::Config(format!(
            "`{}`: decoded and ground-truth kinds differ",
            u.name
        ))),
    }
}

/// One CSV row of the tile-level protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tile: usize,
    pub sample: usize,
    pub seed: u64,
    pub unit: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub unit: String,
    pub metric: String,
    pub direction: Direction,
    pub tiles: usize,
    /// Over every tile and sample.
    pub mean: f64,
    pub std: f64,
    /// Mean over tiles of the best sample per tile.
    pub best_mean: f64,
}

/// Metrics of every generated unit of every sample, plus aggregates.
pub fn tile_level(
    schema: &Schema,
    ensembles: &[StoredEnsemble<f32>],
    truths: &BTreeMap<usize, TileTruth>,
) -> Result<(Vec<MetricRow>, Vec<MetricSummary>)> {
    let mut rows = Vec::new();
    let mut groups: BTreeMap<(String, &'static str), (Direction, BTreeMap<usize, Vec<f64>>)> =
        BTreeMap::new();
    for e in ensembles {
        let truth = truths
            .get(&e.tile)
            .ok_or_else(|| Error::MissingModality(format!("ground truth of tile {}", e.tile)))?;
        let generated: Vec<usize> = e
            .ensemble
            .spec
            .generate
            .iter()
            .map(|n| schema.resolve(n))
            .collect::<Result<Vec<_>>>()?
            .concat();
        for (j, (dec, &seed)) in e.decoded.iter().zip(&e.ensemble.seeds).enumerate() {
            for &ui in &generated {
                let u = &schema.units[ui];
                for m in unit_metrics(u, &dec[ui], truth)? {
                    rows.push(MetricRow {
                        tile: e.tile,
                        sample: j,
                        seed,
                        unit: u.name.clone(),
                        metric: m.name.into(),
                        value: m.value,
                    });
                    groups
                        .entry((u.name.clone(), m.name))
                        .or_insert_with(|| (m.direction, BTreeMap::new()))
                        .1
                        .entry(e.tile)
                        .or_default()
                        .push(m.value);
                }
            }
        }
    }
    let mut summary = Vec::new();
    for ((unit, metric), (direction, per_tile)) in groups {
        let lists: Vec<Vec<f64>> = per_tile.into_values().collect();
        let peak = peak_capability(&lists, direction)?;
        summary.push(MetricSummary {
            unit,
            metric: metric.into(),
            direction,
            tiles: lists.len(),
            mean: peak.overall.mean,
            std: peak.overall.std,
            best_mean: peak.best_mean,
        });
    }
    Ok((rows, summary))
}

/// Error of a generated target against truth: mean over target units of the
/// MAE (continuous) or 1 − pixel accuracy (categorical).
pub fn target_error<F: Scalar>(
    schema: &Schema,
    targets: &[usize],
    decoded: &[Decoded<F>],
    truth: &TileTruth,
) -> Result<f64> {
    let mut total = 0.0;
    for &ui in targets {
        let u = &schema.units[ui];
        let m = unit_metrics(u, &decoded[ui], truth)?;
        let first = m[0];
        total += if first.name == "top1" {
            1.0 - first.value
        } else {
            first.value
        };
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub removed: String,
    pub condition: Vec<String>,
    pub error: Summary,
    /// Best sample error per tile, in tile order.
    pub best: Vec<f64>,
    pub best_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooTable {
    pub target: String,
    pub samples: usize,
    pub rows: Vec<LooRow>,
}

fn modality_names(schema: &Schema) -> Vec<String> {
    schema.modalities.iter().map(|m| m.name.clone()).collect()
}

/// For each removed modality `r`, generates `target` from every other
/// modality except `r`. `removals` defaults to every modality but the target's.
/// Tile `i` uses seeds `base_seed + i·n ..`, shared by all rows.
pub fn leave_one_out<F: Scalar, D: Denoiser<F>>(
    g: &Generator<'_, F, D>,
    tiles: &[EvalTile<F>],
    target: &str,
    n: usize,
    base_seed: u64,
    removals: Option<&[&str]>,
) -> Result<LooTable> {
    let schema = g.model.schema();
    let targets = schema.resolve(target)?;
    let target_mods: Vec<&str> = targets
        .iter()
        .map(|&i| schema.units[i].modality.as_str())
        .collect();
    let all = modality_names(schema);
    let removed: Vec<String> = match removals {
        Some(r) => r.iter().map(|s| s.to_string()).collect(),
        None => all
            .iter()
            .filter(|m| !target_mods.contains(&m.as_str()))
            .cloned()
            .collect(),
    };
    for r in &removed {
        if !all.contains(r) || target_mods.contains(&r.as_str()) {
            return Err(Error::InvalidSpec(format!(
                "cannot remove `{r}` when generating `{target}`"
            )));
        }
    }
    let mut specs = Vec::new();
    let mut seeds = Vec::new();
    let mut conditions = Vec::new();
    for r in &removed {
        let cond: Vec<&str> = all
            .iter()
            .map(String::as_str)
            .filter(|m| m != r && !target_mods.contains(m))
            .collect();
        let keep: Vec<&str> = schema
            .units
            .iter()
            .filter(|u| cond.contains(&u.modality.as_str()))
            .map(|u| u.name.as_str())
            .collect();
        conditions.push(cond.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        for (i, t) in tiles.iter().enumerate() {
            specs.push(ConditioningSpec::from_tile(schema, &keep, &t.latents)?);
            seeds.push(base_seed + (i * n) as u64);
        }
    }
    let ens = sample_ensembles(g.model, g.schedule, &specs, n, &seeds)?;
    let mut rows = Vec::new();
    for ((r, cond), chunk) in removed
        .into_iter()
        .zip(conditions)
        .zip(ens.chunks(tiles.len().max(1)))
    {
        let mut per_tile = Vec::with_capacity(tiles.len());
        for (t, e) in tiles.iter().zip(chunk) {
            let errs = e
                .samples
                .iter()
                .map(|s| {
                    target_error(
                        schema,
                        &targets,
                        &decode_sample(g.codecs, g.stats, s)?,
                        &t.truth,
                    )
                })
                .collect::<Result<Vec<f64>>>()?;
            per_tile.push(errs);
        }
        let peak = peak_capability(&per_tile, Direction::Lower)?;
        rows.push(LooRow {
            removed: r,
            condition: cond,
            error: peak.overall,
            best_mean: peak.best_mean,
            best: peak.best,
        });
    }
    Ok(LooTable {
        target: target.into(),
        samples: n,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub condition: Vec<String>,
    pub bands: Vec<BandSpread>,
}

/// Checks that every rung's conditioning set strictly contains the previous one.
pub fn validate_ladder(schema: &Schema, ladder: &[Vec<&str>]) -> Result<()> {
    let mut prev: Vec<usize> = Vec::new();
    for (k, rung) in ladder.iter().enumerate() {
        let mut cur: Vec<usize> = rung
            .iter()
            .map(|n| schema.resolve(n))
            .collect::<Result<Vec<_>>>()?
            .concat();
        cur.sort_unstable();
        cur.dedup();
        if k > 0 && (cur.len() <= prev.len() || !prev.iter().all(|p| cur.contains(p))) {
            return Err(Error::InvalidSpec(format!(
                "ladder rung {k} does not strictly extend rung {}",
                k - 1
            )));
        }
        prev = cur;
    }
    Ok(())
}

/// Per rung, `n` samples of `target` (one unit) compared band by band with
/// `oracle` images of the same unit.
pub fn distribution_narrowing<F: Scalar, D: Denoiser<F>>(
    g: &Generator<'_, F, D>,
    tile: &EvalTile<F>,
    ladder: &[Vec<&str>],
    target: &str,
    n: usize,
    base_seed: u64,
    oracle: &[Vec<f64>],
) -> Result<Vec<Rung>> {
    let schema = g.model.schema();
    validate_ladder(schema, ladder)?;
    let ui = schema
        .unit_index(target)
        .ok_or_else(|| Error::MissingModality(target.into()))?;
    let specs = ladder
        .iter()
        .map(|rung| ConditioningSpec::from_tile(schema, rung, &tile.latents))
        .collect::<Result<Vec<_>>>()?;
    if specs.iter().any(|s| s.condition.contains_key(target)) {
        return Err(Error::InvalidSpec(format!(
            "`{target}` cannot be conditioned on in its own ladder"
        )));
    }
    let seeds = vec![base_seed; specs.len()];
    let ens = sample_ensembles(g.model, g.schedule, &specs, n, &seeds)?;
    let oracle_refs: Vec<&[f64]> = oracle.iter().map(Vec::as_slice).collect();
    ladder
        .iter()
        .zip(ens)
        .map(|(rung, e)| {
            let images = e
                .samples
                .iter()
                .map(|s| {
                    let mut z = s[ui].clone();
                    g.stats.unstandardize(schema, ui, &mut z);
                    match g.codecs.decode_unit(ui, &z)? {
                        Decoded::Continuous(v) => {
                            Ok(v.iter().map(|x| x.f64()).collect::<Vec<f64>>())
                        }
                        Decoded::Classes { .. } => {
                            Err(Error::Config(format!("`{target}` is categorical")))
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            Ok(Rung {
                condition: rung.iter().map(|s| s.to_string()).collect(),
                bands: band_spreads(&refs, &oracle_refs, schema.units[ui].channels)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::diffusion::ScheduleConfig;
    use crate::rng::seeded;
    use crate::sampler::Network;
    use crate::schema::{build_schema, SchemaConfig};
    use crate::world::{generate_tile, WorldConfig};

    fn setup() -> (Schema, WorldConfig, CodecSet<f32>, LatentStats) {
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        let codecs = CodecSet::identity(&schema).unwrap();
        let stats = LatentStats {
            units: schema.unit_names(),
            mean: schema
                .units
                .iter()
                .map(|u| vec![0.0; u.latent_channels])
                .collect(),
            std: schema
                .units
                .iter()
                .map(|u| vec![1.0; u.latent_channels])
                .collect(),
        };
        (schema, WorldConfig::toy(), codecs, stats)
    }

    fn eval_tile(world: &WorldConfig, codecs: &CodecSet<f32>, seed: u64) -> EvalTile<f32> {
        let rec = generate_tile(world, &mut seeded(seed));
        let values = rec.unit_values(world).unwrap();
        EvalTile {
            latents: codecs.encode_tile(&values).unwrap(),
            truth: TileTruth {
                tile: seed as usize,
                values,
                latlon: (rec.lat, rec.lon),
            },
        }
    }

    #[test]
    fn encoded_ground_truth_decodes_close_to_truth() {
        let (schema, world, codecs, stats) = setup();
        let t = eval_tile(&world, &codecs, 3);
        let dec = decode_sample(&codecs, &stats, &t.latents).unwrap();
        let lulc = schema.unit_index("LULC").unwrap();
        let m = unit_metrics(&schema.units[lulc], &dec[lulc], &t.truth).unwrap();
        assert!(m.iter().all(|v| v.direction == Direction::Higher));
        assert!(m[0].value > 0.7, "{m:?}");
        let ll = schema.unit_index("latlon").unwrap();
        let m = unit_metrics(&schema.units[ll], &dec[ll], &t.truth).unwrap();
        let km = m.iter().find(|v| v.name == "km").unwrap();
        assert!(km.value < 1e-3, "{km:?}");
        let dem = schema.unit_index("DEM").unwrap();
        let names: Vec<&str> = unit_metrics(&schema.units[dem], &dec[dem], &t.truth)
            .unwrap()
            .iter()
            .map(|m| m.name)
            .collect();
        assert_eq!(names, ["mae", "rmse", "psnr", "ssim"]);
    }

    #[test]
    fn protocols_run_on_an_untrained_model() {
        let (schema, world, codecs, stats) = setup();
        let cfg = BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            zero_init_heads: false,
        };
        let b = Backbone::new(&schema, cfg).unwrap();
        let p = b.init_params::<f32>(0);
        let model = Network {
            backbone: &b,
            params: &p,
        };
        let schedule = ScheduleConfig::shortened(20).build().unwrap();
        let g = Generator {
            model: &model,
            schedule: &schedule,
            codecs: &codecs,
            stats: &stats,
        };
        let tiles: Vec<_> = (0..2).map(|s| eval_tile(&world, &codecs, s)).collect();
        let table = leave_one_out(&g, &tiles, "SAR", 2, 0, None).unwrap();
        assert_eq!(table.rows.len(), schema.modalities.len() - 1);
        assert!(table.rows.iter().all(|r| r.best_mean <= r.error.mean));
        let again = leave_one_out(&g, &tiles, "SAR", 2, 0, None).unwrap();
        assert_eq!(table, again);
        assert!(leave_one_out(&g, &tiles, "SAR", 2, 0, Some(&["SAR"])).is_err());

        let oracle: Vec<Vec<f64>> = (0..3)
            .map(|s| {
                let t = eval_tile(&world, &codecs, 10 + s);
                match &t.truth.values["DEM"] {
                    UnitValue::Continuous(v) => v.iter().map(|&x| x as f64).collect(),
                    _ => unreachable!(),
                }
            })
            .collect();
        let ladder = vec![vec![], vec!["SAR"], vec!["SAR", "LULC"]];
        let rungs = distribution_narrowing(&g, &tiles[0], &ladder, "DEM", 3, 0, &oracle).unwrap();
        assert_eq!(rungs.len(), 3);
        assert_eq!(rungs[2].condition, vec!["SAR", "LULC"]);
        assert!(distribution_narrowing(
            &g,
            &tiles[0],
            &[vec!["SAR"], vec!["SAR"]],
            "DEM",
            3,
            0,
            &oracle
        )
        .is_err());
    }
}
