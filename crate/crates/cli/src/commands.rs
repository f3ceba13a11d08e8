//! Subcommand implementations. Each writes its artifacts plus a `run.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use geodiff::backbone::{fit, Backbone, Checkpoint};
use geodiff::codec::{
    codec_input, preencode_dataset, save_codec, train_codec, CodecConfig, CodecSet, ConvVae,
    Decoded, LatentStore,
};
use geodiff::diffusion::NoiseSchedule;
use geodiff::eval::{
    distribution_narrowing, eval_tiles, latlon_dispersion, leave_one_out, oracle_draws,
    peak_capability, spectral_profile, tile_level, write_csv, write_report, Direction, Generator,
    Report, TileTruth,
};
use geodiff::io::{file_hash, hash_json};
use geodiff::rng::derive_seed;
use geodiff::sampler::{
    read_ensembles, sample_ensembles, write_ensembles, ConditioningSpec, Network, StoredEnsemble,
};
use geodiff::schema::{build_schema, ModalityKind, Schema};
use geodiff::world::{read_dataset, write_dataset, Dataset, Split, UnitValue, LATLON};
use geodiff::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{Cli, Command, EvalArgs, ModelArgs, Protocol, SampleArgs};

/// Sample seeds stay below 2^48 so `base + tile·n` cannot overflow.
const SEED_MASK: u64 = (1 << 48) - 1;

struct Ctx<'a> {
    cli: &'a Cli,
    config: RunConfig,
    schema: Schema,
}

impl Ctx<'_> {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.config, self.schema.hash(), self.cli.seed)
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cli.seed, stage)
    }

    fn sample_base(&self) -> u64 {
        self.seed("sample") & SEED_MASK
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads != 1 {
        return Err(Error::Config(format!(
            "--threads {}: computation is single-threaded, only 1 is supported",
            cli.threads
        ))
        .into());
    }
    let config = RunConfig::load(cli.config.as_deref())?;
    let schema = build_schema(&config.schema)?;
    let ctx = Ctx {
        cli,
        config,
        schema,
    };
    match &cli.command {
        Command::Dataset { out, tiles } => dataset(&ctx, out, *tiles),
        Command::TrainCodec {
            dataset,
            unit,
            steps,
            out,
        } => train_codecs(&ctx, dataset, unit, *steps, out),
        Command::Preencode {
            dataset,
            codecs,
            out,
        } => preencode(&ctx, dataset, codecs.as_deref(), out),
        Command::Train {
            latents,
            steps,
            out,
        } => train(&ctx, latents, *steps, out),
        Command::Sample(args) => sample(&ctx, args),
        Command::Eval(args) => eval(&ctx, args),
    }
}

/// Error category and exit code: 2 bad input, 3 integrity, 4 I/O, 1 otherwise.
pub fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if let Some(g) = cause.downcast_ref::<Error>() {
            return match g {
                Error::HashMismatch { .. } | Error::Format { .. } | Error::Json(_) => {
                    ("integrity", 3)
                }
                Error::InvalidSpec(_) => ("invalid_spec", 2),
                Error::Config(_)
                | Error::MissingModality(_)
                | Error::Shape(_)
                | Error::OutOfRange(_)
                | Error::ClassOutOfRange { .. }
                | Error::Empty(_) => ("invalid_input", 2),
                Error::Io(_) => ("io", 4),
                _ => ("runtime", 1),
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("invalid_input", 2);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 4);
        }
    }
    ("runtime", 1)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn dataset(ctx: &Ctx, out: &Path, tiles: Option<usize>) -> Result<()> {
    let mut run = ctx.manifest("dataset");
    let mut world = ctx.config.world.clone();
    world.seed = ctx.seed("world");
    run.seeds.insert("world".into(), world.seed);
    let n = tiles.unwrap_or(ctx.config.tiles);
    let m = write_dataset(&world, &ctx.schema, n, out)?;
    eprintln!(
        "dataset: {} tiles ({} train, {} val, {} test)",
        n, m.train, m.val, m.test
    );
    run.outputs.push("manifest.json".into());
    run.finish(out)?;
    Ok(())
}

fn train_codecs(
    ctx: &Ctx,
    dataset_dir: &Path,
    units: &[String],
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut run = ctx.manifest("train-codec");
    let data = read_dataset(dataset_dir, &ctx.schema)?;
    run.inputs.insert(
        "dataset".into(),
        file_hash(&dataset_dir.join("manifest.json"))?,
    );
    let names: Vec<String> = if units.is_empty() {
        ctx.schema
            .units
            .iter()
            .filter(|u| u.is_image())
            .map(|u| u.name.clone())
            .collect()
    } else {
        units
            .iter()
            .map(|n| Ok(ctx.schema.resolve(n)?))
            .collect::<Result<Vec<_>>>()?
            .concat()
            .into_iter()
            .map(|i| ctx.schema.units[i].name.clone())
            .collect()
    };
    fs::create_dir_all(out)?;
    let mut report = BTreeMap::new();
    for name in names {
        let u = ctx.schema.unit(&name)?;
        if !u.is_image() {
            return Err(Error::Config(format!("`{name}` is not an image unit")).into());
        }
        let images = |split: Split| -> Result<Vec<Vec<f32>>> {
            data.indices(split)
                .into_iter()
                .map(|i| {
                    let values = data.records[i].unit_values(data.world())?;
                    Ok(codec_input(u, &values[&name])?)
                })
                .collect()
        };
        let seed = ctx.seed(&format!("codec/{name}"));
        run.seeds.insert(format!("codec/{name}"), seed);
        let config = CodecConfig {
            downsample_factor: ctx.schema.downsample_factor,
            latent_channels: u.latent_channels,
            seed,
            ..ctx.config.codec.clone()
        };
        let mut opts = ctx.config.codec_train;
        opts.seed = seed;
        if let Some(s) = steps {
            opts.steps = s;
        }
        let mut vae = ConvVae::<f32>::new(config, u.channels, u.grid)?;
        let trace = train_codec(&mut vae, &images(Split::Train)?, &opts)?;
        let val = images(Split::Val)?;
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(f64::from(vae.reconstruction_mse(&val)?))
        };
        save_codec(&vae, &name, out)?;
        let rows: Vec<LossRow> = trace
            .iter()
            .enumerate()
            .map(|(step, &l)| LossRow {
                step,
                loss: f64::from(l),
            })
            .collect();
        write_csv(&out.join(format!("{name}.losses.csv")), &rows)?;
        eprintln!(
            "codec {name}: final loss {:?}, val mse {val_mse:?}",
            trace.last()
        );
        report.insert(
            name.clone(),
            serde_json::json!({ "final_loss": trace.last(), "val_mse": val_mse }),
        );
        run.outputs.extend([
            format!("{name}.json"),
            format!("{name}.bin"),
            format!("{name}.losses.csv"),
        ]);
    }
    geodiff::io::write_json(&out.join("codecs.json"), &report)?;
    run.outputs.push("codecs.json".into());
    run.finish(out)?;
    Ok(())
}

fn preencode(ctx: &Ctx, dataset_dir: &Path, codecs: Option<&Path>, out: &Path) -> Result<()> {
    let mut run = ctx.manifest("preencode");
    let data = read_dataset(dataset_dir, &ctx.schema)?;
    run.inputs.insert(
        "dataset".into(),
        file_hash(&dataset_dir.join("manifest.json"))?,
    );
    let set = CodecSet::<f32>::load(&ctx.schema, codecs)?;
    run.inputs.insert("codecs".into(), set.fingerprint());
    let store = preencode_dataset(&set, &data)?;
    store.write(&ctx.schema, out)?;
    eprintln!("preencode: {} tiles", store.latents.len());
    run.outputs.extend([
        "manifest.json".to_string(),
        "stats.json".to_string(),
        "tiles/".to_string(),
    ]);
    run.finish(out)?;
    Ok(())
}

fn train(ctx: &Ctx, latents: &Path, steps: Option<usize>, out: &Path) -> Result<()> {
    let mut run = ctx.manifest("train");
    let store = LatentStore::read(&ctx.schema, latents)?;
    run.inputs.insert("latents".into(), store.fingerprint());
    let model = Backbone::new(&ctx.schema, ctx.config.backbone)?;
    let schedule = ctx.config.schedule.build()?;
    let mut config = ctx.config.train;
    if let Some(s) = steps {
        config.steps = s;
    }
    let seed = ctx.seed("train");
    run.seeds.insert("train".into(), seed);
    let every = (config.steps / 10).max(1);
    let ckpt = fit::<f32>(&model, &schedule, &store, &config, seed, |step, loss| {
        if (step + 1) % every == 0 {
            eprintln!("step {} loss {loss:.4}", step + 1);
        }
    })?;
    let hash = ckpt.save(out)?;
    let rows: Vec<LossRow> = ckpt
        .losses
        .iter()
        .enumerate()
        .map(|(step, &l)| LossRow {
            step,
            loss: f64::from(l),
        })
        .collect();
    write_csv(&out.join("losses.csv"), &rows)?;
    eprintln!("checkpoint {hash}");
    run.outputs.extend(
        [
            "manifest.json",
            "params.bin",
            "ema.bin",
            "losses.bin",
            "losses.csv",
        ]
        .map(String::from),
    );
    run.finish(out)?;
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint<f32>,
    ckpt_hash: String,
    store: LatentStore,
    codecs: CodecSet<f32>,
    schedule: NoiseSchedule,
}

impl Loaded {
    fn network(&self) -> Network<'_, f32> {
        Network {
            backbone: &self.ckpt.backbone,
            params: &self.ckpt.ema,
        }
    }

    fn generator<'a>(&'a self, net: &'a Network<'a, f32>) -> Generator<'a, f32, Network<'a, f32>> {
        Generator {
            model: net,
            schedule: &self.schedule,
            codecs: &self.codecs,
            stats: &self.store.stats,
        }
    }
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")).into())
}

fn load_model(ctx: &Ctx, args: &ModelArgs, run: &mut RunManifest) -> Result<Loaded> {
    let ckpt_dir = required(&args.checkpoint, "checkpoint")?;
    let store = LatentStore::read(&ctx.schema, required(&args.latents, "latents")?)?;
    let ckpt = Checkpoint::<f32>::load(ckpt_dir, &ctx.schema)?;
    let ckpt_hash = file_hash(&ckpt_dir.join("manifest.json"))?;
    let latents_hash = store.fingerprint();
    if ckpt.latents_hash != latents_hash {
        return Err(Error::HashMismatch {
            what: "checkpoint latents".into(),
            expected: ckpt.latents_hash,
            found: latents_hash,
        }
        .into());
    }
    let codecs = CodecSet::<f32>::load(&ctx.schema, args.codecs.as_deref())?;
    let codec_hash = codecs.fingerprint();
    if codec_hash != store.codec_hash {
        return Err(Error::HashMismatch {
            what: "latent store codecs".into(),
            expected: store.codec_hash.clone(),
            found: codec_hash,
        }
        .into());
    }
    run.inputs.insert("checkpoint".into(), ckpt_hash.clone());
    run.inputs.insert("latents".into(), latents_hash);
    run.inputs.insert("codecs".into(), codec_hash);
    let schedule = ckpt.schedule.build()?;
    Ok(Loaded {
        ckpt,
        ckpt_hash,
        store,
        codecs,
        schedule,
    })
}

/// Condition on the named units (modalities expand to their units) of `tile`;
/// generate `generate`, or everything else when empty.
fn build_spec(
    schema: &Schema,
    condition: &[String],
    generate: &[String],
    tile: &[Vec<f32>],
) -> Result<ConditioningSpec<f32>> {
    let names: Vec<&str> = condition.iter().map(String::as_str).collect();
    let mut spec = ConditioningSpec::from_tile(schema, &names, tile)?;
    if !generate.is_empty() {
        spec.generate = generate.to_vec();
    }
    spec.resolve(schema)?;
    Ok(spec)
}

fn test_tiles(store: &LatentStore, count: usize) -> Result<Vec<usize>> {
    let test = store.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("test split".into()).into());
    }
    Ok(test.into_iter().take(count).collect())
}

fn sample(ctx: &Ctx, args: &SampleArgs) -> Result<()> {
    let mut run = ctx.manifest("sample");
    let zeros: Vec<Vec<f32>> = ctx
        .schema
        .units
        .iter()
        .map(|u| vec![0.0; u.latent_len()])
        .collect();
    build_spec(&ctx.schema, &args.condition, &args.generate, &zeros)
        .context("invalid conditioning spec")?;
    let model = load_model(ctx, &args.model, &mut run)?;
    let n = args.n.unwrap_or(ctx.config.samples);
    let tiles = test_tiles(&model.store, args.tiles.unwrap_or(ctx.config.eval_tiles))?;
    let base = ctx.sample_base();
    run.seeds.insert("sample".into(), base);
    let specs = tiles
        .iter()
        .map(|&t| {
            build_spec(
                &ctx.schema,
                &args.condition,
                &args.generate,
                &model.store.latents[t],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = tiles.iter().map(|&t| base + (t * n) as u64).collect();
    eprintln!("sampling {} tiles × {n}", tiles.len());
    let ens = sample_ensembles(&model.network(), &model.schedule, &specs, n, &seeds)?;
    let entries: Vec<_> = tiles.into_iter().zip(ens).collect();
    write_ensembles(
        args.out.as_path(),
        &model.codecs,
        &model.store.stats,
        &model.ckpt_hash,
        &model.store.fingerprint(),
        &entries,
    )?;
    run.outputs.push("manifest.json".into());
    run.outputs
        .extend(entries.iter().map(|(t, _)| format!("tile_{t:05}/")));
    run.finish(&args.out)?;
    Ok(())
}

fn truths(
    data: &Dataset,
    tiles: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, TileTruth>> {
    tiles
        .into_iter()
        .map(|t| {
            let rec = data
                .records
                .get(t)
                .ok_or_else(|| Error::OutOfRange(format!("tile {t} not in dataset")))?;
            Ok((t, TileTruth::from_record(t, rec, data.world())?))
        })
        .collect()
}

fn continuous(d: &Decoded<f32>) -> Result<Vec<f64>> {
    match d {
        Decoded::Continuous(v) => Ok(v.iter().map(|&x| f64::from(x)).collect()),
        Decoded::Classes { .. } => Err(anyhow!("expected a continuous unit")),
    }
}

#[derive(Serialize)]
struct PeakRow {
    unit: String,
    metric: String,
    tile: usize,
    best: f64,
    mean: f64,
}

#[derive(Serialize)]
struct SpectralRow {
    tile: usize,
    unit: String,
    source: &'static str,
    class: usize,
    band: usize,
    value: f64,
}

#[derive(Serialize)]
struct LooCsvRow {
    removed: String,
    mean: f64,
    std: f64,
    best_mean: f64,
}

#[derive(Serialize)]
struct NarrowingRow {
    tile: usize,
    rung: usize,
    condition: String,
    band: usize,
    std: f64,
    oracle_std: f64,
    pixel_std: f64,
    pixel_std_se: f64,
    oracle_pixel_std: f64,
    wasserstein: f64,
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let mut run = ctx.manifest("eval");
    let data = read_dataset(&args.dataset, &ctx.schema)?;
    run.inputs.insert(
        "dataset".into(),
        file_hash(&args.dataset.join("manifest.json"))?,
    );
    fs::create_dir_all(&args.out)?;
    match args.protocol {
        Protocol::TileLevel | Protocol::Peak | Protocol::Spectral | Protocol::Latlon => {
            let dir = required(&args.ensemble, "ensemble")?;
            let (_, ensembles) = read_ensembles::<f32>(dir, &ctx.schema)?;
            let ens_hash = file_hash(&dir.join("manifest.json"))?;
            run.inputs.insert("ensemble".into(), ens_hash.clone());
            let truths = truths(&data, ensembles.iter().map(|e| e.tile))?;
            let files = match args.protocol {
                Protocol::TileLevel => {
                    eval_tile_level(ctx, &ensembles, &truths, &ens_hash, &args.out)?
                }
                Protocol::Peak => eval_peak(ctx, &ensembles, &truths, &ens_hash, &args.out)?,
                Protocol::Spectral => {
                    eval_spectral(ctx, &data, &ensembles, &truths, &ens_hash, &args.out)?
                }
                _ => eval_latlon(ctx, &ensembles, &truths, &ens_hash, &args.out)?,
            };
            run.outputs.extend(files);
        }
        Protocol::LeaveOneOut | Protocol::Narrowing => {
            let target = args
                .target
                .as_deref()
                .ok_or_else(|| Error::Config("--target is required".into()))?;
            let model = load_model(ctx, &args.model, &mut run)?;
            let n = args.n.unwrap_or(ctx.config.samples);
            let tiles = test_tiles(&model.store, args.tiles.unwrap_or(ctx.config.eval_tiles))?;
            let prepared = eval_tiles(&data, &model.store, &tiles)?;
            let base = ctx.sample_base();
            run.seeds.insert("sample".into(), base);
            let net = model.network();
            let g = model.generator(&net);
            if args.protocol == Protocol::LeaveOneOut {
                let table = leave_one_out(&g, &prepared, target, n, base, None)?;
                let rows: Vec<LooCsvRow> = table
                    .rows
                    .iter()
                    .map(|r| LooCsvRow {
                        removed: r.removed.clone(),
                        mean: r.error.mean,
                        std: r.error.std,
                        best_mean: r.best_mean,
                    })
                    .collect();
                write_csv(&args.out.join("loo.csv"), &rows)?;
                write_report(
                    &args.out.join("loo.json"),
                    &Report::new("leave-one-out", &model.ckpt_hash, table),
                )?;
                run.outputs
                    .extend(["loo.csv", "loo.json"].map(String::from));
            } else {
                let oracle_n = n.max(2);
                let oracle_seed = ctx.seed("oracle");
                run.seeds.insert("oracle".into(), oracle_seed);
                let mut rows = Vec::new();
                let mut rungs_out = BTreeMap::new();
                for t in &prepared {
                    let rec = &data.records[t.truth.tile];
                    let oracle = oracle_draws(
                        data.world(),
                        rec,
                        &model.codecs,
                        target,
                        oracle_n,
                        oracle_seed ^ t.truth.tile as u64,
                    )?;
                    let ladder: Vec<Vec<&str>> = (0..=args.ladder.len())
                        .map(|k| args.ladder[..k].iter().map(String::as_str).collect())
                        .collect();
                    let rungs = distribution_narrowing(
                        &g,
                        t,
                        &ladder,
                        target,
                        n,
                        base + (t.truth.tile * n) as u64,
                        &oracle,
                    )?;
                    for (k, r) in rungs.iter().enumerate() {
                        for b in &r.bands {
                            rows.push(NarrowingRow {
                                tile: t.truth.tile,
                                rung: k,
                                condition: r.condition.join("+"),
                                band: b.band,
                                std: b.std,
                                oracle_std: b.oracle_std,
                                pixel_std: b.pixel_std,
                                pixel_std_se: b.pixel_std_se,
                                oracle_pixel_std: b.oracle_pixel_std,
                                wasserstein: b.wasserstein,
                            });
                        }
                    }
                    rungs_out.insert(t.truth.tile, rungs);
                }
                write_csv(&args.out.join("narrowing.csv"), &rows)?;
                write_report(
                    &args.out.join("narrowing.json"),
                    &Report::new("narrowing", &model.ckpt_hash, rungs_out),
                )?;
                run.outputs
                    .extend(["narrowing.csv", "narrowing.json"].map(String::from));
            }
        }
    }
    run.finish(&args.out)?;
    Ok(())
}

fn eval_tile_level(
    ctx: &Ctx,
    ensembles: &[StoredEnsemble<f32>],
    truths: &BTreeMap<usize, TileTruth>,
    ens_hash: &str,
    out: &Path,
) -> Result<Vec<String>> {
    let (rows, summary) = tile_level(&ctx.schema, ensembles, truths)?;
    write_csv(&out.join("metrics.csv"), &rows)?;
    write_report(
        &out.join("summary.json"),
        &Report::new("tile-level", ens_hash, summary),
    )?;
    Ok(vec!["metrics.csv".into(), "summary.json".into()])
}

fn eval_peak(
    ctx: &Ctx,
    ensembles: &[StoredEnsemble<f32>],
    truths: &BTreeMap<usize, TileTruth>,
    ens_hash: &str,
    out: &Path,
) -> Result<Vec<String>> {
    let (rows, summary) = tile_level(&ctx.schema, ensembles, truths)?;
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.unit, r.metric))
            .or_default()
            .entry(r.tile)
            .or_default()
            .push(r.value);
    }
    let direction: BTreeMap<(String, String), Direction> = summary
        .iter()
        .map(|s| ((s.unit.clone(), s.metric.clone()), s.direction))
        .collect();
    let mut csv_rows = Vec::new();
    let mut reports = BTreeMap::new();
    for (key, per_tile) in groups {
        let tiles: Vec<usize> = per_tile.keys().copied().collect();
        let lists: Vec<Vec<f64>> = per_tile.into_values().collect();
        let peak = peak_capability(&lists, direction[&key])?;
        for (i, &t) in tiles.iter().enumerate() {
            csv_rows.push(PeakRow {
                unit: key.0.clone(),
                metric: key.1.clone(),
                tile: t,
                best: peak.best[i],
                mean: peak.tile_mean[i],
            });
        }
        reports.insert(format!("{}/{}", key.0, key.1), peak);
    }
    write_csv(&out.join("peak.csv"), &csv_rows)?;
    write_report(
        &out.join("peak.json"),
        &Report::new("peak", ens_hash, reports),
    )?;
    Ok(vec!["peak.csv".into(), "peak.json".into()])
}

fn eval_spectral(
    ctx: &Ctx,
    data: &Dataset,
    ensembles: &[StoredEnsemble<f32>],
    truths: &BTreeMap<usize, TileTruth>,
    ens_hash: &str,
    out: &Path,
) -> Result<Vec<String>> {
    let world = data.world();
    let lulc_unit = ctx
        .schema
        .units
        .iter()
        .find(|u| u.kind == ModalityKind::CategoricalImage)
        .ok_or_else(|| Error::MissingModality("land-cover unit".into()))?;
    let optical: Vec<String> = (0..world.optical_groups.len())
        .map(|i| world.optical_unit(i))
        .collect();
    let mut rows = Vec::new();
    for e in ensembles {
        let truth = &truths[&e.tile];
        let Some(UnitValue::Classes(lulc)) = truth.values.get(&lulc_unit.name) else {
            return Err(Error::MissingModality(format!("land cover of tile {}", e.tile)).into());
        };
        let generated: Vec<usize> = e
            .ensemble
            .spec
            .generate
            .iter()
            .map(|n| ctx.schema.resolve(n))
            .collect::<geodiff::Result<Vec<_>>>()?
            .concat();
        for ui in generated {
            let u = &ctx.schema.units[ui];
            if !optical.contains(&u.name) {
                continue;
            }
            let pixels: Vec<(usize, usize)> = (0..u.grid)
                .flat_map(|y| (0..u.grid).map(move |x| (y, x)))
                .collect();
            let images = e
                .decoded
                .iter()
                .map(|d| continuous(&d[ui]))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            let gt = match &truth.values[&u.name] {
                UnitValue::Continuous(v) => v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>(),
                UnitValue::Classes(_) => return Err(anyhow!("`{}` truth is categorical", u.name)),
            };
            for (source, imgs) in [("generated", refs), ("truth", vec![gt.as_slice()])] {
                let prof = spectral_profile(
                    &imgs,
                    u.channels,
                    u.grid,
                    lulc,
                    lulc_unit.grid,
                    world.classes(),
                    &pixels,
                )?;
                for (class, p) in prof.into_iter().enumerate() {
                    for (band, value) in p.into_iter().flatten().enumerate() {
                        rows.push(SpectralRow {
                            tile: e.tile,
                            unit: u.name.clone(),
                            source,
                            class,
                            band,
                            value,
                        });
                    }
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidSpec("the ensemble generates no optical unit".into()).into());
    }
    write_csv(&out.join("spectral.csv"), &rows)?;
    write_report(
        &out.join("spectral.json"),
        &Report::new(
            "spectral",
            ens_hash,
            serde_json::json!({ "rows": rows.len(), "rows_hash": hash_json(&rows) }),
        ),
    )?;
    Ok(vec!["spectral.csv".into(), "spectral.json".into()])
}

fn eval_latlon(
    ctx: &Ctx,
    ensembles: &[StoredEnsemble<f32>],
    truths: &BTreeMap<usize, TileTruth>,
    ens_hash: &str,
    out: &Path,
) -> Result<Vec<String>> {
    let ll = ctx
        .schema
        .unit_index(LATLON)
        .ok_or_else(|| Error::MissingModality(LATLON.into()))?;
    let mut reports = BTreeMap::new();
    for e in ensembles {
        let generated = e
            .ensemble
            .spec
            .generate
            .iter()
            .map(|n| ctx.schema.resolve(n))
            .collect::<geodiff::Result<Vec<_>>>()?
            .concat();
        if !generated.contains(&ll) {
            continue;
        }
        let preds = e
            .decoded
            .iter()
            .map(|d| {
                let v = continuous(&d[ll])?;
                Ok([v[0], v[1], v[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        reports.insert(e.tile, latlon_dispersion(&preds, truths[&e.tile].latlon)?);
    }
    if reports.is_empty() {
        return Err(Error::InvalidSpec("the ensemble does not generate `latlon`".into()).into());
    }
    write_report(
        &out.join("latlon.json"),
        &Report::new("latlon", ens_hash, reports),
    )?;
    Ok(vec!["latlon.json".into()])
}
