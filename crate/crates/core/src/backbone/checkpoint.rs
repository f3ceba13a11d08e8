//! Training driver over a latent store, and checkpoints on disk.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, TrainConfig, TrainState};
use crate::codec::LatentStore;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::io::{
    file_hash, read_blob_verified, read_json, sha256_hex, write_blob, write_json, Blob, DType,
};
use crate::params::ParamStore;
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::schema::Schema;
use crate::world::Split;

pub const CHECKPOINT_FORMAT: &str = "geodiff-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub schedule: ScheduleConfig,
    pub ema_decay: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub schema_hash: String,
    pub latents_hash: String,
    pub dtype: DType,
    pub params_file: String,
    pub params_sha256: String,
    pub ema_file: String,
    pub ema_sha256: String,
    pub losses_file: String,
    pub losses_sha256: String,
}

/// Trained weights, their EMA shadow and the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub backbone: Backbone,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub latents_hash: String,
    pub step: usize,
    pub params: ParamStore<F>,
    pub ema: ParamStore<F>,
    pub losses: Vec<F>,
}

/// Trains on the training split of `store`. Batches are drawn with
/// replacement; every random choice derives from `seed`.
pub fn fit<F: Scalar>(
    model: &Backbone,
    schedule: &NoiseSchedule,
    store: &LatentStore,
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, F),
) -> Result<Checkpoint<F>> {
    if store.schema_hash != model.schema.hash() {
        return Err(Error::HashMismatch {
            what: "latent store schema".into(),
            expected: model.schema.hash(),
            found: store.schema_hash.clone(),
        });
    }
    let train = store.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut state = TrainState::new(model.init_params(derive_seed(seed, "init")), config);
    let mut picks = stream(seed, "batches");
    let mut noise = stream(seed, "noise");
    for step in 0..config.steps {
        let tiles: Vec<usize> = (0..config.batch)
            .map(|_| train[picks.random_range(0..train.len())])
            .collect();
        let clean = store.batch::<F>(&tiles);
        let loss = state.train_step(model, schedule, &clean, config.batch, &mut noise)?;
        on_step(step, loss);
    }
    state.params.zero_grads();
    Ok(Checkpoint {
        backbone: model.clone(),
        schedule: schedule.config,
        train: *config,
        seed,
        latents_hash: store.fingerprint(),
        step: state.step,
        ema: state.ema_params(),
        params: state.params,
        losses: state.losses,
    })
}

impl<F: Scalar> Checkpoint<F> {
    /// Writes weights, EMA and losses; returns the manifest hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let params = self.params.to_bytes();
        let ema = self.ema.to_bytes();
        fs::write(dir.join("params.bin"), &params)?;
        fs::write(dir.join("ema.bin"), &ema)?;
        let losses_sha256 = write_blob(
            &dir.join("losses.bin"),
            &Blob::scalar(vec![self.losses.len()], &self.losses),
        )?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            schedule: self.schedule,
            ema_decay: self.train.ema_decay,
            seed: self.seed,
            backbone: self.backbone.config,
            train: self.train,
            schema_hash: self.backbone.schema.hash(),
            latents_hash: self.latents_hash.clone(),
            dtype: F::DTYPE,
            params_file: "params.bin".into(),
            params_sha256: sha256_hex(&params),
            ema_file: "ema.bin".into(),
            ema_sha256: sha256_hex(&ema),
            losses_file: "losses.bin".into(),
            losses_sha256,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path, schema: &Schema) -> Result<Self> {
        let m: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                detail: format!("format `{}`", m.format),
            });
        }
        let found = schema.hash();
        if m.schema_hash != found {
            return Err(Error::HashMismatch {
                what: "checkpoint schema".into(),
                expected: m.schema_hash,
                found,
            });
        }
        let backbone = Backbone::new(schema, m.backbone)?;
        let read = |file: &str, sha: &str| -> Result<ParamStore<F>> {
            let path = dir.join(file);
            let found = file_hash(&path)?;
            if found != sha {
                return Err(Error::HashMismatch {
                    what: file.into(),
                    expected: sha.into(),
                    found,
                });
            }
            let mut p = backbone.init_params(0);
            p.load_bytes(&fs::read(&path)?)?;
            Ok(p)
        };
        let params = read(&m.params_file, &m.params_sha256)?;
        let ema = read(&m.ema_file, &m.ema_sha256)?;
        let losses = read_blob_verified(&dir.join(&m.losses_file), &m.losses_sha256)?.to_scalar();
        Ok(Checkpoint {
            backbone,
            schedule: m.schedule,
            train: m.train,
            seed: m.seed,
            latents_hash: m.latents_hash,
            step: m.step,
            params,
            ema,
            losses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{preencode_dataset, CodecSet};
    use crate::schema::{build_schema, SchemaConfig};
    use crate::world::{read_dataset, write_dataset, WorldConfig};

    fn store() -> (Schema, LatentStore) {
        let dir = tempfile::tempdir().unwrap();
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        write_dataset(&WorldConfig::toy(), &schema, 20, dir.path()).unwrap();
        let ds = read_dataset(dir.path(), &schema).unwrap();
        let store = preencode_dataset(&CodecSet::identity(&schema).unwrap(), &ds).unwrap();
        (schema, store)
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            zero_init_heads: true,
        }
    }

    #[test]
    fn fit_is_reproducible_and_checkpoints_round_trip() {
        let (schema, store) = store();
        let model = Backbone::new(&schema, small()).unwrap();
        let schedule = ScheduleConfig::shortened(50).build().unwrap();
        let cfg = TrainConfig {
            batch: 4,
            steps: 5,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let a = fit::<f32>(&model, &schedule, &store, &cfg, 3, |_, _| seen += 1).unwrap();
        let b = fit::<f32>(&model, &schedule, &store, &cfg, 3, |_, _| {}).unwrap();
        assert_eq!(seen, 5);
        assert_eq!(a, b);
        assert_eq!(a.losses.len(), 5);
        let c = fit::<f32>(&model, &schedule, &store, &cfg, 4, |_, _| {}).unwrap();
        assert_ne!(a.losses, c.losses);

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::<f32>::load(dir.path(), &schema).unwrap(), a);
        let mut bytes = fs::read(dir.path().join("ema.bin")).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(dir.path().join("ema.bin"), bytes).unwrap();
        assert!(matches!(
            Checkpoint::<f32>::load(dir.path(), &schema),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn fit_rejects_foreign_store() {
        let (_, store) = store();
        let mut cfg = SchemaConfig::toy();
        cfg.modalities.pop();
        let other = build_schema(&cfg).unwrap();
        let model = Backbone::new(&other, small()).unwrap();
        let schedule = ScheduleConfig::shortened(50).build().unwrap();
        let r = fit::<f32>(
            &model,
            &schedule,
            &store,
            &TrainConfig::default(),
            0,
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::HashMismatch { .. })));
    }
}
