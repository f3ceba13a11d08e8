//! Ensemble directories: `tile_XXXXX/sample_JJ/{unit}.bin` holds the decoded
//! value, `{unit}.latent.bin` the latent and `{unit}.scores.bin` class scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_sample, GenerationEnsemble, SpecNames};
use crate::codec::{CodecSet, Decoded, LatentStats};
use crate::error::{Error, Result};
use crate::io::{read_blob_verified, read_json, write_blob, write_json, Blob};
use crate::scalar::Scalar;
use crate::schema::Schema;

pub const ENSEMBLE_FORMAT: &str = "geodiff-ensemble/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTile {
    pub tile: usize,
    pub dir: String,
    pub spec: SpecNames,
    pub seeds: Vec<u64>,
    /// Relative path → sha256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub checkpoint_hash: String,
    pub schema_hash: String,
    pub latents_hash: String,
    pub codec_hash: String,
    pub tiles: Vec<EnsembleTile>,
}

/// An ensemble read back from disk with its decoded samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEnsemble<F> {
    pub tile: usize,
    pub ensemble: GenerationEnsemble<F>,
    /// `decoded[j][unit]`.
    pub decoded: Vec<Vec<Decoded<F>>>,
}

fn shape_of(schema: &Schema, ui: usize) -> Vec<usize> {
    let u = &schema.units[ui];
    if u.is_image() {
        vec![u.channels, u.grid, u.grid]
    } else {
        vec![u.channels]
    }
}

/// Writes one directory per tile; returns the manifest.
pub fn write_ensembles<F: Scalar>(
    dir: &Path,
    codecs: &CodecSet<F>,
    stats: &LatentStats,
    checkpoint_hash: &str,
    latents_hash: &str,
    entries: &[(usize, GenerationEnsemble<F>)],
) -> Result<EnsembleManifest> {
    let schema = &codecs.schema;
    let mut tiles = Vec::with_capacity(entries.len());
    for (tile, ens) in entries {
        let tdir = format!("tile_{tile:05}");
        let mut files = BTreeMap::new();
        for (j, latents) in ens.samples.iter().enumerate() {
            let sdir = format!("{tdir}/sample_{j:02}");
            fs::create_dir_all(dir.join(&sdir))?;
            let decoded = decode_sample(codecs, stats, latents)?;
            for (ui, (u, d)) in schema.units.iter().zip(&decoded).enumerate() {
                let mut put = |name: String, blob: Blob| -> Result<()> {
                    let sha = write_blob(&dir.join(&name), &blob)?;
                    files.insert(name, sha);
                    Ok(())
                };
                put(
                    format!("{sdir}/{}.latent.bin", u.name),
                    Blob::scalar(u.latent_shape(), &latents[ui]),
                )?;
                match d {
                    Decoded::Continuous(v) => put(
                        format!("{sdir}/{}.bin", u.name),
                        Blob::scalar(shape_of(schema, ui), v),
                    )?,
                    Decoded::Classes { map, scores } => {
                        put(
                            format!("{sdir}/{}.bin", u.name),
                            Blob::u8(vec![u.grid, u.grid], map.clone()),
                        )?;
                        let k = u.classes.unwrap_or(0);
                        put(
                            format!("{sdir}/{}.scores.bin", u.name),
                            Blob::scalar(vec![k, u.grid, u.grid], scores),
                        )?;
                    }
                }
            }
        }
        tiles.push(EnsembleTile {
            tile: *tile,
            dir: tdir,
            spec: ens.spec.clone(),
            seeds: ens.seeds.clone(),
            files,
        });
    }
    let manifest = EnsembleManifest {
        format: ENSEMBLE_FORMAT.into(),
        checkpoint_hash: checkpoint_hash.into(),
        schema_hash: schema.hash(),
        latents_hash: latents_hash.into(),
        codec_hash: codecs.fingerprint(),
        tiles,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads and hash-verifies every blob listed in the manifest.
pub fn read_ensembles<F: Scalar>(
    dir: &Path,
    schema: &Schema,
) -> Result<(EnsembleManifest, Vec<StoredEnsemble<F>>)> {
    let m: EnsembleManifest = read_json(&dir.join("manifest.json"))?;
    if m.format != ENSEMBLE_FORMAT {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            detail: format!("format `{}`", m.format),
        });
    }
    let found = schema.hash();
    if m.schema_hash != found {
        return Err(Error::HashMismatch {
            what: "ensemble schema".into(),
            expected: m.schema_hash,
            found,
        });
    }
    let mut out = Vec::with_capacity(m.tiles.len());
    for t in &m.tiles {
        let blob = |name: String| -> Result<Blob> {
            let sha = t.files.get(&name).ok_or_else(|| Error::Format {
                path: dir.join(&name),
                detail: "not listed in manifest".into(),
            })?;
            read_blob_verified(&dir.join(&name), sha)
        };
        let mut samples = Vec::with_capacity(t.seeds.len());
        let mut decoded = Vec::with_capacity(t.seeds.len());
        for j in 0..t.seeds.len() {
            let sdir = format!("{}/sample_{j:02}", t.dir);
            let mut lat = Vec::new();
            let mut dec = Vec::new();
            for u in &schema.units {
                lat.push(blob(format!("{sdir}/{}.latent.bin", u.name))?.to_scalar::<F>());
                let value = blob(format!("{sdir}/{}.bin", u.name))?;
                dec.push(if u.classes.is_some() {
                    let map = value.into_u8().ok_or_else(|| Error::Format {
                        path: dir.join(&sdir),
                        detail: format!("`{}` map is not u8", u.name),
                    })?;
                    let scores = blob(format!("{sdir}/{}.scores.bin", u.name))?.to_scalar();
                    Decoded::Classes { map, scores }
                } else {
                    Decoded::Continuous(value.to_scalar())
                });
            }
            samples.push(lat);
            decoded.push(dec);
        }
        out.push(StoredEnsemble {
            tile: t.tile,
            ensemble: GenerationEnsemble {
                spec: t.spec.clone(),
                seeds: t.seeds.clone(),
                samples,
            },
            decoded,
        });
    }
    Ok((m, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::diffusion::ScheduleConfig;
    use crate::sampler::{sample_ensemble, ConditioningSpec, Network};
    use crate::schema::{build_schema, SchemaConfig};

    #[test]
    fn ensembles_round_trip_and_detect_tampering() {
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        let cfg = BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            zero_init_heads: false,
        };
        let b = Backbone::new(&schema, cfg).unwrap();
        let p = b.init_params::<f32>(1);
        let model = Network {
            backbone: &b,
            params: &p,
        };
        let schedule = ScheduleConfig::shortened(50).build().unwrap();
        let ens = sample_ensemble(
            &model,
            &schedule,
            &ConditioningSpec::unconditional(&schema),
            2,
            0,
        )
        .unwrap();
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
        let codecs = CodecSet::identity(&schema).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_ensembles(
            dir.path(),
            &codecs,
            &stats,
            "ckpt",
            "lat",
            &[(7, ens.clone())],
        )
        .unwrap();
        assert_eq!(m.tiles[0].dir, "tile_00007");
        let (back_m, back) = read_ensembles::<f32>(dir.path(), &schema).unwrap();
        assert_eq!(back_m, m);
        assert_eq!(back[0].ensemble, ens);
        assert_eq!(
            back[0].decoded[1],
            decode_sample(&codecs, &stats, &ens.samples[1]).unwrap()
        );
        fs::write(dir.path().join("tile_00007/sample_01/DEM.bin"), b"x").unwrap();
        assert!(matches!(
            read_ensembles::<f32>(dir.path(), &schema),
            Err(Error::HashMismatch { .. })
        ));
    }
}
