use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CodecSet;
use crate::error::{Error, Result};
use crate::io::{hash_json, read_blob_verified, read_json, write_blob, write_json, Blob};
use crate::scalar::Scalar;
use crate::schema::{Schema, Unit};
use crate::world::{Dataset, Split};

pub const LATENT_FORMAT: &str = "geodiff-latents/1";

/// Per-unit, per-channel latent mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub units: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

fn plane(u: &Unit) -> usize {
    if u.is_image() {
        u.latent_grid * u.latent_grid
    } else {
        1
    }
}

impl LatentStats {
    /// Population statistics over `latents[tile][unit]`.
    pub fn compute(schema: &Schema, latents: &[&Vec<Vec<f32>>]) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::Empty("no latents to compute statistics from".into()));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (ui, u) in schema.units.iter().enumerate() {
            let p = plane(u);
            let mut m = Vec::with_capacity(u.latent_channels);
            let mut s = Vec::with_capacity(u.latent_channels);
            for c in 0..u.latent_channels {
                let vals = || {
                    latents
                        .iter()
                        .flat_map(|t| t[ui][c * p..(c + 1) * p].iter().map(|&v| f64::from(v)))
                };
                let n = (latents.len() * p) as f64;
                let mu = vals().sum::<f64>() / n;
                let var = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = var.sqrt();
                if !(sd > 1e-12) {
                    return Err(Error::Degenerate(format!(
                        "latent channel {c} of `{}` has zero spread",
                        u.name
                    )));
                }
                m.push(mu);
                s.push(sd);
            }
            mean.push(m);
            std.push(s);
        }
        Ok(LatentStats {
            units: schema.unit_names(),
            mean,
            std,
        })
    }

    pub fn standardize<F: Scalar>(&self, schema: &Schema, ui: usize, latent: &mut [F]) {
        let p = plane(&schema.units[ui]);
        for (j, v) in latent.iter_mut().enumerate() {
            let c = j / p;
            *v = (*v - F::of(self.mean[ui][c])) / F::of(self.std[ui][c]);
        }
    }

    pub fn unstandardize<F: Scalar>(&self, schema: &Schema, ui: usize, latent: &mut [F]) {
        let p = plane(&schema.units[ui]);
        for (j, v) in latent.iter_mut().enumerate() {
            let c = j / p;
            *v = *v * F::of(self.std[ui][c]) + F::of(self.mean[ui][c]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTileEntry {
    pub index: usize,
    pub split: Split,
    /// Unit name → (file, sha256).
    pub files: BTreeMap<String, (String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentManifest {
    pub format: String,
    pub schema_hash: String,
    pub dataset_hash: String,
    pub codec_hash: String,
    pub stats: LatentStats,
    pub stats_file: String,
    pub stats_sha256: String,
    pub tiles: Vec<LatentTileEntry>,
}

/// Standardized latents of a whole dataset, `latents[tile][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStore {
    pub schema_hash: String,
    pub dataset_hash: String,
    pub codec_hash: String,
    pub stats: LatentStats,
    pub splits: Vec<Split>,
    pub latents: Vec<Vec<Vec<f32>>>,
}

impl LatentStore {
    /// Digest of the provenance and statistics, stable across a write/read.
    pub fn fingerprint(&self) -> String {
        hash_json(&(
            &self.schema_hash,
            &self.dataset_hash,
            &self.codec_hash,
            &self.stats,
        ))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Latents of `tiles` concatenated per unit, ready for a batch.
    pub fn batch<F: Scalar>(&self, tiles: &[usize]) -> Vec<Vec<F>> {
        let units = self.latents.first().map_or(0, Vec::len);
        (0..units)
            .map(|u| {
                tiles
                    .iter()
                    .flat_map(|&t| self.latents[t][u].iter().map(|&v| F::of(f64::from(v))))
                    .collect()
            })
            .collect()
    }

    pub fn write(&self, schema: &Schema, dir: &Path) -> Result<LatentManifest> {
        fs::create_dir_all(dir.join("tiles"))?;
        let stats_sha256 = write_json(&dir.join("stats.json"), &self.stats)?;
        let mut tiles = Vec::with_capacity(self.latents.len());
        for (i, (lat, &split)) in self.latents.iter().zip(&self.splits).enumerate() {
            let mut files = BTreeMap::new();
            for (u, z) in schema.units.iter().zip(lat) {
                let file = format!("tiles/{i:05}/{}.bin", u.name);
                fs::create_dir_all(dir.join(format!("tiles/{i:05}")))?;
                let sha = write_blob(&dir.join(&file), &Blob::f32(u.latent_shape(), z.clone()))?;
                files.insert(u.name.clone(), (file, sha));
            }
            tiles.push(LatentTileEntry {
                index: i,
                split,
                files,
            });
        }
        let manifest = LatentManifest {
            format: LATENT_FORMAT.into(),
            schema_hash: self.schema_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            codec_hash: self.codec_hash.clone(),
            stats: self.stats.clone(),
            stats_file: "stats.json".into(),
            stats_sha256,
            tiles,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn read(schema: &Schema, dir: &Path) -> Result<Self> {
        let m: LatentManifest = read_json(&dir.join("manifest.json"))?;
        if m.format != LATENT_FORMAT {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                detail: format!("format `{}`", m.format),
            });
        }
        let found = schema.hash();
        if m.schema_hash != found {
            return Err(Error::HashMismatch {
                what: "schema".into(),
                expected: m.schema_hash,
                found,
            });
        }
        let stats_path = dir.join(&m.stats_file);
        let found = crate::io::file_hash(&stats_path)?;
        if found != m.stats_sha256 {
            return Err(Error::HashMismatch {
                what: m.stats_file,
                expected: m.stats_sha256,
                found,
            });
        }
        let stats: LatentStats = read_json(&stats_path)?;
        if stats != m.stats {
            return Err(Error::Format {
                path: stats_path,
                detail: "stats file disagrees with manifest".into(),
            });
        }
        let mut latents = Vec::with_capacity(m.tiles.len());
        let mut splits = Vec::with_capacity(m.tiles.len());
        for t in &m.tiles {
            let mut units = Vec::with_capacity(schema.units.len());
            for u in &schema.units {
                let (file, sha) = t
                    .files
                    .get(&u.name)
                    .ok_or_else(|| Error::MissingModality(u.name.clone()))?;
                let blob = read_blob_verified(&dir.join(file), sha)?;
                if blob.shape != u.latent_shape() {
                    return Err(Error::Shape(format!("{file}: shape {:?}", blob.shape)));
                }
                units.push(blob.to_scalar::<f32>());
            }
            latents.push(units);
            splits.push(t.split);
        }
        Ok(LatentStore {
            schema_hash: m.schema_hash,
            dataset_hash: m.dataset_hash,
            codec_hash: m.codec_hash,
            stats,
            splits,
            latents,
        })
    }
}

/// Deterministic encoding of every tile, standardized with training-split stats.
pub fn preencode_dataset(codecs: &CodecSet<f32>, dataset: &Dataset) -> Result<LatentStore> {
    let schema = &codecs.schema;
    let world = dataset.world();
    world.check_schema(schema)?;
    let mut raw = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        raw.push(codecs.encode_tile(&r.unit_values(world)?)?);
    }
    let splits: Vec<Split> = dataset.manifest.tiles.iter().map(|t| t.split).collect();
    let train: Vec<&Vec<Vec<f32>>> = raw
        .iter()
        .zip(&splits)
        .filter(|(_, &s)| s == Split::Train)
        .map(|(r, _)| r)
        .collect();
    let stats = LatentStats::compute(schema, &train)?;
    for tile in &mut raw {
        for (ui, z) in tile.iter_mut().enumerate() {
            stats.standardize(schema, ui, z);
        }
    }
    Ok(LatentStore {
        schema_hash: schema.hash(),
        dataset_hash: hash_json(&dataset.manifest),
        codec_hash: codecs.fingerprint(),
        stats,
        splits,
        latents: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_schema, SchemaConfig};
    use crate::world::{generate_tiles, read_dataset, write_dataset, WorldConfig};

    fn dataset(n: usize) -> (tempfile::TempDir, Dataset, Schema) {
        let dir = tempfile::tempdir().unwrap();
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        write_dataset(&WorldConfig::toy(), &schema, n, dir.path()).unwrap();
        let ds = read_dataset(dir.path(), &schema).unwrap();
        (dir, ds, schema)
    }

    #[test]
    fn training_split_is_standardized() {
        let (_d, ds, schema) = dataset(40);
        let set = CodecSet::identity(&schema).unwrap();
        let store = preencode_dataset(&set, &ds).unwrap();
        let train = store.indices(Split::Train);
        for (ui, u) in schema.units.iter().enumerate() {
            let p = plane(u);
            for c in 0..u.latent_channels {
                let vals: Vec<f64> = train
                    .iter()
                    .flat_map(|&t| {
                        store.latents[t][ui][c * p..(c + 1) * p]
                            .iter()
                            .map(|&v| f64::from(v))
                    })
                    .collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                assert!(
                    m.abs() < 0.02 && (0.98..=1.02).contains(&s),
                    "{} ch {c}: {m} {s}",
                    u.name
                );
            }
        }
        // validation tiles use training statistics, so they are not exactly standardized
        let raw = set
            .encode_tile(&ds.records[33].unit_values(ds.world()).unwrap())
            .unwrap();
        let mut z = raw[0].clone();
        store.stats.standardize(&schema, 0, &mut z);
        assert_eq!(z, store.latents[33][0]);
        store.stats.unstandardize(&schema, 0, &mut z);
        for (a, b) in z.iter().zip(&raw[0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn store_round_trip_and_reruns() {
        let (_d, ds, schema) = dataset(12);
        let set = CodecSet::identity(&schema).unwrap();
        let a = preencode_dataset(&set, &ds).unwrap();
        let b = preencode_dataset(&set, &ds).unwrap();
        assert_eq!(a, b);
        let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = a.write(&schema, x.path()).unwrap();
        let mb = b.write(&schema, y.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(
            fs::read(x.path().join("manifest.json")).unwrap(),
            fs::read(y.path().join("manifest.json")).unwrap()
        );
        assert_eq!(LatentStore::read(&schema, x.path()).unwrap(), a);
        fs::write(x.path().join("stats.json"), b"{}").unwrap();
        assert!(matches!(
            LatentStore::read(&schema, x.path()),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn constant_channel_is_reported() {
        let world = WorldConfig {
            dem_octaves: vec![0.0; 4],
            dem_base: (0.5, 0.5),
            ..WorldConfig::toy()
        };
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        let tiles = generate_tiles(&world, 5);
        let set = CodecSet::<f32>::identity(&schema).unwrap();
        let lat: Vec<Vec<Vec<f32>>> = tiles
            .iter()
            .map(|t| set.encode_tile(&t.unit_values(&world).unwrap()).unwrap())
            .collect();
        let refs: Vec<&Vec<Vec<f32>>> = lat.iter().collect();
        let err = LatentStats::compute(&schema, &refs).unwrap_err();
        assert!(err.to_string().contains("DEM"), "{err}");
    }
}
