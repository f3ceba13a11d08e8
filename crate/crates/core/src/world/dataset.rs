use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_tile, Nuisance, TileRecord, WorldConfig, DEM, LULC, SAR};
use crate::error::{Error, Result};
use crate::geo::DateStamp;
use crate::io::{
    decode_named, encode_named, file_hash, hash_json, read_json, sha256_hex, write_json, Blob,
};
use crate::rng::stream;
use crate::schema::Schema;

pub const DATASET_FORMAT: &str = "geodiff-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 by tile index.
    pub fn of(index: usize, n: usize) -> Split {
        if index < n * 8 / 10 {
            Split::Train
        } else if index < n * 9 / 10 {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileEntry {
    pub index: usize,
    pub split: Split,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub world: WorldConfig,
    pub world_hash: String,
    pub schema_hash: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub tiles: Vec<TileEntry>,
    pub hidden_file: String,
    pub hidden_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<TileRecord>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .tiles
            .iter()
            .filter(|t| t.split == split)
            .map(|t| t.index)
            .collect()
    }

    pub fn world(&self) -> &WorldConfig {
        &self.manifest.world
    }
}

/// Tiles `0..n` of `world`, each from its own derived stream.
pub fn generate_tiles(world: &WorldConfig, n: usize) -> Vec<TileRecord> {
    (0..n)
        .map(|i| generate_tile(world, &mut stream(world.seed, &format!("tile/{i}"))))
        .collect()
}

fn encode_tile(world: &WorldConfig, t: &TileRecord) -> Vec<u8> {
    let g = world.grid;
    let mut entries = vec![
        (
            "meta".to_string(),
            Blob::scalar(
                vec![4],
                &[
                    t.lat,
                    t.lon,
                    f64::from(t.date.year),
                    f64::from(t.date.day_of_year),
                ],
            ),
        ),
        (DEM.to_string(), Blob::f32(vec![1, g, g], t.dem.clone())),
        (LULC.to_string(), Blob::u8(vec![g, g], t.lulc.clone())),
        (
            SAR.to_string(),
            Blob::f32(vec![world.sar_gains.len(), g, g], t.sar.clone()),
        ),
    ];
    for (i, (img, grp)) in t.optical.iter().zip(&world.optical_groups).enumerate() {
        entries.push((
            world.optical_unit(i),
            Blob::f32(vec![grp.bands, grp.grid, grp.grid], img.clone()),
        ));
    }
    encode_named(&entries)
}

fn decode_tile(
    world: &WorldConfig,
    bytes: &[u8],
    hidden: Nuisance,
    path: &Path,
) -> Result<TileRecord> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let entries = decode_named(bytes).map_err(fmt)?;
    let take = |name: &str| -> Result<&Blob> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| fmt(format!("missing entry `{name}`")))
    };
    let meta: Vec<f64> = take("meta")?.to_scalar();
    if meta.len() != 4 {
        return Err(fmt("meta entry must hold 4 values".into()));
    }
    let date = DateStamp::new(meta[2] as i32, meta[3] as u32)?;
    let lulc = take(LULC)?
        .clone()
        .into_u8()
        .ok_or_else(|| fmt("land cover must be u8".into()))?;
    let optical = (0..world.optical_groups.len())
        .map(|i| take(&world.optical_unit(i)).map(|b| b.to_scalar::<f32>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TileRecord {
        lat: meta[0],
        lon: meta[1],
        date,
        dem: take(DEM)?.to_scalar(),
        lulc,
        sar: take(SAR)?.to_scalar(),
        optical,
        hidden,
    })
}

/// Writes `n` tiles, the hidden nuisances and a manifest under `dir`.
pub fn write_dataset(
    world: &WorldConfig,
    schema: &Schema,
    n: usize,
    dir: &Path,
) -> Result<DatasetManifest> {
    world.validate()?;
    world.check_schema(schema)?;
    if n == 0 {
        return Err(Error::Empty("dataset with zero tiles".into()));
    }
    fs::create_dir_all(dir.join("tiles"))?;
    let tiles = generate_tiles(world, n);
    let mut entries = Vec::with_capacity(n);
    for (i, t) in tiles.iter().enumerate() {
        let file = format!("tiles/{i:05}.bin");
        let bytes = encode_tile(world, t);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(TileEntry {
            index: i,
            split: Split::of(i, n),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let hidden: Vec<Nuisance> = tiles.iter().map(|t| t.hidden).collect();
    let hidden_sha256 = write_json(&dir.join("hidden.json"), &hidden)?;
    let count = |s| entries.iter().filter(|e: &&TileEntry| e.split == s).count();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        world: world.clone(),
        world_hash: hash_json(world),
        schema_hash: schema.hash(),
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
        tiles: entries,
        hidden_file: "hidden.json".into(),
        hidden_sha256,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads and hash-verifies a dataset written for `schema`.
pub fn read_dataset(dir: &Path, schema: &Schema) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            detail: format!("format `{}`", manifest.format),
        });
    }
    let found = schema.hash();
    if manifest.schema_hash != found {
        return Err(Error::HashMismatch {
            what: "schema".into(),
            expected: manifest.schema_hash,
            found,
        });
    }
    let world_hash = hash_json(&manifest.world);
    if manifest.world_hash != world_hash {
        return Err(Error::HashMismatch {
            what: "world config".into(),
            expected: manifest.world_hash,
            found: world_hash,
        });
    }
    let hidden_path = dir.join(&manifest.hidden_file);
    let h = file_hash(&hidden_path)?;
    if h != manifest.hidden_sha256 {
        return Err(Error::HashMismatch {
            what: manifest.hidden_file.clone(),
            expected: manifest.hidden_sha256,
            found: h,
        });
    }
    let hidden: Vec<Nuisance> = read_json(&hidden_path)?;
    if hidden.len() != manifest.tiles.len() {
        return Err(Error::Format {
            path: hidden_path,
            detail: "one nuisance record per tile expected".into(),
        });
    }
    let mut records = Vec::with_capacity(manifest.tiles.len());
    for (e, &nz) in manifest.tiles.iter().zip(&hidden) {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path)?;
        let found = sha256_hex(&bytes);
        if found != e.sha256 {
            return Err(Error::HashMismatch {
                what: e.file.clone(),
                expected: e.sha256.clone(),
                found,
            });
        }
        records.push(decode_tile(&manifest.world, &bytes, nz, &path)?);
    }
    Ok(Dataset { manifest, records })
}
