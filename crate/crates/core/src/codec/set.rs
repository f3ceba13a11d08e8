use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassPalette, CodecConfig, ConvVae, IdentityCodec, UnitCodec};
use crate::error::{Error, Result};
use crate::io::{file_hash, read_json, sha256_hex, write_json};
use crate::scalar::Scalar;
use crate::schema::{ModalityKind, Schema, Unit};
use crate::world::UnitValue;

/// Side file describing one trained codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecRecord {
    pub unit: String,
    pub channels: usize,
    pub grid: usize,
    pub config: CodecConfig,
    pub params_file: String,
    pub params_sha256: String,
}

/// Decoded value of one unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded<F> {
    /// Image `[C, g, g]` or raw vector.
    Continuous(Vec<F>),
    /// Class map plus per-class scores `[K, g·g]`.
    Classes { map: Vec<u8>, scores: Vec<F> },
}

/// One codec per image unit, palettes for categorical units.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecSet<F> {
    pub schema: Schema,
    pub codecs: Vec<Option<UnitCodec<F>>>,
    pub palettes: Vec<Option<ClassPalette>>,
}

fn palette_for(u: &Unit) -> Result<Option<ClassPalette>> {
    match (u.kind, u.classes) {
        (ModalityKind::CategoricalImage, Some(k)) => {
            Ok(Some(ClassPalette::hadamard(k, u.channels)?))
        }
        _ => Ok(None),
    }
}

fn image_of<F: Scalar>(
    u: &Unit,
    palette: Option<&ClassPalette>,
    value: &UnitValue,
) -> Result<Vec<F>> {
    let image: Vec<F> = match (value, palette) {
        (UnitValue::Classes(map), Some(p)) => {
            if let Some(&c) = map.iter().find(|&&c| c as usize >= p.classes) {
                return Err(Error::ClassOutOfRange {
                    modality: u.name.clone(),
                    value: c as usize,
                    classes: p.classes,
                });
            }
            p.class_to_continuous(map)?
        }
        (UnitValue::Continuous(v), None) => v.iter().map(|&x| F::of(f64::from(x))).collect(),
        _ => return Err(Error::Config(format!("`{}`: wrong value kind", u.name))),
    };
    let want = if u.is_image() {
        u.channels * u.grid * u.grid
    } else {
        u.channels
    };
    if image.len() != want {
        return Err(Error::Shape(format!(
            "`{}`: {} values, expected {want}",
            u.name,
            image.len()
        )));
    }
    Ok(image)
}

/// Codec input for a unit value: palette images for class maps, raw values otherwise.
pub fn codec_input<F: Scalar>(u: &Unit, value: &UnitValue) -> Result<Vec<F>> {
    image_of(u, palette_for(u)?.as_ref(), value)
}

impl<F: Scalar> CodecSet<F> {
    /// Identity codecs everywhere; requires the schema to keep channel counts.
    pub fn identity(schema: &Schema) -> Result<Self> {
        Self::assemble(schema, BTreeMap::new())
    }

    /// Learned codecs where given, identity codecs elsewhere.
    pub fn assemble(schema: &Schema, mut learned: BTreeMap<String, ConvVae<F>>) -> Result<Self> {
        let mut codecs = Vec::new();
        let mut palettes = Vec::new();
        for u in &schema.units {
            palettes.push(palette_for(u)?);
            if !u.is_image() {
                codecs.push(None);
                continue;
            }
            let codec = match learned.remove(&u.name) {
                Some(v) => {
                    if v.channels != u.channels
                        || v.grid != u.grid
                        || v.config.latent_channels != u.latent_channels
                        || v.latent_grid() != u.latent_grid
                    {
                        return Err(Error::Config(format!(
                            "codec for `{}` does not match the schema",
                            u.name
                        )));
                    }
                    UnitCodec::Learned(v)
                }
                None => {
                    if u.latent_channels != u.channels {
                        return Err(Error::MissingModality(format!(
                            "`{}` needs a trained codec ({} latent channels)",
                            u.name, u.latent_channels
                        )));
                    }
                    UnitCodec::Identity(IdentityCodec::new(
                        schema.downsample_factor,
                        u.channels,
                        u.grid,
                    )?)
                }
            };
            codecs.push(Some(codec));
        }
        if let Some(name) = learned.keys().next() {
            return Err(Error::Config(format!(
                "codec given for unknown unit `{name}`"
            )));
        }
        Ok(CodecSet {
            schema: schema.clone(),
            codecs,
            palettes,
        })
    }

    /// The value of unit `ui` as the codec sees it.
    pub fn unit_image(&self, ui: usize, value: &UnitValue) -> Result<Vec<F>> {
        image_of(&self.schema.units[ui], self.palettes[ui].as_ref(), value)
    }

    /// Unstandardized latent of unit `ui`.
    pub fn encode_unit(&self, ui: usize, value: &UnitValue) -> Result<Vec<F>> {
        let image = self.unit_image(ui, value)?;
        match &self.codecs[ui] {
            Some(c) => c.encode(&image),
            None => Ok(image),
        }
    }

    /// Unstandardized latents of every unit.
    pub fn encode_tile(&self, values: &BTreeMap<String, UnitValue>) -> Result<Vec<Vec<F>>> {
        self.schema
            .units
            .iter()
            .enumerate()
            .map(|(ui, u)| {
                let v = values
                    .get(&u.name)
                    .ok_or_else(|| Error::MissingModality(u.name.clone()))?;
                self.encode_unit(ui, v)
            })
            .collect()
    }

    pub fn decode_unit(&self, ui: usize, latent: &[F]) -> Result<Decoded<F>> {
        let u = &self.schema.units[ui];
        if latent.len() != u.latent_len() {
            return Err(Error::Shape(format!(
                "`{}`: latent has {} values, expected {}",
                u.name,
                latent.len(),
                u.latent_len()
            )));
        }
        let img = match &self.codecs[ui] {
            Some(c) => c.decode(latent)?,
            None => latent.to_vec(),
        };
        Ok(match &self.palettes[ui] {
            Some(p) => Decoded::Classes {
                map: p.continuous_to_class(&img)?,
                scores: p.class_scores(&img)?,
            },
            None => Decoded::Continuous(img),
        })
    }

    /// Digest identifying every codec's kind and weights.
    pub fn fingerprint(&self) -> String {
        let mut parts = String::new();
        for (u, c) in self.schema.units.iter().zip(&self.codecs) {
            let kind = match c {
                None => "none".to_string(),
                Some(UnitCodec::Identity(i)) => format!("identity/{}", i.factor),
                Some(UnitCodec::Learned(v)) => {
                    format!("learned/{}", sha256_hex(&v.params.to_bytes()))
                }
            };
            parts.push_str(&format!("{}={kind};", u.name));
        }
        sha256_hex(parts.as_bytes())
    }

    /// Writes learned codecs as `{unit}.bin` + `{unit}.json` under `dir`.
    pub fn save_learned(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (u, c) in self.schema.units.iter().zip(&self.codecs) {
            if let Some(UnitCodec::Learned(v)) = c {
                written.push(save_codec(v, &u.name, dir)?);
            }
        }
        Ok(written)
    }

    /// Loads every `{unit}.json` codec found in `dir` (if any) and fills the
    /// rest with identity codecs.
    pub fn load(schema: &Schema, dir: Option<&Path>) -> Result<Self> {
        let mut learned = BTreeMap::new();
        if let Some(dir) = dir {
            for u in schema.units.iter().filter(|u| u.is_image()) {
                let side = dir.join(format!("{}.json", u.name));
                if side.exists() {
                    learned.insert(u.name.clone(), load_codec(&side)?);
                }
            }
        }
        Self::assemble(schema, learned)
    }
}

/// Saves one codec; returns the side-file hash.
pub fn save_codec<F: Scalar>(codec: &ConvVae<F>, unit: &str, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let bytes = codec.params.to_bytes();
    let params_file = format!("{unit}.bin");
    fs::write(dir.join(&params_file), &bytes)?;
    let rec = CodecRecord {
        unit: unit.into(),
        channels: codec.channels,
        grid: codec.grid,
        config: codec.config.clone(),
        params_file,
        params_sha256: sha256_hex(&bytes),
    };
    write_json(&dir.join(format!("{unit}.json")), &rec)
}

pub fn load_codec<F: Scalar>(side: &Path) -> Result<ConvVae<F>> {
    let rec: CodecRecord = read_json(side)?;
    let dir = side.parent().unwrap_or(Path::new("."));
    let path = dir.join(&rec.params_file);
    let found = file_hash(&path)?;
    if found != rec.params_sha256 {
        return Err(Error::HashMismatch {
            what: rec.params_file,
            expected: rec.params_sha256,
            found,
        });
    }
    let mut v = ConvVae::new(rec.config, rec.channels, rec.grid)?;
    v.params.load_bytes(&fs::read(&path)?)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schema::{build_schema, SchemaConfig};
    use crate::world::{generate_tile, WorldConfig};

    #[test]
    fn identity_set_round_trips_classes() {
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        let set = CodecSet::<f64>::identity(&schema).unwrap();
        let w = WorldConfig::toy();
        let t = generate_tile(&w, &mut seeded(1));
        let vals = t.unit_values(&w).unwrap();
        let lat = set.encode_tile(&vals).unwrap();
        for (ui, u) in schema.units.iter().enumerate() {
            assert_eq!(lat[ui].len(), u.latent_len(), "{}", u.name);
        }
        let dem = schema.unit_index("DEM").unwrap();
        match set.decode_unit(dem, &lat[dem]).unwrap() {
            Decoded::Continuous(img) => assert_eq!(img.len(), 576),
            other => panic!("{other:?}"),
        }
        let lulc = schema.unit_index("LULC").unwrap();
        let flat = set
            .encode_unit(lulc, &UnitValue::Classes(vec![2; 576]))
            .unwrap();
        match set.decode_unit(lulc, &flat).unwrap() {
            Decoded::Classes { map, scores } => {
                assert!(map.iter().all(|&c| c == 2));
                assert_eq!(scores.len(), 6 * 576);
            }
            other => panic!("{other:?}"),
        }
        assert!(set
            .encode_unit(lulc, &UnitValue::Classes(vec![9; 576]))
            .is_err());
    }

    #[test]
    fn learned_schema_requires_codecs_and_reloads() {
        let mut cfg = SchemaConfig::toy();
        cfg.modalities
            .retain(|m| ["DEM", "time"].contains(&m.name.as_str()));
        cfg.latent_channels = Some(2);
        let schema = build_schema(&cfg).unwrap();
        assert!(matches!(
            CodecSet::<f32>::identity(&schema),
            Err(Error::MissingModality(_))
        ));
        let cc = CodecConfig {
            latent_channels: 2,
            hidden: vec![4, 4, 4],
            ..CodecConfig::toy()
        };
        let vae = ConvVae::<f32>::new(cc, 1, 24).unwrap();
        let set = CodecSet::assemble(&schema, BTreeMap::from([("DEM".to_string(), vae)])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save_learned(dir.path()).unwrap();
        let back = CodecSet::<f32>::load(&schema, Some(dir.path())).unwrap();
        assert_eq!(back, set);
        fs::write(dir.path().join("DEM.bin"), b"junk").unwrap();
        assert!(matches!(
            CodecSet::<f32>::load(&schema, Some(dir.path())),
            Err(Error::HashMismatch { .. })
        ));
    }
}
