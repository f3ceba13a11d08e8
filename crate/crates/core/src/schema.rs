//! Declarative description of modalities, band groups and the token layout.
//!
//! A *unit* is one independently-noised latent: each band group of an image
//! modality is a unit, and each scalar-vector modality is a unit. Every unit
//! owns one timestep token followed by its patch tokens in the shared sequence.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::hash_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    ContinuousImage,
    CategoricalImage,
    ScalarVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandGroupConfig {
    pub name: String,
    pub channels: usize,
    pub grid: usize,
    #[serde(default)]
    pub resolution_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub kind: ModalityKind,
    #[serde(default)]
    pub band_groups: Vec<BandGroupConfig>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub vector_len: Option<usize>,
}

/// On-disk schema document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub modalities: Vec<ModalityConfig>,
    pub downsample_factor: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Latent channels of a learned codec; `None` keeps each group's own
    /// channel count (identity codec).
    #[serde(default)]
    pub latent_channels: Option<usize>,
}

fn default_patch() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandGroupSpec {
    pub name: String,
    pub channels: usize,
    pub grid: usize,
    pub resolution_tag: String,
    pub latent_grid: usize,
    pub latent_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    pub band_groups: Vec<BandGroupSpec>,
    pub classes: Option<usize>,
    pub vector_len: Option<usize>,
}

/// One diffusion unit (band group or scalar vector).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub name: String,
    pub modality: String,
    pub kind: ModalityKind,
    /// Input channels (image) or vector length (scalar).
    pub channels: usize,
    pub grid: usize,
    pub latent_channels: usize,
    /// 0 for scalar vectors.
    pub latent_grid: usize,
    pub classes: Option<usize>,
    pub tokens: usize,
    pub token_dim: usize,
}

impl Unit {
    pub fn is_image(&self) -> bool {
        self.kind != ModalityKind::ScalarVector
    }

    /// Number of latent values (`latent_channels · latent_grid²`, or the vector length).
    pub fn latent_len(&self) -> usize {
        self.tokens * self.token_dim
    }

    /// Shape of the latent tensor.
    pub fn latent_shape(&self) -> Vec<usize> {
        if self.is_image() {
            vec![self.latent_channels, self.latent_grid, self.latent_grid]
        } else {
            vec![self.latent_channels]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<ModalitySpec>,
    pub patch: usize,
    pub downsample_factor: usize,
    pub units: Vec<Unit>,
}

/// Token ranges of one unit within the shared sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSlots {
    pub timestep: usize,
    pub patches: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub slots: Vec<UnitSlots>,
    pub total: usize,
}

impl TokenLayout {
    /// Full range `[timestep, end of patches)` of unit `u`.
    pub fn range(&self, u: usize) -> Range<usize> {
        self.slots[u].timestep..self.slots[u].patches.end
    }
}

pub fn build_schema(config: &SchemaConfig) -> Result<Schema> {
    let bad = |m: String| Err(Error::Config(m));
    if config.modalities.len() < 2 {
        return bad("schema needs at least two modalities".into());
    }
    if !config
        .modalities
        .iter()
        .any(|m| m.kind != ModalityKind::ScalarVector)
    {
        return bad("schema needs at least one image modality".into());
    }
    if config.patch == 0 || config.downsample_factor == 0 {
        return bad("patch and downsample factor must be positive".into());
    }
    if config.latent_channels == Some(0) {
        return bad("latent_channels must be positive".into());
    }
    let f = config.downsample_factor;
    let p = config.patch;
    let mut seen = HashSet::new();
    let mut modalities = Vec::new();
    let mut units = Vec::new();
    for m in &config.modalities {
        if !seen.insert(m.name.clone()) {
            return bad(format!("duplicate modality name `{}`", m.name));
        }
        let mut groups = Vec::new();
        match m.kind {
            ModalityKind::ScalarVector => {
                if !m.band_groups.is_empty() {
                    return bad(format!(
                        "scalar modality `{}` cannot have band groups",
                        m.name
                    ));
                }
                let len = match m.vector_len {
                    Some(n) if n >= 1 => n,
                    _ => {
                        return bad(format!(
                            "scalar modality `{}` needs vector_len >= 1",
                            m.name
                        ))
                    }
                };
                units.push(Unit {
                    name: m.name.clone(),
                    modality: m.name.clone(),
                    kind: m.kind,
                    channels: len,
                    grid: 0,
                    latent_channels: len,
                    latent_grid: 0,
                    classes: None,
                    tokens: 1,
                    token_dim: len,
                });
            }
            kind => {
                if kind == ModalityKind::CategoricalImage && !matches!(m.classes, Some(k) if k >= 2)
                {
                    return bad(format!(
                        "categorical modality `{}` needs a class count >= 2",
                        m.name
                    ));
                }
                if m.band_groups.is_empty() {
                    return bad(format!("image modality `{}` has no band groups", m.name));
                }
                let single = m.band_groups.len() == 1;
                for g in &m.band_groups {
                    if g.channels == 0 || g.grid == 0 {
                        return bad(format!(
                            "`{}/{}`: channels and grid must be positive",
                            m.name, g.name
                        ));
                    }
                    if g.grid % f != 0 {
                        return bad(format!(
                            "`{}/{}`: grid {} not divisible by downsample factor {f}",
                            m.name, g.name, g.grid
                        ));
                    }
                    let latent_grid = g.grid / f;
                    if latent_grid % p != 0 {
                        return bad(format!(
                            "`{}/{}`: latent grid {latent_grid} not divisible by patch {p}",
                            m.name, g.name
                        ));
                    }
                    let latent_channels = config.latent_channels.unwrap_or(g.channels);
                    let name = if single {
                        m.name.clone()
                    } else {
                        format!("{}.{}", m.name, g.name)
                    };
                    if !seen.insert(name.clone()) && !single {
                        return bad(format!("duplicate unit name `{name}`"));
                    }
                    units.push(Unit {
                        name,
                        modality: m.name.clone(),
                        kind,
                        channels: g.channels,
                        grid: g.grid,
                        latent_channels,
                        latent_grid,
                        classes: m.classes,
                        tokens: (latent_grid / p).pow(2),
                        token_dim: latent_channels * p * p,
                    });
                    groups.push(BandGroupSpec {
                        name: g.name.clone(),
                        channels: g.channels,
                        grid: g.grid,
                        resolution_tag: g.resolution_tag.clone(),
                        latent_grid,
                        latent_channels,
                    });
                }
            }
        }
        modalities.push(ModalitySpec {
            name: m.name.clone(),
            kind: m.kind,
            band_groups: groups,
            classes: m.classes,
            vector_len: m.vector_len,
        });
    }
    Ok(Schema {
        modalities,
        patch: p,
        downsample_factor: f,
        units,
    })
}

impl Schema {
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.name == name)
    }

    pub fn unit(&self, name: &str) -> Result<&Unit> {
        self.units
            .iter()
            .find(|u| u.name == name)
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    }

    /// Units belonging to `name`, which may be a modality or a unit name.
    pub fn resolve(&self, name: &str) -> Result<Vec<usize>> {
        let hits: Vec<usize> = self
            .units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.name == name || u.modality == name)
            .map(|(i, _)| i)
            .collect();
        if hits.is_empty() {
            Err(Error::MissingModality(name.to_string()))
        } else {
            Ok(hits)
        }
    }

    pub fn unit_names(&self) -> Vec<String> {
        self.units.iter().map(|u| u.name.clone()).collect()
    }

    pub fn token_layout(&self) -> TokenLayout {
        token_layout(self)
    }
}

pub fn token_layout(schema: &Schema) -> TokenLayout {
    let mut slots = Vec::with_capacity(schema.units.len());
    let mut at = 0;
    for u in &schema.units {
        let timestep = at;
        at += 1;
        slots.push(UnitSlots {
            timestep,
            patches: at..at + u.tokens,
        });
        at += u.tokens;
    }
    TokenLayout { slots, total: at }
}

/// Shape-checks raw tile data against the schema. `images` are continuous
/// rasters `[C, H, W]` and `classes` categorical maps `[H, W]`, keyed by unit.
pub fn validate_sample(
    schema: &Schema,
    images: &BTreeMap<String, (Vec<usize>, &[f32])>,
    classes: &BTreeMap<String, (Vec<usize>, &[u8])>,
) -> Result<()> {
    for u in &schema.units {
        match u.kind {
            ModalityKind::ContinuousImage => {
                let (shape, data) = images
                    .get(&u.name)
                    .ok_or_else(|| Error::MissingModality(u.name.clone()))?;
                let want = vec![u.channels, u.grid, u.grid];
                if *shape != want || data.len() != want.iter().product::<usize>() {
                    return Err(Error::Shape(format!(
                        "`{}`: expected {want:?}, got {shape:?}",
                        u.name
                    )));
                }
            }
            ModalityKind::CategoricalImage => {
                let (shape, data) = classes
                    .get(&u.name)
                    .ok_or_else(|| Error::MissingModality(u.name.clone()))?;
                let want = vec![u.grid, u.grid];
                if *shape != want || data.len() != u.grid * u.grid {
                    return Err(Error::Shape(format!(
                        "`{}`: expected {want:?}, got {shape:?}",
                        u.name
                    )));
                }
                let k = u.classes.unwrap_or(0);
                if let Some(&v) = data.iter().find(|&&v| v as usize >= k) {
                    return Err(Error::ClassOutOfRange {
                        modality: u.name.clone(),
                        value: v as usize,
                        classes: k,
                    });
                }
            }
            ModalityKind::ScalarVector => {}
        }
    }
    Ok(())
}

impl SchemaConfig {
    /// Desk-scale preset used throughout the tests and the CLI defaults.
    pub fn toy() -> Self {
        let group = |name: &str, channels, grid, tag: &str| BandGroupConfig {
            name: name.into(),
            channels,
            grid,
            resolution_tag: tag.into(),
        };
        let image = |name: &str, kind, groups, classes| ModalityConfig {
            name: name.into(),
            kind,
            band_groups: groups,
            classes,
            vector_len: None,
        };
        let vector = |name: &str| ModalityConfig {
            name: name.into(),
            kind: ModalityKind::ScalarVector,
            band_groups: vec![],
            classes: None,
            vector_len: Some(3),
        };
        SchemaConfig {
            modalities: vec![
                image(
                    "S2L2A",
                    ModalityKind::ContinuousImage,
                    vec![
                        group("10m", 4, 24, "10m"),
                        group("20m", 3, 16, "20m"),
                        group("60m", 2, 8, "60m"),
                    ],
                    None,
                ),
                image(
                    "SAR",
                    ModalityKind::ContinuousImage,
                    vec![group("SAR", 2, 24, "10m")],
                    None,
                ),
                image(
                    "DEM",
                    ModalityKind::ContinuousImage,
                    vec![group("DEM", 1, 24, "30m")],
                    None,
                ),
                image(
                    "LULC",
                    ModalityKind::CategoricalImage,
                    vec![group("LULC", 4, 24, "10m")],
                    Some(6),
                ),
                vector("latlon"),
                vector("time"),
            ],
            downsample_factor: 4,
            patch: 2,
            latent_channels: None,
        }
    }

    /// Full-size grids with an 8× codec (8 latent channels).
    pub fn reference() -> Self {
        let group = |name: &str, channels, grid| BandGroupConfig {
            name: name.into(),
            channels,
            grid,
            resolution_tag: name.into(),
        };
        let mut cfg = Self::toy();
        cfg.modalities[0].band_groups = vec![
            group("10m", 4, 192),
            group("20m", 6, 96),
            group("60m", 2, 32),
        ];
        cfg.modalities[1].band_groups = vec![group("SAR", 2, 192)];
        cfg.modalities[2].band_groups = vec![group("DEM", 1, 64)];
        cfg.modalities[3].band_groups = vec![group("LULC", 4, 192)];
        cfg.modalities[3].classes = Some(9);
        cfg.downsample_factor = 8;
        cfg.latent_channels = Some(8);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_image_config() -> SchemaConfig {
        let mut cfg = SchemaConfig::toy();
        cfg.modalities
            .retain(|m| ["SAR", "DEM", "latlon", "time"].contains(&m.name.as_str()));
        cfg
    }

    #[test]
    fn reference_latent_grids() {
        let s = build_schema(&SchemaConfig::reference()).unwrap();
        let grids: Vec<usize> = s.modalities[0]
            .band_groups
            .iter()
            .map(|g| g.latent_grid)
            .collect();
        assert_eq!(grids, vec![24, 12, 4]);
        assert_eq!(s.unit("DEM").unwrap().latent_grid, 8);
    }

    #[test]
    fn toy_group_has_nine_tokens() {
        let s = build_schema(&SchemaConfig::toy()).unwrap();
        let u = s.unit("S2L2A.10m").unwrap();
        assert_eq!((u.latent_grid, u.tokens), (6, 9));
        assert_eq!(s.units.len(), 8);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let mut cfg = two_image_config();
        cfg.modalities[0].band_groups[0].grid = 30;
        assert!(matches!(build_schema(&cfg), Err(Error::Config(m)) if m.contains("not divisible")));
    }

    #[test]
    fn rejects_duplicates_and_missing_classes() {
        let mut cfg = two_image_config();
        cfg.modalities[1].name = "SAR".into();
        assert!(build_schema(&cfg).is_err());
        let mut cfg = SchemaConfig::toy();
        cfg.modalities[3].classes = None;
        assert!(build_schema(&cfg).is_err());
        let mut cfg = SchemaConfig::toy();
        cfg.modalities.truncate(1);
        assert!(build_schema(&cfg).is_err());
        let mut cfg = SchemaConfig::toy();
        cfg.modalities
            .retain(|m| m.kind == ModalityKind::ScalarVector);
        assert!(build_schema(&cfg).is_err());
    }

    #[test]
    fn layout_totals() {
        let s = build_schema(&two_image_config()).unwrap();
        let l = token_layout(&s);
        assert_eq!(l.total, 24);
        assert_eq!(l.slots[0].timestep, 0);
        assert_eq!(l.slots[0].patches, 1..10);
        assert_eq!(l.slots[3].timestep, 22);

        // single image modality plus one vector: 1 + 9 and 1 + 1
        let mut cfg = two_image_config();
        cfg.modalities
            .retain(|m| m.name == "SAR" || m.name == "time");
        let s = build_schema(&cfg).unwrap();
        assert_eq!(token_layout(&s).range(0).len(), 10);
        assert_eq!(token_layout(&s).total, 12);
    }

    #[test]
    fn validate_sample_reports_offender() {
        let s = build_schema(&two_image_config()).unwrap();
        let sar = vec![0.0f32; 2 * 24 * 24];
        let dem = vec![0.0f32; 24 * 24];
        let mut images = BTreeMap::new();
        images.insert("DEM".to_string(), (vec![1, 24, 24], dem.as_slice()));
        let classes = BTreeMap::new();
        match validate_sample(&s, &images, &classes) {
            Err(Error::MissingModality(m)) => assert_eq!(m, "SAR"),
            other => panic!("unexpected {other:?}"),
        }
        images.insert("SAR".to_string(), (vec![2, 24, 24], sar.as_slice()));
        validate_sample(&s, &images, &classes).unwrap();
        images.insert("SAR".to_string(), (vec![2, 24, 12], &sar[..576]));
        assert!(matches!(
            validate_sample(&s, &images, &classes),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn class_boundary() {
        let s = build_schema(&SchemaConfig::toy()).unwrap();
        let mut lulc = vec![0u8; 576];
        let zeros: Vec<Vec<f32>> = s
            .units
            .iter()
            .map(|u| vec![0.0; u.channels * u.grid * u.grid])
            .collect();
        let mut images = BTreeMap::new();
        for (u, z) in s.units.iter().zip(&zeros) {
            if u.kind == ModalityKind::ContinuousImage {
                images.insert(
                    u.name.clone(),
                    (vec![u.channels, u.grid, u.grid], z.as_slice()),
                );
            }
        }
        lulc[100] = 5;
        let mut classes = BTreeMap::new();
        classes.insert("LULC".to_string(), (vec![24, 24], lulc.as_slice()));
        validate_sample(&s, &images, &classes).unwrap();
        let mut bad = lulc.clone();
        bad[7] = 6;
        classes.insert("LULC".to_string(), (vec![24, 24], bad.as_slice()));
        assert!(matches!(
            validate_sample(&s, &images, &classes),
            Err(Error::ClassOutOfRange {
                value: 6,
                classes: 6,
                ..
            })
        ));
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let cfg = SchemaConfig::toy();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SchemaConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(
            build_schema(&back).unwrap().hash(),
            build_schema(&cfg).unwrap().hash()
        );
    }

    fn arb_config() -> impl Strategy<Value = SchemaConfig> {
        let group = (1usize..5, 1usize..4, 1usize..3);
        (
            proptest::collection::vec(proptest::collection::vec(group, 1..4), 1..4),
            0usize..3,
            prop_oneof![Just(2usize), Just(4), Just(8)],
        )
            .prop_map(|(mods, vectors, f)| {
                let mut modalities: Vec<ModalityConfig> = mods
                    .into_iter()
                    .enumerate()
                    .map(|(i, groups)| ModalityConfig {
                        name: format!("img{i}"),
                        kind: ModalityKind::ContinuousImage,
                        band_groups: groups
                            .into_iter()
                            .enumerate()
                            .map(|(j, (ch, mult, _))| BandGroupConfig {
                                name: format!("g{j}"),
                                channels: ch,
                                grid: mult * 2 * f,
                                resolution_tag: String::new(),
                            })
                            .collect(),
                        classes: None,
                        vector_len: None,
                    })
                    .collect();
                for v in 0..vectors.max(if modalities.len() < 2 { 1 } else { 0 }) {
                    modalities.push(ModalityConfig {
                        name: format!("vec{v}"),
                        kind: ModalityKind::ScalarVector,
                        band_groups: vec![],
                        classes: None,
                        vector_len: Some(3),
                    });
                }
                SchemaConfig {
                    modalities,
                    downsample_factor: f,
                    patch: 2,
                    latent_channels: None,
                }
            })
    }

    proptest! {
        #[test]
        fn layout_partitions_sequence(cfg in arb_config()) {
            let s = build_schema(&cfg).unwrap();
            let l = token_layout(&s);
            let mut owner = vec![usize::MAX; l.total];
            for (u, slot) in l.slots.iter().enumerate() {
                prop_assert_eq!(owner[slot.timestep], usize::MAX);
                owner[slot.timestep] = u;
                for t in slot.patches.clone() {
                    prop_assert_eq!(owner[t], usize::MAX);
                    owner[t] = u;
                }
                prop_assert_eq!(slot.patches.start, slot.timestep + 1);
            }
            prop_assert!(owner.iter().all(|&o| o != usize::MAX));
            let patches: usize = s.units.iter().filter(|u| u.is_image()).map(|u| (u.latent_grid / 2).pow(2)).sum();
            let scalars = s.units.iter().filter(|u| !u.is_image()).count();
            prop_assert_eq!(l.total, patches + s.units.len() + scalars);
            prop_assert_eq!(build_schema(&cfg).unwrap(), s);
        }

        #[test]
        fn scaling_grid_and_factor_keeps_tokens(cfg in arb_config(), k in 1usize..3) {
            let mut scaled = cfg.clone();
            let k = 1 << k;
            scaled.downsample_factor *= k;
            for m in &mut scaled.modalities {
                for g in &mut m.band_groups {
                    g.grid *= k;
                }
            }
            let a = token_layout(&build_schema(&cfg).unwrap());
            let b = token_layout(&build_schema(&scaled).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
