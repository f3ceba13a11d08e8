//! Procedural multimodal tiles with a known generative process.
//!
//! A tile's *structure* (elevation, moisture, land cover, location, date) is
//! drawn first; its *nuisances* (illumination gain, atmospheric offset,
//! speckle and pixel noise) are drawn from a separate stream. Optical pixels
//! are `R[class, band] · season · s + a + offset_group + noise`, so fixing the
//! structure still leaves a known one-to-many spread.

mod dataset;
mod oracle;

use std::collections::BTreeMap;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{days_in_year, encode_latlon, encode_timestamp, DateStamp};
use crate::rng::{normal, seeded, Rng};
use crate::schema::{ModalityKind, Schema};

pub use dataset::{
    generate_tiles, read_dataset, write_dataset, Dataset, DatasetManifest, Split, TileEntry,
};
pub use oracle::{oracle_conditional_stats, OracleStats};

pub const WATER: u8 = 0;
pub const TREES: u8 = 1;
pub const CROPS: u8 = 2;
pub const BUILT: u8 = 3;
pub const BARE: u8 = 4;
pub const SNOW: u8 = 5;
pub const CLASS_NAMES: [&str; 6] = ["water", "trees", "crops", "built", "bare", "snow"];

pub const OPTICAL: &str = "S2L2A";
pub const SAR: &str = "SAR";
pub const DEM: &str = "DEM";
pub const LULC: &str = "LULC";
pub const LATLON: &str = "latlon";
pub const TIME: &str = "time";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalGroup {
    pub name: String,
    pub bands: usize,
    pub grid: usize,
    /// Additive group-specific offset.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Grid of DEM, land cover, SAR and the finest optical group.
    pub grid: usize,
    pub optical_groups: Vec<OpticalGroup>,
    /// `R[class][band]`, bands numbered across groups in order.
    pub reflectance: Vec<Vec<f64>>,
    /// Seasonal amplitude per class (0 for non-vegetation).
    pub season_amplitude: Vec<f64>,
    /// Day of year at which the seasonal multiplier peaks.
    pub season_peak_day: f64,
    /// Lattice spacing (pixels) of the coarsest noise octave.
    pub noise_cell: f64,
    pub dem_octaves: Vec<f64>,
    pub moisture_octaves: Vec<f64>,
    /// Per-tile base elevation range.
    pub dem_base: (f64, f64),
    pub illumination: (f64, f64),
    pub offset_sigma: f64,
    pub pixel_sigma: f64,
    /// Multiplicative speckle is Gamma(looks, 1/looks); 0 disables it.
    pub speckle_looks: f64,
    pub slope_scale: f64,
    /// Per SAR channel `(slope gain, roughness gain)`.
    pub sar_gains: Vec<(f64, f64)>,
    pub roughness: Vec<f64>,
    pub sar_clip: (f64, f64),
    pub years: (i32, i32),
    pub seed: u64,
}

impl WorldConfig {
    pub fn toy() -> Self {
        let group = |name: &str, bands, grid, offset| OpticalGroup {
            name: name.into(),
            bands,
            grid,
            offset,
        };
        WorldConfig {
            grid: 24,
            optical_groups: vec![
                group("10m", 4, 24, 0.0),
                group("20m", 3, 16, 0.02),
                group("60m", 2, 8, -0.01),
            ],
            reflectance: vec![
                vec![0.05, 0.04, 0.03, 0.02, 0.02, 0.01, 0.01, 0.01, 0.01],
                vec![0.03, 0.05, 0.03, 0.35, 0.20, 0.25, 0.12, 0.30, 0.10],
                vec![0.06, 0.09, 0.07, 0.40, 0.25, 0.30, 0.20, 0.35, 0.18],
                vec![0.15, 0.16, 0.17, 0.22, 0.24, 0.26, 0.28, 0.25, 0.27],
                vec![0.20, 0.24, 0.28, 0.30, 0.33, 0.35, 0.38, 0.34, 0.36],
                vec![0.85, 0.83, 0.80, 0.70, 0.50, 0.20, 0.10, 0.60, 0.15],
            ],
            season_amplitude: vec![0.0, 0.25, 0.45, 0.0, 0.0, 0.0],
            season_peak_day: 196.0,
            noise_cell: 16.0,
            dem_octaves: vec![0.85, 0.3, 0.05],
            moisture_octaves: vec![0.6, 0.3, 0.15],
            dem_base: (-0.3, 1.6),
            illumination: (0.7, 1.3),
            offset_sigma: 0.03,
            pixel_sigma: 0.01,
            speckle_looks: 16.0,
            slope_scale: 8.0,
            sar_gains: vec![(1.0, 0.5), (0.6, 0.3)],
            roughness: vec![0.02, 0.5, 0.3, 0.9, 0.2, 0.1],
            sar_clip: (0.005, 4.0),
            years: (2017, 2024),
            seed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.reflectance.len()
    }

    pub fn total_bands(&self) -> usize {
        self.optical_groups.iter().map(|g| g.bands).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.classes();
        if k < 2 || k > u8::MAX as usize {
            return bad(format!("{k} classes"));
        }
        if self.grid == 0 || self.optical_groups.is_empty() {
            return bad("grid and optical groups must be non-empty".into());
        }
        if self
            .reflectance
            .iter()
            .any(|r| r.len() != self.total_bands())
        {
            return bad(format!(
                "reflectance rows need {} bands",
                self.total_bands()
            ));
        }
        if self.season_amplitude.len() != k || self.roughness.len() != k {
            return bad("per-class tables must have one entry per class".into());
        }
        if self
            .optical_groups
            .iter()
            .any(|g| g.bands == 0 || g.grid == 0)
        {
            return bad("optical groups need bands and grid".into());
        }
        let amps = self.dem_octaves.iter().chain(&self.moisture_octaves);
        if amps.clone().any(|&a| !(a >= 0.0)) || self.noise_cell < 1.0 {
            return bad("noise amplitudes must be non-negative and cells >= 1 px".into());
        }
        let (lo, hi) = self.illumination;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("illumination range [{lo}, {hi}] must be positive"));
        }
        if !(self.offset_sigma >= 0.0 && self.pixel_sigma >= 0.0 && self.speckle_looks >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(self.dem_base.1 >= self.dem_base.0) || self.years.0 >= self.years.1 {
            return bad("empty base-elevation or year range".into());
        }
        if self.sar_gains.is_empty() || !(self.sar_clip.0 < self.sar_clip.1) {
            return bad("SAR needs at least one channel and a non-empty clip range".into());
        }
        Ok(())
    }

    /// Unit name of optical group `i` under the schema's naming rule.
    pub fn optical_unit(&self, i: usize) -> String {
        if self.optical_groups.len() == 1 {
            OPTICAL.to_string()
        } else {
            format!("{OPTICAL}.{}", self.optical_groups[i].name)
        }
    }

    /// Checks every unit this world emits against `schema`.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        let expect = |name: &str, kind: ModalityKind, channels: usize, grid: usize| -> Result<()> {
            let u = schema.unit(name)?;
            if u.kind != kind || u.channels != channels || u.grid != grid {
                return Err(Error::Config(format!(
                    "schema unit `{name}` is {:?} {}×{}, world emits {kind:?} {channels}×{grid}",
                    u.kind, u.channels, u.grid
                )));
            }
            Ok(())
        };
        for (i, g) in self.optical_groups.iter().enumerate() {
            expect(
                &self.optical_unit(i),
                ModalityKind::ContinuousImage,
                g.bands,
                g.grid,
            )?;
        }
        expect(
            SAR,
            ModalityKind::ContinuousImage,
            self.sar_gains.len(),
            self.grid,
        )?;
        expect(DEM, ModalityKind::ContinuousImage, 1, self.grid)?;
        let lulc = schema.unit(LULC)?;
        if lulc.kind != ModalityKind::CategoricalImage
            || lulc.grid != self.grid
            || lulc.classes != Some(self.classes())
        {
            return Err(Error::Config(format!(
                "schema unit `{LULC}` does not match the world's land cover"
            )));
        }
        expect(LATLON, ModalityKind::ScalarVector, 3, 0)?;
        expect(TIME, ModalityKind::ScalarVector, 3, 0)?;
        if schema.units.len() != self.optical_groups.len() + 5 {
            return Err(Error::Config(
                "schema has units this world does not produce".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden per-tile draws; never shown to the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub illumination: f64,
    pub offset: f64,
    pub speckle_seed: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub lat: f64,
    pub lon: f64,
    pub date: DateStamp,
    /// `[g, g]`
    pub dem: Vec<f32>,
    /// `[g, g]`
    pub lulc: Vec<u8>,
    /// `[channels, g, g]`
    pub sar: Vec<f32>,
    /// Per group `[bands, grid, grid]`.
    pub optical: Vec<Vec<f32>>,
    pub hidden: Nuisance,
}

/// Model-facing value of one unit.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitValue {
    Continuous(Vec<f32>),
    Classes(Vec<u8>),
}

impl TileRecord {
    /// Every unit's data keyed by unit name.
    pub fn unit_values(&self, world: &WorldConfig) -> Result<BTreeMap<String, UnitValue>> {
        let mut out = BTreeMap::new();
        for (i, img) in self.optical.iter().enumerate() {
            out.insert(world.optical_unit(i), UnitValue::Continuous(img.clone()));
        }
        out.insert(SAR.into(), UnitValue::Continuous(self.sar.clone()));
        out.insert(DEM.into(), UnitValue::Continuous(self.dem.clone()));
        out.insert(LULC.into(), UnitValue::Classes(self.lulc.clone()));
        let g = encode_latlon(self.lat, self.lon)?.to_array();
        out.insert(
            LATLON.into(),
            UnitValue::Continuous(g.iter().map(|&v| v as f32).collect()),
        );
        let t = encode_timestamp(self.date, world.years.0, world.years.1)?.to_array();
        out.insert(
            TIME.into(),
            UnitValue::Continuous(t.iter().map(|&v| v as f32).collect()),
        );
        Ok(out)
    }
}

/// Fractal value noise on a `grid×grid` raster; octave `o` uses cells of
/// `cell / 2^o` pixels and amplitude `amps[o]`.
pub fn fbm(grid: usize, cell: f64, amps: &[f64], rng: &mut impl RngCore) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    for (o, &amp) in amps.iter().enumerate() {
        let c = (cell / f64::from(1u32 << o.min(30))).max(1.0);
        let n = (grid as f64 / c).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| normal::<f64>(rng)).collect();
        if amp == 0.0 {
            continue;
        }
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..grid {
            let fy = (y as f64 + 0.5) / c;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..grid {
                let fx = (x as f64 + 0.5) / c;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let v = |yy: usize, xx: usize| lattice[yy * n + xx];
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
                let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
                out[y * grid + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Fixed land-cover rules over elevation, moisture and absolute latitude.
pub fn classify(elevation: f64, moisture: f64, abs_lat: f64) -> u8 {
    let snowline = 2.2 - 1.2 * (abs_lat / 90.0);
    if elevation < 0.0 {
        WATER
    } else if elevation > snowline {
        SNOW
    } else if elevation > snowline - 0.5 {
        BARE
    } else if moisture > 0.25 {
        TREES
    } else if moisture < -0.35 && elevation < 0.8 {
        BUILT
    } else if moisture < -0.6 {
        BARE
    } else {
        CROPS
    }
}

/// Bilinear resampling of `planes` square images from `from` to `to` pixels.
pub fn resample(src: &[f64], planes: usize, from: usize, to: usize) -> Vec<f64> {
    if from == to {
        return src.to_vec();
    }
    let tap = |i: usize| {
        let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(from - 1), s - i0 as f64)
    };
    let taps: Vec<_> = (0..to).map(tap).collect();
    let mut out = Vec::with_capacity(planes * to * to);
    for p in src.chunks_exact(from * from).take(planes) {
        for &(y0, y1, wy) in &taps {
            for &(x0, x1, wx) in &taps {
                let top = p[y0 * from + x0] * (1.0 - wx) + p[y0 * from + x1] * wx;
                let bot = p[y1 * from + x0] * (1.0 - wx) + p[y1 * from + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

pub fn season_factor(world: &WorldConfig, class: u8, date: DateStamp) -> f64 {
    let phase = std::f64::consts::TAU * (f64::from(date.day_of_year) - world.season_peak_day)
        / f64::from(days_in_year(date.year));
    1.0 + world.season_amplitude[class as usize] * phase.cos()
}

/// Noise-free optical signal `R·season` per group, `[bands, grid, grid]`.
pub fn optical_base(world: &WorldConfig, lulc: &[u8], date: DateStamp) -> Vec<Vec<f64>> {
    let g = world.grid;
    let mut band0 = 0;
    world
        .optical_groups
        .iter()
        .map(|grp| {
            let mut full = Vec::with_capacity(grp.bands * g * g);
            for b in band0..band0 + grp.bands {
                full.extend(
                    lulc.iter()
                        .map(|&c| world.reflectance[c as usize][b] * season_factor(world, c, date)),
                );
            }
            band0 += grp.bands;
            resample(&full, grp.bands, g, grp.grid)
        })
        .collect()
}

/// Central-difference gradient magnitude, scaled.
fn slope(dem: &[f64], g: usize, scale: f64) -> Vec<f64> {
    let at = |y: usize, x: usize| dem[y * g + x];
    let mut out = Vec::with_capacity(g * g);
    for y in 0..g {
        for x in 0..g {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(g - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(g - 1));
            let dx = (at(y, xr) - at(y, xl)) / (xr - xl).max(1) as f64;
            let dy = (at(yd, x) - at(yu, x)) / (yd - yu).max(1) as f64;
            out.push(scale * (dx * dx + dy * dy).sqrt());
        }
    }
    out
}

struct Structure {
    lat: f64,
    lon: f64,
    date: DateStamp,
    dem: Vec<f64>,
    lulc: Vec<u8>,
}

fn draw_structure(world: &WorldConfig, rng: &mut Rng) -> Structure {
    let lat = rng.random_range(-1.0f64..=1.0).asin().to_degrees();
    let lon = rng.random_range(-180.0..180.0);
    let first = DateStamp::new(world.years.0, 1).expect("valid").ordinal();
    let last = DateStamp::new(world.years.1, days_in_year(world.years.1))
        .expect("valid")
        .ordinal();
    let date = DateStamp::from_ordinal(rng.random_range(first..=last));
    let (blo, bhi) = world.dem_base;
    let base = if bhi > blo {
        rng.random_range(blo..bhi)
    } else {
        blo
    };
    let g = world.grid;
    let dem: Vec<f64> = fbm(g, world.noise_cell, &world.dem_octaves, rng)
        .into_iter()
        .map(|v| v + base)
        .collect();
    let moisture = fbm(g, world.noise_cell, &world.moisture_octaves, rng);
    let lulc = dem
        .iter()
        .zip(&moisture)
        .map(|(&e, &m)| classify(e, m, lat.abs()))
        .collect();
    Structure {
        lat,
        lon,
        date,
        dem,
        lulc,
    }
}

fn draw_nuisance(world: &WorldConfig, rng: &mut Rng) -> Nuisance {
    let (lo, hi) = world.illumination;
    let illumination = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let offset = world.offset_sigma * normal::<f64>(rng);
    Nuisance {
        illumination,
        offset,
        speckle_seed: rng.next_u64(),
        noise_seed: rng.next_u64(),
    }
}

fn render(world: &WorldConfig, s: &Structure, hidden: Nuisance) -> TileRecord {
    let g = world.grid;
    let slope = slope(&s.dem, g, world.slope_scale);
    let mut speckle_rng = seeded(hidden.speckle_seed);
    let gamma = (world.speckle_looks > 0.0).then(|| {
        Gamma::new(world.speckle_looks, 1.0 / world.speckle_looks).expect("positive looks")
    });
    let mut sar = Vec::with_capacity(world.sar_gains.len() * g * g);
    for &(cs, cr) in &world.sar_gains {
        for (p, &sl) in slope.iter().enumerate() {
            let clean = (cs * sl + cr * world.roughness[s.lulc[p] as usize])
                .clamp(world.sar_clip.0, world.sar_clip.1);
            let k = gamma.as_ref().map_or(1.0, |d| d.sample(&mut speckle_rng));
            sar.push((clean * k) as f32);
        }
    }
    let mut noise_rng = seeded(hidden.noise_seed);
    let optical = optical_base(world, &s.lulc, s.date)
        .into_iter()
        .zip(&world.optical_groups)
        .map(|(base, grp)| {
            base.into_iter()
                .map(|v| {
                    let n = world.pixel_sigma * normal::<f64>(&mut noise_rng);
                    (v * hidden.illumination + hidden.offset + grp.offset + n) as f32
                })
                .collect()
        })
        .collect();
    TileRecord {
        lat: s.lat,
        lon: s.lon,
        date: s.date,
        dem: s.dem.iter().map(|&v| v as f32).collect(),
        lulc: s.lulc.clone(),
        sar,
        optical,
        hidden,
    }
}

/// Draws one tile: structure and nuisance seeds both come from `rng`.
pub fn generate_tile(world: &WorldConfig, rng: &mut impl RngCore) -> TileRecord {
    let structure_seed = rng.next_u64();
    let nuisance_seed = rng.next_u64();
    let s = draw_structure(world, &mut seeded(structure_seed));
    let hidden = draw_nuisance(world, &mut seeded(nuisance_seed));
    render(world, &s, hidden)
}

/// Re-renders `tile` with fresh nuisances: DEM, land cover, place and date stay.
pub fn resample_nuisance(
    world: &WorldConfig,
    tile: &TileRecord,
    rng: &mut impl RngCore,
) -> TileRecord {
    let s = Structure {
        lat: tile.lat,
        lon: tile.lon,
        date: tile.date,
        dem: tile.dem.iter().map(|&v| f64::from(v)).collect(),
        lulc: tile.lulc.clone(),
    };
    let hidden = draw_nuisance(world, &mut seeded(rng.next_u64()));
    render(world, &s, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::schema::{build_schema, SchemaConfig};

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn toy_world_matches_toy_schema() {
        let w = WorldConfig::toy();
        w.validate().unwrap();
        w.check_schema(&build_schema(&SchemaConfig::toy()).unwrap())
            .unwrap();
        let mut small = SchemaConfig::toy();
        small.modalities[1].band_groups[0].channels = 3;
        assert!(w.check_schema(&build_schema(&small).unwrap()).is_err());
    }

    #[test]
    fn tiles_are_reproducible_and_shaped() {
        let w = WorldConfig::toy();
        let a = generate_tile(&w, &mut stream(1, "t"));
        let b = generate_tile(&w, &mut stream(1, "t"));
        assert_eq!(a, b);
        assert_eq!(a.dem.len(), 576);
        assert_eq!(a.sar.len(), 2 * 576);
        let lens: Vec<usize> = a.optical.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![4 * 576, 3 * 256, 2 * 64]);
        let units = a.unit_values(&w).unwrap();
        assert_eq!(units.len(), 8);
    }

    #[test]
    fn flat_world_has_one_class() {
        let w = WorldConfig {
            dem_octaves: vec![0.0; 4],
            moisture_octaves: vec![0.0; 3],
            ..WorldConfig::toy()
        };
        let mut rng = seeded(3);
        for _ in 0..20 {
            let t = generate_tile(&w, &mut rng);
            assert!(t.dem.iter().all(|&v| v == t.dem[0]));
            assert!(t.lulc.iter().all(|&c| c == t.lulc[0]));
        }
    }

    #[test]
    fn classify_is_deterministic_and_covers_classes() {
        assert_eq!(classify(-0.1, 0.0, 10.0), WATER);
        assert_eq!(classify(2.5, 0.0, 10.0), SNOW);
        assert_eq!(classify(0.5, 0.5, 10.0), TREES);
        assert_eq!(classify(0.5, -0.5, 10.0), BUILT);
        assert_eq!(classify(1.0, 0.0, 10.0), CROPS);
        assert_eq!(classify(1.9, 0.0, 10.0), BARE);
        let w = WorldConfig::toy();
        let mut counts = [0usize; 6];
        let mut rng = seeded(4);
        for _ in 0..200 {
            for c in generate_tile(&w, &mut rng).lulc {
                counts[c as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                c as f64 > 0.02 * total as f64,
                "class {} rare: {counts:?}",
                CLASS_NAMES[k]
            );
        }
    }

    #[test]
    fn sar_tracks_slope() {
        let w = WorldConfig::toy();
        let mut rng = seeded(5);
        let (mut s, mut v) = (Vec::new(), Vec::new());
        for _ in 0..50 {
            let t = generate_tile(&w, &mut rng);
            let dem: Vec<f64> = t.dem.iter().map(|&x| f64::from(x)).collect();
            s.extend(slope(&dem, 24, w.slope_scale));
            v.extend(t.sar[..576].iter().map(|&x| f64::from(x)));
        }
        assert!(pearson(&s, &v) > 0.5, "{}", pearson(&s, &v));
    }

    #[test]
    fn nuisance_changes_optical_only() {
        let w = WorldConfig::toy();
        let t = generate_tile(&w, &mut seeded(6));
        let u = resample_nuisance(&w, &t, &mut seeded(7));
        assert_eq!(
            (t.dem.clone(), t.lulc.clone(), t.date, t.lat),
            (u.dem.clone(), u.lulc.clone(), u.date, u.lat)
        );
        assert_ne!(t.optical, u.optical);
    }

    #[test]
    fn trees_pixel_variance_across_tiles() {
        // no seasonality: Var = R²·Var(s) + σ_a² + σ_pix²
        let w = WorldConfig {
            season_amplitude: vec![0.0; 6],
            ..WorldConfig::toy()
        };
        let mut rng = seeded(8);
        let mut vals = Vec::new();
        while vals.len() < 10_000 {
            let t = generate_tile(&w, &mut rng);
            if let Some(p) = t.lulc.iter().position(|&c| c == TREES) {
                vals.push(f64::from(t.optical[0][p]));
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let r = w.reflectance[TREES as usize][0];
        let (lo, hi) = w.illumination;
        let want =
            r * r * (hi - lo).powi(2) / 12.0 + w.offset_sigma.powi(2) + w.pixel_sigma.powi(2);
        assert!((var / want - 1.0).abs() < 0.03, "{var} vs {want}");
    }

    #[test]
    fn resample_preserves_constants() {
        let img = vec![0.3; 2 * 24 * 24];
        assert!(resample(&img, 2, 24, 16)
            .iter()
            .all(|&v| (v - 0.3).abs() < 1e-15));
        assert_eq!(resample(&img, 2, 24, 8).len(), 128);
    }
}
