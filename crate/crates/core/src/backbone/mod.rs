//! U-ViT style denoiser over the shared multimodal token sequence.
//!
//! Each unit's latent is patchified and linearly embedded; its timestep is a
//! sinusoidal token placed in front of its patch tokens; a learned positional
//! table covers every slot. Pre-norm transformer blocks follow, with the output
//! of block `k` in the first half concatenated into block `L−1−k` and
//! re-projected. Separate linear heads read each unit's patch slots back out.

pub mod checkpoint;
pub mod tokens;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::TimestepVector;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{normals, seeded};
use crate::scalar::Scalar;
use crate::schema::{Schema, TokenLayout};

pub use checkpoint::{fit, Checkpoint, CheckpointManifest};
pub use tokens::{embed_timestep, patchify, unpatchify};
pub use train::{TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Start every output head at zero.
    pub zero_init_heads: bool,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            layers: 6,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            zero_init_heads: true,
        }
    }

    pub fn reference() -> Self {
        BackboneConfig {
            layers: 20,
            dim: 1024,
            heads: 16,
            mlp_ratio: 4,
            zero_init_heads: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.layers % 2 != 0 {
            return Err(Error::Config(format!(
                "layers must be even and >= 2, got {}",
                self.layers
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Noisy latents for a batch: per unit, `batch` latents back to back in the
/// unit's latent layout, plus one [`TimestepVector`] per example.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput<F> {
    pub batch: usize,
    pub latents: Vec<Vec<F>>,
    pub timesteps: Vec<TimestepVector>,
}

/// Embedded sequence `[batch, len, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub tokens: Vec<F>,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn token(&self, b: usize, slot: usize) -> &[F] {
        let at = (b * self.len + slot) * self.dim;
        &self.tokens[at..at + self.dim]
    }
}

/// Initial positional code of patch `j` on a `side × side` token grid: 2-D
/// sinusoids of the patch centre in unit coordinates, so patches covering the
/// same ground start alike whatever their unit's resolution.
pub fn spatial_code(d: usize, side: usize, j: usize) -> Vec<f64> {
    let centre = |i: usize| (i as f64 + 0.5) / side as f64;
    let (y, x) = (centre(j / side), centre(j % side));
    let quarter = d / 4;
    let mut out = vec![0.0; d];
    for k in 0..quarter {
        let w = std::f64::consts::PI * (k + 1) as f64;
        out[4 * k] = 0.5 * (w * y).sin();
        out[4 * k + 1] = 0.5 * (w * y).cos();
        out[4 * k + 2] = 0.5 * (w * x).sin();
        out[4 * k + 3] = 0.5 * (w * x).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub schema: Schema,
    pub layout: TokenLayout,
}

struct Bound<'a, F> {
    params: &'a ParamStore<F>,
    vars: Vec<Var>,
}

impl<F: Scalar> Bound<'_, F> {
    fn v(&self, name: &str) -> Var {
        self.vars[self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))]
    }
}

impl Backbone {
    pub fn new(schema: &Schema, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Backbone {
            config,
            schema: schema.clone(),
            layout: schema.token_layout(),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.layout.total
    }

    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = seeded(seed);
        let d = self.config.dim;
        let hidden = d * self.config.mlp_ratio;
        let l = self.config.layers;
        let mut s = ParamStore::new();
        let mut normal = |n: usize, std: f64| -> Vec<F> {
            normals::<F>(&mut rng, n)
                .into_iter()
                .map(|v| v * F::of(std))
                .collect()
        };
        let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = 1.0 / ((2 * l) as f64).sqrt();
        for u in &self.schema.units {
            let p = u.token_dim;
            s.insert(
                format!("embed.{}.w", u.name),
                vec![p, d],
                normal(p * d, lecun(p)),
                true,
            );
            s.insert(
                format!("embed.{}.b", u.name),
                vec![d],
                vec![F::zero(); d],
                false,
            );
        }
        let n = self.seq_len();
        let mut pos = normal(n * d, 0.02);
        for (u, slots) in self.schema.units.iter().zip(&self.layout.slots) {
            if !u.is_image() {
                continue;
            }
            let side = (u.tokens as f64).sqrt().round() as usize;
            for (j, slot) in slots.patches.clone().enumerate() {
                let code = spatial_code(d, side, j);
                for (v, c) in pos[slot * d..(slot + 1) * d].iter_mut().zip(code) {
                    *v += F::of(c);
                }
            }
        }
        s.insert("pos", vec![n, d], pos, false);
        for k in 0..l {
            let pre = format!("block.{k}");
            if k >= l / 2 {
                s.insert(
                    format!("skip.{k}.w"),
                    vec![2 * d, d],
                    normal(2 * d * d, lecun(2 * d)),
                    true,
                );
                s.insert(format!("skip.{k}.b"), vec![d], vec![F::zero(); d], false);
            }
            s.insert(format!("{pre}.ln1.g"), vec![d], vec![F::one(); d], false);
            s.insert(format!("{pre}.ln1.b"), vec![d], vec![F::zero(); d], false);
            s.insert(
                format!("{pre}.qkv.w"),
                vec![d, 3 * d],
                normal(3 * d * d, lecun(d)),
                true,
            );
            s.insert(
                format!("{pre}.qkv.b"),
                vec![3 * d],
                vec![F::zero(); 3 * d],
                false,
            );
            s.insert(
                format!("{pre}.proj.w"),
                vec![d, d],
                normal(d * d, lecun(d) * resid),
                true,
            );
            s.insert(format!("{pre}.proj.b"), vec![d], vec![F::zero(); d], false);
            s.insert(format!("{pre}.ln2.g"), vec![d], vec![F::one(); d], false);
            s.insert(format!("{pre}.ln2.b"), vec![d], vec![F::zero(); d], false);
            s.insert(
                format!("{pre}.fc1.w"),
                vec![d, hidden],
                normal(d * hidden, lecun(d)),
                true,
            );
            s.insert(
                format!("{pre}.fc1.b"),
                vec![hidden],
                vec![F::zero(); hidden],
                false,
            );
            s.insert(
                format!("{pre}.fc2.w"),
                vec![hidden, d],
                normal(hidden * d, lecun(hidden) * resid),
                true,
            );
            s.insert(format!("{pre}.fc2.b"), vec![d], vec![F::zero(); d], false);
        }
        s.insert("norm.g", vec![d], vec![F::one(); d], false);
        s.insert("norm.b", vec![d], vec![F::zero(); d], false);
        for u in &self.schema.units {
            let p = u.token_dim;
            let w = if self.config.zero_init_heads {
                vec![F::zero(); d * p]
            } else {
                normal(d * p, lecun(d))
            };
            s.insert(format!("head.{}.w", u.name), vec![d, p], w, true);
            s.insert(
                format!("head.{}.b", u.name),
                vec![p],
                vec![F::zero(); p],
                false,
            );
        }
        s
    }

    fn check_input<F: Scalar>(&self, input: &DenoiserInput<F>) -> Result<()> {
        let units = &self.schema.units;
        if input.latents.len() != units.len() {
            return Err(Error::Shape(format!(
                "{} latent arrays for {} units",
                input.latents.len(),
                units.len()
            )));
        }
        for (u, lat) in units.iter().zip(&input.latents) {
            if lat.len() != input.batch * u.latent_len() {
                return Err(Error::Shape(format!(
                    "`{}`: {} values for batch {} of {}",
                    u.name,
                    lat.len(),
                    input.batch,
                    u.latent_len()
                )));
            }
        }
        if input.timesteps.len() != input.batch
            || input.timesteps.iter().any(|t| t.len() != units.len())
        {
            return Err(Error::Shape(
                "one timestep per unit per example required".into(),
            ));
        }
        Ok(())
    }

    fn check_params<F: Scalar>(&self, params: &ParamStore<F>) -> Result<()> {
        let pos = params
            .position("pos")
            .map(|i| params.iter().nth(i).unwrap().shape.clone());
        if pos != Some(vec![self.seq_len(), self.config.dim]) {
            return Err(Error::Shape(format!(
                "parameters do not match backbone (seq {}, dim {}): pos {pos:?}",
                self.seq_len(),
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Per-unit tokens `[batch·tokens, token_dim]`.
    fn tokenize<F: Scalar>(&self, latents: &[Vec<F>], batch: usize) -> Result<Vec<Vec<F>>> {
        let p = self.schema.patch;
        self.schema
            .units
            .iter()
            .zip(latents)
            .map(|(u, lat)| {
                if !u.is_image() {
                    return Ok(lat.clone());
                }
                let mut out = Vec::with_capacity(lat.len());
                for ex in lat.chunks_exact(u.latent_len()).take(batch) {
                    out.extend(patchify(ex, u.latent_channels, u.latent_grid, p)?);
                }
                Ok(out)
            })
            .collect()
    }

    fn detokenize<F: Scalar>(&self, tokens: Vec<Vec<F>>) -> Result<Vec<Vec<F>>> {
        let p = self.schema.patch;
        self.schema
            .units
            .iter()
            .zip(tokens)
            .map(|(u, tok)| {
                if !u.is_image() {
                    return Ok(tok);
                }
                let mut out = Vec::with_capacity(tok.len());
                for ex in tok.chunks_exact(u.latent_len()) {
                    out.extend(unpatchify(ex, u.latent_channels, u.latent_grid, p)?);
                }
                Ok(out)
            })
            .collect()
    }

    fn embed<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<F>,
        tokens: &[Vec<F>],
        timesteps: &[TimestepVector],
        with_positions: bool,
    ) -> Var {
        let d = self.config.dim;
        let n = self.seq_len();
        let batch = timesteps.len();
        let mut parts = Vec::with_capacity(2 * self.schema.units.len());
        let mut t_rows = Vec::with_capacity(batch * self.schema.units.len());
        let mut t_vals = Vec::with_capacity(batch * self.schema.units.len() * d);
        for (ui, u) in self.schema.units.iter().enumerate() {
            let slots = &self.layout.slots[ui];
            let x = tape.constant(tokens[ui].clone(), vec![batch * u.tokens, u.token_dim]);
            let e = tape.linear(
                x,
                bound.v(&format!("embed.{}.w", u.name)),
                Some(bound.v(&format!("embed.{}.b", u.name))),
            );
            let rows = (0..batch)
                .flat_map(|b| slots.patches.clone().map(move |s| b * n + s))
                .collect();
            parts.push((e, rows));
            for (b, tv) in timesteps.iter().enumerate() {
                t_rows.push(b * n + slots.timestep);
                t_vals.extend(embed_timestep::<F>(tv.0[ui], d));
            }
        }
        let tt = tape.constant(t_vals, vec![t_rows.len(), d]);
        parts.push((tt, t_rows));
        let seq = tape.stitch(parts, batch * n, d);
        if with_positions {
            tape.add_tiled(seq, bound.v("pos"))
        } else {
            seq
        }
    }

    fn block<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<F>,
        k: usize,
        h: Var,
        batch: usize,
    ) -> Var {
        let pre = format!("block.{k}");
        let v = |s: &str| bound.v(&format!("{pre}.{s}"));
        let x = tape.layer_norm(h, v("ln1.g"), v("ln1.b"));
        let qkv = tape.linear(x, v("qkv.w"), Some(v("qkv.b")));
        let a = tape.attention(qkv, batch, self.seq_len(), self.config.heads);
        let a = tape.linear(a, v("proj.w"), Some(v("proj.b")));
        let h = tape.add(h, a);
        let x = tape.layer_norm(h, v("ln2.g"), v("ln2.b"));
        let x = tape.linear(x, v("fc1.w"), Some(v("fc1.b")));
        let x = tape.gelu(x);
        let x = tape.linear(x, v("fc2.w"), Some(v("fc2.b")));
        tape.add(h, x)
    }

    /// Records the full forward pass; returns per-unit token predictions.
    fn build<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<F>,
        tokens: &[Vec<F>],
        timesteps: &[TimestepVector],
    ) -> Vec<Var> {
        let d = self.config.dim;
        let l = self.config.layers;
        let n = self.seq_len();
        let batch = timesteps.len();
        let mut h = self.embed(tape, bound, tokens, timesteps, true);
        let mut skips = Vec::with_capacity(l / 2);
        for k in 0..l {
            if k >= l / 2 {
                let s = skips[l - 1 - k];
                let c = tape.concat_cols(h, s, d, d);
                h = tape.linear(
                    c,
                    bound.v(&format!("skip.{k}.w")),
                    Some(bound.v(&format!("skip.{k}.b"))),
                );
            }
            h = self.block(tape, bound, k, h, batch);
            if k < l / 2 {
                skips.push(h);
            }
        }
        let h = tape.layer_norm(h, bound.v("norm.g"), bound.v("norm.b"));
        self.schema
            .units
            .iter()
            .enumerate()
            .map(|(ui, u)| {
                let slots = &self.layout.slots[ui];
                let rows = (0..batch)
                    .flat_map(|b| slots.patches.clone().map(move |s| b * n + s))
                    .collect();
                let x = tape.gather_rows(h, d, rows);
                tape.linear(
                    x,
                    bound.v(&format!("head.{}.w", u.name)),
                    Some(bound.v(&format!("head.{}.b", u.name))),
                )
            })
            .collect()
    }

    /// Embedded input sequence (optionally before the positional table is added).
    pub fn assemble_sequence<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        input: &DenoiserInput<F>,
        with_positions: bool,
    ) -> Result<TokenSequence<F>> {
        self.check_input(input)?;
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = Bound {
            params,
            vars: params.bind(&mut tape, false),
        };
        let tokens = self.tokenize(&input.latents, input.batch)?;
        let seq = self.embed(&mut tape, &bound, &tokens, &input.timesteps, with_positions);
        Ok(TokenSequence {
            batch: input.batch,
            len: self.seq_len(),
            dim: self.config.dim,
            tokens: tape.value(seq).to_vec(),
        })
    }

    /// Predicted noise per unit, in latent layout.
    pub fn forward<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        input: &DenoiserInput<F>,
    ) -> Result<Vec<Vec<F>>> {
        self.check_input(input)?;
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = Bound {
            params,
            vars: params.bind(&mut tape, false),
        };
        let tokens = self.tokenize(&input.latents, input.batch)?;
        let outs = self.build(&mut tape, &bound, &tokens, &input.timesteps);
        let preds = outs.iter().map(|&v| tape.value(v).to_vec()).collect();
        self.detokenize(preds)
    }

    /// Batch-mean joint loss against per-unit noise targets; gradients are
    /// added into `params`' shadows.
    pub fn loss_and_grads<F: Scalar>(
        &self,
        params: &mut ParamStore<F>,
        input: &DenoiserInput<F>,
        targets: &[Vec<F>],
    ) -> Result<F> {
        self.check_input(input)?;
        self.check_params(params)?;
        if targets.len() != input.latents.len()
            || targets
                .iter()
                .zip(&input.latents)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("targets do not match inputs".into()));
        }
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let bound = Bound { params, vars };
        let tokens = self.tokenize(&input.latents, input.batch)?;
        let target_tokens = self.tokenize(targets, input.batch)?;
        let outs = self.build(&mut tape, &bound, &tokens, &input.timesteps);
        let mut total: Option<Var> = None;
        for (o, tgt) in outs.into_iter().zip(target_tokens) {
            let shape = tape.shape(o).to_vec();
            let t = tape.constant(tgt, shape);
            let diff = tape.sub(o, t);
            let sq = tape.sum_sq(diff);
            total = Some(match total {
                Some(acc) => tape.add(acc, sq),
                None => sq,
            });
        }
        let loss = tape.scale(
            total.expect("at least one unit"),
            F::one() / F::of_usize(input.batch),
        );
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                name: "loss".into(),
            });
        }
        let grads = tape.backward(loss);
        let vars = bound.vars;
        params.accumulate(&grads, &vars)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normals;
    use crate::schema::{build_schema, SchemaConfig};

    pub(crate) fn tiny_schema() -> Schema {
        let mut cfg = SchemaConfig::toy();
        cfg.modalities
            .retain(|m| ["SAR", "DEM", "latlon"].contains(&m.name.as_str()));
        cfg.modalities[0].band_groups[0].grid = 8;
        cfg.modalities[0].band_groups[0].channels = 1;
        cfg.modalities[1].band_groups[0].grid = 8;
        build_schema(&cfg).unwrap()
    }

    pub(crate) fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            zero_init_heads: false,
        }
    }

    fn random_input(model: &Backbone, batch: usize, seed: u64) -> DenoiserInput<f64> {
        let mut rng = seeded(seed);
        let latents = model
            .schema
            .units
            .iter()
            .map(|u| normals(&mut rng, batch * u.latent_len()))
            .collect();
        let timesteps = (0..batch)
            .map(|b| {
                TimestepVector(
                    (0..model.schema.units.len())
                        .map(|u| (b * 7 + u * 13) % 50)
                        .collect(),
                )
            })
            .collect();
        DenoiserInput {
            batch,
            latents,
            timesteps,
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig {
            layers: 3,
            ..BackboneConfig::toy()
        }
        .validate()
        .is_err());
        assert!(BackboneConfig {
            heads: 3,
            ..BackboneConfig::toy()
        }
        .validate()
        .is_err());
        BackboneConfig::toy().validate().unwrap();
        BackboneConfig::reference().validate().unwrap();
    }

    #[test]
    fn co_located_patches_start_with_similar_positions() {
        let schema = build_schema(&SchemaConfig::toy()).unwrap();
        let m = Backbone::new(&schema, BackboneConfig::toy()).unwrap();
        let p = m.init_params::<f64>(3);
        let d = m.config.dim;
        let pos = &p.get("pos").value;
        let row = |unit: &str, j: usize| {
            let slot = m.layout.slots[schema.unit_index(unit).unwrap()]
                .patches
                .start
                + j;
            &pos[slot * d..(slot + 1) * d]
        };
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for j in 0..9 {
            let same = dist(row("S2L2A.10m", j), row("DEM", j));
            let other = dist(row("S2L2A.10m", j), row("DEM", 8 - j.min(8)));
            assert!(same < 0.5, "patch {j}: {same}");
            if j != 4 {
                assert!(other > 2.0 * same, "patch {j}: {other} vs {same}");
            }
        }
        // a coarse patch is closest to the fine patch nearest its centre
        let coarse = row("S2L2A.20m", 0);
        let nearest = (0..9).min_by(|&a, &b| {
            dist(coarse, row("S2L2A.10m", a)).total_cmp(&dist(coarse, row("S2L2A.10m", b)))
        });
        assert_eq!(nearest, Some(0));
    }

    #[test]
    fn output_shapes_and_determinism() {
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let p = m.init_params::<f64>(1);
        let x = random_input(&m, 3, 2);
        let a = m.forward(&p, &x).unwrap();
        let b = m.forward(&p, &x).unwrap();
        assert_eq!(a, b);
        for (u, out) in schema.units.iter().zip(&a) {
            assert_eq!(out.len(), 3 * u.latent_len());
        }
        // a wider model changes values, not shapes
        let wide = Backbone::new(
            &schema,
            BackboneConfig {
                dim: 16,
                ..tiny_config()
            },
        )
        .unwrap();
        let c = wide.forward(&wide.init_params::<f64>(1), &x).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().zip(&c).all(|(x, y)| x.len() == y.len()));
    }

    #[test]
    fn sequence_follows_layout() {
        let cfg = {
            let mut c = SchemaConfig::toy();
            c.modalities
                .retain(|m| ["SAR", "DEM", "latlon", "time"].contains(&m.name.as_str()));
            build_schema(&c).unwrap()
        };
        let m = Backbone::new(&cfg, tiny_config()).unwrap();
        assert_eq!(m.seq_len(), 24);
        let p = m.init_params::<f64>(3);
        let x = random_input(&m, 1, 4);
        let base = m.assemble_sequence(&p, &x, false).unwrap();
        assert_eq!(base.len, 24);
        // changing one unit's timestep changes exactly one pre-position token
        let mut y = x.clone();
        y.timesteps[0].0[1] += 1;
        let changed = m.assemble_sequence(&p, &y, false).unwrap();
        let diff: Vec<usize> = (0..24)
            .filter(|&s| base.token(0, s) != changed.token(0, s))
            .collect();
        assert_eq!(diff, vec![m.layout.slots[1].timestep]);
        // timestep slot holds the raw sinusoid before positions are added
        assert_eq!(
            base.token(0, 0),
            embed_timestep::<f64>(x.timesteps[0].0[0], 8).as_slice()
        );
        let with_pos = m.assemble_sequence(&p, &x, true).unwrap();
        let pos = &p.get("pos").value;
        for (j, v) in with_pos.tokens.iter().enumerate() {
            assert!((v - base.tokens[j] - pos[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_same_shaped_units_swaps_outputs() {
        let mut cfg = SchemaConfig::toy();
        cfg.modalities
            .retain(|m| ["SAR", "DEM"].contains(&m.name.as_str()));
        cfg.modalities[0].band_groups[0].channels = 1;
        let schema = build_schema(&cfg).unwrap();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let mut p = m.init_params::<f64>(5);
        p.get_mut("pos").value.iter_mut().for_each(|v| *v = 0.0);
        let x = random_input(&m, 2, 6);
        let out = m.forward(&p, &x).unwrap();

        let mut q = p.clone();
        for kind in ["embed", "head"] {
            for part in ["w", "b"] {
                let a = p.get(&format!("{kind}.SAR.{part}")).value.clone();
                let b = p.get(&format!("{kind}.DEM.{part}")).value.clone();
                q.get_mut(&format!("{kind}.SAR.{part}")).value = b;
                q.get_mut(&format!("{kind}.DEM.{part}")).value = a;
            }
        }
        let mut y = x.clone();
        y.latents.swap(0, 1);
        y.timesteps.iter_mut().for_each(|t| t.0.swap(0, 1));
        let swapped = m.forward(&q, &y).unwrap();
        for (a, b) in out[0]
            .iter()
            .zip(&swapped[1])
            .chain(out[1].iter().zip(&swapped[0]))
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heads_give_zero_head_gradient_on_zero_problem() {
        let schema = tiny_schema();
        let m = Backbone::new(
            &schema,
            BackboneConfig {
                zero_init_heads: true,
                ..tiny_config()
            },
        )
        .unwrap();
        let mut p = m.init_params::<f64>(7);
        let mut x = random_input(&m, 2, 8);
        x.latents
            .iter_mut()
            .for_each(|l| l.iter_mut().for_each(|v| *v = 0.0));
        let targets: Vec<Vec<f64>> = x.latents.clone();
        let loss = m.loss_and_grads(&mut p, &x, &targets).unwrap();
        assert_eq!(loss, 0.0);
        for u in &schema.units {
            assert!(p
                .get(&format!("head.{}.w", u.name))
                .grad
                .iter()
                .all(|&g| g == 0.0));
            assert!(p
                .get(&format!("head.{}.b", u.name))
                .grad
                .iter()
                .all(|&g| g == 0.0));
        }
        assert_eq!(p.grad_norm(), 0.0);
    }

    #[test]
    fn rejects_mismatched_input() {
        let schema = tiny_schema();
        let m = Backbone::new(&schema, tiny_config()).unwrap();
        let p = m.init_params::<f64>(1);
        let mut x = random_input(&m, 2, 1);
        x.latents[0].pop();
        assert!(m.forward(&p, &x).is_err());
        let other = Backbone::new(
            &schema,
            BackboneConfig {
                dim: 16,
                ..tiny_config()
            },
        )
        .unwrap();
        assert!(other.forward(&p, &random_input(&m, 1, 1)).is_err());
    }
}
