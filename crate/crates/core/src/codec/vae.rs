use serde::{Deserialize, Serialize};

use super::CodecConfig;
use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{normals, seeded, stream};
use crate::scalar::Scalar;

/// Loss breakdown: per-pixel mean L1 and MSE, per-image KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLoss<F> {
    pub l1: F,
    pub mse: F,
    pub kl: F,
    pub total: F,
}

/// Reference computation of the codec loss from plain arrays.
pub fn codec_loss_terms<F: Scalar>(
    image: &[F],
    recon: &[F],
    mu: &[F],
    logvar: &[F],
    kl_weight: f64,
    batch: usize,
) -> Result<CodecLoss<F>> {
    if image.len() != recon.len() || mu.len() != logvar.len() || image.is_empty() || batch == 0 {
        return Err(Error::Shape("codec loss inputs disagree".into()));
    }
    let n = F::of_usize(image.len());
    let l1 = image
        .iter()
        .zip(recon)
        .map(|(&a, &b)| (a - b).abs())
        .sum::<F>()
        / n;
    let mse = image
        .iter()
        .zip(recon)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n;
    let half = F::of(0.5);
    let kl = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .sum::<F>()
        / F::of_usize(batch);
    Ok(CodecLoss {
        l1,
        mse,
        kl,
        total: l1 + mse + F::of(kl_weight) * kl,
    })
}

/// `mu + exp(logvar/2)·ε`
pub fn reparameterize<F: Scalar>(mu: &[F], logvar: &[F], rng: &mut impl rand::Rng) -> Vec<F> {
    let eps: Vec<F> = normals(rng, mu.len());
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), e)| m + (lv * F::of(0.5)).exp() * e)
        .collect()
}

/// Convolutional KL-autoencoder with residual blocks and group norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvVae<F> {
    pub config: CodecConfig,
    pub channels: usize,
    pub grid: usize,
    pub params: ParamStore<F>,
}

fn norm_groups(width: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| width % g == 0).unwrap_or(1)
}

struct Net<'a, F> {
    tape: &'a mut Tape<F>,
    store: &'a ParamStore<F>,
    vars: &'a [Var],
    batch: usize,
}

impl<F: Scalar> Net<'_, F> {
    fn p(&self, name: &str) -> Var {
        self.vars[self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("missing codec parameter `{name}`"))]
    }

    fn conv(&mut self, x: Var, name: &str, cin: usize, cout: usize, h: usize) -> Var {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        self.tape.conv3x3(
            x,
            w,
            b,
            ConvGeom {
                batch: self.batch,
                cin,
                cout,
                h,
                w: h,
            },
        )
    }

    fn norm_act(&mut self, x: Var, name: &str, ch: usize, h: usize) -> Var {
        let (g, b) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        let n = self.tape.group_norm(x, g, b, norm_groups(ch), h * h);
        self.tape.silu(n)
    }

    fn res(&mut self, x: Var, name: &str, ch: usize, h: usize) -> Var {
        let y = self.norm_act(x, &format!("{name}.n1"), ch, h);
        let y = self.conv(y, &format!("{name}.c1"), ch, ch, h);
        let y = self.norm_act(y, &format!("{name}.n2"), ch, h);
        let y = self.conv(y, &format!("{name}.c2"), ch, ch, h);
        self.tape.add(x, y)
    }
}

impl<F: Scalar> ConvVae<F> {
    pub fn new(config: CodecConfig, channels: usize, grid: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 || grid % config.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "codec input {channels}×{grid}² incompatible with factor {}",
                config.downsample_factor
            )));
        }
        let params = Self::init_params(&config, channels);
        Ok(ConvVae {
            config,
            channels,
            grid,
            params,
        })
    }

    pub fn latent_grid(&self) -> usize {
        self.grid / self.config.downsample_factor
    }

    pub fn latent_len(&self) -> usize {
        self.config.latent_channels * self.latent_grid().pow(2)
    }

    fn init_params(cfg: &CodecConfig, channels: usize) -> ParamStore<F> {
        fn conv<F: Scalar>(
            s: &mut ParamStore<F>,
            rng: &mut crate::rng::Rng,
            name: &str,
            cin: usize,
            cout: usize,
            gain: f64,
        ) {
            let std = F::of(gain / ((cin * 9) as f64).sqrt());
            let w = normals::<F>(rng, cout * cin * 9)
                .into_iter()
                .map(|v| v * std)
                .collect();
            s.insert(format!("{name}.w"), vec![cout, cin * 9], w, true);
            s.insert(
                format!("{name}.b"),
                vec![cout],
                vec![F::zero(); cout],
                false,
            );
        }
        fn norm<F: Scalar>(s: &mut ParamStore<F>, name: &str, ch: usize) {
            s.insert(format!("{name}.g"), vec![ch], vec![F::one(); ch], false);
            s.insert(format!("{name}.b"), vec![ch], vec![F::zero(); ch], false);
        }
        fn res<F: Scalar>(s: &mut ParamStore<F>, rng: &mut crate::rng::Rng, name: &str, ch: usize) {
            norm(s, &format!("{name}.n1"), ch);
            conv(s, rng, &format!("{name}.c1"), ch, ch, 1.0);
            norm(s, &format!("{name}.n2"), ch);
            conv(s, rng, &format!("{name}.c2"), ch, ch, 0.5);
        }
        let rng = &mut seeded(cfg.seed);
        let mut s = ParamStore::new();
        let h = &cfg.hidden;
        let last = *h.last().expect("validated");
        let lc = cfg.latent_channels;
        conv(&mut s, rng, "enc.in", channels, h[0], 1.0);
        for i in 0..cfg.stages() {
            res(&mut s, rng, &format!("enc.s{i}.res"), h[i]);
            conv(&mut s, rng, &format!("enc.s{i}.down"), h[i], h[i + 1], 1.0);
        }
        res(&mut s, rng, "enc.mid", last);
        norm(&mut s, "enc.out", last);
        conv(&mut s, rng, "enc.mu", last, lc, 1.0);
        conv(&mut s, rng, "enc.logvar", last, lc, 0.1);
        conv(&mut s, rng, "dec.in", lc, last, 1.0);
        res(&mut s, rng, "dec.mid", last);
        for i in (0..cfg.stages()).rev() {
            conv(&mut s, rng, &format!("dec.s{i}.up"), h[i + 1], h[i], 1.0);
            res(&mut s, rng, &format!("dec.s{i}.res"), h[i]);
        }
        norm(&mut s, "dec.out", h[0]);
        conv(&mut s, rng, "dec.final", h[0], channels, 1.0);
        s
    }

    fn graph_encode(&self, net: &mut Net<F>, x: Var) -> (Var, Var) {
        let h = &self.config.hidden;
        let mut g = self.grid;
        let mut y = net.conv(x, "enc.in", self.channels, h[0], g);
        for i in 0..self.config.stages() {
            y = net.res(y, &format!("enc.s{i}.res"), h[i], g);
            y = net.tape.avg_pool2(y, net.batch * h[i], g, g);
            g /= 2;
            y = net.conv(y, &format!("enc.s{i}.down"), h[i], h[i + 1], g);
        }
        let last = *h.last().unwrap();
        y = net.res(y, "enc.mid", last, g);
        y = net.norm_act(y, "enc.out", last, g);
        let lc = self.config.latent_channels;
        (
            net.conv(y, "enc.mu", last, lc, g),
            net.conv(y, "enc.logvar", last, lc, g),
        )
    }

    fn graph_decode(&self, net: &mut Net<F>, z: Var) -> Var {
        let h = &self.config.hidden;
        let last = *h.last().unwrap();
        let mut g = self.latent_grid();
        let mut y = net.conv(z, "dec.in", self.config.latent_channels, last, g);
        y = net.res(y, "dec.mid", last, g);
        for i in (0..self.config.stages()).rev() {
            y = net.tape.upsample2(y, net.batch * h[i + 1], g, g);
            g *= 2;
            y = net.conv(y, &format!("dec.s{i}.up"), h[i + 1], h[i], g);
            y = net.res(y, &format!("dec.s{i}.res"), h[i], g);
        }
        y = net.norm_act(y, "dec.out", h[0], g);
        net.conv(y, "dec.final", h[0], self.channels, g)
    }

    fn check_images(&self, images: &[F], batch: usize) -> Result<()> {
        let want = batch * self.channels * self.grid * self.grid;
        if batch == 0 || images.len() != want {
            return Err(Error::Shape(format!(
                "{} image values, expected {want}",
                images.len()
            )));
        }
        Ok(())
    }

    /// Posterior `(mu, logvar)`, each `[batch, latent_channels, lg, lg]`.
    pub fn encode(&self, images: &[F], batch: usize) -> Result<(Vec<F>, Vec<F>)> {
        self.check_images(images, batch)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(
            images.to_vec(),
            vec![batch, self.channels, self.grid, self.grid],
        );
        let mut net = Net {
            tape: &mut tape,
            store: &self.params,
            vars: &vars,
            batch,
        };
        let (mu, lv) = self.graph_encode(&mut net, x);
        Ok((tape.value(mu).to_vec(), tape.value(lv).to_vec()))
    }

    pub fn decode(&self, latents: &[F], batch: usize) -> Result<Vec<F>> {
        if batch == 0 || latents.len() != batch * self.latent_len() {
            return Err(Error::Shape(format!(
                "{} latent values for batch {batch}",
                latents.len()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let lg = self.latent_grid();
        let z = tape.constant(
            latents.to_vec(),
            vec![batch, self.config.latent_channels, lg, lg],
        );
        let mut net = Net {
            tape: &mut tape,
            store: &self.params,
            vars: &vars,
            batch,
        };
        let y = self.graph_decode(&mut net, z);
        Ok(tape.value(y).to_vec())
    }

    /// Loss with reparameterisation noise `eps`; gradients land in the store
    /// when `with_grads`.
    fn run(
        &mut self,
        images: &[F],
        batch: usize,
        eps: &[F],
        with_grads: bool,
    ) -> Result<CodecLoss<F>> {
        self.check_images(images, batch)?;
        if eps.len() != batch * self.latent_len() {
            return Err(Error::Shape(
                "reparameterisation noise has wrong length".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, with_grads);
        let x = tape.constant(
            images.to_vec(),
            vec![batch, self.channels, self.grid, self.grid],
        );
        let lg = self.latent_grid();
        let latent_shape = vec![batch, self.config.latent_channels, lg, lg];
        let mut net = Net {
            tape: &mut tape,
            store: &self.params,
            vars: &vars,
            batch,
        };
        let (mu, lv) = self.graph_encode(&mut net, x);
        let half = net.tape.scale(lv, F::of(0.5));
        let sd = net.tape.exp(half);
        let e = net.tape.constant(eps.to_vec(), latent_shape);
        let noise = net.tape.mul(sd, e);
        let z = net.tape.add(mu, noise);
        let recon = self.graph_decode(&mut net, z);

        let n = F::of_usize(images.len());
        let diff = tape.sub(recon, x);
        let ad = tape.abs(diff);
        let l1_sum = tape.sum(ad);
        let l1 = tape.scale(l1_sum, F::one() / n);
        let sq = tape.sum_sq(diff);
        let mse = tape.scale(sq, F::one() / n);
        // KL per image: ½ Σ (μ² + e^{lv} − 1 − lv)
        let mu_sq = tape.sum_sq(mu);
        let elv = tape.exp(lv);
        let elv_sum = tape.sum(elv);
        let lv_sum = tape.sum(lv);
        let count = tape.constant(vec![F::of_usize(tape.value(mu).len())], vec![1]);
        let a = tape.add(mu_sq, elv_sum);
        let b = tape.add(count, lv_sum);
        let kl_sum = tape.sub(a, b);
        let kl = tape.scale(kl_sum, F::of(0.5) / F::of_usize(batch));
        let rec = tape.add(l1, mse);
        let kw = tape.scale(kl, F::of(self.config.kl_weight));
        let total = tape.add(rec, kw);
        let out = CodecLoss {
            l1: tape.scalar(l1),
            mse: tape.scalar(mse),
            kl: tape.scalar(kl),
            total: tape.scalar(total),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite {
                name: "codec loss".into(),
            });
        }
        if with_grads {
            let grads = tape.backward(total);
            self.params.accumulate(&grads, &vars)?;
        }
        Ok(out)
    }

    /// Loss for a fixed noise draw, no gradients.
    pub fn loss_with_noise(&self, images: &[F], batch: usize, eps: &[F]) -> Result<CodecLoss<F>> {
        self.clone().run(images, batch, eps, false)
    }

    pub fn loss_and_grads(
        &mut self,
        images: &[F],
        batch: usize,
        eps: &[F],
    ) -> Result<CodecLoss<F>> {
        self.run(images, batch, eps, true)
    }

    pub fn codec_loss(
        &self,
        images: &[F],
        batch: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<CodecLoss<F>> {
        let eps: Vec<F> = normals(rng, batch * self.latent_len());
        self.loss_with_noise(images, batch, &eps)
    }

    /// Mean squared reconstruction error of the deterministic path.
    pub fn reconstruction_mse(&self, images: &[Vec<F>]) -> Result<F> {
        let mut total = F::zero();
        let mut n = 0;
        for img in images {
            let (mu, _) = self.encode(img, 1)?;
            let rec = self.decode(&mu, 1)?;
            total += img
                .iter()
                .zip(&rec)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>();
            n += img.len();
        }
        Ok(total / F::of_usize(n.max(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for CodecTrainOptions {
    fn default() -> Self {
        CodecTrainOptions {
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
        }
    }
}

/// Trains in place on `images` (each `[C, g, g]`); returns the loss trace.
pub fn train_codec<F: Scalar>(
    codec: &mut ConvVae<F>,
    images: &[Vec<F>],
    opts: &CodecTrainOptions,
) -> Result<Vec<F>> {
    use rand::Rng as _;
    if images.is_empty() {
        return Err(Error::Empty("codec training set".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("codec batch must be positive".into()));
    }
    let mut rng = stream(opts.seed, "codec-train");
    let cfg = AdamWConfig {
        lr: opts.lr,
        weight_decay: 0.0,
        warmup_steps: opts.warmup_steps,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &codec.params);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch * images[0].len());
        for _ in 0..opts.batch {
            batch.extend_from_slice(&images[rng.random_range(0..images.len())]);
        }
        let eps: Vec<F> = normals(&mut rng, opts.batch * codec.latent_len());
        codec.params.zero_grads();
        let loss = codec
            .loss_and_grads(&batch, opts.batch, &eps)
            .map_err(|e| match e {
                Error::NonFinite { name } => Error::Diverged {
                    step,
                    detail: format!("non-finite {name}"),
                },
                other => other,
            })?;
        opt.update(&mut codec.params);
        trace.push(loss.total);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConvVae<f64> {
        let cfg = CodecConfig {
            downsample_factor: 2,
            latent_channels: 2,
            hidden: vec![4, 4],
            kl_weight: 1e-2,
            seed: 3,
        };
        ConvVae::new(cfg, 2, 4).unwrap()
    }

    #[test]
    fn toy_and_reference_latent_shapes() {
        let c = ConvVae::<f32>::new(CodecConfig::toy(), 4, 24).unwrap();
        let (mu, lv) = c.encode(&vec![0.1; 4 * 24 * 24], 1).unwrap();
        assert_eq!((mu.len(), lv.len()), (8 * 6 * 6, 8 * 6 * 6));
        assert_eq!(c.decode(&mu, 1).unwrap().len(), 4 * 24 * 24);
        let r = ConvVae::<f32>::new(
            CodecConfig {
                hidden: vec![4, 4, 4, 4],
                ..CodecConfig::reference()
            },
            4,
            192,
        )
        .unwrap();
        assert_eq!(r.latent_grid(), 24);
        assert_eq!(r.latent_len(), 24 * 24 * 8);
        assert!(ConvVae::<f32>::new(
            CodecConfig {
                downsample_factor: 3,
                ..CodecConfig::toy()
            },
            4,
            24
        )
        .is_err());
    }

    #[test]
    fn loss_terms_by_hand() {
        let z = codec_loss_terms(&[1.0f64, 2.0], &[1.0, 2.0], &[0.0], &[0.0], 1e-6, 1).unwrap();
        assert_eq!(z.total, 0.0);
        let k = codec_loss_terms(&[0.0f64], &[0.0], &[1.0], &[0.0], 1e-6, 1).unwrap();
        assert_eq!(k.kl, 0.5);
        let m = codec_loss_terms(&[0.0f64, 0.0], &[1.0, -3.0], &[0.0], &[0.0], 1e-6, 1).unwrap();
        assert_eq!((m.l1, m.mse), (2.0, 5.0));
    }

    #[test]
    fn graph_loss_matches_plain_computation() {
        let c = tiny();
        let mut rng = seeded(4);
        let img: Vec<f64> = normals(&mut rng, 2 * 2 * 16);
        let eps: Vec<f64> = normals(&mut rng, 2 * c.latent_len());
        let got = c.loss_with_noise(&img, 2, &eps).unwrap();
        let (mu, lv) = c.encode(&img, 2).unwrap();
        let z: Vec<f64> = mu
            .iter()
            .zip(&lv)
            .zip(&eps)
            .map(|((m, l), e)| m + (l / 2.0).exp() * e)
            .collect();
        let rec = c.decode(&z, 2).unwrap();
        let want = codec_loss_terms(&img, &rec, &mu, &lv, 1e-2, 2).unwrap();
        assert!((got.total - want.total).abs() < 1e-12);
        assert!((got.kl - want.kl).abs() < 1e-12);
        assert!(got.kl >= 0.0);
    }

    #[test]
    fn reparameterization_mean_and_determinism() {
        let mu = vec![0.5f64, -1.0];
        let lv = vec![0.0f64, 1.0];
        assert_eq!(
            reparameterize(&mu, &lv, &mut seeded(1)),
            reparameterize(&mu, &lv, &mut seeded(1))
        );
        let tiny_lv = vec![-80.0f64; 2];
        let z = reparameterize(&mu, &tiny_lv, &mut seeded(2));
        assert!((z[0] - 0.5).abs() < 1e-15 && (z[1] + 1.0).abs() < 1e-15);
        let n = 10_000;
        let mut rng = seeded(3);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&mu, &lv, &mut rng);
            sum[0] += z[0];
            sum[1] += z[1];
        }
        for (i, s) in sum.iter().enumerate() {
            let sd = (lv[i] / 2.0f64).exp();
            assert!((s / n as f64 - mu[i]).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let mut c = tiny();
        let mut rng = seeded(5);
        for p in c.params.iter_mut() {
            let j: Vec<f64> = normals(&mut rng, p.value.len());
            p.value.iter_mut().zip(j).for_each(|(v, j)| *v += 0.1 * j);
        }
        let img: Vec<f64> = normals(&mut rng, 2 * 2 * 16);
        let eps: Vec<f64> = normals(&mut rng, 2 * c.latent_len());
        c.params.zero_grads();
        c.loss_and_grads(&img, 2, &eps).unwrap();
        let names: Vec<String> = c.params.iter().map(|p| p.name.clone()).collect();
        let h = 1e-6;
        let mut checked = 0;
        for k in 0..150 {
            let name = &names[(k * 5) % names.len()];
            let len = c.params.get(name).value.len();
            let i = (k * 31 + 7) % len;
            let mut q = c.clone();
            q.params.get_mut(name).value[i] += h;
            let up = q.loss_with_noise(&img, 2, &eps).unwrap().total;
            q.params.get_mut(name).value[i] -= 2.0 * h;
            let down = q.loss_with_noise(&img, 2, &eps).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let an = c.params.get(name).grad[i];
            // |x| has a kink at 0; skip coordinates whose stencil straddles one
            if (fd - an).abs() > 1e-3 * fd.abs().max(an.abs()).max(1e-6) {
                let mut q2 = c.clone();
                q2.params.get_mut(name).value[i] += h / 10.0;
                let up2 = q2.loss_with_noise(&img, 2, &eps).unwrap().total;
                q2.params.get_mut(name).value[i] -= h / 5.0;
                let down2 = q2.loss_with_noise(&img, 2, &eps).unwrap().total;
                let fd2 = (up2 - down2) / (h / 5.0);
                assert!(
                    (fd2 - an).abs() < 1e-3 * fd2.abs().max(an.abs()).max(1e-6),
                    "{name}[{i}]: {an} vs {fd} / {fd2}"
                );
            }
            checked += 1;
        }
        assert!(checked >= 100);
    }

    #[test]
    fn constant_images_are_learned_quickly() {
        let cfg = CodecConfig {
            downsample_factor: 2,
            latent_channels: 2,
            hidden: vec![8, 8],
            kl_weight: 1e-6,
            seed: 1,
        };
        let mut c = ConvVae::<f32>::new(cfg, 1, 8).unwrap();
        let data = vec![vec![0.7f32; 64]; 4];
        let opts = CodecTrainOptions {
            steps: 150,
            batch: 2,
            lr: 3e-3,
            warmup_steps: 10,
            seed: 2,
        };
        let trace = train_codec(&mut c, &data, &opts).unwrap();
        assert!(
            c.reconstruction_mse(&data).unwrap() < 1e-3,
            "{:?}",
            trace.last()
        );
        let mut again = ConvVae::<f32>::new(c.config.clone(), 1, 8).unwrap();
        assert_eq!(train_codec(&mut again, &data, &opts).unwrap(), trace);
    }

    #[test]
    fn nan_data_aborts_with_step() {
        let mut c = tiny();
        let mut data = vec![vec![0.0f64; 2 * 16]];
        data[0][3] = f64::NAN;
        let err = train_codec(
            &mut c,
            &data,
            &CodecTrainOptions {
                steps: 3,
                batch: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
    }
}
