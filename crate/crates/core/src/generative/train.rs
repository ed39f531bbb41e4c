//! Mini-batch training of the decoder and the VAE.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{init_params, Architecture, LATENT_DIM};
use super::dataset::{Dataset, Normalizer};
use super::model::{ModelKind, TrainingMeta, VisualModel};
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::config::{fmt_f64, KvConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Heavy-ball momentum, `v ← m·v + g`, `θ ← θ − lr·v`.
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Fraction of the epochs after which the learning rate is multiplied
    /// by `lr_drop`.
    pub lr_drop_at: f64,
    pub lr_drop: f64,
    /// KL weight of the VAE objective.
    pub beta: f64,
    /// Weight of the squared distance between encoder means and the
    /// normalized joint angles (VAE only); ties the latent axes to the body
    /// state so the decoder can be driven by beliefs.
    pub latent_align: f64,
    pub seed: u64,
    pub hidden: usize,
    pub base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
            lr_drop_at: 0.75,
            lr_drop: 0.1,
            beta: 1.0,
            latent_align: 100.0,
            seed: 7,
            hidden: 256,
            base_channels: 32,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "train_epochs",
        "train_batch",
        "train_lr",
        "train_momentum",
        "optimizer",
        "train_lr_drop_at",
        "train_lr_drop",
        "vae_beta",
        "vae_latent_align",
        "train_seed",
        "hidden_units",
        "base_channels",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.read_into("train_epochs", &mut c.epochs)?;
        kv.read_into("train_batch", &mut c.batch_size)?;
        kv.read_into("train_lr", &mut c.lr)?;
        kv.read_into("train_momentum", &mut c.momentum)?;
        kv.read_into("optimizer", &mut c.optimizer)?;
        kv.read_into("train_lr_drop_at", &mut c.lr_drop_at)?;
        kv.read_into("train_lr_drop", &mut c.lr_drop)?;
        kv.read_into("vae_beta", &mut c.beta)?;
        kv.read_into("vae_latent_align", &mut c.latent_align)?;
        kv.read_into("train_seed", &mut c.seed)?;
        kv.read_into("hidden_units", &mut c.hidden)?;
        kv.read_into("base_channels", &mut c.base_channels)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("train_epochs", self.epochs);
        kv.set("train_batch", self.batch_size);
        kv.set("train_lr", fmt_f64(self.lr));
        kv.set("train_momentum", fmt_f64(self.momentum));
        kv.set("optimizer", self.optimizer);
        kv.set("train_lr_drop_at", fmt_f64(self.lr_drop_at));
        kv.set("train_lr_drop", fmt_f64(self.lr_drop));
        kv.set("vae_beta", fmt_f64(self.beta));
        kv.set("vae_latent_align", fmt_f64(self.latent_align));
        kv.set("train_seed", self.seed);
        kv.set("hidden_units", self.hidden);
        kv.set("base_channels", self.base_channels);
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be positive and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return Err(Error::Config("lr drop point must lie in [0, 1] and drop factor in (0, 1]".into()));
        }
        if !(self.beta >= 0.0 && self.latent_align >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-epoch progress, passed to the observer of [`train`].
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub objective: f64,
    /// Mean per-pixel reconstruction error over the epoch's batches.
    pub recon_mse: f64,
}

fn training_graph(kind: ModelKind, arch: &Architecture, batch: usize, cfg: &TrainConfig) -> Result<Graph> {
    let r = arch.resolution;
    let npix = arch.pixels() as f64;
    let mut g = Graph::new();
    let mu = g.input("mu", &[batch, LATENT_DIM])?;
    let target = g.input("target", &[batch, 1, r, r])?;
    let (recon, extras) = match kind {
        ModelKind::Decoder => {
            let img = arch.add_decoder(&mut g, mu, batch)?;
            (g.mse(img, target)?, vec![])
        }
        ModelKind::Vae => {
            let (mean, logvar) = arch.add_encoder(&mut g, target, batch)?;
            let z = g.reparameterize(mean, logvar)?;
            let img = arch.add_decoder(&mut g, z, batch)?;
            let recon = g.mse(img, target)?;
            let kl = g.gaussian_kl(mean, logvar)?;
            let align = g.mse(mean, mu)?;
            g.set_output("kl", kl)?;
            g.set_output("align", align)?;
            (recon, vec![(kl, cfg.beta), (align, cfg.latent_align * LATENT_DIM as f64)])
        }
    };
    g.set_output("recon", recon)?;
    // summed over pixels, averaged over the batch
    let mut loss = g.scale(recon, npix)?;
    for (node, weight) in extras {
        let term = g.scale(node, weight)?;
        loss = g.add(loss, term)?;
    }
    g.set_output("loss", loss)?;
    Ok(g)
}

struct OptState {
    kind: Optimizer,
    lr: f64,
    beta1: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptState {
    fn new(g: &Graph, cfg: &TrainConfig) -> Result<Self> {
        let sizes = g
            .param_names()
            .map(|n| g.param_value(n).map(|t| t.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(OptState {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.momentum,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    fn step(&mut self, g: &mut Graph) {
        self.t += 1;
        let (lr, b1, t) = (self.lr, self.beta1, self.t);
        let (m, v, kind) = (&mut self.m, &mut self.v, self.kind);
        g.update_params(|i, theta, grad| match kind {
            Optimizer::Sgd => {
                for ((p, vel), d) in theta.iter_mut().zip(m[i].iter_mut()).zip(grad) {
                    *vel = b1 * *vel + d;
                    *p -= lr * *vel;
                }
            }
            Optimizer::Adam => {
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - B2.powi(t);
                for (((p, m1), m2), d) in theta.iter_mut().zip(m[i].iter_mut()).zip(v[i].iter_mut()).zip(grad) {
                    *m1 = b1 * *m1 + (1.0 - b1) * d;
                    *m2 = B2 * *m2 + (1.0 - B2) * d * d;
                    *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + EPS);
                }
            }
        });
    }
}

/// Trains a model of `kind` on `ds`. `observer` sees every epoch's report.
pub fn train(
    kind: ModelKind,
    ds: &Dataset,
    env: &EnvConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochReport),
) -> Result<VisualModel> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if ds.resolution != env.resolution() {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from configured resolution {}",
            ds.resolution,
            env.resolution()
        )));
    }
    let arch = Architecture::new(ds.resolution, cfg.hidden, cfg.base_channels)?;
    let batch = cfg.batch_size.min(ds.len());
    let mut g = training_graph(kind, &arch, batch, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shapes = arch.decoder_params();
    if kind == ModelKind::Vae {
        shapes.extend(arch.encoder_params());
    }
    for (name, value) in init_params(&shapes, &mut rng) {
        g.set_param(&name, value)?;
    }
    g.seed_noise(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut opt = OptState::new(&g, cfg)?;

    let npix = arch.pixels();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut mu_buf = vec![0.0; batch * LATENT_DIM];
    let mut img_buf = vec![0.0; batch * npix];
    let one = Tensor::scalar(1.0)?;
    let mut last = None;
    let drop_epoch = (cfg.lr_drop_at * cfg.epochs as f64).round() as usize;
    for epoch in 0..cfg.epochs {
        opt.lr = if epoch >= drop_epoch { cfg.lr * cfg.lr_drop } else { cfg.lr };
        order.shuffle(&mut rng);
        let (mut obj_sum, mut rec_sum, mut steps) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks_exact(batch).enumerate() {
            for (k, &i) in chunk.iter().enumerate() {
                let s = &ds.samples[i];
                mu_buf[k * LATENT_DIM..(k + 1) * LATENT_DIM].copy_from_slice(&s.z);
                img_buf[k * npix..(k + 1) * npix].copy_from_slice(&s.image);
            }
            let mu = Tensor::new(vec![batch, LATENT_DIM], mu_buf.clone())?;
            let target = Tensor::new(vec![batch, 1, arch.resolution, arch.resolution], img_buf.clone())?;
            let diverged = |loss: f64| Error::Divergence { epoch, step, loss };
            g.zero_grads();
            match g.forward(&[("mu", &mu), ("target", &target)]) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            }
            let loss = g.output("loss")?.data()[0];
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            match g.backward_grad("loss", &one) {
                Ok(_) => {}
                Err(Error::NonFinite(_)) => return Err(diverged(loss)),
                Err(e) => return Err(e),
            }
            rec_sum += g.output("recon")?.data()[0];
            opt.step(&mut g);
            obj_sum += loss;
            steps += 1;
        }
        let report = EpochReport {
            epoch,
            objective: obj_sum / steps as f64,
            recon_mse: rec_sum / steps as f64,
        };
        log::debug!("{kind} epoch {epoch}: objective {:.6e}, recon mse {:.6e}", report.objective, report.recon_mse);
        observer(&report);
        last = Some(report);
    }

    let store: ParamStore = g.export_params();
    let mut model = VisualModel::from_parts(kind, arch, Normalizer::from_limits(&env.limits), store)?;
    let final_loss = model.reconstruction_mse(ds)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            step: 0,
            loss: final_loss,
        });
    }
    model.meta = TrainingMeta {
        epochs: cfg.epochs,
        final_loss,
        final_objective: last.map_or(f64::NAN, |r| r.objective),
        seed: cfg.seed,
        dataset_hash: ds.content_hash(),
        optimizer: cfg.optimizer.to_string(),
        beta: if kind == ModelKind::Vae { cfg.beta } else { 0.0 },
        latent_align: if kind == ModelKind::Vae { cfg.latent_align } else { 0.0 },
    };
    Ok(model)
}
