//! Trained visual generative models and their inference-time sessions.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::arch::{Architecture, LATENT_DIM};
use super::dataset::{hex, Dataset, Normalizer};
use crate::autodiff::{Graph, ParamGrads, ParamStore, Tensor};
use crate::config::{fmt_f64, KvConfig};
use crate::env::{Image, JointAngles};
use crate::error::{Error, Result};

const MODEL_HEADER: &str = "RHIMODEL 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Decoder,
    Vae,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(ModelKind::Decoder),
            "vae" => Ok(ModelKind::Vae),
            other => Err(Error::Config(format!("unknown model kind `{other}` (expected decoder or vae)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Decoder => "decoder",
            ModelKind::Vae => "vae",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    /// Per-pixel MSE of the decoder driven by the true normalized angles,
    /// over the whole training set.
    pub final_loss: f64,
    /// Mean training objective over the last epoch.
    pub final_objective: f64,
    pub seed: u64,
    pub dataset_hash: String,
    pub optimizer: String,
    pub beta: f64,
    pub latent_align: f64,
}

/// A trained decoder (or VAE) together with its normalization constants.
/// Immutable; evaluation goes through [`DecoderSession`], which owns a
/// private graph, so a model can be shared across threads.
#[derive(Clone, Debug)]
pub struct VisualModel {
    kind: ModelKind,
    arch: Architecture,
    normalizer: Normalizer,
    params: ParamStore,
    pub meta: TrainingMeta,
}

/// Decoder output for one belief.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrediction {
    pub image: Image,
    /// True when the belief fell outside the normalization range and was
    /// clamped before decoding.
    pub clamped: bool,
}

/// Per-joint sensitivity images `∂g/∂μ_i`, in intensity per radian.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianImages {
    pub resolution: usize,
    pub columns: [Vec<f64>; 2],
}

impl JacobianImages {
    pub fn max_abs(&self) -> f64 {
        self.columns.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Column `i` mapped to `[0,1]` with mid-gray at zero, for viewing.
    pub fn to_image(&self, i: usize) -> Result<Image> {
        let m = self.max_abs().max(f64::MIN_POSITIVE);
        let px = self.columns[i].iter().map(|v| 0.5 + 0.5 * v / m).collect();
        Image::new(self.resolution, self.resolution, px)
    }
}

impl VisualModel {
    pub fn from_parts(kind: ModelKind, arch: Architecture, normalizer: Normalizer, params: ParamStore) -> Result<Self> {
        let mut names: Vec<(String, Vec<usize>)> = arch.decoder_params();
        if kind == ModelKind::Vae {
            names.extend(arch.encoder_params());
        }
        for (name, shape) in &names {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::shape(format!("model parameter `{name}`"), shape, t.shape())),
                None => {
                    return Err(Error::Unknown {
                        kind: "parameter",
                        name: name.clone(),
                    })
                }
            }
        }
        if normalizer.half_range.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Config("normalization half-range must be positive".into()));
        }
        Ok(VisualModel {
            kind,
            arch,
            normalizer,
            params,
            meta: TrainingMeta::default(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    /// SHA-256 over the serialized weights.
    pub fn weight_hash(&self) -> String {
        hex(&Sha256::digest(self.params.to_bytes()))
    }

    /// A private batch-1 decoder graph with this model's weights.
    pub fn session(&self) -> Result<DecoderSession> {
        let mut graph = self.arch.decoder_graph(1)?;
        graph.load_params(&self.params)?;
        Ok(DecoderSession {
            graph,
            normalizer: self.normalizer,
            resolution: self.arch.resolution,
            clamped: None,
        })
    }

    pub fn predict_visual(&self, mu: JointAngles) -> Result<VisualPrediction> {
        self.session()?.predict(mu)
    }

    /// `∂g/∂μᵀ · weighted_error` at `mu`, in the units of `μ` (radians).
    pub fn visual_adjoint(&self, mu: JointAngles, weighted_error: &[f64]) -> Result<[f64; 2]> {
        let mut s = self.session()?;
        s.predict(mu)?;
        s.adjoint(weighted_error)
    }

    pub fn jacobian_image(&self, mu: JointAngles) -> Result<JacobianImages> {
        let mut s = self.session()?;
        s.predict(mu)?;
        s.jacobian()
    }

    /// Encoder means and log-variances for a batch of images (VAE only).
    pub fn encode(&self, images: &[&[f64]]) -> Result<Vec<([f64; 2], [f64; 2])>> {
        if self.kind != ModelKind::Vae {
            return Err(Error::Invalid("only a VAE has an encoder".into()));
        }
        let r = self.arch.resolution;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = self.arch.encoder_graph(chunk.len())?;
            g.load_params(&self.params)?;
            let mut data = Vec::with_capacity(chunk.len() * r * r);
            for img in chunk {
                if img.len() != r * r {
                    return Err(Error::shape("encoder input", &[r * r], &[img.len()]));
                }
                data.extend_from_slice(img);
            }
            let x = Tensor::new(vec![chunk.len(), 1, r, r], data)?;
            let res = g.forward_eval(&[("image", &x)])?;
            for (m, lv) in res["mean"].data().chunks(LATENT_DIM).zip(res["logvar"].data().chunks(LATENT_DIM)) {
                out.push(([m[0], m[1]], [lv[0], lv[1]]));
            }
        }
        Ok(out)
    }

    /// Per-pixel MSE of the decoder at each sample's stored normalized angles.
    pub fn reconstruction_mse(&self, ds: &Dataset) -> Result<f64> {
        if ds.resolution != self.arch.resolution {
            return Err(Error::Config("dataset and model resolutions differ".into()));
        }
        if ds.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let npix = self.arch.pixels();
        let mut total = 0.0;
        for chunk in ds.samples.chunks(64) {
            let mut g = self.arch.decoder_graph(chunk.len())?;
            g.load_params(&self.params)?;
            let mu = Tensor::new(vec![chunk.len(), LATENT_DIM], chunk.iter().flat_map(|s| s.z).collect())?;
            let res = g.forward_eval(&[("mu", &mu)])?;
            for (pred, s) in res["image"].data().chunks(npix).zip(chunk) {
                total += pred.iter().zip(&s.image).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            }
        }
        Ok(total / (ds.len() * npix) as f64)
    }

    // ----- persistence ---------------------------------------------------

    fn header(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("kind", self.kind);
        kv.set("resolution", self.arch.resolution);
        kv.set("hidden_units", self.arch.hidden);
        kv.set("base_channels", self.arch.base_channels);
        kv.set("norm_center_shoulder", fmt_f64(self.normalizer.center[0]));
        kv.set("norm_center_elbow", fmt_f64(self.normalizer.center[1]));
        kv.set("norm_half_range_shoulder", fmt_f64(self.normalizer.half_range[0]));
        kv.set("norm_half_range_elbow", fmt_f64(self.normalizer.half_range[1]));
        let m = &self.meta;
        kv.set("epochs", m.epochs);
        kv.set("final_loss", fmt_f64(m.final_loss));
        kv.set("final_objective", fmt_f64(m.final_objective));
        kv.set("seed", m.seed);
        kv.set("dataset_hash", if m.dataset_hash.is_empty() { "none" } else { &m.dataset_hash });
        kv.set("optimizer", if m.optimizer.is_empty() { "none" } else { &m.optimizer });
        kv.set("beta", fmt_f64(m.beta));
        kv.set("latent_align", fmt_f64(m.latent_align));
        kv
    }

    /// Text header (`RHIMODEL 1`, `key = value` lines, blank line) followed
    /// by the binary weight container.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MODEL_HEADER}")?;
        w.write_all(self.header().to_text().as_bytes())?;
        writeln!(w)?;
        self.params.write_to(&mut w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MODEL_HEADER {
            return Err(Error::format("model file", "missing RHIMODEL header"));
        }
        let mut text = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format("model file", "header not terminated by a blank line"));
            }
            if line.trim().is_empty() {
                break;
            }
            text.push_str(&line);
        }
        let kv = KvConfig::parse(&text)?;
        let need = |k: &str| kv.get_str(k).ok_or_else(|| Error::format("model file", format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> {
            need(k)?.parse().map_err(|_| Error::format("model file", format!("bad value for `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            need(k)?.parse().map_err(|_| Error::format("model file", format!("bad value for `{k}`")))
        };
        let kind: ModelKind = need("kind")?.parse()?;
        let arch = Architecture::new(int("resolution")?, int("hidden_units")?, int("base_channels")?)?;
        let normalizer = Normalizer {
            center: [num("norm_center_shoulder")?, num("norm_center_elbow")?],
            half_range: [num("norm_half_range_shoulder")?, num("norm_half_range_elbow")?],
        };
        let params = ParamStore::read_from(r)?;
        let mut model = VisualModel::from_parts(kind, arch, normalizer, params)?;
        let opt_str = |k: &str| need(k).map(|v| if v == "none" { String::new() } else { v.to_string() });
        model.meta = TrainingMeta {
            epochs: int("epochs")?,
            final_loss: num("final_loss")?,
            final_objective: num("final_objective")?,
            seed: need("seed")?.parse().map_err(|_| Error::format("model file", "bad seed"))?,
            dataset_hash: opt_str("dataset_hash")?,
            optimizer: opt_str("optimizer")?,
            beta: num("beta")?,
            latent_align: num("latent_align")?,
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Batch-1 decoder evaluation at one belief at a time. [`predict`] caches
/// the forward pass that [`adjoint`] and [`jacobian`] then differentiate.
///
/// [`predict`]: DecoderSession::predict
/// [`adjoint`]: DecoderSession::adjoint
/// [`jacobian`]: DecoderSession::jacobian
#[derive(Clone, Debug)]
pub struct DecoderSession {
    graph: Graph,
    normalizer: Normalizer,
    resolution: usize,
    /// Per-joint clamp flags of the last prediction.
    clamped: Option<[bool; 2]>,
}

impl DecoderSession {
    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn predict(&mut self, mu: JointAngles) -> Result<VisualPrediction> {
        if !mu.is_finite() {
            return Err(Error::Invalid(format!("non-finite belief {mu:?}")));
        }
        let raw = self.normalizer.normalize(mu);
        let clamped = raw.map(|v| !(-1.0..=1.0).contains(&v));
        let z = raw.map(|v| v.clamp(-1.0, 1.0));
        let input = Tensor::new(vec![1, LATENT_DIM], z.to_vec())?;
        self.clamped = None;
        self.graph.forward(&[("mu", &input)])?;
        self.clamped = Some(clamped);
        let px = self.graph.output("image")?.data().to_vec();
        Ok(VisualPrediction {
            image: Image::new(self.resolution, self.resolution, px)?,
            clamped: clamped.iter().any(|&c| c),
        })
    }

    /// Vector-Jacobian product at the last predicted belief. Joints that
    /// were clamped get a zero component, since the prediction does not
    /// depend on them there.
    pub fn adjoint(&mut self, weighted_error: &[f64]) -> Result<[f64; 2]> {
        let clamped = self.clamped.ok_or(Error::BackwardBeforeForward)?;
        let r = self.resolution;
        if weighted_error.len() != r * r {
            return Err(Error::shape("weighted visual error", &[r * r], &[weighted_error.len()]));
        }
        let seed = Tensor::new(vec![1, 1, r, r], weighted_error.to_vec())?;
        let grads = self.graph.backward_grad_with("image", &seed, ParamGrads::Skip)?;
        let gz = grads.input("mu")?.data();
        let chain = self.normalizer.chain_factor();
        Ok([0, 1].map(|i| if clamped[i] { 0.0 } else { gz[i] * chain[i] }))
    }

    /// Both Jacobian columns at the last predicted belief, by forward-mode
    /// differentiation.
    pub fn jacobian(&mut self) -> Result<JacobianImages> {
        let clamped = self.clamped.ok_or(Error::BackwardBeforeForward)?;
        let chain = self.normalizer.chain_factor();
        let mut cols: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for i in 0..LATENT_DIM {
            if clamped[i] {
                cols[i] = vec![0.0; self.pixels()];
                continue;
            }
            let mut t = [0.0; LATENT_DIM];
            t[i] = chain[i];
            let dots = self.graph.forward_tangent("mu", &Tensor::new(vec![1, LATENT_DIM], t.to_vec())?)?;
            cols[i] = dots["image"].data().to_vec();
        }
        Ok(JacobianImages {
            resolution: self.resolution,
            columns: cols,
        })
    }
}
