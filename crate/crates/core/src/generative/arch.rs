//! Network layouts for the visual generative models.
//!
//! Decoder: dense 2→hidden, ReLU, dense hidden→(r/8)²·c₀, ReLU, reshape to
//! `[c₀, r/8, r/8]`, three stride-2 transposed convolutions (kernel 4,
//! padding 1) with channels c₀→c₀/2→c₀/4→1, ReLU between them, final sigmoid.
//! The VAE encoder mirrors it with stride-2 convolutions 1→c₀/4→c₀/2→c₀,
//! a dense hidden layer and two dense heads for mean and log-variance.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 2;
const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub resolution: usize,
    pub hidden: usize,
    pub base_channels: usize,
}

impl Architecture {
    pub fn new(resolution: usize, hidden: usize, base_channels: usize) -> Result<Self> {
        if resolution < 8 || resolution % 8 != 0 {
            return Err(Error::Config(format!("resolution must be a multiple of 8, got {resolution}")));
        }
        if hidden == 0 || base_channels < 4 || base_channels % 4 != 0 {
            return Err(Error::Config("hidden width must be positive and base channels a multiple of 4".into()));
        }
        Ok(Architecture {
            resolution,
            hidden,
            base_channels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    fn seed_side(&self) -> usize {
        self.resolution / 8
    }

    fn channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, c / 2, c / 4, 1]
    }

    /// Decoder parameter names and shapes in declaration order.
    pub fn decoder_params(&self) -> Vec<(String, Vec<usize>)> {
        let s = self.seed_side();
        let ch = self.channels();
        let mut v = vec![
            ("dec.fc1.w".to_string(), vec![LATENT_DIM, self.hidden]),
            ("dec.fc1.b".to_string(), vec![self.hidden]),
            ("dec.fc2.w".to_string(), vec![self.hidden, ch[0] * s * s]),
            ("dec.fc2.b".to_string(), vec![ch[0] * s * s]),
        ];
        for i in 0..3 {
            v.push((format!("dec.up{}.w", i + 1), vec![ch[i], ch[i + 1], KERNEL, KERNEL]));
            v.push((format!("dec.up{}.b", i + 1), vec![ch[i + 1]]));
        }
        v
    }

    pub fn encoder_params(&self) -> Vec<(String, Vec<usize>)> {
        let s = self.seed_side();
        let ch = self.channels();
        let enc = [1, ch[2], ch[1], ch[0]];
        let mut v = Vec::new();
        for i in 0..3 {
            v.push((format!("enc.down{}.w", i + 1), vec![enc[i + 1], enc[i], KERNEL, KERNEL]));
            v.push((format!("enc.down{}.b", i + 1), vec![enc[i + 1]]));
        }
        v.push(("enc.fc.w".to_string(), vec![ch[0] * s * s, self.hidden]));
        v.push(("enc.fc.b".to_string(), vec![self.hidden]));
        v.push(("enc.mean.w".to_string(), vec![self.hidden, LATENT_DIM]));
        v.push(("enc.mean.b".to_string(), vec![LATENT_DIM]));
        v.push(("enc.logvar.w".to_string(), vec![self.hidden, LATENT_DIM]));
        v.push(("enc.logvar.b".to_string(), vec![LATENT_DIM]));
        v
    }

    /// Appends the decoder to `g`, reading latent `z [B, 2]`; returns the
    /// image node `[B, 1, r, r]`.
    pub fn add_decoder(&self, g: &mut Graph, z: NodeId, batch: usize) -> Result<NodeId> {
        let s = self.seed_side();
        let ch = self.channels();
        let ids = declare(g, &self.decoder_params())?;
        let mut p = ids.into_iter();
        let mut next = || -> Result<NodeId> { Ok(p.next().expect("decoder parameter list is complete")) };
        let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
        let h = g.dense(z, w1, b1)?;
        let h = g.relu(h)?;
        let h = g.dense(h, w2, b2)?;
        let h = g.relu(h)?;
        let mut x = g.reshape(h, &[batch, ch[0], s, s])?;
        for i in 0..3 {
            let (w, b) = (next()?, next()?);
            x = g.conv_transpose2d(x, w, b, STRIDE, PAD)?;
            x = if i < 2 { g.relu(x)? } else { g.sigmoid(x)? };
        }
        Ok(x)
    }

    /// Appends the encoder reading `image [B, 1, r, r]`; returns
    /// `(mean, logvar)`, both `[B, 2]`.
    pub fn add_encoder(&self, g: &mut Graph, image: NodeId, batch: usize) -> Result<(NodeId, NodeId)> {
        let s = self.seed_side();
        let ch = self.channels();
        let ids = declare(g, &self.encoder_params())?;
        let mut p = ids.into_iter();
        let mut next = || -> Result<NodeId> { Ok(p.next().expect("encoder parameter list is complete")) };
        let mut x = image;
        for _ in 0..3 {
            let (w, b) = (next()?, next()?);
            x = g.conv2d(x, w, b, STRIDE, PAD)?;
            x = g.relu(x)?;
        }
        let flat = g.reshape(x, &[batch, ch[0] * s * s])?;
        let (wf, bf) = (next()?, next()?);
        let h = g.dense(flat, wf, bf)?;
        let h = g.relu(h)?;
        let (wm, bm, wl, bl) = (next()?, next()?, next()?, next()?);
        let mean = g.dense(h, wm, bm)?;
        let logvar = g.dense(h, wl, bl)?;
        Ok((mean, logvar))
    }

    /// Inference graph: input `mu [B, 2]` (normalized), output `image`.
    pub fn decoder_graph(&self, batch: usize) -> Result<Graph> {
        let mut g = Graph::new();
        let z = g.input("mu", &[batch, LATENT_DIM])?;
        let img = self.add_decoder(&mut g, z, batch)?;
        g.set_output("image", img)?;
        Ok(g)
    }

    /// Encoder-only graph: input `image`, outputs `mean` and `logvar`.
    pub fn encoder_graph(&self, batch: usize) -> Result<Graph> {
        let r = self.resolution;
        let mut g = Graph::new();
        let x = g.input("image", &[batch, 1, r, r])?;
        let (m, lv) = self.add_encoder(&mut g, x, batch)?;
        g.set_output("mean", m)?;
        g.set_output("logvar", lv)?;
        Ok(g)
    }
}

fn declare(g: &mut Graph, shapes: &[(String, Vec<usize>)]) -> Result<Vec<NodeId>> {
    shapes.iter().map(|(name, shape)| g.param(name, Tensor::zeros(shape))).collect()
}

/// Uniform fan-in initialisation, `U(−√(k/fan_in), √(k/fan_in))`, with `k = 6`
/// ahead of ReLUs and `k = 3` otherwise; biases start at zero.
pub fn init_params(shapes: &[(String, Vec<usize>)], rng: &mut impl Rng) -> Vec<(String, Tensor)> {
    shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with(".b") {
                return (name.clone(), Tensor::zeros(shape));
            }
            let fan_in = match shape.len() {
                2 => shape[0],
                // conv [out, in, k, k]; transposed conv [in, out, k, k] where
                // each output sees in·k²/stride² inputs
                4 if name.contains(".up") => shape[0] * shape[2] * shape[3] / (STRIDE * STRIDE),
                4 => shape[1] * shape[2] * shape[3],
                _ => n,
            };
            let gain = if name.contains("up3") || name.contains("mean") || name.contains("logvar") {
                3.0
            } else {
                6.0
            };
            let bound = (gain / fan_in.max(1) as f64).sqrt();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            (name.clone(), Tensor::new(shape.clone(), data).expect("finite init"))
        })
        .collect()
}
