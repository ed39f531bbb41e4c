use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Param(usize),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    Mse(NodeId, NodeId),
    GaussianKl { mean: NodeId, logvar: NodeId },
    Reparameterize { mean: NodeId, logvar: NodeId },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct ParamSlot {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Whether a backward pass accumulates parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGrads {
    Accumulate,
    Skip,
}

/// Gradients of a backward pass with respect to every graph input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn input(&self, name: &str) -> Result<&Tensor> {
        self.inputs.get(name).ok_or_else(|| Error::Unknown {
            kind: "input",
            name: name.into(),
        })
    }
}

/// Static-shape computation graph with reverse-mode differentiation.
///
/// Nodes are appended by the builder methods, so every node's operands
/// precede it and the node list is already in topological order. A forward
/// pass caches every intermediate value; a backward pass consumes that cache.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
    params: Vec<ParamSlot>,
    /// Forward cache; `None` for parameter nodes, which read their slot.
    values: Vec<Option<Tensor>>,
    noise: BTreeMap<NodeId, Vec<f64>>,
    noise_rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            params: Vec::new(),
            values: Vec::new(),
            noise: BTreeMap::new(),
            noise_rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    // ----- construction -------------------------------------------------

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.values.clear();
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::Invalid(format!("node {id} does not exist")))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Invalid(format!("input `{name}` has empty shape {shape:?}")));
        }
        if self.inputs.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(self.inputs.len()), shape.to_vec());
        self.inputs.push((name.to_string(), id));
        Ok(id)
    }

    /// Declares a trainable parameter initialised to `init`.
    pub fn param(&mut self, name: &str, init: Tensor) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let shape = init.shape().to_vec();
        let slot = self.params.len();
        self.params.push(ParamSlot {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            value: init,
        });
        Ok(self.push(Op::Param(slot), shape))
    }

    /// `x [B, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x)?.to_vec();
        let ws = self.shape_of(w)?.to_vec();
        let bs = self.shape_of(b)?.to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] {
            return Err(Error::shape("dense weight", &[xs.get(1).copied().unwrap_or(0), 0], &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("dense bias", &[ws[1]], &bs));
        }
        Ok(self.push(Op::Dense { x, w, b }, vec![xs[0], ws[1]]))
    }

    /// Strided 2-D convolution, `x [B, Cin, H, W]`, `w [Cout, Cin, k, k]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape_of(x)?.to_vec();
        let ws = self.shape_of(w)?.to_vec();
        let bs = self.shape_of(b)?.to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d weight", &[0, xs.get(1).copied().unwrap_or(0), 0, 0], &ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d bias", &[ws[0]], &bs));
        }
        let geom = ConvGeom { kernel: ws[2], stride, pad };
        let (oh, ow) = match (geom.conv_out(xs[2]), geom.conv_out(xs[3])) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::Invalid(format!("conv2d kernel does not fit input {xs:?}"))),
        };
        Ok(self.push(Op::Conv2d { x, w, b, geom }, vec![xs[0], ws[0], oh, ow]))
    }

    /// Transposed 2-D convolution, `x [B, Cin, H, W]`, `w [Cin, Cout, k, k]`, `b [Cout]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape_of(x)?.to_vec();
        let ws = self.shape_of(w)?.to_vec();
        let bs = self.shape_of(b)?.to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d weight", &[xs.get(1).copied().unwrap_or(0), 0, 0, 0], &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("conv_transpose2d bias", &[ws[1]], &bs));
        }
        let geom = ConvGeom { kernel: ws[2], stride, pad };
        let (oh, ow) = match (geom.transpose_out(xs[2]), geom.transpose_out(xs[3])) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::Invalid(format!("conv_transpose2d padding too large for {xs:?}"))),
        };
        // The forward pass is the adjoint of a convolution over the output;
        // that convolution must map back onto exactly the input extent.
        if geom.conv_out(oh) != Some(xs[2]) || geom.conv_out(ow) != Some(xs[3]) {
            return Err(Error::Invalid("conv_transpose2d geometry is not invertible".into()));
        }
        Ok(self.push(Op::ConvTranspose2d { x, w, b, geom }, vec![xs[0], ws[1], oh, ow]))
    }

    fn unary(&mut self, x: NodeId, make: fn(NodeId) -> Op) -> Result<NodeId> {
        let s = self.shape_of(x)?.to_vec();
        Ok(self.push(make(x), s))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(x)?;
        if s.iter().product::<usize>() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", s, shape));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let s = self.shape_of(x)?.to_vec();
        Ok(self.push(Op::Scale(x, factor), s))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<Vec<usize>> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa != sb {
            return Err(Error::shape(ctx, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    /// Mean of squared differences over all elements; shape `[1]`.
    pub fn mse(&mut self, prediction: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(prediction, target, "mse")?;
        Ok(self.push(Op::Mse(prediction, target), vec![1]))
    }

    /// `KL(N(mean, exp(logvar)) || N(0, I))` summed over latent dimensions and
    /// averaged over the leading batch axis; shape `[1]`.
    pub fn gaussian_kl(&mut self, mean: NodeId, logvar: NodeId) -> Result<NodeId> {
        let s = self.same_shape(mean, logvar, "gaussian_kl")?;
        if s.len() != 2 {
            return Err(Error::Invalid("gaussian_kl expects [batch, dim] operands".into()));
        }
        Ok(self.push(Op::GaussianKl { mean, logvar }, vec![1]))
    }

    /// `mean + exp(logvar / 2) · eps` with `eps ~ N(0, I)` drawn from the
    /// graph's seeded noise stream at every forward pass.
    pub fn reparameterize(&mut self, mean: NodeId, logvar: NodeId) -> Result<NodeId> {
        let s = self.same_shape(mean, logvar, "reparameterize")?;
        Ok(self.push(Op::Reparameterize { mean, logvar }, s))
    }

    pub fn set_output(&mut self, name: &str, node: NodeId) -> Result<()> {
        self.shape_of(node)?;
        match self.outputs.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = node,
            None => self.outputs.push((name.to_string(), node)),
        }
        Ok(())
    }

    // ----- parameters ---------------------------------------------------

    /// Re-seeds the stream consumed by reparameterization nodes.
    pub fn seed_noise(&mut self, seed: u64) {
        self.noise_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    fn slot(&self, name: &str) -> Result<&ParamSlot> {
        self.params.iter().find(|p| p.name == name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.into(),
        })
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.value)
    }

    pub fn param_grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.grad)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.iter_mut().find(|p| p.name == name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.into(),
        })?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(format!("parameter `{name}`"), slot.value.shape(), value.shape()));
        }
        slot.value = value;
        self.values.clear();
        Ok(())
    }

    /// Copies every parameter of the graph from `store`; extra entries in the
    /// store are ignored, missing ones are an error.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let t = store.get(&name).ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: name.clone(),
            })?;
            self.set_param(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn export_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.insert(&p.name, p.value.clone());
        }
        store
    }

    /// Applies `f(name, value, grad)` to every parameter in declaration order.
    pub(crate) fn update_params(&mut self, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for (i, p) in self.params.iter_mut().enumerate() {
            f(i, p.value.data_mut(), p.grad.data());
        }
        self.values.clear();
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn input_shape(&self, name: &str) -> Result<&[usize]> {
        let (_, id) = self.inputs.iter().find(|(n, _)| n == name).ok_or_else(|| Error::Unknown {
            kind: "input",
            name: name.into(),
        })?;
        Ok(&self.nodes[*id].shape)
    }

    pub fn output_shape(&self, name: &str) -> Result<&[usize]> {
        let id = self.output_id(name)?;
        Ok(&self.nodes[id].shape)
    }

    fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Unknown {
                kind: "output",
                name: name.into(),
            })
    }

    // ----- forward ------------------------------------------------------

    /// Evaluates every node. `inputs` must name each declared input exactly
    /// once with its declared shape.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<()> {
        let mut bound: Vec<Option<&Tensor>> = vec![None; self.inputs.len()];
        for (name, t) in inputs {
            let idx = self.inputs.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Unknown {
                kind: "input",
                name: (*name).into(),
            })?;
            let expected = &self.nodes[self.inputs[idx].1].shape;
            if t.shape() != expected.as_slice() {
                return Err(Error::shape(format!("input `{name}`"), expected, t.shape()));
            }
            bound[idx] = Some(t);
        }
        if let Some(i) = bound.iter().position(Option::is_none) {
            return Err(Error::Invalid(format!("input `{}` not provided", self.inputs[i].0)));
        }

        self.values.clear();
        self.noise.clear();
        let Graph {
            nodes,
            params,
            noise,
            noise_rng,
            ..
        } = self;
        let mut cache: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        for id in 0..nodes.len() {
            let shape = nodes[id].shape.clone();
            let values = View {
                values: &cache,
                params,
                nodes,
            };
            let data = match nodes[id].op.clone() {
                Op::Input(i) => bound[i].expect("checked above").data().to_vec(),
                Op::Param(_) => {
                    cache.push(None);
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let (bsz, inn, out) = (shape[0], values[w].shape()[0], shape[1]);
                    let mut y = vec![0.0; bsz * out];
                    for row in y.chunks_mut(out) {
                        row.copy_from_slice(values[b].data());
                    }
                    gemm(bsz, inn, out, values[x].data(), false, values[w].data(), false, 1.0, &mut y);
                    y
                }
                Op::Conv2d { x, w, b, geom } => conv_forward(&values[x], &values[w], &values[b], geom, &shape),
                Op::ConvTranspose2d { x, w, b, geom } => {
                    conv_t_forward(&values[x], &values[w], &values[b], geom, &shape)
                }
                Op::Relu(x) => values[x].data().iter().map(|v| v.max(0.0)).collect(),
                Op::Sigmoid(x) => values[x].data().iter().map(|&v| sigmoid(v)).collect(),
                Op::Tanh(x) => values[x].data().iter().map(|v| v.tanh()).collect(),
                Op::Add(a, b) => zip_map(&values[a], &values[b], |p, q| p + q),
                Op::Mul(a, b) => zip_map(&values[a], &values[b], |p, q| p * q),
                Op::Scale(x, f) => values[x].data().iter().map(|v| v * f).collect(),
                Op::Reshape(x) => values[x].data().to_vec(),
                Op::Mse(a, b) => {
                    let n = values[a].len() as f64;
                    let s: f64 = values[a]
                        .data()
                        .iter()
                        .zip(values[b].data())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    vec![s / n]
                }
                Op::GaussianKl { mean, logvar } => {
                    let batch = shape_batch(&nodes[mean].shape);
                    let s: f64 = values[mean]
                        .data()
                        .iter()
                        .zip(values[logvar].data())
                        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
                        .sum();
                    vec![-0.5 * s / batch]
                }
                Op::Reparameterize { mean, logvar } => {
                    let eps: Vec<f64> = (0..values[mean].len())
                        .map(|_| StandardNormal.sample(noise_rng))
                        .collect();
                    let z = values[mean]
                        .data()
                        .iter()
                        .zip(values[logvar].data())
                        .zip(&eps)
                        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                        .collect();
                    noise.insert(id, eps);
                    z
                }
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("node {id} ({})", nodes[id].op.name())));
            }
            cache.push(Some(Tensor::from_parts(shape, data)));
        }
        self.values = cache;
        Ok(())
    }

    /// Runs [`Graph::forward`] and returns a copy of every declared output.
    pub fn forward_eval(&mut self, inputs: &[(&str, &Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        self.forward(inputs)?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.view()[*id].clone()))
            .collect())
    }

    /// Cached value of an output after a forward pass.
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let id = self.output_id(name)?;
        if self.values.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        Ok(match (&self.values[id], &self.nodes[id].op) {
            (Some(t), _) => t,
            (None, Op::Param(slot)) => &self.params[*slot].value,
            (None, _) => return Err(Error::BackwardBeforeForward),
        })
    }

    fn view(&self) -> View<'_> {
        View {
            values: &self.values,
            params: &self.params,
            nodes: &self.nodes,
        }
    }

    // ----- backward -----------------------------------------------------

    /// Accumulates parameter gradients of `seed · output` and returns the
    /// gradients with respect to every input.
    pub fn backward_grad(&mut self, output: &str, seed: &Tensor) -> Result<Gradients> {
        self.backward_grad_with(output, seed, ParamGrads::Accumulate)
    }

    pub fn backward_grad_with(&mut self, output: &str, seed: &Tensor, mode: ParamGrads) -> Result<Gradients> {
        if self.values.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output_id(output)?;
        if seed.shape() != self.nodes[out].shape.as_slice() {
            return Err(Error::shape(format!("seed for `{output}`"), &self.nodes[out].shape, seed.shape()));
        }

        // needs[i]: node i lies on a path from an input (or, when
        // accumulating, a parameter) whose gradient is wanted.
        let mut needs = vec![false; self.nodes.len()];
        for id in 0..self.nodes.len() {
            needs[id] = match &self.nodes[id].op {
                Op::Input(_) => true,
                Op::Param(_) => mode == ParamGrads::Accumulate,
                op => op.operands().iter().any(|&o| needs[o]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed.data().to_vec());
        let mut input_grads = BTreeMap::new();
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let v = self.view();

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            match self.nodes[id].op.clone() {
                Op::Input(i) => {
                    let t = Tensor::from_parts(self.nodes[id].shape.clone(), g);
                    input_grads.insert(self.inputs[i].0.clone(), t);
                }
                Op::Param(i) => accumulate(&mut param_grads[i], g),
                Op::Dense { x, w, b } => {
                    let (bsz, inn, out_dim) = (v[x].shape()[0], v[x].shape()[1], v[w].shape()[1]);
                    if needs[x] {
                        let mut dx = vec![0.0; bsz * inn];
                        gemm(bsz, out_dim, inn, &g, false, v[w].data(), true, 0.0, &mut dx);
                        accumulate(&mut grads[x], dx);
                    }
                    if needs[w] {
                        let mut dw = vec![0.0; inn * out_dim];
                        gemm(inn, bsz, out_dim, v[x].data(), true, &g, false, 0.0, &mut dw);
                        accumulate(&mut grads[w], dw);
                    }
                    if needs[b] {
                        let mut db = vec![0.0; out_dim];
                        for row in g.chunks(out_dim) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw) = conv_backward(&v[x], &v[w], &g, geom, &self.nodes[id].shape, needs[x], needs[w]);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x], dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w], dw);
                    }
                    if needs[b] {
                        accumulate(&mut grads[b], channel_sums(&g, &self.nodes[id].shape));
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let db = needs[b].then(|| channel_sums(&g, &self.nodes[id].shape));
                    let (dx, dw) = conv_t_backward(&v[x], &v[w], &g, geom, &self.nodes[id].shape, needs[x], needs[w]);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x], dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w], dw);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads[b], db);
                    }
                }
                Op::Relu(x) => {
                    let d = v[x].data().iter().zip(&g).map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads[x], d);
                }
                Op::Sigmoid(x) => {
                    let d = v[id].data().iter().zip(&g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads[x], d);
                }
                Op::Tanh(x) => {
                    let d = v[id].data().iter().zip(&g).map(|(y, gv)| gv * (1.0 - y * y)).collect();
                    accumulate(&mut grads[x], d);
                }
                Op::Add(a, b) => {
                    if needs[a] {
                        accumulate(&mut grads[a], g.clone());
                    }
                    if needs[b] {
                        accumulate(&mut grads[b], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a] {
                        accumulate(&mut grads[a], g.iter().zip(v[b].data()).map(|(p, q)| p * q).collect());
                    }
                    if needs[b] {
                        accumulate(&mut grads[b], g.iter().zip(v[a].data()).map(|(p, q)| p * q).collect());
                    }
                }
                Op::Scale(x, f) => accumulate(&mut grads[x], g.iter().map(|d| d * f).collect()),
                Op::Reshape(x) => accumulate(&mut grads[x], g),
                Op::Mse(a, b) => {
                    let n = v[a].len() as f64;
                    let k = 2.0 * g[0] / n;
                    let da: Vec<f64> = v[a].data().iter().zip(v[b].data()).map(|(p, q)| k * (p - q)).collect();
                    if needs[b] {
                        accumulate(&mut grads[b], da.iter().map(|d| -d).collect());
                    }
                    if needs[a] {
                        accumulate(&mut grads[a], da);
                    }
                }
                Op::GaussianKl { mean, logvar } => {
                    let batch = shape_batch(&self.nodes[mean].shape);
                    let k = g[0] / batch;
                    if needs[mean] {
                        accumulate(&mut grads[mean], v[mean].data().iter().map(|m| k * m).collect());
                    }
                    if needs[logvar] {
                        accumulate(
                            &mut grads[logvar],
                            v[logvar].data().iter().map(|lv| k * 0.5 * (lv.exp() - 1.0)).collect(),
                        );
                    }
                }
                Op::Reparameterize { mean, logvar } => {
                    let eps = &self.noise[&id];
                    if needs[logvar] {
                        let d = v[logvar]
                            .data()
                            .iter()
                            .zip(eps)
                            .zip(&g)
                            .map(|((lv, e), gv)| gv * 0.5 * (0.5 * lv).exp() * e)
                            .collect();
                        accumulate(&mut grads[logvar], d);
                    }
                    if needs[mean] {
                        accumulate(&mut grads[mean], g);
                    }
                }
            }
        }

        for (slot, g) in self.params.iter_mut().zip(param_grads) {
            if let Some(g) = g {
                for (acc, d) in slot.grad.data_mut().iter_mut().zip(&g) {
                    *acc += d;
                }
            }
        }
        for (name, id) in &self.inputs {
            if !input_grads.contains_key(name) {
                input_grads.insert(name.clone(), Tensor::zeros(&self.nodes[*id].shape));
            }
        }
        if input_grads.values().any(|t: &Tensor| t.data().iter().any(|x| !x.is_finite()))
            || self.params.iter().any(|p| p.grad.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("backward pass".into()));
        }
        Ok(Gradients { inputs: input_grads })
    }
}

impl Graph {
    /// Forward-mode derivative: the directional derivative of every output
    /// along `tangent` applied to input `input`, with all other inputs,
    /// parameters and sampled noise held fixed. Uses the cached forward pass.
    pub fn forward_tangent(&self, input: &str, tangent: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        if self.values.len() != self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let (_, in_id) = self.inputs.iter().find(|(n, _)| n == input).ok_or_else(|| Error::Unknown {
            kind: "input",
            name: input.into(),
        })?;
        if tangent.shape() != self.nodes[*in_id].shape.as_slice() {
            return Err(Error::shape(format!("tangent for `{input}`"), &self.nodes[*in_id].shape, tangent.shape()));
        }
        let v = self.view();
        // None stands for an all-zero tangent.
        let mut dots: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let shape = &self.nodes[id].shape;
            let d = match self.nodes[id].op {
                Op::Input(_) => (id == *in_id).then(|| tangent.data().to_vec()),
                Op::Param(_) => None,
                Op::Dense { x, w, .. } => dots[x].as_ref().map(|dx| {
                    let (bsz, inn, out) = (shape[0], v[w].shape()[0], shape[1]);
                    let mut y = vec![0.0; bsz * out];
                    gemm(bsz, inn, out, dx, false, v[w].data(), false, 0.0, &mut y);
                    y
                }),
                Op::Conv2d { x, w, b, geom } => dots[x].as_ref().map(|dx| {
                    let t = Tensor::from_parts(v[x].shape().to_vec(), dx.clone());
                    conv_forward(&t, &v[w], &Tensor::zeros(v[b].shape()), geom, shape)
                }),
                Op::ConvTranspose2d { x, w, b, geom } => dots[x].as_ref().map(|dx| {
                    let t = Tensor::from_parts(v[x].shape().to_vec(), dx.clone());
                    conv_t_forward(&t, &v[w], &Tensor::zeros(v[b].shape()), geom, shape)
                }),
                Op::Relu(x) => dots[x]
                    .as_ref()
                    .map(|dx| v[x].data().iter().zip(dx).map(|(xv, d)| if *xv > 0.0 { *d } else { 0.0 }).collect()),
                Op::Sigmoid(x) => dots[x]
                    .as_ref()
                    .map(|dx| v[id].data().iter().zip(dx).map(|(y, d)| d * y * (1.0 - y)).collect()),
                Op::Tanh(x) => dots[x]
                    .as_ref()
                    .map(|dx| v[id].data().iter().zip(dx).map(|(y, d)| d * (1.0 - y * y)).collect()),
                Op::Add(a, b) => sum_opt(dots[a].as_deref(), dots[b].as_deref(), |d| d.to_vec(), |d| d.to_vec()),
                Op::Mul(a, b) => sum_opt(
                    dots[a].as_deref(),
                    dots[b].as_deref(),
                    |da| da.iter().zip(v[b].data()).map(|(p, q)| p * q).collect(),
                    |db| db.iter().zip(v[a].data()).map(|(p, q)| p * q).collect(),
                ),
                Op::Scale(x, f) => dots[x].as_ref().map(|dx| dx.iter().map(|d| d * f).collect()),
                Op::Reshape(x) => dots[x].clone(),
                Op::Mse(a, b) => {
                    let n = v[a].len() as f64;
                    let diff = |p: f64, q: f64| 2.0 * (p - q) / n;
                    let da = dots[a].as_ref().map(|d| {
                        v[a].data().iter().zip(v[b].data()).zip(d).map(|((p, q), t)| diff(*p, *q) * t).sum::<f64>()
                    });
                    let db = dots[b].as_ref().map(|d| {
                        v[a].data().iter().zip(v[b].data()).zip(d).map(|((p, q), t)| -diff(*p, *q) * t).sum::<f64>()
                    });
                    match (da, db) {
                        (None, None) => None,
                        (p, q) => Some(vec![p.unwrap_or(0.0) + q.unwrap_or(0.0)]),
                    }
                }
                Op::GaussianKl { mean, logvar } => {
                    let k = 1.0 / shape_batch(&self.nodes[mean].shape);
                    let dm = dots[mean]
                        .as_ref()
                        .map(|d| v[mean].data().iter().zip(d).map(|(m, t)| k * m * t).sum::<f64>());
                    let dl = dots[logvar]
                        .as_ref()
                        .map(|d| v[logvar].data().iter().zip(d).map(|(lv, t)| k * 0.5 * (lv.exp() - 1.0) * t).sum::<f64>());
                    match (dm, dl) {
                        (None, None) => None,
                        (p, q) => Some(vec![p.unwrap_or(0.0) + q.unwrap_or(0.0)]),
                    }
                }
                Op::Reparameterize { mean, logvar } => {
                    let eps = &self.noise[&id];
                    sum_opt(
                        dots[mean].as_deref(),
                        dots[logvar].as_deref(),
                        |dm| dm.to_vec(),
                        |dl| {
                            v[logvar]
                                .data()
                                .iter()
                                .zip(eps)
                                .zip(dl)
                                .map(|((lv, e), t)| 0.5 * (0.5 * lv).exp() * e * t)
                                .collect()
                        },
                    )
                }
            };
            dots.push(d);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            let shape = self.nodes[*id].shape.clone();
            let data = dots[*id].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("forward tangent".into()));
            }
            out.insert(name.clone(), Tensor::from_parts(shape, data));
        }
        Ok(out)
    }
}

fn sum_opt(
    a: Option<&[f64]>,
    b: Option<&[f64]>,
    fa: impl Fn(&[f64]) -> Vec<f64>,
    fb: impl Fn(&[f64]) -> Vec<f64>,
) -> Option<Vec<f64>> {
    match (a.map(fa), b.map(fb)) {
        (None, None) => None,
        (Some(x), None) | (None, Some(x)) => Some(x),
        (Some(mut x), Some(y)) => {
            for (p, q) in x.iter_mut().zip(&y) {
                *p += q;
            }
            Some(x)
        }
    }
}

/// Read access to forward values, resolving parameter nodes to their slots.
struct View<'a> {
    values: &'a [Option<Tensor>],
    params: &'a [ParamSlot],
    nodes: &'a [Node],
}

impl std::ops::Index<NodeId> for View<'_> {
    type Output = Tensor;

    fn index(&self, id: NodeId) -> &Tensor {
        match (&self.values[id], &self.nodes[id].op) {
            (Some(t), _) => t,
            (None, Op::Param(slot)) => &self.params[*slot].value,
            (None, _) => unreachable!("forward cache entry missing for node {id}"),
        }
    }
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![x, w, b],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Scale(x, _) | Op::Reshape(x) => vec![x],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::GaussianKl { mean, logvar } | Op::Reparameterize { mean, logvar } => vec![mean, logvar],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Mse(..) => "mse",
            Op::GaussianKl { .. } => "gaussian_kl",
            Op::Reparameterize { .. } => "reparameterize",
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn shape_batch(shape: &[usize]) -> f64 {
    shape[0] as f64
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn channel_sums(g: &[f64], shape: &[usize]) -> Vec<f64> {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut db = vec![0.0; c];
    for item in g.chunks(c * plane) {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += item[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    db
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeom, out_shape: &[usize]) -> Vec<f64> {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let kk = cin * geom.kernel * geom.kernel;
    let mut cols = vec![0.0; kk * oh * ow];
    let mut y = vec![0.0; bsz * cout * oh * ow];
    for (item, yb) in x.data().chunks(cin * h * wd).zip(y.chunks_mut(cout * oh * ow)) {
        im2col(item, cin, h, wd, geom, oh, ow, &mut cols);
        for (ch, plane) in yb.chunks_mut(oh * ow).enumerate() {
            plane.fill(b.data()[ch]);
        }
        gemm(cout, kk, oh * ow, w.data(), false, &cols, false, 1.0, yb);
    }
    y
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    geom: ConvGeom,
    out_shape: &[usize],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let kk = cin * geom.kernel * geom.kernel;
    let mut cols = vec![0.0; kk * oh * ow];
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    for (bi, gb) in g.chunks(cout * oh * ow).enumerate() {
        if let Some(dw) = dw.as_mut() {
            let item = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            im2col(item, cin, h, wd, geom, oh, ow, &mut cols);
            gemm(cout, oh * ow, kk, gb, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, cout, oh * ow, w.data(), true, gb, false, 0.0, &mut cols);
            col2im(&cols, cin, h, wd, geom, oh, ow, &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
        }
    }
    (dx, dw)
}

fn conv_t_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeom, out_shape: &[usize]) -> Vec<f64> {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let kk = cout * geom.kernel * geom.kernel;
    let mut cols = vec![0.0; kk * h * wd];
    let mut y = vec![0.0; bsz * cout * oh * ow];
    for (item, yb) in x.data().chunks(cin * h * wd).zip(y.chunks_mut(cout * oh * ow)) {
        gemm(kk, cin, h * wd, w.data(), true, item, false, 0.0, &mut cols);
        for (ch, plane) in yb.chunks_mut(oh * ow).enumerate() {
            plane.fill(b.data()[ch]);
        }
        col2im(&cols, cout, oh, ow, geom, h, wd, yb);
    }
    y
}

fn conv_t_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    geom: ConvGeom,
    out_shape: &[usize],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let kk = cout * geom.kernel * geom.kernel;
    let mut cols = vec![0.0; kk * h * wd];
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    for (bi, gb) in g.chunks(cout * oh * ow).enumerate() {
        im2col(gb, cout, oh, ow, geom, h, wd, &mut cols);
        let item = bi * cin * h * wd..(bi + 1) * cin * h * wd;
        if let Some(dx) = dx.as_mut() {
            gemm(cin, kk, h * wd, w.data(), false, &cols, false, 0.0, &mut dx[item.clone()]);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(cin, h * wd, kk, &x.data()[item], false, &cols, true, 1.0, dw);
        }
    }
    (dx, dw)
}
