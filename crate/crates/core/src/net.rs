//! Small dense-network toolkit with exact reverse-mode gradients.
//!
//! Supports exactly what the Q-network and discriminator need: dense layers
//! applied over the last axis (so a `[batch, channels, features]` tensor gets
//! a per-channel shared projection), ReLU, sigmoid, squeeze-and-excitation
//! channel attention and reshapes. Everything is `f64`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NetError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NetError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Stacks equally sized rows into a `[rows, width]` batch.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NetError> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(NetError::Shape(format!("ragged rows: {} vs {width}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { shape: vec![rows.len(), width], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row `i` of the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.batch().max(1);
        &self.data[i * w..(i + 1) * w]
    }

    fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Glorot-uniform initializer bound.
fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs, inputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        DenseLayer { inputs, outputs, weights: glorot(rng, inputs, outputs, inputs * outputs), bias: vec![0.0; outputs] }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.weights[i * n + i] = 1.0;
        }
        l
    }
}

/// Squeeze-and-excitation block over `[channels, features]` activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub hidden: usize,
    /// `[hidden, channels]`
    pub w1: Vec<f64>,
    /// `[channels, hidden]`
    pub w2: Vec<f64>,
}

impl SeBlock {
    /// The bottleneck width is `ceil(channels / reduction)`.
    pub fn new<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = channels.div_ceil(reduction.max(1)).max(1);
        SeBlock {
            channels,
            reduction,
            hidden,
            w1: glorot(rng, channels, hidden, hidden * channels),
            w2: glorot(rng, hidden, channels, channels * hidden),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = channels.div_ceil(reduction.max(1)).max(1);
        SeBlock { channels, reduction, hidden, w1: vec![0.0; hidden * channels], w2: vec![0.0; channels * hidden] }
    }

    /// Per-channel gates for one `[channels, features]` sample.
    pub fn gates(&self, sample: &[f64]) -> Vec<f64> {
        let feats = sample.len() / self.channels;
        let z: Vec<f64> = sample.chunks(feats).map(|c| c.iter().sum::<f64>() / feats as f64).collect();
        let h: Vec<f64> = self.w1.chunks(self.channels).map(|w| dot(w, &z).max(0.0)).collect();
        self.w2.chunks(self.hidden).map(|w| sigmoid(dot(w, &h))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(DenseLayer),
    Relu,
    Sigmoid,
    Se(SeBlock),
    /// New per-sample dims (batch axis excluded).
    Reshape(Vec<usize>),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    Output(Tensor),
    Se { input: Tensor, z: Vec<f64>, hidden_pre: Vec<f64>, gates: Vec<f64> },
    None,
}

/// Output of [`Network::forward`] together with what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    caches: Vec<LayerCache>,
    input_shape: Vec<usize>,
}

/// Parameter gradients, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            axpy(1.0, b, a);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Per-sample input dims (batch axis excluded).
    pub input_dims: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_dims: Vec<usize>, layers: Vec<Layer>) -> Self {
        Network { input_dims, layers }
    }

    pub fn input_width(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice());
                    out.push(d.bias.as_slice());
                }
                Layer::Se(s) => {
                    out.push(s.w1.as_slice());
                    out.push(s.w2.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(d.weights.as_mut_slice());
                    out.push(d.bias.as_mut_slice());
                }
                Layer::Se(s) => {
                    out.push(s.w1.as_mut_slice());
                    out.push(s.w2.as_mut_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Order-sensitive FNV-1a over the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            for v in p {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Overwrites this network's parameters with `other`'s.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<(), NetError> {
        if self.input_dims != other.input_dims || self.param_count() != other.param_count() {
            return Err(NetError::Shape("architectures differ".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            if dst.len() != src.len() {
                return Err(NetError::Shape("parameter block sizes differ".into()));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NetError> {
        if input.shape.is_empty() {
            return Err(NetError::Shape("input needs a batch axis".into()));
        }
        let per_sample: usize = input.shape[1..].iter().product();
        if per_sample != self.input_width() || input.shape.len() < 2 {
            return Err(NetError::Shape(format!(
                "network expects per-sample dims {:?}, got {:?}",
                self.input_dims,
                &input.shape[1..]
            )));
        }
        Ok(())
    }

    /// Output only.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NetError> {
        Ok(self.forward(input)?.output)
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass, NetError> {
        self.check_input(input)?;
        let batch = input.batch();
        let mut x =
            Tensor { shape: std::iter::once(batch).chain(self.input_dims.iter().copied()).collect(), data: input.data.clone() };
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    if x.last_dim() != d.inputs {
                        return Err(NetError::Shape(format!("dense expects {} inputs, got {:?}", d.inputs, x.shape)));
                    }
                    let rows = x.data.len() / d.inputs;
                    let mut out = vec![0.0; rows * d.outputs];
                    for (xr, yr) in x.data.chunks_exact(d.inputs).zip(out.chunks_exact_mut(d.outputs)) {
                        for ((y, w), b) in yr.iter_mut().zip(d.weights.chunks_exact(d.inputs)).zip(&d.bias) {
                            *y = dot(w, xr) + b;
                        }
                    }
                    let mut shape = x.shape.clone();
                    *shape.last_mut().unwrap() = d.outputs;
                    let y = Tensor { shape, data: out };
                    caches.push(LayerCache::Input(x));
                    x = y;
                }
                Layer::Relu => {
                    let y = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v.max(0.0)).collect() };
                    caches.push(LayerCache::Input(x));
                    x = y;
                }
                Layer::Sigmoid => {
                    x.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                    caches.push(LayerCache::Output(x.clone()));
                }
                Layer::Se(se) => {
                    if x.shape.len() != 3 || x.shape[1] != se.channels {
                        return Err(NetError::Shape(format!("SE block expects [B, {}, F], got {:?}", se.channels, x.shape)));
                    }
                    let (c, f) = (x.shape[1], x.shape[2]);
                    let mut z = vec![0.0; batch * c];
                    let mut hidden_pre = vec![0.0; batch * se.hidden];
                    let mut gates = vec![0.0; batch * c];
                    let mut y = x.data.clone();
                    for b in 0..batch {
                        let sample = &x.data[b * c * f..(b + 1) * c * f];
                        let zb = &mut z[b * c..(b + 1) * c];
                        for (zc, ch) in zb.iter_mut().zip(sample.chunks_exact(f)) {
                            *zc = ch.iter().sum::<f64>() / f as f64;
                        }
                        let hb = &mut hidden_pre[b * se.hidden..(b + 1) * se.hidden];
                        for (h, w) in hb.iter_mut().zip(se.w1.chunks_exact(c)) {
                            *h = dot(w, zb);
                        }
                        let relu: Vec<f64> = hb.iter().map(|v| v.max(0.0)).collect();
                        let gb = &mut gates[b * c..(b + 1) * c];
                        for (g, w) in gb.iter_mut().zip(se.w2.chunks_exact(se.hidden)) {
                            *g = sigmoid(dot(w, &relu));
                        }
                        for (ch, g) in y[b * c * f..(b + 1) * c * f].chunks_exact_mut(f).zip(gb.iter()) {
                            ch.iter_mut().for_each(|v| *v *= g);
                        }
                    }
                    let out = Tensor { shape: x.shape.clone(), data: y };
                    caches.push(LayerCache::Se { input: x, z, hidden_pre, gates });
                    x = out;
                }
                Layer::Reshape(dims) => {
                    let n: usize = dims.iter().product();
                    if n * batch != x.data.len() {
                        return Err(NetError::Shape(format!("cannot reshape {:?} to {dims:?}", x.shape)));
                    }
                    x.shape = std::iter::once(batch).chain(dims.iter().copied()).collect();
                    caches.push(LayerCache::None);
                }
            }
        }
        Ok(ForwardPass { output: x, caches, input_shape: input.shape.clone() })
    }

    /// Exact gradients of `sum(upstream * output)` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, pass: &ForwardPass, upstream: &Tensor) -> Result<(Gradients, Tensor), NetError> {
        if upstream.data.len() != pass.output.data.len() {
            return Err(NetError::Shape(format!("upstream {:?} vs output {:?}", upstream.shape, pass.output.shape)));
        }
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = Tensor { shape: pass.output.shape.clone(), data: upstream.data.clone() };
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            match (layer, cache) {
                (Layer::Dense(d), LayerCache::Input(x)) => {
                    let mut gw = vec![0.0; d.weights.len()];
                    let mut gb = vec![0.0; d.outputs];
                    let mut gx = vec![0.0; x.data.len()];
                    for ((xr, gr), gxr) in
                        x.data.chunks_exact(d.inputs).zip(g.data.chunks_exact(d.outputs)).zip(gx.chunks_exact_mut(d.inputs))
                    {
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            gb[o] += go;
                            axpy(go, xr, &mut gw[o * d.inputs..(o + 1) * d.inputs]);
                            axpy(go, &d.weights[o * d.inputs..(o + 1) * d.inputs], gxr);
                        }
                    }
                    grads.push(gb);
                    grads.push(gw);
                    g = Tensor { shape: x.shape.clone(), data: gx };
                }
                (Layer::Relu, LayerCache::Input(x)) => {
                    for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g.shape = x.shape.clone();
                }
                (Layer::Sigmoid, LayerCache::Output(y)) => {
                    for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                        *gv *= yv * (1.0 - yv);
                    }
                }
                (Layer::Se(se), LayerCache::Se { input, z, hidden_pre, gates }) => {
                    let batch = input.shape[0];
                    let (c, f, hd) = (input.shape[1], input.shape[2], se.hidden);
                    let mut gw1 = vec![0.0; se.w1.len()];
                    let mut gw2 = vec![0.0; se.w2.len()];
                    let mut gx = vec![0.0; input.data.len()];
                    for b in 0..batch {
                        let xs = &input.data[b * c * f..(b + 1) * c * f];
                        let gys = &g.data[b * c * f..(b + 1) * c * f];
                        let sb = &gates[b * c..(b + 1) * c];
                        let zb = &z[b * c..(b + 1) * c];
                        let hp = &hidden_pre[b * hd..(b + 1) * hd];
                        let h: Vec<f64> = hp.iter().map(|v| v.max(0.0)).collect();
                        // d/d gate, then through the sigmoid
                        let gu: Vec<f64> = (0..c)
                            .map(|ch| {
                                let gs = dot(&gys[ch * f..(ch + 1) * f], &xs[ch * f..(ch + 1) * f]);
                                gs * sb[ch] * (1.0 - sb[ch])
                            })
                            .collect();
                        let mut gh = vec![0.0; hd];
                        for (ch, &gu_c) in gu.iter().enumerate() {
                            axpy(gu_c, &h, &mut gw2[ch * hd..(ch + 1) * hd]);
                            axpy(gu_c, &se.w2[ch * hd..(ch + 1) * hd], &mut gh);
                        }
                        let mut gz = vec![0.0; c];
                        for (j, ghj) in gh.iter().enumerate() {
                            let ghp = if hp[j] > 0.0 { *ghj } else { 0.0 };
                            if ghp == 0.0 {
                                continue;
                            }
                            axpy(ghp, zb, &mut gw1[j * c..(j + 1) * c]);
                            axpy(ghp, &se.w1[j * c..(j + 1) * c], &mut gz);
                        }
                        let gxs = &mut gx[b * c * f..(b + 1) * c * f];
                        for ch in 0..c {
                            let squeeze = gz[ch] / f as f64;
                            for k in 0..f {
                                gxs[ch * f + k] = gys[ch * f + k] * sb[ch] + squeeze;
                            }
                        }
                    }
                    grads.push(gw2);
                    grads.push(gw1);
                    g = Tensor { shape: input.shape.clone(), data: gx };
                }
                (Layer::Reshape(_), LayerCache::None) => {}
                _ => return Err(NetError::Shape("forward cache does not match network".into())),
            }
        }
        grads.reverse();
        g.shape = pass.input_shape.clone();
        Ok((Gradients(grads), g))
    }

    /// Writes the versioned little-endian checkpoint format.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), NetError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        put_u32(&mut w, self.input_dims.len() as u32)?;
        for &d in &self.input_dims {
            put_u32(&mut w, d as u32)?;
        }
        put_u32(&mut w, self.layers.len() as u32)?;
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    w.write_all(&[0])?;
                    put_u32(&mut w, d.inputs as u32)?;
                    put_u32(&mut w, d.outputs as u32)?;
                }
                Layer::Relu => w.write_all(&[1])?,
                Layer::Sigmoid => w.write_all(&[2])?,
                Layer::Se(s) => {
                    w.write_all(&[3])?;
                    put_u32(&mut w, s.channels as u32)?;
                    put_u32(&mut w, s.reduction as u32)?;
                }
                Layer::Reshape(dims) => {
                    w.write_all(&[4])?;
                    put_u32(&mut w, dims.len() as u32)?;
                    for &d in dims {
                        put_u32(&mut w, d as u32)?;
                    }
                }
            }
        }
        for p in self.params() {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Network, NetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {version}")));
        }
        let nd = get_u32(&mut r)? as usize;
        let input_dims = (0..nd).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let nl = get_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            layers.push(match tag[0] {
                0 => {
                    let i = get_u32(&mut r)? as usize;
                    let o = get_u32(&mut r)? as usize;
                    Layer::Dense(DenseLayer::zeros(i, o))
                }
                1 => Layer::Relu,
                2 => Layer::Sigmoid,
                3 => {
                    let c = get_u32(&mut r)? as usize;
                    let red = get_u32(&mut r)? as usize;
                    Layer::Se(SeBlock::zeros(c, red))
                }
                4 => {
                    let n = get_u32(&mut r)? as usize;
                    Layer::Reshape((0..n).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<_, _>>()?)
                }
                t => return Err(NetError::Checkpoint(format!("unknown layer tag {t}"))),
            });
        }
        let mut net = Network { input_dims, layers };
        for p in net.params_mut() {
            for v in p.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(NetError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SARADNET";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Huber loss with unit threshold.
pub fn huber(prediction: f64, target: f64) -> f64 {
    let e = prediction - target;
    if e.abs() <= 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

/// d huber / d prediction.
pub fn huber_grad(prediction: f64, target: f64) -> f64 {
    (prediction - target).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        let shape: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: shape.clone(), second: shape }
    }
}

/// One bias-corrected Adam update. Returns `false` (and leaves everything
/// untouched) when the gradients are not finite.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState) -> Result<bool, NetError> {
    if grads.0.len() != state.first.len() {
        return Err(NetError::Shape("gradient blocks do not match optimizer state".into()));
    }
    if !grads.is_finite() {
        log::warn!("non-finite gradient at adam step {}, update skipped", state.step);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, g), m), v) in net.params_mut().into_iter().zip(&grads.0).zip(state.first.iter_mut()).zip(state.second.iter_mut()) {
        if p.len() != g.len() {
            return Err(NetError::Shape("gradient block size mismatch".into()));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

/// Per-vehicle shared projection followed by channel attention:
/// `[channels * features] -> [channels, hidden] -> SE -> [channels * hidden]`.
pub fn attention_trunk<R: Rng>(channels: usize, features: usize, hidden: usize, reduction: usize, rng: &mut R) -> Vec<Layer> {
    vec![
        Layer::Reshape(vec![channels, features]),
        Layer::Dense(DenseLayer::new(features, hidden, rng)),
        Layer::Relu,
        Layer::Se(SeBlock::new(channels, reduction, rng)),
        Layer::Reshape(vec![channels * hidden]),
    ]
}

/// Multi-layer perceptron with ReLU between layers and a linear head.
pub fn mlp<R: Rng>(widths: &[usize], rng: &mut R) -> Network {
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense(DenseLayer::new(w[0], w[1], rng)));
    }
    Network::new(vec![widths[0]], layers)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Max relative error between analytic and central-difference gradients
    /// of `loss(net)` over every parameter.
    pub fn max_rel_error<F>(net: &Network, analytic: &Gradients, mut loss: F, h: f64) -> f64
    where
        F: FnMut(&Network) -> f64,
    {
        let mut probe = net.clone();
        let mut worst: f64 = 0.0;
        let n_blocks = net.params().len();
        for b in 0..n_blocks {
            let len = net.params()[b].len();
            for i in 0..len {
                let orig = net.params()[b][i];
                probe.params_mut()[b][i] = orig + h;
                let up = loss(&probe);
                probe.params_mut()[b][i] = orig - h;
                let down = loss(&probe);
                probe.params_mut()[b][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.0[b][i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
