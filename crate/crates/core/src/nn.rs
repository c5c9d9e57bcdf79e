//! Minimal dense networks with exact reverse-mode gradients.
//!
//! A [`Network`] is a tanh trunk followed by any number of linear heads that
//! all read the last trunk layer. Parameters are stored as `P` (`f32` by
//! default, `f64` for gradient checks); every reduction accumulates in `f64`.
//!
//! Weights are laid out row-per-input (`weight[i * outputs + j]`), so the
//! first layer only touches rows whose input is non-zero. One-hot
//! observations are ~75% zeros, which makes that the dominant saving.

use std::fmt::Debug;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait Param: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Param for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Param for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("gradient for head {head} has length {got}, head has {expected} outputs")]
    OutputShape {
        head: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} head gradients, got {got}")]
    HeadCount { expected: usize, got: usize },
    #[error("gradient tape does not match network shapes")]
    TapeShape,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("non-finite parameter in tensor {0} after update")]
    NonFiniteParameter(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub size: usize,
    /// Multiplier on the default init range (small values give near-uniform
    /// policies at initialisation).
    pub init_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<HeadSpec>,
}

impl NetworkSpec {
    /// Shapes `(inputs, outputs)` of every dense layer: trunk, then heads.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            shapes.push((prev, h));
            prev = h;
        }
        for head in &self.heads {
            shapes.push((prev, head.size));
        }
        shapes
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.hidden.len() {
            names.push(format!("trunk.{i}.weight"));
            names.push(format!("trunk.{i}.bias"));
        }
        for head in &self.heads {
            names.push(format!("head.{}.weight", head.name));
            names.push(format!("head.{}.bias", head.name));
        }
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<P> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<P>,
    pub bias: Vec<P>,
}

impl<P: Param> Dense<P> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![P::default(); inputs * outputs],
            bias: vec![P::default(); outputs],
        }
    }

    /// `out = bias + input · W`, skipping zero inputs.
    #[inline]
    fn affine<I: Copy + Into<f64>>(&self, input: &[I], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().map(|b| b.to_f64()));
        for (i, &x) in input.iter().enumerate() {
            let x: f64 = x.into();
            if x == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w.to_f64();
            }
        }
    }
}

/// Intermediate values of one forward pass, needed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Activations {
    input: Vec<f32>,
    hidden: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Per-tensor gradient accumulators, aligned with [`NetworkSpec::tensor_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub grads: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like<P: Param>(net: &Network<P>) -> Self {
        Self {
            grads: net
                .layers()
                .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }

    pub fn add(&mut self, other: &GradientTape) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<P: Param = f32> {
    spec: NetworkSpec,
    trunk: Vec<Dense<P>>,
    heads: Vec<Dense<P>>,
}

impl<P: Param> Network<P> {
    pub fn zeros(spec: NetworkSpec) -> Self {
        let shapes = spec.layer_shapes();
        let n_trunk = spec.hidden.len();
        let trunk = shapes[..n_trunk]
            .iter()
            .map(|&(i, o)| Dense::zeros(i, o))
            .collect();
        let heads = shapes[n_trunk..]
            .iter()
            .map(|&(i, o)| Dense::zeros(i, o))
            .collect();
        Self { spec, trunk, heads }
    }

    /// Glorot-uniform weights, zero biases; head ranges scaled by
    /// `HeadSpec::init_scale`.
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(spec);
        let scales: Vec<f64> = std::iter::repeat(1.0)
            .take(net.trunk.len())
            .chain(net.spec.heads.iter().map(|h| h.init_scale))
            .collect();
        for (layer, scale) in net.layers_mut().zip(scales) {
            let limit = scale * (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weight {
                *w = P::from_f64(rng.gen_range(-1.0..=1.0) * limit);
            }
        }
        net
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.spec.heads.iter().position(|h| h.name == name)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense<P>> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<P>> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    /// Flat views of every tensor in [`NetworkSpec::tensor_names`] order.
    pub fn tensors(&self) -> Vec<&[P]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [P]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.to_f64().is_finite()))
    }

    /// Outputs of every head.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<Vec<f64>>, NnError> {
        let mut buf = Vec::new();
        let mut next = Vec::new();
        self.check_input(input)?;
        let Some(first) = self.trunk.first() else {
            return Ok(self
                .heads
                .iter()
                .map(|h| {
                    let mut o = Vec::new();
                    h.affine(input, &mut o);
                    o
                })
                .collect());
        };
        first.affine(input, &mut buf);
        buf.iter_mut().for_each(|v| *v = v.tanh());
        for layer in &self.trunk[1..] {
            layer.affine(&buf, &mut next);
            next.iter_mut().for_each(|v| *v = v.tanh());
            std::mem::swap(&mut buf, &mut next);
        }
        Ok(self
            .heads
            .iter()
            .map(|h| {
                let mut o = Vec::new();
                h.affine(&buf, &mut o);
                o
            })
            .collect())
    }

    pub fn forward_cached(&self, input: &[f32]) -> Result<Activations, NnError> {
        self.check_input(input)?;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        for (i, layer) in self.trunk.iter().enumerate() {
            let mut out = Vec::new();
            if i == 0 {
                layer.affine(input, &mut out);
            } else {
                layer.affine(&hidden[i - 1], &mut out);
            }
            out.iter_mut().for_each(|v| *v = v.tanh());
            hidden.push(out);
        }
        let outputs = self
            .heads
            .iter()
            .map(|h| {
                let mut o = Vec::new();
                match hidden.last() {
                    Some(last) => h.affine(last, &mut o),
                    None => h.affine(input, &mut o),
                }
                o
            })
            .collect();
        Ok(Activations {
            input: input.to_vec(),
            hidden,
            outputs,
        })
    }

    /// Accumulates `d loss / d params` into `tape`, given `d loss / d output`
    /// for every head.
    pub fn backward(
        &self,
        act: &Activations,
        head_grads: &[Vec<f64>],
        tape: &mut GradientTape,
    ) -> Result<(), NnError> {
        if head_grads.len() != self.heads.len() {
            return Err(NnError::HeadCount {
                expected: self.heads.len(),
                got: head_grads.len(),
            });
        }
        if tape.grads.len() != 2 * (self.trunk.len() + self.heads.len())
            || tape
                .grads
                .iter()
                .zip(self.tensors())
                .any(|(g, t)| g.len() != t.len())
        {
            return Err(NnError::TapeShape);
        }
        for (h, (g, head)) in head_grads.iter().zip(&self.heads).enumerate() {
            if g.len() != head.outputs {
                return Err(NnError::OutputShape {
                    head: h,
                    expected: head.outputs,
                    got: g.len(),
                });
            }
        }

        let n_trunk = self.trunk.len();
        let last_width = self.heads.first().map(|h| h.inputs).unwrap_or(0);
        let mut upstream = vec![0.0f64; last_width];
        for (h, (g, head)) in head_grads.iter().zip(&self.heads).enumerate() {
            let slot = 2 * (n_trunk + h);
            let (before, after) = tape.grads.split_at_mut(slot + 1);
            let dw = &mut before[slot];
            let db = &mut after[0];
            let head_in: Vec<f64> = match act.hidden.last() {
                Some(last) => last.clone(),
                None => act.input.iter().map(|&v| f64::from(v)).collect(),
            };
            accumulate_layer(head, &head_in, g, dw, db, Some(&mut upstream));
        }
        for l in (0..n_trunk).rev() {
            let layer = &self.trunk[l];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(&act.hidden[l])
                .map(|(d, a)| d * (1.0 - a * a))
                .collect();
            let slot = 2 * l;
            let (before, after) = tape.grads.split_at_mut(slot + 1);
            let dw = &mut before[slot];
            let db = &mut after[0];
            if l == 0 {
                accumulate_layer(layer, &act.input, &delta, dw, db, None);
            } else {
                let mut next_up = vec![0.0; layer.inputs];
                accumulate_layer(layer, &act.hidden[l - 1], &delta, dw, db, Some(&mut next_up));
                upstream = next_up;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f32]) -> Result<(), NnError> {
        if input.len() != self.spec.input {
            return Err(NnError::InputShape {
                expected: self.spec.input,
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<Q: Param>(&self) -> Network<Q> {
        let conv = |l: &Dense<P>| Dense {
            inputs: l.inputs,
            outputs: l.outputs,
            weight: l.weight.iter().map(|w| Q::from_f64(w.to_f64())).collect(),
            bias: l.bias.iter().map(|w| Q::from_f64(w.to_f64())).collect(),
        };
        Network {
            spec: self.spec.clone(),
            trunk: self.trunk.iter().map(conv).collect(),
            heads: self.heads.iter().map(conv).collect(),
        }
    }
}

fn accumulate_layer<P: Param, I: Copy + Into<f64>>(
    layer: &Dense<P>,
    input: &[I],
    delta: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut d_input: Option<&mut Vec<f64>>,
) {
    for (b, d) in db.iter_mut().zip(delta) {
        *b += d;
    }
    let n = layer.outputs;
    for (i, &x) in input.iter().enumerate() {
        let x: f64 = x.into();
        if x != 0.0 {
            for (g, d) in dw[i * n..(i + 1) * n].iter_mut().zip(delta) {
                *g += x * d;
            }
        }
        if let Some(up) = d_input.as_deref_mut() {
            let row = &layer.weight[i * n..(i + 1) * n];
            up[i] += row.iter().zip(delta).map(|(w, d)| w.to_f64() * d).sum::<f64>();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<P: Param>(net: &Network<P>, hyper: AdamHyper) -> Self {
        let zeros = GradientTape::zeros_like(net).grads;
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step. A non-finite gradient is rejected before any
    /// parameter changes.
    pub fn update<P: Param>(&mut self, net: &mut Network<P>, tape: &GradientTape) -> Result<(), NnError> {
        let names = net.spec().tensor_names();
        if tape.grads.len() != self.m.len()
            || tape.grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(NnError::TapeShape);
        }
        if let Some(i) = tape
            .grads
            .iter()
            .position(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(NnError::NonFiniteGradient(names[i].clone()));
        }
        self.t += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (ti, params) in net.tensors_mut().into_iter().enumerate() {
            let (g, m, v) = (&tape.grads[ti], &mut self.m[ti], &mut self.v[ti]);
            for k in 0..params.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                if m[k] == 0.0 {
                    continue;
                }
                let step = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                params[k] = P::from_f64(params[k].to_f64() - step);
            }
        }
        if let Some(i) = net
            .tensors()
            .iter()
            .position(|t| t.iter().any(|v| !v.to_f64().is_finite()))
        {
            return Err(NnError::NonFiniteParameter(names[i].clone()));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
