//! Small neural-network toolkit on top of `candle-core`: a named parameter
//! store with seeded initialization, a handful of layers, Adam with
//! group-selective steps, and checkpoint persistence.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::{self, BlobBuilder, BlobEntry};

pub const DEVICE: Device = Device::Cpu;

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Ordinary network weights.
    Model,
    /// Implicit memory keys and values.
    Memory,
    /// Stored with the model but never updated (e.g. data-derived memories).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Host copy of a store: name to (shape, values).
pub type Snapshot = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Named trainable tensors in deterministic (lexicographic) order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Param>,
}

pub fn seeded_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(values, shape, &DEVICE)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

pub fn tensor_from_f32(values: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(values, shape, &DEVICE)?;
    Ok(if dtype == DType::F32 { t } else { t.to_dtype(dtype)? })
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], group: ParamGroup) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::argument(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&tensor_from_f64(values, shape, self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = seeded_normal(&mut self.rng, n, std);
        self.insert(name, values, shape, group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, group)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .get(name)
            .map(|p| &p.var)
            .ok_or_else(|| Error::argument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.var.as_tensor().elem_count()).sum()
    }

    /// Overwrite a parameter with host values of the same shape.
    pub fn assign_f64(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let var = self.var(name)?;
        let shape = var.as_tensor().dims().to_vec();
        var.set(&tensor_from_f64(values, &shape, self.dtype)?)?;
        Ok(())
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        to_f64_vec(self.var(name)?.as_tensor())
    }

    /// Host snapshot of every parameter as `f32`.
    pub fn snapshot(&self) -> Result<Snapshot> {
        self.params
            .iter()
            .map(|(k, p)| {
                let t = p.var.as_tensor();
                Ok((k.clone(), (t.dims().to_vec(), to_f32_vec(t)?)))
            })
            .collect()
    }

    pub fn load_snapshot(&self, snap: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, p) in &self.params {
            let (shape, values) = snap
                .get(name)
                .ok_or_else(|| Error::integrity("params.f32", format!("missing parameter `{name}`")))?;
            if shape.as_slice() != p.var.as_tensor().dims() {
                return Err(Error::integrity(
                    "params.f32",
                    format!("parameter `{name}` has shape {shape:?}, model expects {:?}", p.var.as_tensor().dims()),
                ));
            }
            p.var.set(&tensor_from_f32(values.clone(), shape, self.dtype)?)?;
        }
        Ok(())
    }
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[d_in, d_out], std, ParamGroup::Model)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[d_out], 0.0, ParamGroup::Model)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 2 {
            x.matmul(&self.weight)?
        } else {
            x.broadcast_matmul(&self.weight)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0, ParamGroup::Model)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0, ParamGroup::Model)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Last-dimension softmax with per-row max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Numerically safe logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.affine(0.5, 0.0)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Multi-head self-attention over `[B, T, D]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::argument(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, true)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let w = softmax_last(&scores)?;
        let y = w.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.o.forward(&y)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), width, ff, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, width, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.silu()?;
        Ok((&x + self.ff2.forward(&h)?)?)
    }
}

/// Sinusoidal position signal `[T, D]`.
pub fn sinusoidal_positions(t: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            v[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    tensor_from_f64(v, &[t, d], dtype)
}

/// 2-D convolution over `[B, C, H, W]` with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std, ParamGroup::Model)?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0, ParamGroup::Model)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Adam moments for a single parameter.
#[derive(Debug, Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counts so that parameter groups can be
/// stepped independently.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Update every parameter accepted by `active` that received a gradient.
    /// Non-finite gradients abort the step before anything is written.
    pub fn step<F>(&mut self, store: &ParamStore, grads: &GradStore, active: F) -> Result<()>
    where
        F: Fn(&str, ParamGroup) -> bool,
    {
        let mut updates = Vec::new();
        for (name, p) in store.iter() {
            if p.group == ParamGroup::Frozen || !active(name, p.group) {
                continue;
            }
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let gsum = scalar_f64(&g.sqr()?.sum_all()?)?;
            if !gsum.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for `{name}`")));
            }
            // Detached so that moments do not keep the step's graph alive.
            updates.push((name.clone(), p, g.detach()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, p, g) in updates {
            let slot = match self.slots.remove(&name) {
                Some(s) => s,
                None => AdamSlot {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = slot.steps + 1;
            let m = ((slot.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let mhat = (&m / (1.0 - beta1.powi(steps as i32)))?;
            let vhat = (&v / (1.0 - beta2.powi(steps as i32)))?;
            let delta = (mhat / (vhat.sqrt()? + eps)?)?;
            let next = (p.var.as_tensor().detach() - (delta * lr)?)?;
            p.var.set(&next)?;
            self.slots.insert(name, AdamSlot { m, v, steps });
        }
        Ok(())
    }

    pub fn state_snapshot(&self) -> Result<Vec<AdamSlotSnapshot>> {
        self.slots
            .iter()
            .map(|(name, s)| {
                Ok(AdamSlotSnapshot {
                    name: name.clone(),
                    shape: s.m.dims().to_vec(),
                    steps: s.steps,
                    m: to_f32_vec(&s.m)?,
                    v: to_f32_vec(&s.v)?,
                })
            })
            .collect()
    }

    pub fn load_state(&mut self, slots: Vec<AdamSlotSnapshot>, dtype: DType) -> Result<()> {
        self.slots.clear();
        for s in slots {
            self.slots.insert(
                s.name,
                AdamSlot {
                    m: tensor_from_f32(s.m, &s.shape, dtype)?,
                    v: tensor_from_f32(s.v, &s.shape, dtype)?,
                    steps: s.steps,
                },
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlotSnapshot {
    pub name: String,
    pub shape: Vec<usize>,
    pub steps: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Serializable ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::integrity("rng", e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::integrity("rng", "seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::integrity("rng", "bad word position"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    optimizer: AdamConfig,
    steps: Vec<(String, u64)>,
    m: BlobEntry,
    v: BlobEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    rng: Option<RngState>,
    params: BlobEntry,
    optimizers: Vec<OptimizerEntry>,
}

/// Everything needed to resume a model: parameters, optimizer moments, RNG
/// position, plus free-form architecture config and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub rng: Option<RngState>,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub optimizers: Vec<(String, AdamConfig, Vec<AdamSlotSnapshot>)>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        storage::ensure_dir(dir)?;
        let mut pb = BlobBuilder::new("params.f32");
        for (name, (shape, values)) in &self.params {
            pb.push(name.clone(), shape, values)?;
        }
        let params = pb.write(dir)?;
        let mut optimizers = Vec::new();
        for (name, cfg, slots) in &self.optimizers {
            let mut mb = BlobBuilder::new(format!("{name}.adam_m.f32"));
            let mut vb = BlobBuilder::new(format!("{name}.adam_v.f32"));
            let mut steps = Vec::new();
            for s in slots {
                mb.push(s.name.clone(), &s.shape, &s.m)?;
                vb.push(s.name.clone(), &s.shape, &s.v)?;
                steps.push((s.name.clone(), s.steps));
            }
            optimizers.push(OptimizerEntry {
                name: name.clone(),
                optimizer: *cfg,
                steps,
                m: mb.write(dir)?,
                v: vb.write(dir)?,
            });
        }
        let manifest = CheckpointManifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            rng: self.rng.clone(),
            params,
            optimizers,
        };
        storage::write_json(&dir.join("checkpoint.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CheckpointManifest = storage::read_json(&dir.join("checkpoint.json"))?;
        let pc = storage::read_blob(dir, &m.params)?;
        let mut params = BTreeMap::new();
        for slot in pc.tensors() {
            let (shape, data) = pc.get(&slot.name)?;
            params.insert(slot.name.clone(), (shape.to_vec(), data.to_vec()));
        }
        let mut optimizers = Vec::new();
        for o in m.optimizers {
            let mc = storage::read_blob(dir, &o.m)?;
            let vc = storage::read_blob(dir, &o.v)?;
            let mut slots = Vec::new();
            for (name, steps) in o.steps {
                let (shape, mdata) = mc.get(&name)?;
                let vdata = vc.get_shaped(&name, shape)?;
                slots.push(AdamSlotSnapshot {
                    name,
                    shape: shape.to_vec(),
                    steps,
                    m: mdata.to_vec(),
                    v: vdata.to_vec(),
                });
            }
            optimizers.push((o.name, o.optimizer, slots));
        }
        Ok(Self {
            kind: m.kind,
            config: m.config,
            meta: m.meta,
            rng: m.rng,
            params,
            optimizers,
        })
    }
}
