//! Audio-to-expression sequence model with a key-value memory between the
//! encoder and the decoder: `α̂ = f_dec(Q + attn(Q, K, V))`, `Q = f_enc(A)`.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_harness;
use crate::face_model::{self, BlendshapeBasis, FaceCoefficients, MouthVertexSet};
use crate::memory_attention::{
    self, AttentionDims, AttentionParams, ImplicitMemoryBank, SimKind, IMPLICIT_INIT_STD,
};
use crate::nn::{self, Adam, AdamConfig, Checkpoint, LayerNorm, Linear, ParamGroup, ParamStore, RngState, TransformerBlock};
use crate::synth_data::{Dataset, SampleRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    /// `[T, h_a]`
    pub features: Array2<f32>,
    pub frame_rate: f64,
}

impl AudioFeatureSequence {
    pub fn new(features: Array2<f32>, frame_rate: f64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::argument("audio sequence is empty"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("audio features contain non-finite values"));
        }
        Ok(Self { features, frame_rate })
    }

    pub fn from_records(records: &[&SampleRecord], frame_rate: f64) -> Result<Self> {
        let h_a = records.first().map(|r| r.audio.len()).unwrap_or(0);
        let mut f = Array2::zeros((records.len(), h_a));
        for (i, r) in records.iter().enumerate() {
            f.row_mut(i).assign(&r.audio);
        }
        Self::new(f, frame_rate)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSequence {
    /// `[T, h_c]`
    pub coeffs: Array2<f64>,
}

/// Which memory sits between encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A2EMemory {
    None,
    /// Trainable `[M, D]` keys and values.
    #[default]
    Implicit,
    /// Fixed (audio feature, expression) pairs taken from training frames.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2EConfig {
    pub h_a: usize,
    pub h_c: usize,
    /// Encoder output width `D`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub memory: A2EMemory,
    /// Number of memory slots (`M` for implicit, pair count for explicit).
    pub m: usize,
    pub init_std: f64,
    pub sim_kind: SimKind,
    pub seed: u64,
    pub memory_seed: u64,
}

impl Default for A2EConfig {
    fn default() -> Self {
        Self {
            h_a: 64,
            h_c: 85,
            width: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            memory: A2EMemory::Implicit,
            m: 64,
            init_std: IMPLICIT_INIT_STD,
            sim_kind: SimKind::Dot,
            seed: 0,
            memory_seed: 1,
        }
    }
}

impl A2EConfig {
    /// Reference memory size.
    pub const REFERENCE_M: usize = 1000;
}

#[derive(Debug, Clone)]
pub struct MemoryModule {
    pub keys: Tensor,
    pub values: Tensor,
    pub params: AttentionParams,
}

#[derive(Debug)]
pub struct A2EModel {
    pub config: A2EConfig,
    pub store: ParamStore,
    enc_in: Linear,
    enc_blocks: Vec<TransformerBlock>,
    enc_ln: LayerNorm,
    dec_blocks: Vec<TransformerBlock>,
    dec_ln: LayerNorm,
    dec_out: Linear,
    pub memory: Option<MemoryModule>,
}

pub const MEM_KEYS: &str = "mem.keys";
pub const MEM_VALUES: &str = "mem.values";
pub const MEM_W_O: &str = "mem.attn.w_o";

impl A2EModel {
    /// Encoder and decoder weights depend only on `seed` and the
    /// architecture, so the variants share them exactly.
    pub fn new(config: A2EConfig, dtype: DType) -> Result<Self> {
        let c = &config;
        if c.width == 0 || c.layers == 0 || c.h_a == 0 || c.h_c == 0 {
            return Err(Error::argument("a2e dimensions must be positive"));
        }
        if c.memory != A2EMemory::None && c.m < 2 {
            return Err(Error::argument("memory needs at least two slots"));
        }
        let mut store = ParamStore::new(dtype, c.seed);
        let enc_in = Linear::new(&mut store, "enc.in", c.h_a, c.width, true)?;
        let enc_blocks = (0..c.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("enc.block{i}"), c.width, c.heads, c.ff))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(&mut store, "enc.ln", c.width)?;
        let dec_blocks = (0..c.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("dec.block{i}"), c.width, c.heads, c.ff))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(&mut store, "dec.ln", c.width)?;
        let dec_out = Linear::new(&mut store, "dec.out", c.width, c.h_c, true)?;
        let memory = match c.memory {
            A2EMemory::None => None,
            A2EMemory::Implicit => {
                let bank = ImplicitMemoryBank::register(&mut store, "mem", c.m, c.width, c.init_std, c.memory_seed)?;
                let dims = AttentionDims {
                    d_q: c.width,
                    d_k: c.width,
                    d_v: c.width,
                    hidden: c.width,
                    h_out: c.width,
                    d_out: c.width,
                };
                let params = AttentionParams::register(&mut store, "mem.attn", dims, c.sim_kind)?;
                Some(MemoryModule { keys: bank.keys, values: bank.values, params })
            }
            A2EMemory::Explicit => {
                let keys = store.constant(MEM_KEYS, &[c.m, c.h_a], 0.0, ParamGroup::Frozen)?;
                let values = store.constant(MEM_VALUES, &[c.m, c.h_c], 0.0, ParamGroup::Frozen)?;
                let dims = AttentionDims {
                    d_q: c.width,
                    d_k: c.h_a,
                    d_v: c.h_c,
                    hidden: c.width,
                    h_out: c.width,
                    d_out: c.width,
                };
                let params = AttentionParams::register(&mut store, "mem.attn", dims, c.sim_kind)?;
                Some(MemoryModule { keys, values, params })
            }
        };
        Ok(Self {
            config,
            store,
            enc_in,
            enc_blocks,
            enc_ln,
            dec_blocks,
            dec_ln,
            dec_out,
            memory,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `Q = f_enc(A)` for `[B, T, h_a]` input.
    pub fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        let (_, t, h_a) = audio.dims3()?;
        if h_a != self.config.h_a {
            return Err(Error::argument(format!(
                "audio width {h_a} does not match model h_a {}",
                self.config.h_a
            )));
        }
        let pe = nn::sinusoidal_positions(t, self.config.width, self.dtype())?;
        let mut x = self.enc_in.forward(audio)?.broadcast_add(&pe)?;
        for b in &self.enc_blocks {
            x = b.forward(&x)?;
        }
        self.enc_ln.forward(&x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for b in &self.dec_blocks {
            x = b.forward(&x)?;
        }
        self.dec_out.forward(&self.dec_ln.forward(&x)?)
    }

    /// Memory readout for `[B, T, D]` queries, flattened per frame.
    pub fn memory_readout(&self, q: &Tensor) -> Result<Option<Tensor>> {
        let Some(m) = &self.memory else {
            return Ok(None);
        };
        let (b, t, d) = q.dims3()?;
        let flat = q.reshape((b * t, d))?;
        let a = memory_attention::attend(&flat, &m.keys, &m.values, &m.params)?;
        Ok(Some(a.reshape((b, t, d))?))
    }

    /// `[B, T, h_a] → [B, T, h_c]`.
    pub fn forward(&self, audio: &Tensor) -> Result<Tensor> {
        let q = self.encode(audio)?;
        let z = match self.memory_readout(&q)? {
            Some(a) => (q + a)?,
            None => q,
        };
        self.decode(&z)
    }

    pub fn predict_expressions(&self, audio: &AudioFeatureSequence) -> Result<ExpressionSequence> {
        let (t, h_a) = audio.features.dim();
        if h_a != self.config.h_a {
            return Err(Error::argument(format!(
                "audio width {h_a} does not match model h_a {}",
                self.config.h_a
            )));
        }
        let x = nn::tensor_from_f32(audio.features.iter().copied().collect(), &[1, t, h_a], self.dtype())?;
        let y = self.forward(&x)?;
        let v = nn::to_f64_vec(&y)?;
        Ok(ExpressionSequence {
            coeffs: Array2::from_shape_vec((t, self.config.h_c), v).expect("forward shape"),
        })
    }

    /// Load (audio, expression) pairs into an explicit-memory model.
    pub fn set_explicit_pairs(&self, audio: &Array2<f32>, exp: &Array2<f64>) -> Result<()> {
        if self.config.memory != A2EMemory::Explicit {
            return Err(Error::argument("model has no explicit memory"));
        }
        let m = self.config.m;
        if audio.dim() != (m, self.config.h_a) || exp.dim() != (m, self.config.h_c) {
            return Err(Error::argument(format!(
                "explicit pairs have shapes {:?}/{:?}, expected [{m}, {}]/[{m}, {}]",
                audio.dim(),
                exp.dim(),
                self.config.h_a,
                self.config.h_c
            )));
        }
        self.store.assign_f64(MEM_KEYS, audio.iter().map(|&v| v as f64).collect())?;
        self.store.assign_f64(MEM_VALUES, exp.iter().copied().collect())?;
        Ok(())
    }

    /// Overwrite the memory output projection `W_O` with zeros.
    pub fn zero_output_projection(&self) -> Result<()> {
        let n = self.store.values_f64(MEM_W_O)?.len();
        self.store.assign_f64(MEM_W_O, vec![0.0; n])
    }

    pub fn has_trainable_memory(&self) -> bool {
        self.store.iter().any(|(_, p)| p.group == ParamGroup::Memory)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "a2e".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            meta: serde_json::Value::Null,
            rng: None,
            params: self.store.snapshot()?,
            optimizers: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        if ckpt.kind != "a2e" {
            return Err(Error::Manifest {
                path: "checkpoint.json".into(),
                reason: format!("expected an a2e checkpoint, found `{}`", ckpt.kind),
            });
        }
        let config: A2EConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("a2e config: {e}")))?;
        let model = Self::new(config, dtype)?;
        model.store.load_snapshot(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?, dtype)
    }
}

/// Pick `m` training frames as explicit (audio, expression) pairs.
pub fn select_explicit_pairs(ds: &Dataset, m: usize, seed: u64) -> Result<(Array2<f32>, Array2<f64>)> {
    if m > ds.len() {
        return Err(Error::argument(format!(
            "requested {m} explicit pairs from {} frames",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.len(), m).into_vec();
    idx.sort_unstable();
    let h_a = ds.config.h_a;
    let h_c = ds.config.h_c;
    let mut a = Array2::zeros((m, h_a));
    let mut e = Array2::zeros((m, h_c));
    for (row, &i) in idx.iter().enumerate() {
        a.row_mut(row).assign(&ds.records[i].audio);
        e.row_mut(row).assign(&ds.records[i].exp);
    }
    Ok((a, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2ELossWeights {
    pub cof: f64,
    pub vtx: f64,
    pub reg: f64,
}

impl Default for A2ELossWeights {
    fn default() -> Self {
        Self { cof: 1.0, vtx: 1.0, reg: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A2ELossReport {
    pub l_cof: f64,
    pub l_vtx: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambdas: A2ELossWeights,
}

impl A2ELossReport {
    fn new(l_cof: f64, l_vtx: f64, l_reg: f64, lambdas: A2ELossWeights) -> Self {
        Self {
            l_cof,
            l_vtx,
            l_reg,
            total: lambdas.cof * l_cof + lambdas.vtx * l_vtx + lambdas.reg * l_reg,
            lambdas,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_cof.is_finite() && self.l_vtx.is_finite() && self.l_reg.is_finite() && self.total.is_finite()
    }
}

pub struct A2ELoss {
    pub total: Tensor,
    pub report: A2ELossReport,
}

/// Per-row Euclidean norm that stays differentiable at zero.
pub fn row_norms(x: &Tensor) -> Result<Tensor> {
    let s = x.sqr()?.sum_keepdim(1)?;
    Ok((&s / (&s + 1e-30)?.sqrt()?)?)
}

/// Mouth-geometry inputs shared by every batch of one basis.
#[derive(Debug, Clone)]
pub struct MouthGeometry {
    /// `[h_c, h_v * 3]`
    pub exp_rows: Tensor,
    pub h_v: usize,
}

impl MouthGeometry {
    pub fn new(basis: &BlendshapeBasis, dtype: DType) -> Result<Self> {
        let rows = basis.mouth_exp_rows();
        let (h_c, n) = rows.dim();
        Ok(Self {
            exp_rows: nn::tensor_from_f64(rows.into_raw_vec_and_offset().0, &[h_c, n], dtype)?,
            h_v: basis.h_v(),
        })
    }
}

/// One training batch of `B` windows of length `T`.
#[derive(Debug, Clone)]
pub struct A2EBatch {
    /// `[B, T, h_a]`
    pub audio: Tensor,
    /// `[B, T, h_c]`
    pub exp: Tensor,
    /// Ground-truth posed mouth vertices `[B·T, h_v·3]`.
    pub vertices: Tensor,
    /// Neutral (identity-only) mouth `[B·T, h_v·3]`.
    pub neutral: Tensor,
    /// Transposed rotations `[B·T, 3, 3]`.
    pub rot_t: Tensor,
    /// Translations `[B·T, 1, 3]`.
    pub trans: Tensor,
}

/// Host-side per-frame arrays for fast batch assembly.
#[derive(Debug, Clone)]
pub struct FrameTable {
    pub h_a: usize,
    pub h_c: usize,
    pub h_v: usize,
    audio: Vec<f32>,
    exp: Vec<f64>,
    vertices: Vec<f64>,
    neutral: Vec<f64>,
    rot_t: Vec<f64>,
    trans: Vec<f64>,
}

impl FrameTable {
    pub fn new(ds: &Dataset, basis: &BlendshapeBasis) -> Result<Self> {
        let neutral = basis.mouth_neutral(&ds.identity.alpha_id())?;
        let h_v = basis.h_v();
        let mut t = Self {
            h_a: ds.config.h_a,
            h_c: ds.config.h_c,
            h_v,
            audio: Vec::new(),
            exp: Vec::new(),
            vertices: Vec::new(),
            neutral: neutral.iter().copied().collect(),
            rot_t: Vec::new(),
            trans: Vec::new(),
        };
        for r in &ds.records {
            t.audio.extend(r.audio.iter());
            t.exp.extend(r.exp.iter());
            t.vertices.extend(r.mouth_vertices.coords.iter());
            let rot = face_model::rotation_matrix(r.pose[0], r.pose[1], r.pose[2]);
            for i in 0..3 {
                t.rot_t.extend(rot.iter().map(|row| row[i]));
            }
            t.trans.extend(&r.pose[3..6]);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.exp.len() / self.h_c.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch from windows of frame indices, all of equal length.
    pub fn batch(&self, windows: &[Vec<usize>], dtype: DType) -> Result<A2EBatch> {
        let b = windows.len();
        let t = windows.first().map(|w| w.len()).unwrap_or(0);
        if b == 0 || t == 0 || windows.iter().any(|w| w.len() != t) {
            return Err(Error::argument("batch windows must be nonempty and of equal length"));
        }
        let n3 = self.h_v * 3;
        let (mut audio, mut exp, mut verts, mut neutral, mut rot, mut trans) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for w in windows {
            for &f in w {
                audio.extend_from_slice(&self.audio[f * self.h_a..(f + 1) * self.h_a]);
                exp.extend_from_slice(&self.exp[f * self.h_c..(f + 1) * self.h_c]);
                verts.extend_from_slice(&self.vertices[f * n3..(f + 1) * n3]);
                neutral.extend_from_slice(&self.neutral);
                rot.extend_from_slice(&self.rot_t[f * 9..(f + 1) * 9]);
                trans.extend_from_slice(&self.trans[f * 3..(f + 1) * 3]);
            }
        }
        let bt = b * t;
        Ok(A2EBatch {
            audio: nn::tensor_from_f32(audio, &[b, t, self.h_a], dtype)?,
            exp: nn::tensor_from_f64(exp, &[b, t, self.h_c], dtype)?,
            vertices: nn::tensor_from_f64(verts, &[bt, n3], dtype)?,
            neutral: nn::tensor_from_f64(neutral, &[bt, n3], dtype)?,
            rot_t: nn::tensor_from_f64(rot, &[bt, 3, 3], dtype)?,
            trans: nn::tensor_from_f64(trans, &[bt, 1, 3], dtype)?,
        })
    }
}

/// Regularizer `(corr(K) + corr(V)) / (M (M − 1))`.
pub fn memory_regularizer(keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    let m = keys.dims()[0] as f64;
    let c = (memory_attention::pairwise_cosine_corr(keys)? + memory_attention::pairwise_cosine_corr(values)?)?;
    Ok((c / (m * (m - 1.0)))?)
}

/// Loss terms for given predictions `[B, T, h_c]`; `bank` supplies the
/// regularized keys and values when present.
pub fn a2e_loss_from_prediction(
    pred: &Tensor,
    batch: &A2EBatch,
    geometry: &MouthGeometry,
    bank: Option<(&Tensor, &Tensor)>,
    weights: A2ELossWeights,
) -> Result<A2ELoss> {
    let (b, t, h_c) = pred.dims3()?;
    if batch.exp.dims() != pred.dims() {
        return Err(Error::argument(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.dims(),
            batch.exp.dims()
        )));
    }
    let bt = b * t;
    let pred2 = pred.reshape((bt, h_c))?;
    let gt2 = batch.exp.reshape((bt, h_c))?;
    let l_cof = row_norms(&(&pred2 - &gt2)?)?.mean_all()?;

    let n3 = geometry.h_v * 3;
    let flat = (pred2.matmul(&geometry.exp_rows)? + &batch.neutral)?;
    let posed = flat
        .reshape((bt, geometry.h_v, 3))?
        .matmul(&batch.rot_t)?
        .broadcast_add(&batch.trans)?
        .reshape((bt, n3))?;
    let l_vtx = row_norms(&(posed - &batch.vertices)?)?.mean_all()?;

    let l_reg = match bank {
        Some((k, v)) => memory_regularizer(k, v)?,
        None => l_cof.zeros_like()?,
    };
    let total = ((&l_cof * weights.cof)? + (&l_vtx * weights.vtx)?)?;
    let total = (total + (&l_reg * weights.reg)?)?;
    let report = A2ELossReport::new(
        nn::scalar_f64(&l_cof)?,
        nn::scalar_f64(&l_vtx)?,
        nn::scalar_f64(&l_reg)?,
        weights,
    );
    Ok(A2ELoss { total, report })
}

pub fn a2e_loss(model: &A2EModel, batch: &A2EBatch, geometry: &MouthGeometry, weights: A2ELossWeights) -> Result<A2ELoss> {
    let pred = model.forward(&batch.audio)?;
    let bank = match (&model.memory, model.config.memory) {
        (Some(m), A2EMemory::Implicit) => Some((&m.keys, &m.values)),
        _ => None,
    };
    a2e_loss_from_prediction(&pred, batch, geometry, bank, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct A2ETrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    pub window_stride: usize,
    pub weights: A2ELossWeights,
    /// Alternate model/memory updates during the first half of training.
    pub alternate: bool,
    /// Lengthen alternating runs so the model group gets `epochs` epochs'
    /// worth of updates, the same as a memoryless run.
    pub equal_model_updates: bool,
    pub seed: u64,
}

impl Default for A2ETrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            window: 20,
            window_stride: 5,
            weights: A2ELossWeights::default(),
            alternate: true,
            equal_model_updates: true,
            seed: 0,
        }
    }
}

impl A2ETrainConfig {
    /// Fine-tuning defaults for a new speaker.
    pub fn adaptation() -> Self {
        Self {
            lr: 5e-6,
            epochs: 200,
            ..Self::default()
        }
    }

    /// Epochs actually run. Alternating over the first half of `E'` epochs
    /// gives `3E'/4` epochs of model updates, so `E' = 4E/3`.
    pub fn scheduled_epochs(&self, has_memory: bool) -> usize {
        if self.alternate && self.equal_model_updates && has_memory {
            (4 * self.epochs).div_ceil(3)
        } else {
            self.epochs
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 || self.window_stride == 0 {
            return Err(Error::argument("batch_size, window and window_stride must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::argument(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Fixed-length windows inside each sequence. Sequences shorter than
/// `window` shrink the common window length to the shortest sequence.
pub fn make_windows(ds: &Dataset, window: usize, stride: usize) -> Vec<Vec<usize>> {
    let mut index_of = std::collections::HashMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        index_of.insert((r.sequence_id, r.frame_id), i);
    }
    let seqs: Vec<Vec<usize>> = ds
        .sequences()
        .into_iter()
        .map(|s| s.iter().map(|r| index_of[&(r.sequence_id, r.frame_id)]).collect())
        .collect();
    let t = seqs.iter().map(|s| s.len()).min().unwrap_or(0).min(window);
    let mut out = Vec::new();
    if t == 0 {
        return out;
    }
    for s in &seqs {
        let last = s.len() - t;
        let mut start = 0;
        loop {
            out.push(s[start..start + t].to_vec());
            if start == last {
                break;
            }
            start = (start + stride).min(last);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub l_cof: f64,
    pub l_vtx: f64,
    pub l_reg: f64,
    pub total: f64,
    pub heldout_rmse: Option<f64>,
}

/// Model plus optimizer, RNG and schedule position.
#[derive(Debug)]
pub struct A2ETrainState {
    pub model: A2EModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub global_step: usize,
    pub epochs_done: usize,
    pub train_config: A2ETrainConfig,
}

impl A2ETrainState {
    pub fn new(model: A2EModel, train_config: A2ETrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        let adam = Adam::new(AdamConfig { lr: train_config.lr, ..AdamConfig::default() });
        Self {
            model,
            adam,
            rng,
            global_step: 0,
            epochs_done: 0,
            train_config,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint()?;
        c.meta = serde_json::json!({
            "global_step": self.global_step,
            "epochs_done": self.epochs_done,
            "train_config": self.train_config,
        });
        c.rng = Some(RngState::capture(&self.rng));
        c.optimizers = vec![("adam".into(), self.adam.config, self.adam.state_snapshot()?)];
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let model = A2EModel::from_checkpoint(ckpt, dtype)?;
        let meta = |k: &str| ckpt.meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let train_config: A2ETrainConfig = serde_json::from_value(meta("train_config"))
            .map_err(|e| Error::Config(format!("train config in checkpoint: {e}")))?;
        let mut state = Self::new(model, train_config);
        state.global_step = meta("global_step").as_u64().unwrap_or(0) as usize;
        state.epochs_done = meta("epochs_done").as_u64().unwrap_or(0) as usize;
        if let Some(r) = &ckpt.rng {
            state.rng = r.restore()?;
        }
        if let Some((_, cfg, slots)) = ckpt.optimizers.iter().find(|(n, _, _)| n == "adam") {
            state.adam = Adam::new(*cfg);
            state.adam.load_state(slots.clone(), dtype)?;
        }
        Ok(state)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?, dtype)
    }
}

/// Which parameter group a step updates.
pub fn active_group(cfg: &A2ETrainConfig, has_memory: bool, epoch: usize, step: usize) -> Option<ParamGroup> {
    if cfg.alternate && has_memory && epoch < cfg.scheduled_epochs(has_memory) / 2 {
        Some(if step.is_multiple_of(2) { ParamGroup::Model } else { ParamGroup::Memory })
    } else {
        None
    }
}

/// Run the remaining epochs of `state.train_config`.
pub fn train_a2e(state: &mut A2ETrainState, train: &Dataset, heldout: Option<&Dataset>) -> Result<Vec<EpochMetrics>> {
    train_a2e_until(state, train, heldout, usize::MAX)
}

/// Like [`train_a2e`] but stops after epoch `stop - 1`; the schedule still
/// follows the configured epoch count.
pub fn train_a2e_until(
    state: &mut A2ETrainState,
    train: &Dataset,
    heldout: Option<&Dataset>,
    stop: usize,
) -> Result<Vec<EpochMetrics>> {
    let cfg = state.train_config.clone();
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::argument("training dataset is empty"));
    }
    let basis = train.basis()?;
    let dtype = state.model.dtype();
    let geometry = MouthGeometry::new(&basis, dtype)?;
    let table = FrameTable::new(train, &basis)?;
    let windows = make_windows(train, cfg.window, cfg.window_stride);
    let has_memory = state.model.has_trainable_memory();
    state.adam.config.lr = cfg.lr;
    let mut trace = Vec::new();
    for epoch in state.epochs_done..cfg.scheduled_epochs(has_memory).min(stop) {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let ws: Vec<Vec<usize>> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let batch = table.batch(&ws, dtype)?;
            let loss = a2e_loss(&state.model, &batch, &geometry, cfg.weights)?;
            if !loss.report.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite a2e loss at epoch {epoch}, step {}: {:?}",
                    state.global_step, loss.report
                )));
            }
            let grads = loss.total.backward()?;
            let group = active_group(&cfg, has_memory, epoch, state.global_step);
            state
                .adam
                .step(&state.model.store, &grads, |_, g| group.is_none_or(|a| a == g))?;
            state.global_step += 1;
            steps += 1;
            let r = loss.report;
            for (s, v) in sums.iter_mut().zip([r.l_cof, r.l_vtx, r.l_reg, r.total]) {
                *s += v;
            }
        }
        state.epochs_done = epoch + 1;
        let n = steps.max(1) as f64;
        let heldout_rmse = match heldout {
            Some(h) if !h.is_empty() => Some(heldout_vertex_rmse(&state.model, h)?),
            _ => None,
        };
        log::debug!("a2e epoch {epoch}: total {:.5} heldout {:?}", sums[3] / n, heldout_rmse);
        trace.push(EpochMetrics {
            epoch,
            steps,
            l_cof: sums[0] / n,
            l_vtx: sums[1] / n,
            l_reg: sums[2] / n,
            total: sums[3] / n,
            heldout_rmse,
        });
    }
    Ok(trace)
}

/// Fine-tune a pretrained model on a small dataset with a fresh optimizer.
pub fn adapt_a2e(
    model: A2EModel,
    small: &Dataset,
    heldout: Option<&Dataset>,
    cfg: A2ETrainConfig,
) -> Result<(A2ETrainState, Vec<EpochMetrics>)> {
    let mut state = A2ETrainState::new(model, cfg);
    let trace = train_a2e(&mut state, small, heldout)?;
    Ok((state, trace))
}

/// Predicted expressions for every record, running each sequence whole.
pub fn predict_dataset(model: &A2EModel, ds: &Dataset) -> Result<Vec<Array1<f64>>> {
    let mut by_frame = std::collections::HashMap::new();
    for seq in ds.sequences() {
        let audio = AudioFeatureSequence::from_records(&seq, 25.0)?;
        let pred = model.predict_expressions(&audio)?;
        for (r, row) in seq.iter().zip(pred.coeffs.rows()) {
            by_frame.insert((r.sequence_id, r.frame_id), row.to_owned());
        }
    }
    Ok(ds.records.iter().map(|r| by_frame[&(r.sequence_id, r.frame_id)].clone()).collect())
}

/// Predicted mouth vertices with ground-truth identity and pose.
pub fn predicted_vertices(ds: &Dataset, basis: &BlendshapeBasis, preds: &[Array1<f64>]) -> Result<Vec<MouthVertexSet>> {
    ds.records
        .iter()
        .zip(preds)
        .map(|(r, p)| {
            let coeffs = FaceCoefficients {
                alpha_id: ds.identity.alpha_id(),
                alpha_exp: p.clone(),
                alpha_pose: r.pose,
            };
            face_model::reconstruct_mouth(basis, &coeffs)
        })
        .collect()
}

pub fn heldout_vertex_rmse(model: &A2EModel, ds: &Dataset) -> Result<f64> {
    let basis = ds.basis()?;
    let preds = predict_dataset(model, ds)?;
    let pv = predicted_vertices(ds, &basis, &preds)?;
    let gt: Vec<MouthVertexSet> = ds.records.iter().map(|r| r.mouth_vertices.clone()).collect();
    eval_harness::vertex_rmse(&pv, &gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_identity, DatasetPlan, SynthConfig};

    fn tiny_cfg(memory: A2EMemory) -> A2EConfig {
        A2EConfig {
            h_a: 6,
            h_c: 5,
            width: 8,
            layers: 1,
            heads: 2,
            ff: 16,
            memory,
            m: 4,
            init_std: 0.5,
            ..A2EConfig::default()
        }
    }

    fn tiny_data(frames: usize) -> Dataset {
        let cfg = SynthConfig {
            h_a: 6,
            h_c: 5,
            h_v: 4,
            v_total: 12,
            h_id: 2,
            height: 32,
            width: 32,
            patch: 8,
            ..SynthConfig::default()
        };
        let id = generate_identity(1, &cfg).unwrap();
        Dataset::generate(&id, &cfg, DatasetPlan { sequences: 2, frames_per_sequence: frames, seed: 3 }).unwrap()
    }

    fn audio(t: usize, h_a: usize) -> AudioFeatureSequence {
        let f = Array2::from_shape_fn((t, h_a), |(i, j)| ((i * 7 + j * 3) % 5) as f32 * 0.3 - 0.6);
        AudioFeatureSequence::new(f, 25.0).unwrap()
    }

    #[test]
    fn zero_output_projection_matches_memoryless() {
        for kind in [A2EMemory::Implicit, A2EMemory::Explicit] {
            let with = A2EModel::new(tiny_cfg(kind), DType::F32).unwrap();
            let without = A2EModel::new(tiny_cfg(A2EMemory::None), DType::F32).unwrap();
            with.zero_output_projection().unwrap();
            let a = audio(7, 6);
            assert_eq!(with.predict_expressions(&a).unwrap(), without.predict_expressions(&a).unwrap());
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        assert!(matches!(m.predict_expressions(&audio(3, 5)), Err(Error::Argument(_))));
    }

    #[test]
    fn fresh_models_are_deterministic() {
        let a = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        let b = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        let x = audio(5, 6);
        let pa = a.predict_expressions(&x).unwrap();
        assert_eq!(pa, b.predict_expressions(&x).unwrap());
        assert_eq!(pa.coeffs.dim(), (5, 5));
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let ds = tiny_data(4);
        let basis = ds.basis().unwrap();
        let table = FrameTable::new(&ds, &basis).unwrap();
        let batch = table.batch(&[vec![0, 1, 2, 3]], DType::F64).unwrap();
        let geom = MouthGeometry::new(&basis, DType::F64).unwrap();
        let eye = memory_attention::identity(4, DType::F64).unwrap();
        let loss = a2e_loss_from_prediction(&batch.exp, &batch, &geom, Some((&eye, &eye)), A2ELossWeights::default()).unwrap();
        assert_eq!(loss.report.l_cof, 0.0);
        assert!(loss.report.l_vtx < 1e-6, "{}", loss.report.l_vtx);
        assert_eq!(loss.report.l_reg, 0.0);
        assert!(loss.report.total < 1e-6);
    }

    #[test]
    fn single_coefficient_error_with_zero_basis() {
        let dt = DType::F64;
        let geom = MouthGeometry { exp_rows: Tensor::zeros((3, 6), dt, &nn::DEVICE).unwrap(), h_v: 2 };
        let batch = A2EBatch {
            audio: Tensor::zeros((1, 1, 2), dt, &nn::DEVICE).unwrap(),
            exp: Tensor::zeros((1, 1, 3), dt, &nn::DEVICE).unwrap(),
            vertices: Tensor::zeros((1, 6), dt, &nn::DEVICE).unwrap(),
            neutral: Tensor::zeros((1, 6), dt, &nn::DEVICE).unwrap(),
            rot_t: memory_attention::identity(3, dt).unwrap().reshape((1, 3, 3)).unwrap(),
            trans: Tensor::zeros((1, 1, 3), dt, &nn::DEVICE).unwrap(),
        };
        let pred = Tensor::from_vec(vec![0.0f64, 2.0, 0.0], (1, 1, 3), &nn::DEVICE).unwrap();
        let r = a2e_loss_from_prediction(&pred, &batch, &geom, None, A2ELossWeights::default()).unwrap().report;
        assert!((r.l_cof - 2.0).abs() < 1e-12);
        assert_eq!(r.l_vtx, 0.0);
        assert_eq!(r.total, r.lambdas.cof * r.l_cof + r.lambdas.vtx * r.l_vtx + r.lambdas.reg * r.l_reg);
    }

    #[test]
    fn default_weights_and_rates() {
        let w = A2ELossWeights::default();
        assert_eq!((w.cof, w.vtx, w.reg), (1.0, 1.0, 0.1));
        assert_eq!(A2ETrainConfig::default().lr, 1e-4);
        let a = A2ETrainConfig::adaptation();
        assert_eq!((a.lr, a.epochs), (5e-6, 200));
        assert_eq!(A2EConfig::REFERENCE_M, 1000);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = tiny_data(3).take_frames(1);
        let model = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        let before = model.store.snapshot().unwrap();
        let cfg = A2ETrainConfig { lr: 0.0, epochs: 1, window: 1, ..A2ETrainConfig::default() };
        let scheduled = cfg.scheduled_epochs(true);
        let mut state = A2ETrainState::new(model, cfg);
        let trace = train_a2e(&mut state, &ds, None).unwrap();
        assert_eq!(trace.len(), scheduled);
        assert_eq!(state.model.store.snapshot().unwrap(), before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = tiny_data(3).take_frames(0);
        let model = A2EModel::new(tiny_cfg(A2EMemory::None), DType::F32).unwrap();
        let mut state = A2ETrainState::new(model, A2ETrainConfig::default());
        assert!(matches!(train_a2e(&mut state, &ds, None), Err(Error::Argument(_))));
    }

    #[test]
    fn alternating_schedule_freezes_inactive_group() {
        let ds = tiny_data(6);
        let model = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        let cfg = A2ETrainConfig {
            lr: 1e-2,
            epochs: 4,
            batch_size: 1,
            window: 6,
            equal_model_updates: false,
            ..A2ETrainConfig::default()
        };
        let mut state = A2ETrainState::new(model, cfg.clone());
        let split = |s: &A2ETrainState| {
            let snap = s.model.store.snapshot().unwrap();
            let (mem, rest): (Vec<_>, Vec<_>) = snap.into_iter().partition(|(k, _)| k == MEM_KEYS || k == MEM_VALUES);
            (mem, rest)
        };
        let (mem0, rest0) = split(&state);
        let cfg1 = A2ETrainConfig { epochs: 1, ..cfg.clone() };
        assert_eq!(active_group(&cfg, true, 0, 0), Some(ParamGroup::Model));
        assert_eq!(active_group(&cfg, true, 0, 1), Some(ParamGroup::Memory));
        assert_eq!(active_group(&cfg, true, 2, 5), None);
        assert_eq!(active_group(&cfg1, true, 0, 0), None);
        let eq = A2ETrainConfig { equal_model_updates: true, epochs: 150, ..cfg.clone() };
        assert_eq!(eq.scheduled_epochs(true), 200);
        assert_eq!(eq.scheduled_epochs(false), 150);
        assert_eq!(active_group(&eq, true, 99, 1), Some(ParamGroup::Memory));
        assert_eq!(active_group(&eq, true, 100, 1), None);
        let basis = ds.basis().unwrap();
        let table = FrameTable::new(&ds, &basis).unwrap();
        let geom = MouthGeometry::new(&basis, DType::F32).unwrap();
        let batch = table.batch(&[(0..6).collect()], DType::F32).unwrap();
        for step in 0..2 {
            let loss = a2e_loss(&state.model, &batch, &geom, cfg.weights).unwrap();
            let grads = loss.total.backward().unwrap();
            let g = active_group(&cfg, true, 0, step).unwrap();
            state.adam.step(&state.model.store, &grads, |_, pg| pg == g).unwrap();
            let (mem, rest) = split(&state);
            if step == 0 {
                assert_eq!(mem, mem0);
                assert_ne!(rest, rest0);
            } else {
                assert_ne!(mem, mem0);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let ds = tiny_data(6);
        let cfg = A2ETrainConfig { lr: 1e-2, epochs: 4, batch_size: 1, window: 4, window_stride: 2, ..A2ETrainConfig::default() };
        let mut a = A2ETrainState::new(A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap(), cfg.clone());
        let mut b = A2ETrainState::new(A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap(), cfg.clone());
        let full = train_a2e(&mut a, &ds, None).unwrap();

        let first = train_a2e_until(&mut b, &ds, None, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let mut c = A2ETrainState::load(dir.path(), DType::F32).unwrap();
        assert_eq!(c.model.store.snapshot().unwrap(), b.model.store.snapshot().unwrap());
        let second = train_a2e(&mut c, &ds, None).unwrap();
        let resumed: Vec<_> = first.into_iter().chain(second).collect();
        assert_eq!(resumed, full);
        assert_eq!(c.model.store.snapshot().unwrap(), a.model.store.snapshot().unwrap());
    }

    #[test]
    fn zero_epoch_adaptation_is_identity() {
        let ds = tiny_data(4);
        let model = A2EModel::new(tiny_cfg(A2EMemory::Implicit), DType::F32).unwrap();
        let before = model.store.snapshot().unwrap();
        let (state, trace) = adapt_a2e(model, &ds, None, A2ETrainConfig { epochs: 0, ..A2ETrainConfig::adaptation() }).unwrap();
        assert!(trace.is_empty());
        assert_eq!(state.model.store.snapshot().unwrap(), before);
    }

    #[test]
    fn windows_cover_sequences() {
        let ds = tiny_data(7);
        let w = make_windows(&ds, 4, 2);
        // starts 0, 2, 3 per sequence
        assert_eq!(w.len(), 6);
        assert_eq!(w[0], vec![0, 1, 2, 3]);
        assert_eq!(w[2], vec![3, 4, 5, 6]);
        assert!(w.iter().all(|x| x.len() == 4));
        assert_eq!(make_windows(&ds, 50, 5).len(), 2);
    }

    #[test]
    fn explicit_pairs_load() {
        let ds = tiny_data(4);
        let model = A2EModel::new(tiny_cfg(A2EMemory::Explicit), DType::F32).unwrap();
        let (a, e) = select_explicit_pairs(&ds, 4, 0).unwrap();
        model.set_explicit_pairs(&a, &e).unwrap();
        let mem = model.memory.as_ref().unwrap();
        assert_eq!(nn::to_f64_vec(&mem.values).unwrap(), e.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>());
        assert!(select_explicit_pairs(&ds, 100, 0).is_err());
        assert!(!model.has_trainable_memory());
    }
}
