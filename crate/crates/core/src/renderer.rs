//! Skip-connected encoder/decoder that renders the mouth region from a guide
//! image and a masked template. An attention readout over stored
//! (vertex, patch) pairs is added to the bottleneck features.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explicit_memory::ExplicitMemoryBank;
use crate::face_model::{GuideImage, MouthVertexSet};
use crate::memory_attention::{self, KeyProjection, SimKind, IMPLICIT_INIT_STD};
use crate::nn::{self, Adam, AdamConfig, Checkpoint, Conv2d, ParamGroup, ParamStore, RngState};
use crate::synth_data::{mask_rect, Dataset, Image};

/// What sits between encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NrMemory {
    None,
    #[default]
    Explicit,
    /// Learned slots in feature space, for ablations.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub h_v: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub key_hidden: usize,
    pub memory: NrMemory,
    pub implicit_slots: usize,
    pub init_std: f64,
    pub sim_kind: SimKind,
    pub seed: u64,
    pub memory_seed: u64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            patch: 16,
            h_v: 69,
            base_channels: 8,
            depth: 3,
            key_hidden: 32,
            memory: NrMemory::Explicit,
            implicit_slots: 64,
            init_std: IMPLICIT_INIT_STD,
            sim_kind: SimKind::Dot,
            seed: 0,
            memory_seed: 1,
        }
    }
}

impl RendererConfig {
    /// Channel width at encoder level `l`.
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l.min(2)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.level_channels(self.depth)
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    pub fn key_width(&self) -> usize {
        self.h_v * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.channels == 0 || self.h_v == 0 || self.key_hidden == 0 {
            return Err(Error::argument("renderer dimensions must be positive"));
        }
        let f = 1usize << self.depth;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::argument(format!(
                "image {}x{} is not divisible by 2^depth = {f}",
                self.height, self.width
            )));
        }
        if self.patch == 0 {
            return Err(Error::argument("patch size must be positive"));
        }
        value_encoder_plan(self.patch, self.bottleneck_size())?;
        if self.memory == NrMemory::Implicit && self.implicit_slots == 0 {
            return Err(Error::argument("implicit memory needs at least one slot"));
        }
        Ok(())
    }
}

/// Number of stride-2 stages taking a `patch × patch` map to at most the
/// bottleneck size, and the nearest-upsample factors applied afterwards.
fn value_encoder_plan(patch: usize, (th, tw): (usize, usize)) -> Result<(usize, (usize, usize))> {
    let mut s = patch;
    let mut downs = 0;
    while s > th.min(tw) && s.is_multiple_of(2) {
        s /= 2;
        downs += 1;
    }
    if th % s != 0 || tw % s != 0 {
        return Err(Error::argument(format!(
            "patch size {patch} cannot be mapped onto the {th}x{tw} bottleneck"
        )));
    }
    Ok((downs, (th / s, tw / s)))
}

/// Silu-activated convolution.
#[derive(Debug, Clone)]
struct ConvAct {
    conv: Conv2d,
}

impl ConvAct {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(store, name, c_in, c_out, 3, stride)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.silu()?)
    }
}

/// Patch → bottleneck-shaped feature map.
#[derive(Debug, Clone)]
pub struct ValueEncoder {
    stem: ConvAct,
    downs: Vec<ConvAct>,
    out: Conv2d,
    upsample: (usize, usize),
}

impl ValueEncoder {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for d in &self.downs {
            h = d.forward(&h)?;
        }
        let h = self.out.forward(&h)?;
        let (_, _, sh, sw) = h.dims4()?;
        Ok(if self.upsample == (1, 1) {
            h
        } else {
            h.upsample_nearest2d(sh * self.upsample.0, sw * self.upsample.1)?
        })
    }
}

/// Key-side normalization: `(x − mean) / scale`, shared by queries and keys.
#[derive(Debug, Clone)]
pub struct KeyNorm {
    pub mean: Tensor,
    pub scale: f64,
}

impl KeyNorm {
    /// Per-coordinate mean over the rows and one scalar RMS spread.
    pub fn fit(rows: &ndarray::Array2<f64>, dtype: DType) -> Result<Self> {
        let (n, d) = rows.dim();
        if n == 0 {
            return Err(Error::argument("cannot normalize an empty key set"));
        }
        let mean = rows.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let var = rows.rows().into_iter().map(|r| (&r - &mean).mapv(|x| x * x).sum()).sum::<f64>() / (n * d) as f64;
        Ok(Self {
            mean: nn::tensor_from_f64(mean.to_vec(), &[d], dtype)?,
            scale: var.sqrt().max(1e-6),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_sub(&self.mean)?.affine(1.0 / self.scale, 0.0)?)
    }
}

/// Bank tensors ready for the forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBank {
    pub keys: Tensor,
    /// Patches as `[N, C, P, P]`.
    pub patches: Tensor,
    pub norm: KeyNorm,
    pub identity_tag: String,
}

impl PreparedBank {
    pub fn new(bank: &ExplicitMemoryBank, config: &RendererConfig, dtype: DType) -> Result<Self> {
        if bank.n() == 0 {
            return Err(Error::argument("explicit memory bank is empty"));
        }
        let (p0, p1, c) = bank.patch_shape();
        if p0 != config.patch || p1 != config.patch || c != config.channels {
            return Err(Error::argument(format!(
                "bank patches are {p0}x{p1}x{c}, the value encoder expects {0}x{0}x{1}",
                config.patch, config.channels
            )));
        }
        if bank.h_v() != config.h_v {
            return Err(Error::argument(format!(
                "bank keys have {} vertices, the renderer expects {}",
                bank.h_v(),
                config.h_v
            )));
        }
        let km = bank.key_matrix();
        let norm = KeyNorm::fit(&km, dtype)?;
        let keys = norm.apply(&nn::tensor_from_f64(km.iter().copied().collect(), &[bank.n(), km.ncols()], dtype)?)?;
        let mut flat = Vec::with_capacity(bank.n() * c * p0 * p1);
        for pair in &bank.pairs {
            flat.extend(hwc_to_chw(&pair.value));
        }
        let patches = nn::tensor_from_f32(flat, &[bank.n(), c, p0, p1], dtype)?;
        Ok(Self {
            keys,
            patches,
            norm,
            identity_tag: bank.identity_tag.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.keys.dims()[0]
    }
}

/// Memory-side parameters.
#[derive(Debug, Clone)]
pub enum MemorySide {
    Explicit {
        key: KeyProjection,
        value_encoder: ValueEncoder,
        fuse: Tensor,
    },
    Implicit {
        key: KeyProjection,
        keys: Tensor,
        values: Tensor,
        fuse: Tensor,
    },
}

pub const FUSE_WEIGHT: &str = "mem.fuse.weight";
pub const QUERY_MEAN: &str = "mem.query_mean";
pub const QUERY_SCALE: &str = "mem.query_scale";

#[derive(Debug)]
pub struct RendererModel {
    pub config: RendererConfig,
    pub store: ParamStore,
    enc: Vec<ConvAct>,
    dec: Vec<ConvAct>,
    dec_out: Conv2d,
    pub memory: Option<MemorySide>,
}

/// Forward-pass products.
#[derive(Debug)]
pub struct RenderOutput {
    /// `[B, C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[B, N]` attention weights when a memory is attached.
    pub weights: Option<Tensor>,
}

impl RendererModel {
    /// The memoryless network is registered first, so variants built from
    /// the same seed share encoder and decoder weights exactly.
    pub fn new(config: RendererConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(dtype, c.seed);
        let mut enc = vec![ConvAct::new(&mut store, "enc.conv0", 1 + c.channels, c.level_channels(0), 1)?];
        for l in 1..=c.depth {
            enc.push(ConvAct::new(
                &mut store,
                &format!("enc.conv{l}"),
                c.level_channels(l - 1),
                c.level_channels(l),
                2,
            )?);
        }
        let mut dec = Vec::new();
        for l in (1..=c.depth).rev() {
            dec.push(ConvAct::new(
                &mut store,
                &format!("dec.conv{l}"),
                c.level_channels(l) + c.level_channels(l - 1),
                c.level_channels(l - 1),
                1,
            )?);
        }
        let dec_out = Conv2d::new(&mut store, "dec.out", c.level_channels(0), c.channels, 3, 1)?;
        let bc = c.bottleneck_channels();
        let kw = c.key_width();
        let memory = match c.memory {
            NrMemory::None => None,
            NrMemory::Explicit => {
                let key = register_keys(&mut store, kw, c.key_hidden, c.sim_kind)?;
                let (downs, upsample) = value_encoder_plan(c.patch, c.bottleneck_size())?;
                let stem = ConvAct::new(&mut store, "mem.value.stem", c.channels, c.base_channels, 1)?;
                let mut ch = c.base_channels;
                let mut down_layers = Vec::new();
                for i in 0..downs {
                    let next = (ch * 2).min(bc);
                    down_layers.push(ConvAct::new(&mut store, &format!("mem.value.down{i}"), ch, next, 2)?);
                    ch = next;
                }
                let out = Conv2d::new(&mut store, "mem.value.out", ch, bc, 3, 1)?;
                let fuse = register_fuse(&mut store, bc)?;
                Some(MemorySide::Explicit {
                    key,
                    value_encoder: ValueEncoder { stem, downs: down_layers, out, upsample },
                    fuse,
                })
            }
            NrMemory::Implicit => {
                let key = register_keys(&mut store, kw, c.key_hidden, c.sim_kind)?;
                let (th, tw) = c.bottleneck_size();
                let m = c.implicit_slots;
                let feat = bc * th * tw;
                let mut rng = ChaCha8Rng::seed_from_u64(c.memory_seed);
                let kv = nn::seeded_normal(&mut rng, m * kw, c.init_std);
                let vv = nn::seeded_normal(&mut rng, m * feat, c.init_std);
                let keys = store.constant("mem.keys", &[m, kw], 0.0, ParamGroup::Memory)?;
                let values = store.constant("mem.values", &[m, feat], 0.0, ParamGroup::Memory)?;
                store.assign_f64("mem.keys", kv)?;
                store.assign_f64("mem.values", vv)?;
                store.constant(QUERY_MEAN, &[kw], 0.0, ParamGroup::Frozen)?;
                store.constant(QUERY_SCALE, &[1], 1.0, ParamGroup::Frozen)?;
                let fuse = register_fuse(&mut store, bc)?;
                Some(MemorySide::Implicit { key, keys, values, fuse })
            }
        };
        Ok(Self {
            config,
            store,
            enc,
            dec,
            dec_out,
            memory,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Encoder levels, finest first; the last entry is the bottleneck `F`.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels: Vec<Tensor> = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            let input = levels.last().unwrap_or(x);
            levels.push(layer.forward(input)?);
        }
        Ok(levels)
    }

    /// Decode a bottleneck map using the encoder skips.
    pub fn decode(&self, bottleneck: &Tensor, levels: &[Tensor]) -> Result<Tensor> {
        let mut h = bottleneck.clone();
        for (i, layer) in self.dec.iter().enumerate() {
            let skip = &levels[self.config.depth - 1 - i];
            let (_, _, sh, sw) = skip.dims4()?;
            h = Tensor::cat(&[&h.upsample_nearest2d(sh, sw)?, skip], 1)?;
            h = layer.forward(&h)?;
        }
        nn::sigmoid(&self.dec_out.forward(&h)?)
    }

    /// Memory readout at bottleneck shape, and the attention weights.
    pub fn memory_readout(&self, query: &Tensor, bank: Option<&PreparedBank>) -> Result<Option<(Tensor, Tensor)>> {
        let (th, tw) = self.config.bottleneck_size();
        let bc = self.config.bottleneck_channels();
        let b = query.dims()[0];
        let (weights, mixed, fuse) = match &self.memory {
            None => return Ok(None),
            Some(MemorySide::Explicit { key, value_encoder, fuse }) => {
                let bank = bank.ok_or_else(|| Error::argument("this renderer needs an explicit memory bank"))?;
                let q = bank.norm.apply(query)?;
                let w = memory_attention::similarity(&q, &bank.keys, key)?;
                let v = value_encoder.forward(&bank.patches)?.reshape((bank.n(), bc * th * tw))?;
                (w.clone(), w.matmul(&v)?, fuse)
            }
            Some(MemorySide::Implicit { key, keys, values, fuse }) => {
                let mean = self.store.var(QUERY_MEAN)?.as_tensor();
                let scale = self.store.var(QUERY_SCALE)?.as_tensor();
                let q = query.broadcast_sub(mean)?.broadcast_div(scale)?;
                let w = memory_attention::similarity(&q, keys, key)?;
                (w.clone(), w.matmul(values)?, fuse)
            }
        };
        check_row_stochastic(&weights)?;
        let r = mixed.reshape((b, bc, th, tw))?;
        let fused = r.conv2d(fuse, 0, 1, 1, 1)?;
        Ok(Some((fused, weights)))
    }

    /// `input` is `[B, 1 + C, H, W]` (guide then template), `query` is `[B, h_v·3]`.
    pub fn forward(&self, input: &Tensor, query: &Tensor, bank: Option<&PreparedBank>) -> Result<RenderOutput> {
        let c = &self.config;
        let (b, ch, h, w) = input
            .dims4()
            .map_err(|_| Error::argument(format!("render input must be 4-D, got {:?}", input.dims())))?;
        if ch != 1 + c.channels || h != c.height || w != c.width {
            return Err(Error::argument(format!(
                "render input is {ch}x{h}x{w}, expected {}x{}x{}",
                1 + c.channels,
                c.height,
                c.width
            )));
        }
        if query.dims() != [b, c.key_width()] {
            return Err(Error::argument(format!(
                "query shape {:?} does not match batch {b} and key width {}",
                query.dims(),
                c.key_width()
            )));
        }
        let levels = self.encode(input)?;
        let f = levels.last().expect("depth >= 1");
        let (bottleneck, weights) = match self.memory_readout(query, bank)? {
            Some((fused, w)) => ((f + fused)?, Some(w)),
            None => (f.clone(), None),
        };
        let image = self.decode(&bottleneck, &levels)?;
        Ok(RenderOutput { image, weights })
    }

    /// Fit the implicit variant's query normalization to a vertex set.
    pub fn fit_query_normalization(&self, rows: &ndarray::Array2<f64>) -> Result<()> {
        if !matches!(self.memory, Some(MemorySide::Implicit { .. })) {
            return Ok(());
        }
        let norm = KeyNorm::fit(rows, DType::F64)?;
        self.store.assign_f64(QUERY_MEAN, nn::to_f64_vec(&norm.mean)?)?;
        self.store.assign_f64(QUERY_SCALE, vec![norm.scale])
    }

    pub fn zero_fuse_projection(&self) -> Result<()> {
        let v = self.store.var(FUSE_WEIGHT)?;
        v.set(&v.as_tensor().zeros_like()?)?;
        Ok(())
    }

    pub fn prepare_bank(&self, bank: &ExplicitMemoryBank) -> Result<PreparedBank> {
        PreparedBank::new(bank, &self.config, self.dtype())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "renderer".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            meta: serde_json::Value::Null,
            rng: None,
            params: self.store.snapshot()?,
            optimizers: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        expect_kind(ckpt, "renderer")?;
        let config: RendererConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("renderer config: {e}")))?;
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

/// Queries and keys are both vertex sets, so one projection serves as
/// `W_Q` and `W_K`; a stored key then scores highest against itself.
fn register_keys(store: &mut ParamStore, width: usize, hidden: usize, sim_kind: SimKind) -> Result<KeyProjection> {
    let w = store.normal("mem.w_qk", &[width, hidden], (1.0 / width as f64).sqrt(), ParamGroup::Model)?;
    KeyProjection::new(w.clone(), w, sim_kind)
}

fn register_fuse(store: &mut ParamStore, channels: usize) -> Result<Tensor> {
    store.normal(FUSE_WEIGHT, &[channels, channels, 1, 1], (1.0 / channels as f64).sqrt(), ParamGroup::Model)
}

fn check_row_stochastic(w: &Tensor) -> Result<()> {
    let sums = memory_attention::row_sums(w)?;
    if let Some(s) = sums.iter().find(|s| !((**s - 1.0).abs() < 1e-4)) {
        return Err(Error::numeric(format!("attention row sums to {s}")));
    }
    Ok(())
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Manifest {
            path: "checkpoint.json".into(),
            reason: format!("expected a {kind} checkpoint, found `{}`", ckpt.kind),
        });
    }
    Ok(())
}

pub fn hwc_to_chw(img: &Array3<f32>) -> Vec<f32> {
    let (h, w, c) = img.dim();
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(img[[y, x, ch]]);
            }
        }
    }
    out
}

/// `[C, H, W]` values back to an `[H, W, C]` image.
pub fn chw_to_hwc(values: &[f32], c: usize, h: usize, w: usize) -> Image {
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| values[(ch * h + y) * w + x])
}

/// Everything the renderer sees for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderInput {
    pub guide_image: GuideImage,
    pub masked_template: Image,
    pub query_vertices: MouthVertexSet,
}

impl RenderInput {
    pub fn from_record(r: &crate::synth_data::SampleRecord) -> Self {
        Self {
            guide_image: r.guide.clone(),
            masked_template: r.masked_template.clone(),
            query_vertices: r.mouth_vertices.clone(),
        }
    }

    pub fn validate(&self, config: &RendererConfig) -> Result<()> {
        let (h, w, c) = self.masked_template.dim();
        if self.guide_image.dim() != (h, w) {
            return Err(Error::argument(format!(
                "guide is {:?}, template is {h}x{w}",
                self.guide_image.dim()
            )));
        }
        if (h, w, c) != (config.height, config.width, config.channels) {
            return Err(Error::argument(format!(
                "template is {h}x{w}x{c}, renderer expects {}x{}x{}",
                config.height, config.width, config.channels
            )));
        }
        if self.query_vertices.h_v() != config.h_v {
            return Err(Error::argument(format!(
                "query has {} vertices, renderer expects {}",
                self.query_vertices.h_v(),
                config.h_v
            )));
        }
        let (r0, r1, c0, c1) = mask_rect(h, w);
        let unmasked = self
            .masked_template
            .slice(ndarray::s![r0..r1, c0..c1, ..])
            .iter()
            .any(|&x| x != 0.0);
        if unmasked {
            return Err(Error::argument("template is not zeroed inside the mask rectangle"));
        }
        Ok(())
    }

    fn push_input(&self, out: &mut Vec<f32>) {
        out.extend(self.guide_image.iter().copied());
        out.extend(hwc_to_chw(&self.masked_template));
    }
}

/// Stack inputs into `([B, 1 + C, H, W], [B, h_v·3])`.
pub fn stack_inputs(inputs: &[RenderInput], config: &RendererConfig, dtype: DType) -> Result<(Tensor, Tensor)> {
    if inputs.is_empty() {
        return Err(Error::argument("no frames to render"));
    }
    let mut x = Vec::new();
    let mut q = Vec::new();
    for i in inputs {
        i.validate(config)?;
        i.push_input(&mut x);
        q.extend(i.query_vertices.flatten());
    }
    let b = inputs.len();
    Ok((
        nn::tensor_from_f32(x, &[b, 1 + config.channels, config.height, config.width], dtype)?,
        nn::tensor_from_f64(q, &[b, config.key_width()], dtype)?,
    ))
}

/// Render a batch of frames.
pub fn render_batch(model: &RendererModel, inputs: &[RenderInput], bank: Option<&ExplicitMemoryBank>) -> Result<Vec<Image>> {
    let prepared = match bank {
        Some(b) => Some(model.prepare_bank(b)?),
        None => None,
    };
    render_prepared(model, inputs, prepared.as_ref())
}

pub fn render_prepared(model: &RendererModel, inputs: &[RenderInput], bank: Option<&PreparedBank>) -> Result<Vec<Image>> {
    let c = &model.config;
    let (x, q) = stack_inputs(inputs, c, model.dtype())?;
    let out = model.forward(&x, &q, bank)?;
    let flat = nn::to_f32_vec(&out.image)?;
    let per = c.channels * c.height * c.width;
    Ok(flat
        .chunks(per)
        .map(|v| chw_to_hwc(v, c.channels, c.height, c.width))
        .collect())
}

pub fn render(model: &RendererModel, input: &RenderInput, bank: Option<&ExplicitMemoryBank>) -> Result<Image> {
    Ok(render_batch(model, std::slice::from_ref(input), bank)?.remove(0))
}

/// Attention weights a single query places on the bank entries.
pub fn attention_weights(model: &RendererModel, query: &MouthVertexSet, bank: &ExplicitMemoryBank) -> Result<Vec<f64>> {
    let prepared = model.prepare_bank(bank)?;
    let q = nn::tensor_from_f64(query.flatten(), &[1, model.config.key_width()], model.dtype())?;
    match model.memory_readout(&q, Some(&prepared))? {
        Some((_, w)) => nn::to_f64_vec(&w),
        None => Err(Error::argument("renderer has no memory attached")),
    }
}

/// Multi-layer activations used for the perceptual term.
pub trait FeatureExtractor {
    /// Activations of `[B, C, H, W]` images, coarsest last.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

pub const FEATURE_SEED: u64 = 0x5eed_f00d;

/// Frozen, seeded stack of three stride-2 tanh convolutions.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    weights: Vec<Tensor>,
}

impl RandomConvFeatures {
    pub fn new(channels: usize, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let widths = [channels, 8, 16, 16];
        let weights = widths
            .windows(2)
            .map(|w| {
                let n = w[1] * w[0] * 9;
                let std = (1.0 / (w[0] * 9) as f64).sqrt();
                nn::tensor_from_f64(nn::seeded_normal(&mut rng, n, std), &[w[1], w[0], 3, 3], dtype)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::new();
        for w in &self.weights {
            let input = out.last().unwrap_or(x);
            out.push(input.conv2d(w, 1, 2, 1, 1)?.tanh()?);
        }
        Ok(out)
    }
}

/// Sum over layers of the mean squared activation difference.
pub fn feature_distance(feats: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::argument(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let fa = feats.features(a)?;
    let fb = feats.features(b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (x - y)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::argument("feature extractor produced no layers"))
}

fn image_tensor(img: &Image, dtype: DType) -> Result<Tensor> {
    let (h, w, c) = img.dim();
    nn::tensor_from_f32(hwc_to_chw(img), &[1, c, h, w], dtype)
}

/// Host-side distance between two `[H, W, C]` images.
pub fn fixed_feature_distance(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let feats = RandomConvFeatures::new(a.dim().2, DType::F64)?;
    nn::scalar_f64(&feature_distance(&feats, &image_tensor(a, DType::F64)?, &image_tensor(b, DType::F64)?)?)
}

pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub image_channels: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            image_channels: 3,
            seed: 2,
        }
    }
}

/// Patch discriminator: two stride-2 convolutions and a logit head.
#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    layers: Vec<ConvAct>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType) -> Result<Self> {
        if config.channels == 0 || config.image_channels == 0 {
            return Err(Error::argument("discriminator widths must be positive"));
        }
        let mut store = ParamStore::new(dtype, config.seed);
        let c = config.channels;
        let layers = vec![
            ConvAct::new(&mut store, "d.conv0", config.image_channels, c, 2)?,
            ConvAct::new(&mut store, "d.conv1", c, 2 * c, 2)?,
        ];
        let head = Conv2d::new(&mut store, "d.head", 2 * c, 1, 3, 1)?;
        Ok(Self { config, store, layers, head })
    }

    /// Clamped patch logits `[B, 1, H/4, W/4]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(self.head.forward(&h)?.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "discriminator".into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            meta: serde_json::Value::Null,
            rng: None,
            params: self.store.snapshot()?,
            optimizers: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        expect_kind(ckpt, "discriminator")?;
        let config: DiscriminatorConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Config(format!("discriminator config: {e}")))?;
        let d = Self::new(config, dtype)?;
        d.store.load_snapshot(&ckpt.params)?;
        Ok(d)
    }
}

/// `log(1 + e^x)`; inputs are already clamped.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.exp()? + 1.0)?.log()?)
}

/// `−E[log d(real)] − E[log(1 − d(fake))]` over patch logits.
pub fn discriminator_loss(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::argument(format!("real {:?} and fake {:?} differ", real.dims(), fake.dims())));
    }
    let zr = disc.logits(real)?;
    let zf = disc.logits(&fake.detach())?;
    Ok((softplus(&zr.neg()?)?.mean_all()? + softplus(&zf)?.mean_all()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrLossWeights {
    pub rec: f64,
    pub adv: f64,
}

impl Default for NrLossWeights {
    fn default() -> Self {
        Self { rec: 20.0, adv: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NRLossReport {
    pub l_rec: f64,
    pub l_adv_d: f64,
    pub l_adv_nr: f64,
    pub total_nr: f64,
    pub lambdas: (f64, f64),
}

impl NRLossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_adv_d, self.l_adv_nr, self.total_nr].iter().all(|x| x.is_finite())
    }
}

#[derive(Debug)]
pub struct NrLoss {
    pub total: Tensor,
    pub fake: Tensor,
    pub report: NRLossReport,
}

/// Generator objective on a batch; `gt` is `[B, C, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_tensors(
    model: &RendererModel,
    input: &Tensor,
    query: &Tensor,
    gt: &Tensor,
    bank: Option<&PreparedBank>,
    disc: &Discriminator,
    feats: &dyn FeatureExtractor,
    weights: NrLossWeights,
) -> Result<NrLoss> {
    let fake = model.forward(input, query, bank)?.image;
    if fake.dims() != gt.dims() {
        return Err(Error::argument(format!(
            "ground truth {:?} does not match output {:?}",
            gt.dims(),
            fake.dims()
        )));
    }
    let mse = (&fake - gt)?.sqr()?.mean_all()?;
    let l_rec = (mse + feature_distance(feats, &fake, gt)?)?;
    let zf = disc.logits(&fake)?;
    let l_adv_nr = softplus(&zf)?.mean_all()?.neg()?;
    let total = ((&l_rec * weights.rec)? + (&l_adv_nr * weights.adv)?)?;
    let l_adv_d = discriminator_loss(disc, gt, &fake)?;
    let report = NRLossReport {
        l_rec: nn::scalar_f64(&l_rec)?,
        l_adv_d: nn::scalar_f64(&l_adv_d)?,
        l_adv_nr: nn::scalar_f64(&l_adv_nr)?,
        total_nr: nn::scalar_f64(&total)?,
        lambdas: (weights.rec, weights.adv),
    };
    Ok(NrLoss { total, fake, report })
}

/// Single-frame generator loss report.
pub fn renderer_generator_loss(
    model: &RendererModel,
    input: &RenderInput,
    bank: Option<&ExplicitMemoryBank>,
    gt: &Image,
    disc: &Discriminator,
    weights: NrLossWeights,
) -> Result<NRLossReport> {
    let dtype = model.dtype();
    let (x, q) = stack_inputs(std::slice::from_ref(input), &model.config, dtype)?;
    let prepared = match bank {
        Some(b) => Some(model.prepare_bank(b)?),
        None => None,
    };
    let feats = RandomConvFeatures::new(model.config.channels, dtype)?;
    let gt = image_tensor(gt, dtype)?;
    Ok(generator_loss_tensors(model, &x, &q, &gt, prepared.as_ref(), disc, &feats, weights)?.report)
}

/// Per-frame tensors for a dataset.
#[derive(Debug, Clone)]
pub struct NrFrameTable {
    inputs: Vec<f32>,
    queries: Vec<f64>,
    targets: Vec<f32>,
    config: RendererConfig,
    n: usize,
}

impl NrFrameTable {
    pub fn new(ds: &Dataset, config: &RendererConfig) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        for r in &ds.records {
            let ri = RenderInput::from_record(r);
            ri.validate(config)?;
            ri.push_input(&mut inputs);
            queries.extend(ri.query_vertices.flatten());
            targets.extend(hwc_to_chw(&r.gt_image));
        }
        Ok(Self {
            inputs,
            queries,
            targets,
            config: config.clone(),
            n: ds.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `(input, query, gt)` for the given frames.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
        let c = &self.config;
        let (hw, kw) = (c.height * c.width, c.key_width());
        let (xi, ti) = ((1 + c.channels) * hw, c.channels * hw);
        let mut x = Vec::with_capacity(idx.len() * xi);
        let mut q = Vec::with_capacity(idx.len() * kw);
        let mut t = Vec::with_capacity(idx.len() * ti);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * xi..(i + 1) * xi]);
            q.extend_from_slice(&self.queries[i * kw..(i + 1) * kw]);
            t.extend_from_slice(&self.targets[i * ti..(i + 1) * ti]);
        }
        let b = idx.len();
        Ok((
            nn::tensor_from_f32(x, &[b, 1 + c.channels, c.height, c.width], dtype)?,
            nn::tensor_from_f64(q, &[b, kw], dtype)?,
            nn::tensor_from_f32(t, &[b, c.channels, c.height, c.width], dtype)?,
        ))
    }

    /// All query vertices as `[n, h_v·3]`.
    pub fn query_matrix(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.n, self.config.key_width()), self.queries.clone()).expect("table shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NrTrainConfig {
    pub lr: f64,
    pub disc_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: NrLossWeights,
    pub seed: u64,
}

impl Default for NrTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            disc_lr: 1e-4,
            epochs: 30,
            batch_size: 4,
            weights: NrLossWeights::default(),
            seed: 0,
        }
    }
}

impl NrTrainConfig {
    /// Fine-tuning defaults for a new identity.
    pub fn adaptation() -> Self {
        Self {
            lr: 1e-4,
            disc_lr: 1e-4,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be positive"));
        }
        for lr in [self.lr, self.disc_lr] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::argument(format!("invalid learning rate {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrEpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub l_rec: f64,
    pub l_adv_nr: f64,
    pub l_adv_d: f64,
    pub total_nr: f64,
    pub heldout: Option<HeldoutImageMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutImageMetrics {
    pub mse: f64,
    pub feat_dist: f64,
    pub l_rec: f64,
}

/// Generator, discriminator, both optimizers and the schedule position.
#[derive(Debug)]
pub struct RendererTrainState {
    pub model: RendererModel,
    pub disc: Discriminator,
    pub g_adam: Adam,
    pub d_adam: Adam,
    pub rng: ChaCha8Rng,
    pub global_step: usize,
    pub epochs_done: usize,
    pub train_config: NrTrainConfig,
}

impl RendererTrainState {
    pub fn new(model: RendererModel, disc: Discriminator, train_config: NrTrainConfig) -> Self {
        Self {
            model,
            disc,
            g_adam: Adam::new(AdamConfig { lr: train_config.lr, ..AdamConfig::default() }),
            d_adam: Adam::new(AdamConfig { lr: train_config.disc_lr, ..AdamConfig::default() }),
            rng: ChaCha8Rng::seed_from_u64(train_config.seed),
            global_step: 0,
            epochs_done: 0,
            train_config,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = std::collections::BTreeMap::new();
        for (k, v) in self.model.store.snapshot()? {
            params.insert(format!("g/{k}"), v);
        }
        for (k, v) in self.disc.store.snapshot()? {
            params.insert(format!("d/{k}"), v);
        }
        Ok(Checkpoint {
            kind: "renderer_train".into(),
            config: serde_json::json!({
                "generator": self.model.config,
                "discriminator": self.disc.config,
            }),
            meta: serde_json::json!({
                "global_step": self.global_step,
                "epochs_done": self.epochs_done,
                "train_config": self.train_config,
            }),
            rng: Some(RngState::capture(&self.rng)),
            params,
            optimizers: vec![
                ("g_adam".into(), self.g_adam.config, self.g_adam.state_snapshot()?),
                ("d_adam".into(), self.d_adam.config, self.d_adam.state_snapshot()?),
            ],
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        expect_kind(ckpt, "renderer_train")?;
        let field = |v: &serde_json::Value, k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let gc: RendererConfig = serde_json::from_value(field(&ckpt.config, "generator"))
            .map_err(|e| Error::Config(format!("renderer config: {e}")))?;
        let dc: DiscriminatorConfig = serde_json::from_value(field(&ckpt.config, "discriminator"))
            .map_err(|e| Error::Config(format!("discriminator config: {e}")))?;
        let tc: NrTrainConfig = serde_json::from_value(field(&ckpt.meta, "train_config"))
            .map_err(|e| Error::Config(format!("train config in checkpoint: {e}")))?;
        let model = RendererModel::new(gc, dtype)?;
        let disc = Discriminator::new(dc, dtype)?;
        let split = |prefix: &str| {
            ckpt.params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect::<std::collections::BTreeMap<_, _>>()
        };
        model.store.load_snapshot(&split("g/"))?;
        disc.store.load_snapshot(&split("d/"))?;
        let mut state = Self::new(model, disc, tc);
        state.global_step = field(&ckpt.meta, "global_step").as_u64().unwrap_or(0) as usize;
        state.epochs_done = field(&ckpt.meta, "epochs_done").as_u64().unwrap_or(0) as usize;
        if let Some(r) = &ckpt.rng {
            state.rng = r.restore()?;
        }
        for (name, cfg, slots) in &ckpt.optimizers {
            let adam = match name.as_str() {
                "g_adam" => &mut state.g_adam,
                "d_adam" => &mut state.d_adam,
                _ => continue,
            };
            *adam = Adam::new(*cfg);
            adam.load_state(slots.clone(), dtype)?;
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

/// One generator step followed by one discriminator step.
pub fn train_step(
    state: &mut RendererTrainState,
    batch: &(Tensor, Tensor, Tensor),
    bank: Option<&PreparedBank>,
    feats: &dyn FeatureExtractor,
) -> Result<NRLossReport> {
    let (x, q, gt) = batch;
    let weights = state.train_config.weights;
    let loss = generator_loss_tensors(&state.model, x, q, gt, bank, &state.disc, feats, weights)?;
    if !loss.report.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite renderer loss at step {}: {:?}",
            state.global_step, loss.report
        )));
    }
    let grads = loss.total.backward()?;
    state.g_adam.step(&state.model.store, &grads, |_, _| true)?;
    let d_loss = discriminator_loss(&state.disc, gt, &loss.fake)?;
    let d_value = nn::scalar_f64(&d_loss)?;
    if !d_value.is_finite() {
        return Err(Error::numeric(format!("non-finite discriminator loss at step {}", state.global_step)));
    }
    let grads = d_loss.backward()?;
    state.d_adam.step(&state.disc.store, &grads, |_, _| true)?;
    state.global_step += 1;
    Ok(NRLossReport { l_adv_d: d_value, ..loss.report })
}

fn bank_for(model: &RendererModel, ds: &Dataset, bank: Option<&ExplicitMemoryBank>) -> Result<Option<PreparedBank>> {
    match (&model.memory, bank) {
        (Some(MemorySide::Explicit { .. }), None) => Err(Error::argument("this renderer needs an explicit memory bank")),
        (Some(MemorySide::Explicit { .. }), Some(b)) => {
            if b.identity_tag != ds.identity.tag {
                return Err(Error::argument(format!(
                    "bank belongs to `{}` but the dataset is `{}`",
                    b.identity_tag, ds.identity.tag
                )));
            }
            Ok(Some(model.prepare_bank(b)?))
        }
        _ => Ok(None),
    }
}

/// Held-out pixel MSE and feature distance, averaged over frames.
pub fn heldout_image_metrics(
    model: &RendererModel,
    ds: &Dataset,
    bank: Option<&PreparedBank>,
    feats: &dyn FeatureExtractor,
) -> Result<HeldoutImageMetrics> {
    let table = NrFrameTable::new(ds, &model.config)?;
    if table.is_empty() {
        return Err(Error::argument("held-out dataset is empty"));
    }
    let dtype = model.dtype();
    let (mut mse, mut fd) = (0.0, 0.0);
    let idx: Vec<usize> = (0..table.len()).collect();
    for chunk in idx.chunks(16) {
        let (x, q, gt) = table.batch(chunk, dtype)?;
        let out = model.forward(&x, &q, bank)?.image;
        let k = chunk.len() as f64;
        mse += nn::scalar_f64(&(&out - &gt)?.sqr()?.mean_all()?)? * k;
        fd += nn::scalar_f64(&feature_distance(feats, &out, &gt)?)? * k;
    }
    let n = table.len() as f64;
    let (mse, feat_dist) = (mse / n, fd / n);
    Ok(HeldoutImageMetrics { mse, feat_dist, l_rec: mse + feat_dist })
}

/// Run the remaining epochs; the held-out set uses the same bank.
pub fn train_renderer(
    state: &mut RendererTrainState,
    train: &Dataset,
    heldout: Option<&Dataset>,
    bank: Option<&ExplicitMemoryBank>,
) -> Result<Vec<NrEpochMetrics>> {
    let cfg = state.train_config.clone();
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::argument("training dataset is empty"));
    }
    let prepared = bank_for(&state.model, train, bank)?;
    if let Some(h) = heldout {
        bank_for(&state.model, h, bank)?;
    }
    let table = NrFrameTable::new(train, &state.model.config)?;
    if state.global_step == 0 {
        state.model.fit_query_normalization(&table.query_matrix())?;
    }
    let dtype = state.model.dtype();
    let feats = RandomConvFeatures::new(state.model.config.channels, dtype)?;
    state.g_adam.config.lr = cfg.lr;
    state.d_adam.config.lr = cfg.disc_lr;
    let mut trace = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = table.batch(chunk, dtype)?;
            let r = train_step(state, &batch, prepared.as_ref(), &feats)?;
            for (s, v) in sums.iter_mut().zip([r.l_rec, r.l_adv_nr, r.l_adv_d, r.total_nr]) {
                *s += v;
            }
            steps += 1;
        }
        state.epochs_done = epoch + 1;
        let n = steps.max(1) as f64;
        let heldout_metrics = match heldout {
            Some(h) if !h.is_empty() => Some(heldout_image_metrics(&state.model, h, prepared.as_ref(), &feats)?),
            _ => None,
        };
        log::debug!("renderer epoch {epoch}: l_rec {:.5} heldout {:?}", sums[0] / n, heldout_metrics);
        trace.push(NrEpochMetrics {
            epoch,
            steps,
            l_rec: sums[0] / n,
            l_adv_nr: sums[1] / n,
            l_adv_d: sums[2] / n,
            total_nr: sums[3] / n,
            heldout: heldout_metrics,
        });
    }
    Ok(trace)
}

/// Fine-tune on a small dataset against a bank rebuilt for its identity,
/// with fresh optimizers.
pub fn adapt_renderer(
    model: RendererModel,
    disc: Discriminator,
    small: &Dataset,
    heldout: Option<&Dataset>,
    new_bank: Option<&ExplicitMemoryBank>,
    cfg: NrTrainConfig,
) -> Result<(RendererTrainState, Vec<NrEpochMetrics>)> {
    let mut state = RendererTrainState::new(model, disc, cfg);
    // Keep the pretrained query normalization.
    state.global_step = 1;
    let trace = train_renderer(&mut state, small, heldout, new_bank)?;
    state.global_step -= 1;
    Ok((state, trace))
}
