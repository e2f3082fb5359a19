//! Metrics, ablation runs and the toy memory experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::audio2expression::{
    self, A2EConfig, A2EMemory, A2EModel, A2ETrainConfig, A2ETrainState, EpochMetrics,
};
use crate::error::{Error, Result};
use crate::explicit_memory::{self, rms_distance, BuildOptions, ExplicitMemoryBank};
use crate::face_model::MouthVertexSet;
use crate::memory_attention::ImplicitMemoryBank;
use crate::nn;
use crate::renderer::{
    self, Discriminator, DiscriminatorConfig, FeatureExtractor, NrEpochMetrics, NrMemory, NrTrainConfig,
    RandomConvFeatures, RenderInput, RendererConfig, RendererModel, RendererTrainState,
};
use crate::storage;
use crate::synth_data::{self, generate_identity, Dataset, DatasetPlan, Image, SynthConfig};

/// Mean over frames of the per-frame RMS vertex distance.
pub fn vertex_rmse(pred: &[MouthVertexSet], gt: &[MouthVertexSet]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::argument(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::argument("vertex_rmse needs at least one frame"));
    }
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        acc += rms_distance(p, g)?;
    }
    Ok(acc / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub mse: f64,
    /// `+inf` when the streams are identical.
    pub psnr: f64,
    pub feat_dist: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Per-frame MSE and feature distance averaged over frames; PSNR of the mean MSE.
pub fn image_metrics(pred: &[Image], gt: &[Image]) -> Result<ImageMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::argument(format!(
            "image streams have {} and {} frames",
            pred.len(),
            gt.len()
        )));
    }
    let c = gt[0].dim().2;
    let feats = RandomConvFeatures::new(c, DType::F64)?;
    let (mut mse, mut fd) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        if p.dim() != g.dim() || g.dim() != gt[0].dim() {
            return Err(Error::argument(format!("frame shapes {:?} and {:?} differ", p.dim(), g.dim())));
        }
        mse += p.iter().zip(g).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / p.len() as f64;
        fd += frame_feature_distance(&feats, p, g)?;
    }
    let n = pred.len() as f64;
    let mse = mse / n;
    Ok(ImageMetrics {
        mse,
        psnr: psnr_from_mse(mse),
        feat_dist: fd / n,
    })
}

fn frame_feature_distance(feats: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    let (h, w, c) = a.dim();
    let ta = nn::tensor_from_f32(renderer::hwc_to_chw(a), &[1, c, h, w], DType::F64)?;
    let tb = nn::tensor_from_f32(renderer::hwc_to_chw(b), &[1, c, h, w], DType::F64)?;
    nn::scalar_f64(&renderer::feature_distance(feats, &ta, &tb)?)
}

/// Render every frame of `ds` from its ground-truth inputs.
pub fn render_dataset(model: &RendererModel, ds: &Dataset, bank: Option<&ExplicitMemoryBank>) -> Result<Vec<Image>> {
    let prepared = match bank {
        Some(b) => Some(model.prepare_bank(b)?),
        None => None,
    };
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.records.chunks(16) {
        let inputs: Vec<RenderInput> = chunk.iter().map(RenderInput::from_record).collect();
        out.extend(renderer::render_prepared(model, &inputs, prepared.as_ref())?);
    }
    Ok(out)
}

pub fn evaluate_renderer(model: &RendererModel, ds: &Dataset, bank: Option<&ExplicitMemoryBank>) -> Result<ImageMetrics> {
    let pred = render_dataset(model, ds, bank)?;
    let gt: Vec<Image> = ds.records.iter().map(|r| r.gt_image.clone()).collect();
    image_metrics(&pred, &gt)
}

/// How every experiment obtains data for a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataProtocol {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// The last this-many sequences are held out.
    pub heldout_sequences: usize,
    /// Identity seed for run seed `s` is `identity_seed + s`.
    pub identity_seed: u64,
}

impl Default for DataProtocol {
    fn default() -> Self {
        Self {
            sequences: 10,
            frames_per_sequence: 25,
            heldout_sequences: 2,
            identity_seed: 100,
        }
    }
}

impl DataProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_sequence == 0 || self.heldout_sequences == 0 || self.heldout_sequences >= self.sequences {
            return Err(Error::argument(format!(
                "need at least one training and one held-out sequence ({} sequences, {} held out)",
                self.sequences, self.heldout_sequences
            )));
        }
        Ok(())
    }

    /// The full dataset for a run seed.
    pub fn dataset(&self, synth: &SynthConfig, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let id = generate_identity(self.identity_seed.wrapping_add(seed), synth)?;
        Dataset::generate(
            &id,
            synth,
            DatasetPlan {
                sequences: self.sequences,
                frames_per_sequence: self.frames_per_sequence,
                seed,
            },
        )
    }

    /// Hold out the last `heldout_sequences` sequences present in `ds`.
    pub fn split(&self, ds: &Dataset) -> (Dataset, Dataset) {
        let first_held = ds.sequences().len().saturating_sub(self.heldout_sequences);
        ds.split_by_sequence(|s| s >= first_held)
    }
}

/// Shared settings for training and evaluating both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub data: DataProtocol,
    pub a2e: A2EConfig,
    pub a2e_train: A2ETrainConfig,
    pub renderer: RendererConfig,
    pub renderer_train: NrTrainConfig,
    pub disc: DiscriminatorConfig,
    /// Explicit renderer bank size.
    pub bank_n: usize,
    /// Explicit (audio, expression) pairs for the a2e ablation.
    pub explicit_a2e_pairs: usize,
}

impl Default for ExperimentConfig {
    /// Reference hyperparameters: M = 1000, N = 300, both stages at lr 1e-4.
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            data: DataProtocol::default(),
            a2e: A2EConfig {
                m: A2EConfig::REFERENCE_M,
                ..A2EConfig::default()
            },
            a2e_train: A2ETrainConfig::default(),
            renderer: RendererConfig::default(),
            renderer_train: NrTrainConfig::default(),
            disc: DiscriminatorConfig::default(),
            bank_n: 300,
            explicit_a2e_pairs: 64,
        }
    }
}

impl ExperimentConfig {
    /// Settings that fit a single CPU core: fewer memory slots, a smaller
    /// bank and larger learning rates over fewer epochs.
    pub fn desk() -> Self {
        Self {
            a2e: A2EConfig::default(),
            a2e_train: A2ETrainConfig {
                lr: 5e-4,
                epochs: 150,
                window_stride: 1,
                ..A2ETrainConfig::default()
            },
            renderer_train: NrTrainConfig {
                lr: 1e-3,
                disc_lr: 1e-3,
                epochs: 10,
                ..NrTrainConfig::default()
            },
            bank_n: 64,
            ..Self::default()
        }
    }

    /// a2e architecture for a run seed, with dimensions taken from the data.
    pub fn a2e_config(&self, seed: u64, memory: A2EMemory) -> A2EConfig {
        let m = if memory == A2EMemory::Explicit { self.explicit_a2e_pairs } else { self.a2e.m };
        A2EConfig {
            h_a: self.synth.h_a,
            h_c: self.synth.h_c,
            memory,
            m,
            seed,
            memory_seed: seed.wrapping_add(1000),
            ..self.a2e.clone()
        }
    }

    pub fn a2e_train_config(&self, seed: u64) -> A2ETrainConfig {
        A2ETrainConfig { seed, ..self.a2e_train.clone() }
    }

    pub fn renderer_config(&self, seed: u64, memory: NrMemory) -> RendererConfig {
        RendererConfig {
            height: self.synth.height,
            width: self.synth.width,
            channels: self.synth.channels,
            patch: self.synth.patch,
            h_v: self.synth.h_v,
            memory,
            seed,
            memory_seed: seed.wrapping_add(1000),
            ..self.renderer.clone()
        }
    }

    pub fn renderer_train_config(&self, seed: u64) -> NrTrainConfig {
        NrTrainConfig { seed, ..self.renderer_train.clone() }
    }

    pub fn disc_config(&self, seed: u64) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_channels: self.synth.channels,
            seed: seed.wrapping_add(7),
            ..self.disc.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.data.validate()?;
        self.a2e_train.validate()?;
        self.renderer_train.validate()?;
        self.renderer_config(0, NrMemory::Explicit).validate()
    }
}

/// A trained a2e model and how it got there.
#[derive(Debug)]
pub struct A2ERun {
    pub model: A2EModel,
    pub trace: Vec<EpochMetrics>,
    pub heldout_rmse: f64,
}

pub fn run_a2e(config: A2EConfig, train_cfg: A2ETrainConfig, train: &Dataset, held: &Dataset) -> Result<A2ERun> {
    let model = A2EModel::new(config, DType::F32)?;
    if model.config.memory == A2EMemory::Explicit {
        let (a, e) = audio2expression::select_explicit_pairs(train, model.config.m, model.config.memory_seed)?;
        model.set_explicit_pairs(&a, &e)?;
    }
    let mut state = A2ETrainState::new(model, train_cfg);
    let trace = audio2expression::train_a2e(&mut state, train, None)?;
    let heldout_rmse = audio2expression::heldout_vertex_rmse(&state.model, held)?;
    Ok(A2ERun {
        model: state.model,
        trace,
        heldout_rmse,
    })
}

/// A trained renderer, the bank it used, and held-out metrics.
#[derive(Debug)]
pub struct RendererRun {
    pub state: RendererTrainState,
    pub bank: Option<ExplicitMemoryBank>,
    pub trace: Vec<NrEpochMetrics>,
    pub heldout: ImageMetrics,
}

pub fn build_bank(train: &Dataset, n: usize, seed: u64) -> Result<ExplicitMemoryBank> {
    let pool = train.vertex_patch_pool()?;
    explicit_memory::build_explicit_memory(&pool, &BuildOptions::new(n, seed, train.identity.tag.clone()))
}

pub fn run_renderer(
    config: RendererConfig,
    disc: DiscriminatorConfig,
    train_cfg: NrTrainConfig,
    bank_n: usize,
    train: &Dataset,
    held: &Dataset,
) -> Result<RendererRun> {
    let seed = train_cfg.seed;
    let bank = match config.memory {
        NrMemory::Explicit => Some(build_bank(train, bank_n, seed)?),
        _ => None,
    };
    let model = RendererModel::new(config, DType::F32)?;
    let disc = Discriminator::new(disc, DType::F32)?;
    let mut state = RendererTrainState::new(model, disc, train_cfg);
    let trace = renderer::train_renderer(&mut state, train, None, bank.as_ref())?;
    let heldout = evaluate_renderer(&state.model, held, bank.as_ref())?;
    Ok(RendererRun {
        state,
        bank,
        trace,
        heldout,
    })
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub a2e_memory: A2EMemory,
    pub nr_memory: NrMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweeps {
    /// Implicit a2e memory slots.
    pub m: Vec<usize>,
    /// Explicit renderer bank size.
    pub n: Vec<usize>,
    /// a2e model width, which is also the memory slot width.
    pub d: Vec<usize>,
}

impl Default for Sweeps {
    fn default() -> Self {
        Self {
            m: vec![500, 1000, 1500, 2000],
            n: vec![100, 200, 300, 500],
            d: vec![32, 64, 96, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub sweeps: Sweeps,
    pub seeds: Vec<u64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        let v = |a2e_memory, nr_memory| Variant { a2e_memory, nr_memory };
        Self {
            variants: vec![
                v(A2EMemory::None, NrMemory::Explicit),
                v(A2EMemory::Explicit, NrMemory::Explicit),
                v(A2EMemory::Implicit, NrMemory::Explicit),
                v(A2EMemory::Implicit, NrMemory::None),
                v(A2EMemory::Implicit, NrMemory::Implicit),
            ],
            sweeps: Sweeps::default(),
            seeds: (0..5).collect(),
        }
    }
}

impl AblationPlan {
    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::argument("ablation plan needs at least one variant and one seed"));
        }
        if self.sweeps.m.iter().chain(&self.sweeps.n).chain(&self.sweeps.d).any(|&x| x == 0) {
            return Err(Error::argument("sweep values must be positive"));
        }
        if let Some(d) = self.sweeps.d.iter().find(|&&d| d % base.a2e.heads != 0) {
            return Err(Error::argument(format!("width {d} is not divisible by {} heads", base.a2e.heads)));
        }
        Ok(())
    }

    /// Every cell, in a fixed order. Cells shared between variants appear once.
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            let mut seen = Vec::new();
            for v in &self.variants {
                let a = CellSpec::new(CellStage::A2e(v.a2e_memory), "variant", None, seed);
                let r = CellSpec::new(CellStage::Renderer(v.nr_memory), "variant", None, seed);
                for c in [a, r] {
                    if !seen.contains(&c.id) {
                        seen.push(c.id.clone());
                        out.push(c);
                    }
                }
            }
            for &m in &self.sweeps.m {
                out.push(CellSpec::new(CellStage::A2e(A2EMemory::Implicit), "m", Some(m), seed));
            }
            for &n in &self.sweeps.n {
                out.push(CellSpec::new(CellStage::Renderer(NrMemory::Explicit), "n", Some(n), seed));
            }
            for &d in &self.sweeps.d {
                out.push(CellSpec::new(CellStage::A2e(A2EMemory::Implicit), "d", Some(d), seed));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStage {
    A2e(A2EMemory),
    Renderer(NrMemory),
}

fn a2e_name(m: A2EMemory) -> &'static str {
    match m {
        A2EMemory::None => "none",
        A2EMemory::Implicit => "implicit",
        A2EMemory::Explicit => "explicit",
    }
}

fn nr_name(m: NrMemory) -> &'static str {
    match m {
        NrMemory::None => "none",
        NrMemory::Implicit => "implicit",
        NrMemory::Explicit => "explicit",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    pub stage: CellStage,
    /// `variant`, or the swept quantity (`m`, `n`, `d`).
    pub group: String,
    pub param: Option<usize>,
    pub seed: u64,
}

impl CellSpec {
    pub fn new(stage: CellStage, group: &str, param: Option<usize>, seed: u64) -> Self {
        let stage_name = match stage {
            CellStage::A2e(m) => format!("a2e-{}", a2e_name(m)),
            CellStage::Renderer(m) => format!("nr-{}", nr_name(m)),
        };
        let id = match param {
            Some(p) => format!("s{seed}-{group}{p}-{stage_name}"),
            None => format!("s{seed}-{stage_name}"),
        };
        Self {
            id,
            stage,
            group: group.into(),
            param,
            seed,
        }
    }
}

/// Everything recorded about one cell; the report is assembled from these.
type CellMetric = fn(&CellLog) -> Option<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLog {
    pub spec: CellSpec,
    /// Hash of the cell spec plus the base configuration.
    pub config_hash: String,
    /// Manifest hash of the seed's dataset.
    pub data_hash: String,
    pub ok: bool,
    pub diagnostic: Option<String>,
    pub vertex_rmse: Option<f64>,
    pub mse: Option<f64>,
    pub feat_dist: Option<f64>,
    pub a2e_trace: Vec<EpochMetrics>,
    pub nr_trace: Vec<NrEpochMetrics>,
}

/// Median and max−min spread over the successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: Option<f64>,
    pub spread: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        let spread = if ok.is_empty() {
            None
        } else {
            let lo = ok.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(hi - lo)
        };
        Self {
            median: median(&ok),
            spread,
            ok: ok.len(),
            failed: values.len() - ok.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub vertex_rmse: Summary,
    pub mse: Summary,
    pub feat_dist: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep: String,
    pub value: usize,
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<VariantRow>,
    pub sweeps: Vec<SweepPoint>,
    pub failures: Vec<(String, String)>,
    /// Expected directions and whether the medians follow them.
    pub directions: Vec<(String, Option<bool>)>,
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn assemble(plan: &AblationPlan, logs: &[CellLog]) -> Self {
        let by_id: BTreeMap<&str, &CellLog> = logs.iter().map(|l| (l.spec.id.as_str(), l)).collect();
        let lookup = |spec: &CellSpec| by_id.get(spec.id.as_str()).copied();
        let metric = |spec: CellSpec, f: fn(&CellLog) -> Option<f64>| -> Option<f64> {
            lookup(&spec).filter(|l| l.ok).and_then(f)
        };
        let mut rows = Vec::new();
        for v in &plan.variants {
            let per_seed = |stage: CellStage, f: fn(&CellLog) -> Option<f64>| -> Vec<Option<f64>> {
                plan.seeds.iter().map(|&s| metric(CellSpec::new(stage, "variant", None, s), f)).collect()
            };
            rows.push(VariantRow {
                variant: *v,
                vertex_rmse: Summary::of(&per_seed(CellStage::A2e(v.a2e_memory), |l| l.vertex_rmse)),
                mse: Summary::of(&per_seed(CellStage::Renderer(v.nr_memory), |l| l.mse)),
                feat_dist: Summary::of(&per_seed(CellStage::Renderer(v.nr_memory), |l| l.feat_dist)),
            });
        }
        let mut sweeps = Vec::new();
        let sweep_sets: [(&str, &Vec<usize>, CellStage); 3] = [
            ("m", &plan.sweeps.m, CellStage::A2e(A2EMemory::Implicit)),
            ("n", &plan.sweeps.n, CellStage::Renderer(NrMemory::Explicit)),
            ("d", &plan.sweeps.d, CellStage::A2e(A2EMemory::Implicit)),
        ];
        for (name, values, stage) in sweep_sets {
            for &value in values {
                let cells: Vec<CellSpec> =
                    plan.seeds.iter().map(|&s| CellSpec::new(stage, name, Some(value), s)).collect();
                let metrics: Vec<(&str, CellMetric)> = match stage {
                    CellStage::A2e(_) => vec![("vertex_rmse", |l| l.vertex_rmse)],
                    CellStage::Renderer(_) => vec![("mse", |l| l.mse), ("feat_dist", |l| l.feat_dist)],
                };
                for (mname, f) in metrics {
                    let vals: Vec<Option<f64>> = cells.iter().map(|c| metric(c.clone(), f)).collect();
                    sweeps.push(SweepPoint {
                        sweep: name.into(),
                        value,
                        metric: mname.into(),
                        summary: Summary::of(&vals),
                    });
                }
            }
        }
        let failures = plan
            .cells()
            .iter()
            .filter_map(|c| match lookup(c) {
                Some(l) if l.ok => None,
                Some(l) => Some((c.id.clone(), l.diagnostic.clone().unwrap_or_default())),
                None => Some((c.id.clone(), "no log".into())),
            })
            .collect();
        let row_median = |pick: &dyn Fn(&VariantRow) -> bool, f: &dyn Fn(&VariantRow) -> Option<f64>| {
            rows.iter().find(|r| pick(r)).and_then(f)
        };
        let le = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a <= b),
            _ => None,
        };
        let a2e = |m: A2EMemory| row_median(&|r| r.variant.a2e_memory == m, &|r| r.vertex_rmse.median);
        let nr_mse = |m: NrMemory| row_median(&|r| r.variant.nr_memory == m, &|r| r.mse.median);
        let nr_fd = |m: NrMemory| row_median(&|r| r.variant.nr_memory == m, &|r| r.feat_dist.median);
        let directions = vec![
            (
                "a2e vertex RMSE: implicit <= none".to_string(),
                le(a2e(A2EMemory::Implicit), a2e(A2EMemory::None)),
            ),
            (
                "a2e vertex RMSE: implicit <= explicit".to_string(),
                le(a2e(A2EMemory::Implicit), a2e(A2EMemory::Explicit)),
            ),
            (
                "renderer MSE: explicit <= none".to_string(),
                le(nr_mse(NrMemory::Explicit), nr_mse(NrMemory::None)),
            ),
            (
                "renderer feature distance: explicit <= none".to_string(),
                le(nr_fd(NrMemory::Explicit), nr_fd(NrMemory::None)),
            ),
            (
                "renderer MSE: explicit <= implicit".to_string(),
                le(nr_mse(NrMemory::Explicit), nr_mse(NrMemory::Implicit)),
            ),
        ];
        let notes = vec![
            "explicit a2e memory uses per-frame audio features as keys".to_string(),
            "renderer metrics use ground-truth guides and vertices".to_string(),
        ];
        Self {
            rows,
            sweeps,
            failures,
            directions,
            notes,
        }
    }

    pub fn ablation_csv(&self) -> String {
        let mut s = String::from(
            "a2e_memory,nr_memory,vertex_rmse_median,vertex_rmse_spread,mse_median,mse_spread,psnr_of_median_mse,feat_dist_median,feat_dist_spread,failed_cells\n",
        );
        for r in &self.rows {
            let failed = r.vertex_rmse.failed + r.mse.failed;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                a2e_name(r.variant.a2e_memory),
                nr_name(r.variant.nr_memory),
                fmt_opt(r.vertex_rmse.median),
                fmt_opt(r.vertex_rmse.spread),
                fmt_opt(r.mse.median),
                fmt_opt(r.mse.spread),
                fmt_opt(r.mse.median.map(psnr_from_mse)),
                fmt_opt(r.feat_dist.median),
                fmt_opt(r.feat_dist.spread),
                failed
            );
        }
        s
    }

    pub fn sweeps_csv(&self) -> String {
        let mut s = String::from("sweep,value,metric,median,spread,ok,failed\n");
        for p in &self.sweeps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.sweep,
                p.value,
                p.metric,
                fmt_opt(p.summary.median),
                fmt_opt(p.summary.spread),
                p.summary.ok,
                p.summary.failed
            );
        }
        s
    }

    /// Markdown table of one sweep with a bar per point.
    pub fn sweep_table(&self, sweep: &str) -> String {
        let points: Vec<&SweepPoint> = self.sweeps.iter().filter(|p| p.sweep == sweep).collect();
        let mut s = format!("# sweep {sweep}\n\n| {sweep} | metric | median | spread | |\n|---|---|---|---|---|\n");
        let max = points.iter().filter_map(|p| p.summary.median).fold(0.0f64, f64::max);
        for p in points {
            let bar = match p.summary.median {
                Some(m) if max > 0.0 => "#".repeat(((m / max) * 40.0).round() as usize),
                _ => "(failed)".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | `{bar}` |",
                p.value,
                p.metric,
                fmt_opt(p.summary.median),
                fmt_opt(p.summary.spread)
            );
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# ablation\n\n| a2e memory | renderer memory | vertex RMSE | pixel MSE | PSNR | feature dist |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} ± {} | {} ± {} | {} | {} ± {} |",
                a2e_name(r.variant.a2e_memory),
                nr_name(r.variant.nr_memory),
                fmt_opt(r.vertex_rmse.median),
                fmt_opt(r.vertex_rmse.spread),
                fmt_opt(r.mse.median),
                fmt_opt(r.mse.spread),
                fmt_opt(r.mse.median.map(psnr_from_mse)),
                fmt_opt(r.feat_dist.median),
                fmt_opt(r.feat_dist.spread)
            );
        }
        s.push_str("\nMedians over seeds, spread is max - min.\n\n## expected directions\n\n");
        for (d, ok) in &self.directions {
            let verdict = match ok {
                Some(true) => "holds",
                Some(false) => "does not hold",
                None => "not measured",
            };
            let _ = writeln!(s, "- {d}: {verdict}");
        }
        if !self.failures.is_empty() {
            s.push_str("\n## failed cells\n\n");
            for (id, diag) in &self.failures {
                let _ = writeln!(s, "- {id}: {diag}");
            }
        }
        s.push_str("\n## notes\n\n");
        for n in &self.notes {
            let _ = writeln!(s, "- {n}");
        }
        s
    }

    /// Write every report file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        storage::ensure_dir(dir)?;
        let put = |name: &str, text: String| fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e));
        put("ablation.csv", self.ablation_csv())?;
        put("sweeps.csv", self.sweeps_csv())?;
        put("report.md", self.markdown())?;
        for sweep in ["m", "n", "d"] {
            put(&format!("sweep_{sweep}.md"), self.sweep_table(sweep))?;
        }
        storage::write_json(&dir.join("report.json"), self)
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.6}"),
        None => "NA".into(),
    }
}

fn run_cell(spec: &CellSpec, base: &ExperimentConfig, train: &Dataset, held: &Dataset) -> Result<CellLog> {
    let seed = spec.seed;
    let mut log = CellLog {
        spec: spec.clone(),
        config_hash: String::new(),
        data_hash: String::new(),
        ok: true,
        diagnostic: None,
        vertex_rmse: None,
        mse: None,
        feat_dist: None,
        a2e_trace: Vec::new(),
        nr_trace: Vec::new(),
    };
    match spec.stage {
        CellStage::A2e(memory) => {
            let mut cfg = base.a2e_config(seed, memory);
            match (spec.group.as_str(), spec.param) {
                ("m", Some(m)) => cfg.m = m,
                ("d", Some(d)) => {
                    cfg.width = d;
                    cfg.ff = 2 * d;
                }
                _ => {}
            }
            let run = run_a2e(cfg, base.a2e_train_config(seed), train, held)?;
            log.vertex_rmse = Some(run.heldout_rmse);
            log.a2e_trace = run.trace;
        }
        CellStage::Renderer(memory) => {
            let n = match (spec.group.as_str(), spec.param) {
                ("n", Some(n)) => n,
                _ => base.bank_n,
            };
            let run = run_renderer(
                base.renderer_config(seed, memory),
                base.disc_config(seed),
                base.renderer_train_config(seed),
                n,
                train,
                held,
            )?;
            log.mse = Some(run.heldout.mse);
            log.feat_dist = Some(run.heldout.feat_dist);
            log.nr_trace = run.trace;
        }
    }
    Ok(log)
}

fn cell_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("cells").join(format!("{id}.json"))
}

/// Train every planned cell, write per-cell logs and the report files.
///
/// Cells whose log already exists with matching configuration and data
/// hashes are not rerun. Failed cells are recorded and the run continues.
pub fn run_ablation(plan: &AblationPlan, base: &ExperimentConfig, out: &Path) -> Result<AblationReport> {
    plan.validate(base)?;
    base.validate()?;
    storage::ensure_dir(&out.join("cells"))?;
    storage::write_json(&out.join("plan.json"), plan)?;
    storage::write_json(&out.join("base_config.json"), base)?;
    let mut logs = Vec::new();
    let mut data: BTreeMap<u64, (Dataset, Dataset, String)> = BTreeMap::new();
    for spec in plan.cells() {
        if let std::collections::btree_map::Entry::Vacant(e) = data.entry(spec.seed) {
            let ds = base.data.dataset(&base.synth, spec.seed)?;
            let hash = synth_data::write_dataset(&ds, &out.join("data").join(format!("seed{}", spec.seed)))?;
            let (train, held) = base.data.split(&ds);
            e.insert((train, held, hash));
        }
        let (train, held, data_hash) = &data[&spec.seed];
        let config_hash = storage::json_hash(&(&spec, base));
        let path = cell_path(out, &spec.id);
        if let Ok(prev) = storage::read_json::<CellLog>(&path) {
            if prev.ok && prev.config_hash == config_hash && &prev.data_hash == data_hash {
                logs.push(prev);
                continue;
            }
        }
        log::info!("ablation cell {}", spec.id);
        let mut log = run_cell(&spec, base, train, held).unwrap_or_else(|e| CellLog {
            spec: spec.clone(),
            config_hash: String::new(),
            data_hash: String::new(),
            ok: false,
            diagnostic: Some(format!("{}: {e}", e.category())),
            vertex_rmse: None,
            mse: None,
            feat_dist: None,
            a2e_trace: Vec::new(),
            nr_trace: Vec::new(),
        });
        log.config_hash = config_hash;
        log.data_hash = data_hash.clone();
        storage::write_json(&path, &log)?;
        logs.push(log);
    }
    let report = AblationReport::assemble(plan, &logs);
    report.write(out)?;
    Ok(report)
}

/// Rebuild the report files purely from the stored plan and cell logs.
pub fn regenerate_report(out: &Path) -> Result<AblationReport> {
    let plan: AblationPlan = storage::read_json(&out.join("plan.json"))?;
    let mut logs = Vec::new();
    for spec in plan.cells() {
        let path = cell_path(out, &spec.id);
        if path.exists() {
            logs.push(storage::read_json::<CellLog>(&path)?);
        }
    }
    let report = AblationReport::assemble(&plan, &logs);
    report.write(out)?;
    Ok(report)
}

/// Copy of `model` with implicit keys and values redrawn from the init
/// distribution; every other parameter is untouched.
pub fn toy_randomize_implicit_memory(model: &A2EModel, seed: u64) -> Result<A2EModel> {
    let out = A2EModel::from_checkpoint(&model.to_checkpoint()?, model.dtype())?;
    if out.config.memory != A2EMemory::Implicit {
        return Ok(out);
    }
    let (k, v) = ImplicitMemoryBank::sample(out.config.m, out.config.width, out.config.init_std, seed);
    out.store.assign_f64(audio2expression::MEM_KEYS, k)?;
    out.store.assign_f64(audio2expression::MEM_VALUES, v)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapReport {
    pub own: ImageMetrics,
    pub swapped: ImageMetrics,
    pub delta_mse: f64,
    pub delta_feat_dist: f64,
    /// Identity tag of every bank entry that won the attention for some frame.
    pub retrieved_tags: Vec<String>,
    /// Source frames of those entries.
    pub retrieved_frames: Vec<usize>,
}

/// Render `held` (identity A) with its own bank and with another bank.
pub fn toy_swap_explicit_memory(
    model: &RendererModel,
    held: &Dataset,
    own_bank: &ExplicitMemoryBank,
    other_bank: &ExplicitMemoryBank,
) -> Result<SwapReport> {
    let own = evaluate_renderer(model, held, Some(own_bank))?;
    let swapped = evaluate_renderer(model, held, Some(other_bank))?;
    let mut retrieved_frames = Vec::new();
    for r in &held.records {
        let w = renderer::attention_weights(model, &r.mouth_vertices, other_bank)?;
        let best = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty bank");
        let f = other_bank.pairs[best].source_frame;
        if !retrieved_frames.contains(&f) {
            retrieved_frames.push(f);
        }
    }
    Ok(SwapReport {
        delta_mse: swapped.mse - own.mse,
        delta_feat_dist: swapped.feat_dist - own.feat_dist,
        retrieved_tags: retrieved_frames.iter().map(|_| other_bank.identity_tag.clone()).collect(),
        retrieved_frames,
        own,
        swapped,
    })
}

/// Output of the audio → expression → guide → image pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub expressions: Vec<ndarray::Array1<f64>>,
    pub vertices: Vec<MouthVertexSet>,
    pub frames: Vec<Image>,
    pub vertex_rmse: f64,
    pub image: ImageMetrics,
}

/// Run both stages on `ds`: predicted expressions drive the guide and the
/// memory query, identity and pose come from the data.
pub fn run_pipeline(
    a2e: &A2EModel,
    nr: &RendererModel,
    bank: Option<&ExplicitMemoryBank>,
    ds: &Dataset,
) -> Result<PipelineOutput> {
    let basis = ds.basis()?;
    let camera = ds.config.camera()?;
    let expressions = audio2expression::predict_dataset(a2e, ds)?;
    let mut vertices = Vec::with_capacity(ds.len());
    let mut inputs = Vec::with_capacity(ds.len());
    for (r, e) in ds.records.iter().zip(&expressions) {
        let mouth = synth_data::mouth_for_expression(&basis, &ds.identity, e, &r.pose)?;
        inputs.push(RenderInput {
            guide_image: synth_data::guide_for(&mouth, &camera)?,
            masked_template: r.masked_template.clone(),
            query_vertices: mouth.clone(),
        });
        vertices.push(mouth);
    }
    let prepared = match bank {
        Some(b) => Some(nr.prepare_bank(b)?),
        None => None,
    };
    let mut frames = Vec::with_capacity(ds.len());
    for chunk in inputs.chunks(16) {
        frames.extend(renderer::render_prepared(nr, chunk, prepared.as_ref())?);
    }
    let gt_v: Vec<MouthVertexSet> = ds.records.iter().map(|r| r.mouth_vertices.clone()).collect();
    let gt_i: Vec<Image> = ds.records.iter().map(|r| r.gt_image.clone()).collect();
    Ok(PipelineOutput {
        vertex_rmse: vertex_rmse(&vertices, &gt_v)?,
        image: image_metrics(&frames, &gt_i)?,
        expressions,
        vertices,
        frames,
    })
}

/// Frames per second used to turn clip lengths into frame budgets.
pub const FPS: usize = 25;

/// Parse `15s`, `30s`, `60s` style budgets or a plain frame count.
pub fn parse_budget(s: &str) -> Result<usize> {
    let t = s.trim();
    let parsed = match t.strip_suffix('s') {
        Some(secs) => secs.parse::<usize>().map(|x| x * FPS),
        None => t.parse::<usize>(),
    };
    match parsed {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::argument(format!("invalid frame budget `{s}`"))),
    }
}

/// Fine-tuning on a new identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub budget_frames: usize,
    /// The new identity for run seed `s` is `identity_seed + s`.
    pub identity_seed: u64,
    pub heldout_sequences: usize,
    pub a2e: A2ETrainConfig,
    pub renderer: NrTrainConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            budget_frames: 15 * FPS,
            identity_seed: 900,
            heldout_sequences: 2,
            a2e: A2ETrainConfig::adaptation(),
            renderer: NrTrainConfig::adaptation(),
        }
    }
}

impl AdaptConfig {
    /// Desk-scale counterpart of [`ExperimentConfig::desk`]; keeps the
    /// reference ratio of adaptation to pretraining learning rate.
    pub fn desk() -> Self {
        Self {
            a2e: A2ETrainConfig {
                lr: 2.5e-5,
                epochs: 40,
                window_stride: 1,
                ..A2ETrainConfig::adaptation()
            },
            renderer: NrTrainConfig {
                lr: 1e-3,
                disc_lr: 1e-3,
                epochs: 6,
                ..NrTrainConfig::adaptation()
            },
            ..Self::default()
        }
    }

    /// Adaptation clip and held-out frames of the new identity.
    pub fn data(&self, base: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
        let fps = base.data.frames_per_sequence;
        let train_seqs = self.budget_frames.div_ceil(fps);
        let plan = DatasetPlan {
            sequences: train_seqs + self.heldout_sequences,
            frames_per_sequence: fps,
            seed: seed.wrapping_add(5000),
        };
        let id = generate_identity(self.identity_seed.wrapping_add(seed), &base.synth)?;
        let ds = Dataset::generate(&id, &base.synth, plan)?;
        let (train, held) = ds.split_by_sequence(|s| s >= train_seqs);
        Ok((train.take_frames(self.budget_frames), held))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub vertex_rmse: f64,
    pub mse: f64,
    pub feat_dist: f64,
}

#[derive(Debug)]
pub struct AdaptRun {
    pub a2e: A2EModel,
    pub renderer: RendererTrainState,
    pub bank: Option<ExplicitMemoryBank>,
    pub before: StageMetrics,
    pub after: StageMetrics,
}

fn stage_metrics(a2e: &A2EModel, nr: &RendererModel, bank: Option<&ExplicitMemoryBank>, held: &Dataset) -> Result<StageMetrics> {
    let img = evaluate_renderer(nr, held, bank)?;
    Ok(StageMetrics {
        vertex_rmse: audio2expression::heldout_vertex_rmse(a2e, held)?,
        mse: img.mse,
        feat_dist: img.feat_dist,
    })
}

/// Fine-tune both stages on `small` and rebuild the bank from it. `before`
/// uses the pretrained models with the pretrained bank.
#[allow(clippy::too_many_arguments)]
pub fn adapt_models(
    a2e: A2EModel,
    nr: RendererModel,
    disc: Discriminator,
    old_bank: Option<&ExplicitMemoryBank>,
    small: &Dataset,
    held: &Dataset,
    cfg: &AdaptConfig,
    bank_n: usize,
    seed: u64,
) -> Result<AdaptRun> {
    let before = stage_metrics(&a2e, &nr, old_bank, held)?;
    let bank = match old_bank {
        Some(_) => {
            let pool = small.vertex_patch_pool()?;
            let n = bank_n.min(pool.len());
            Some(explicit_memory::rebuild_for_identity(&pool, n, seed, small.identity.tag.clone())?)
        }
        None => None,
    };
    let (a2e_state, _) = audio2expression::adapt_a2e(a2e, small, None, A2ETrainConfig { seed, ..cfg.a2e.clone() })?;
    let (nr_state, _) = renderer::adapt_renderer(
        nr,
        disc,
        small,
        None,
        bank.as_ref(),
        NrTrainConfig { seed, ..cfg.renderer.clone() },
    )?;
    let after = stage_metrics(&a2e_state.model, &nr_state.model, bank.as_ref(), held)?;
    Ok(AdaptRun {
        a2e: a2e_state.model,
        renderer: nr_state,
        bank,
        before,
        after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn verts(rows: Vec<[f64; 3]>) -> MouthVertexSet {
        let n = rows.len();
        MouthVertexSet::new(ndarray::Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j])).unwrap()
    }

    #[test]
    fn vertex_rmse_examples() {
        let a = verts(vec![[0.0, 0.0, 0.0]]);
        let b = verts(vec![[3.0, 4.0, 0.0]]);
        assert_eq!(vertex_rmse(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert_eq!(vertex_rmse(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap(), 5.0);
        let p = vec![verts(vec![[1.0, 0.0, 0.0]]), verts(vec![[0.0, 3.0, 0.0]])];
        let g = vec![verts(vec![[0.0, 0.0, 0.0]]), verts(vec![[0.0, 0.0, 0.0]])];
        assert_eq!(vertex_rmse(&p, &g).unwrap(), 2.0);
        assert_eq!(vertex_rmse(&p, &g[..1]).unwrap_err().category(), "argument");
        assert_eq!(vertex_rmse(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap(), rms_distance(&b, &a).unwrap());
    }

    #[test]
    fn image_metric_examples() {
        let zero = Array3::<f32>::zeros((8, 8, 3));
        let half = Array3::<f32>::from_elem((8, 8, 3), 0.5);
        let same = image_metrics(std::slice::from_ref(&half), std::slice::from_ref(&half)).unwrap();
        assert_eq!(same.mse, 0.0);
        assert_eq!(same.feat_dist, 0.0);
        assert!(same.psnr.is_infinite() && same.psnr > 0.0);
        let m = image_metrics(std::slice::from_ref(&zero), std::slice::from_ref(&half)).unwrap();
        assert!((m.mse - 0.25).abs() < 1e-15);
        assert!((m.psnr - 6.020599913279624).abs() < 1e-9);
        let r = image_metrics(std::slice::from_ref(&half), std::slice::from_ref(&zero)).unwrap();
        assert_eq!(m.feat_dist, r.feat_dist);
        let small = Array3::<f32>::zeros((4, 4, 3));
        assert!(image_metrics(&[small], &[zero]).is_err());
    }

    #[test]
    fn budgets() {
        assert_eq!(parse_budget("15s").unwrap(), 375);
        assert_eq!(parse_budget("30s").unwrap(), 750);
        assert_eq!(parse_budget("60s").unwrap(), 1500);
        assert_eq!(parse_budget("120").unwrap(), 120);
        assert!(parse_budget("0").is_err() && parse_budget("abc").is_err());
    }

    #[test]
    fn median_and_summary() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let s = Summary::of(&[Some(1.0), None, Some(3.0)]);
        assert_eq!((s.median, s.spread, s.ok, s.failed), (Some(2.0), Some(2.0), 2, 1));
        let _ = array![1.0];
    }

    #[test]
    fn plan_cells_are_unique_and_cover_sweeps() {
        let plan = AblationPlan::default();
        let cells = plan.cells();
        let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        // 3 a2e + 3 renderer variant cells and 12 sweep cells per seed.
        assert_eq!(n, 5 * (6 + 12));
    }

    #[test]
    fn report_marks_missing_cells_failed() {
        let plan = AblationPlan {
            variants: vec![Variant { a2e_memory: A2EMemory::None, nr_memory: NrMemory::None }],
            sweeps: Sweeps { m: vec![], n: vec![], d: vec![] },
            seeds: vec![0],
        };
        let report = AblationReport::assemble(&plan, &[]);
        assert_eq!(report.failures.len(), 2);
        assert!(report.ablation_csv().contains("none,none,NA"));
    }

    #[test]
    fn toy_randomize_touches_only_memory() {
        let cfg = A2EConfig { h_a: 6, h_c: 5, width: 8, heads: 2, ff: 8, layers: 1, m: 4, ..A2EConfig::default() };
        let model = A2EModel::new(cfg, DType::F32).unwrap();
        let out = toy_randomize_implicit_memory(&model, 99).unwrap();
        let (a, b) = (model.store.snapshot().unwrap(), out.store.snapshot().unwrap());
        for (k, v) in &a {
            if k == audio2expression::MEM_KEYS || k == audio2expression::MEM_VALUES {
                assert_ne!(v, &b[k]);
            } else {
                assert_eq!(v, &b[k], "{k}");
            }
        }
    }
}
