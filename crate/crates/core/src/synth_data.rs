//! Seeded synthetic talking-face data with a built-in one-to-many structure.
//!
//! A latent token stream (a stand-in for phonetic content) drives both the
//! audio features and the expression coefficients. Each sequence is spoken in
//! one of several *styles*; a style adds a fixed offset to the expression, so
//! the same audio maps to several valid expressions. Frames are rendered with
//! an analytic mouth model over an identity-specific appearance.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explicit_memory::{ImagePatch, VertexPatchPair};
use crate::face_model::{
    self, make_synthetic_basis, BlendshapeBasis, CameraSpec, FaceCoefficients, GuideImage, MouthVertexSet,
};
use crate::nn::seeded_normal;
use crate::storage::{self, f32_round, BlobBuilder, BlobEntry};

/// RGB-style image `[H, W, C]`.
pub type Image = Array3<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub h_a: usize,
    pub h_c: usize,
    pub h_id: usize,
    pub h_v: usize,
    pub v_total: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub styles: usize,
    /// Minimum pairwise RMS separation between style offsets.
    pub style_floor: f64,
    pub style_scale: f64,
    pub vocab: usize,
    pub token_scale: f64,
    pub audio_noise: f64,
    pub exp_clamp: f64,
    pub pose_jitter: f64,
    /// Seed of the token → (audio, expression) tables shared by all identities.
    pub language_seed: u64,
    /// Seed of the blendshape basis shared by all identities.
    pub basis_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            h_a: 64,
            h_c: 85,
            h_id: 10,
            h_v: 69,
            v_total: 100,
            height: 64,
            width: 64,
            channels: 3,
            patch: 16,
            styles: 2,
            style_floor: 0.1,
            style_scale: 0.12,
            vocab: 20,
            token_scale: 0.15,
            audio_noise: 0.1,
            exp_clamp: 3.0,
            pose_jitter: 0.01,
            language_seed: 7,
            basis_seed: 1234,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.styles < 2 {
            return Err(Error::argument("at least two styles are required"));
        }
        if self.vocab == 0 || self.h_a == 0 || self.channels == 0 {
            return Err(Error::argument("vocab, h_a and channels must be positive"));
        }
        let (mh, mw) = mask_size(self.height, self.width);
        if self.patch == 0 || mh % self.patch != 0 || mw % self.patch != 0 || mh != mw {
            return Err(Error::argument(format!(
                "mask region {mh}x{mw} must be square and a multiple of patch size {}",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraSpec> {
        CameraSpec::default_for(self.height, self.width)
    }
}

/// Mask rectangle `(row0, row1, col0, col1)` covering the lower face.
pub fn mask_rect(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r0 = 7 * h / 16;
    let c0 = w / 4;
    (r0, r0 + h / 2, c0, c0 + w / 2)
}

fn mask_size(h: usize, w: usize) -> (usize, usize) {
    let (r0, r1, c0, c1) = mask_rect(h, w);
    (r1 - r0, c1 - c0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub lip: [f64; 3],
    pub inner: [f64; 3],
    pub teeth: [f64; 3],
    pub stripe_freq: f64,
    pub stripe_phase: f64,
    pub bg_freq: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub tag: String,
    pub seed: u64,
    pub basis_seed: u64,
    pub texture_seed: u64,
    /// `[S, h_c]` per-style expression bias.
    pub style_offsets: Vec<Vec<f64>>,
    pub illumination_levels: Vec<f64>,
    pub alpha_id: Vec<f64>,
    pub base_pose: [f64; 6],
    pub appearance: Appearance,
}

impl IdentitySpec {
    pub fn styles(&self) -> usize {
        self.style_offsets.len()
    }

    pub fn alpha_id(&self) -> Array1<f64> {
        Array1::from(self.alpha_id.clone())
    }

    pub fn basis(&self, cfg: &SynthConfig) -> Result<BlendshapeBasis> {
        make_synthetic_basis(self.basis_seed, cfg.v_total, cfg.h_c, cfg.h_id, cfg.h_v)
    }
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| f32_round(rng.random_range(lo..hi)))
}

/// Deterministic identity from a seed.
pub fn generate_identity(seed: u64, cfg: &SynthConfig) -> Result<IdentitySpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d3e_5a70);
    let basis_seed = cfg.basis_seed;
    let texture_seed = rng.random::<u64>();
    let mut style_offsets: Vec<Vec<f64>> = Vec::with_capacity(cfg.styles);
    let mut attempts = 0;
    while style_offsets.len() < cfg.styles {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::argument("could not draw style offsets above the separation floor"));
        }
        let cand: Vec<f64> = seeded_normal(&mut rng, cfg.h_c, cfg.style_scale)
            .into_iter()
            .map(f32_round)
            .collect();
        if style_offsets.iter().all(|o| rms(o, &cand) >= cfg.style_floor) {
            style_offsets.push(cand);
        }
    }
    let illumination_levels = vec![
        f32_round(rng.random_range(0.75..0.9)),
        f32_round(rng.random_range(0.9..1.0)),
    ];
    let alpha_id = seeded_normal(&mut rng, cfg.h_id, 0.3).into_iter().map(f32_round).collect();
    let base_pose = [
        f32_round(rng.random_range(-0.05..0.05)),
        f32_round(rng.random_range(-0.05..0.05)),
        f32_round(rng.random_range(-0.03..0.03)),
        f32_round(rng.random_range(-0.1..0.1)),
        f32_round(rng.random_range(-0.1..0.1)),
        4.0,
    ];
    let mut trng = ChaCha8Rng::seed_from_u64(texture_seed);
    let appearance = Appearance {
        background: color(&mut trng, 0.1, 0.6),
        skin: color(&mut trng, 0.45, 0.9),
        lip: color(&mut trng, 0.3, 0.95),
        inner: color(&mut trng, 0.02, 0.25),
        teeth: color(&mut trng, 0.75, 1.0),
        stripe_freq: f32_round(trng.random_range(0.8..2.2)),
        stripe_phase: f32_round(trng.random_range(0.0..std::f64::consts::TAU)),
        bg_freq: [
            f32_round(trng.random_range(0.05..0.3)),
            f32_round(trng.random_range(0.05..0.3)),
        ],
    };
    Ok(IdentitySpec {
        tag: format!("id{seed}"),
        seed,
        basis_seed,
        texture_seed,
        style_offsets,
        illumination_levels,
        alpha_id,
        base_pose,
        appearance,
    })
}

/// Token → (audio embedding, expression) tables shared across identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    pub token_audio: Array2<f64>,
    pub token_exp: Array2<f64>,
}

impl Language {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.language_seed);
        let audio = seeded_normal(&mut rng, cfg.vocab * cfg.h_a, 1.0);
        let exp = seeded_normal(&mut rng, cfg.vocab * cfg.h_c, cfg.token_scale);
        Self {
            token_audio: Array2::from_shape_vec((cfg.vocab, cfg.h_a), audio).unwrap(),
            token_exp: Array2::from_shape_vec((cfg.vocab, cfg.h_c), exp).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub audio: Array1<f32>,
    pub exp: Array1<f64>,
    pub pose: [f64; 6],
    /// Mouth vertices of this identity with this expression and pose.
    pub mouth_vertices: MouthVertexSet,
    pub guide: GuideImage,
    pub gt_image: Image,
    pub masked_template: Image,
    pub style_id: usize,
    pub frame_id: usize,
    pub sequence_id: usize,
    pub identity_tag: String,
}

impl SampleRecord {
    pub fn coefficients(&self, identity: &IdentitySpec) -> FaceCoefficients {
        FaceCoefficients {
            alpha_id: identity.alpha_id(),
            alpha_exp: self.exp.clone(),
            alpha_pose: self.pose,
        }
    }
}

/// Three-tap smoothing along time with clamped edges.
fn smooth_rows(x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows();
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..t {
        let prev = x.row(i.saturating_sub(1));
        let next = x.row((i + 1).min(t - 1));
        let cur = x.row(i);
        let mut o = out.row_mut(i);
        for k in 0..x.ncols() {
            o[k] = 0.25 * prev[k] + 0.5 * cur[k] + 0.25 * next[k];
        }
    }
    out
}

/// Token stream with random phone durations of 2..=5 frames.
pub fn token_stream(n_frames: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_frames);
    while out.len() < n_frames {
        let tok = rng.random_range(0..vocab);
        let dur = rng.random_range(2..=5);
        for _ in 0..dur {
            if out.len() < n_frames {
                out.push(tok);
            }
        }
    }
    out
}

/// Posed, `f32`-representable mouth vertices for an expression.
pub fn mouth_for_expression(
    basis: &BlendshapeBasis,
    identity: &IdentitySpec,
    exp: &Array1<f64>,
    pose: &[f64; 6],
) -> Result<MouthVertexSet> {
    let coeffs = FaceCoefficients {
        alpha_id: identity.alpha_id(),
        alpha_exp: exp.clone(),
        alpha_pose: *pose,
    };
    let mut m = face_model::reconstruct_mouth(basis, &coeffs)?;
    m.coords.mapv_inplace(f32_round);
    Ok(m)
}

/// Guide image: the projected mouth vertices.
pub fn guide_for(mouth: &MouthVertexSet, camera: &CameraSpec) -> Result<GuideImage> {
    face_model::project_to_guide_image(mouth.coords.view(), camera)
}

fn soft_inside(r: f64) -> f64 {
    // smooth step of width ~0.25 around the ellipse boundary
    0.5 * (1.0 + ((1.0 - r) * 8.0).tanh())
}

/// Analytic frame render: background, face oval, textured mouth.
pub fn render_frame(
    identity: &IdentitySpec,
    basis: &BlendshapeBasis,
    exp: &Array1<f64>,
    pose: &[f64; 6],
    illumination: f64,
    cfg: &SynthConfig,
) -> Result<Image> {
    let cam = cfg.camera()?;
    let coeffs = FaceCoefficients {
        alpha_id: identity.alpha_id(),
        alpha_exp: exp.clone(),
        alpha_pose: *pose,
    };
    let verts = face_model::reconstruct_vertices(basis, &coeffs)?;
    let all_pts = face_model::project_points(verts.view(), &cam)?;
    let mouth = face_model::extract_mouth_vertices(verts.view(), basis)?;
    let mouth_pts = face_model::project_points(mouth.coords.view(), &cam)?;

    let n = all_pts.len() as f64;
    let fc = [
        all_pts.iter().map(|p| p[0]).sum::<f64>() / n,
        all_pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let scale = cam.focal / pose[5].max(1e-3);
    let m = mouth_pts.len() as f64;
    let mc = [
        mouth_pts.iter().map(|p| p[0]).sum::<f64>() / m,
        mouth_pts.iter().map(|p| p[1]).sum::<f64>() / m,
    ];
    let half_w = mouth_pts.iter().map(|p| (p[0] - mc[0]).abs()).fold(0.0, f64::max) + 0.5;
    let half_h = mouth_pts.iter().map(|p| (p[1] - mc[1]).abs()).fold(0.0, f64::max) + 0.5;
    // opening grows with the vertical spread relative to the neutral lip height
    let open = ((half_h / (0.15 * scale)) - 0.6).clamp(0.0, 1.2);

    let ap = &identity.appearance;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let px = 64.0 / w as f64;
    let mut img = Array3::<f32>::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let (u, v) = (col as f64, r as f64);
            let bg_wave = 0.12 * (ap.bg_freq[0] * u * px + ap.bg_freq[1] * v * px).sin();
            let fr = (((u - fc[0]) / (0.95 * scale)).powi(2) + ((v - fc[1]) / (1.2 * scale)).powi(2)).sqrt();
            let face = soft_inside(fr);
            let shade = 1.0 - 0.25 * fr.min(1.0);

            let du = (u - mc[0]) / half_w;
            let dv = (v - mc[1]) / half_h;
            let lip = soft_inside((du * du + dv * dv).sqrt());
            let stripe = 0.8 + 0.2 * (ap.stripe_freq * (u - mc[0]) * px + ap.stripe_phase).sin();
            let iw = 0.75;
            let ih = 0.15 + 0.6 * open;
            let inner = if open > 0.0 {
                soft_inside(((du / iw).powi(2) + (dv / ih).powi(2)).sqrt())
            } else {
                0.0
            };
            let teeth = inner * soft_inside(((du / (0.6 * iw)).powi(2) + ((dv + 0.5 * ih) / (0.35 * ih)).powi(2)).sqrt());

            for ch in 0..c {
                let k = ch % 3;
                let bg = ap.background[k] + bg_wave;
                let skin = ap.skin[k] * shade;
                let lipc = ap.lip[k] * stripe;
                let mut val = bg * (1.0 - face) + skin * face;
                val = val * (1.0 - lip) + lipc * lip;
                val = val * (1.0 - inner) + ap.inner[k] * inner;
                val = val * (1.0 - teeth) + ap.teeth[k] * teeth;
                img[[r, col, ch]] = (val * illumination).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img)
}

pub fn mask_image(img: &Image) -> Image {
    let (h, w, _) = img.dim();
    let (r0, r1, c0, c1) = mask_rect(h, w);
    let mut out = img.clone();
    out.slice_mut(s![r0..r1, c0..c1, ..]).fill(0.0);
    out
}

/// Mouth patch: the mask region average-pooled down to `P × P`.
pub fn extract_patch(img: &Image, patch: usize) -> Result<ImagePatch> {
    let (h, w, c) = img.dim();
    let (r0, r1, c0, c1) = mask_rect(h, w);
    let (mh, mw) = (r1 - r0, c1 - c0);
    if patch == 0 || mh % patch != 0 || mw % patch != 0 {
        return Err(Error::argument(format!(
            "mask region {mh}x{mw} is not divisible by patch size {patch}"
        )));
    }
    let (fy, fx) = (mh / patch, mw / patch);
    let norm = (fy * fx) as f32;
    let mut out = Array3::<f32>::zeros((patch, patch, c));
    for py in 0..patch {
        for pxl in 0..patch {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += img[[r0 + py * fy + dy, c0 + pxl * fx + dx, ch]];
                    }
                }
                out[[py, pxl, ch]] = acc / norm;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSpec {
    pub n_frames: usize,
    pub style_id: usize,
    pub seed: u64,
    pub first_frame_id: usize,
    pub sequence_id: usize,
}

/// Generate one sequence of frames for an identity in a given style.
///
/// Separate random streams drive tokens, audio noise, pose jitter, and
/// illumination, so two styles with the same seed share identical audio.
pub fn generate_sequence(
    identity: &IdentitySpec,
    basis: &BlendshapeBasis,
    lang: &Language,
    cfg: &SynthConfig,
    spec: SequenceSpec,
) -> Result<Vec<SampleRecord>> {
    let SequenceSpec { n_frames, style_id, seed, first_frame_id, sequence_id } = spec;
    if style_id >= identity.styles() {
        return Err(Error::argument(format!(
            "style {style_id} out of range for {} styles",
            identity.styles()
        )));
    }
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let cam = cfg.camera()?;
    let tokens = token_stream(n_frames, cfg.vocab, seed);
    let mut raw_audio = Array2::zeros((n_frames, cfg.h_a));
    let mut raw_exp = Array2::zeros((n_frames, cfg.h_c));
    for (t, &tok) in tokens.iter().enumerate() {
        raw_audio.row_mut(t).assign(&lang.token_audio.row(tok));
        raw_exp.row_mut(t).assign(&lang.token_exp.row(tok));
    }
    let audio_clean = smooth_rows(&raw_audio);
    let exp_clean = smooth_rows(&raw_exp);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let noise = seeded_normal(&mut noise_rng, n_frames * cfg.h_a, cfg.audio_noise);
    let mut pose_rng = ChaCha8Rng::seed_from_u64(seed);
    pose_rng.set_stream(2);
    let mut light_rng = ChaCha8Rng::seed_from_u64(seed);
    light_rng.set_stream(3);
    let illumination = identity.illumination_levels[light_rng.random_range(0..identity.illumination_levels.len())];

    let offset = &identity.style_offsets[style_id];
    let mut jitter = [0.0f64; 6];
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let audio: Array1<f32> = (0..cfg.h_a)
            .map(|k| (audio_clean[[t, k]] + noise[t * cfg.h_a + k]) as f32)
            .collect();
        let exp: Array1<f64> = (0..cfg.h_c)
            .map(|k| f32_round((exp_clean[[t, k]] + offset[k]).clamp(-cfg.exp_clamp, cfg.exp_clamp)))
            .collect();
        for (j, slot) in jitter.iter_mut().enumerate() {
            let amp = if j < 3 { cfg.pose_jitter } else { cfg.pose_jitter * 2.0 };
            let step: f64 = pose_rng.random_range(-1.0..1.0);
            *slot = 0.8 * *slot + 0.2 * amp * step * 3.0;
        }
        let pose: [f64; 6] = std::array::from_fn(|j| f32_round(identity.base_pose[j] + jitter[j]));
        let mouth_vertices = mouth_for_expression(basis, identity, &exp, &pose)?;
        let guide = guide_for(&mouth_vertices, &cam)?;
        let gt_image = render_frame(identity, basis, &exp, &pose, illumination, cfg)?;
        let masked_template = mask_image(&gt_image);
        out.push(SampleRecord {
            audio,
            exp,
            pose,
            mouth_vertices,
            guide,
            gt_image,
            masked_template,
            style_id,
            frame_id: first_frame_id + t,
            sequence_id,
            identity_tag: identity.tag.clone(),
        });
    }
    Ok(out)
}

/// Frames for one identity, plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub identity: IdentitySpec,
    pub config: SynthConfig,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Dataset {
    /// `plan.sequences` sequences with styles assigned round-robin, each with
    /// its own token stream.
    pub fn generate(identity: &IdentitySpec, cfg: &SynthConfig, plan: DatasetPlan) -> Result<Self> {
        cfg.validate()?;
        let basis = identity.basis(cfg)?;
        let lang = Language::new(cfg);
        let s = identity.styles();
        let mut records = Vec::with_capacity(plan.sequences * plan.frames_per_sequence);
        for k in 0..plan.sequences {
            let spec = SequenceSpec {
                n_frames: plan.frames_per_sequence,
                style_id: k % s,
                seed: plan.seed.wrapping_add(k as u64).wrapping_mul(0x9e37_79b9).wrapping_add(identity.seed),
                first_frame_id: k * plan.frames_per_sequence,
                sequence_id: k,
            };
            records.extend(generate_sequence(identity, &basis, &lang, cfg, spec)?);
        }
        Ok(Self {
            identity: identity.clone(),
            config: cfg.clone(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn basis(&self) -> Result<BlendshapeBasis> {
        self.identity.basis(&self.config)
    }

    /// Split by sequence id: sequences accepted by `held_out` go to the second set.
    pub fn split_by_sequence<F: Fn(usize) -> bool>(&self, held_out: F) -> (Dataset, Dataset) {
        let (b, a): (Vec<_>, Vec<_>) = self.records.iter().cloned().partition(|r| held_out(r.sequence_id));
        (
            Dataset { identity: self.identity.clone(), config: self.config.clone(), records: a },
            Dataset { identity: self.identity.clone(), config: self.config.clone(), records: b },
        )
    }

    /// First `n` frames, keeping whole records.
    pub fn take_frames(&self, n: usize) -> Dataset {
        Dataset {
            identity: self.identity.clone(),
            config: self.config.clone(),
            records: self.records.iter().take(n).cloned().collect(),
        }
    }

    /// Frames grouped by sequence id, in order of first appearance.
    pub fn sequences(&self) -> Vec<Vec<&SampleRecord>> {
        let mut ids: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<&SampleRecord>> = Vec::new();
        for r in &self.records {
            match ids.iter().position(|&i| i == r.sequence_id) {
                Some(p) => groups[p].push(r),
                None => {
                    ids.push(r.sequence_id);
                    groups.push(vec![r]);
                }
            }
        }
        groups
    }

    /// Vertex/patch pool for explicit-memory construction.
    pub fn vertex_patch_pool(&self) -> Result<Vec<VertexPatchPair>> {
        self.records
            .iter()
            .map(|r| {
                Ok(VertexPatchPair {
                    key: r.mouth_vertices.clone(),
                    value: extract_patch(&r.gt_image, self.config.patch)?,
                    source_frame: r.frame_id,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub identity_tag: String,
    pub t_total: usize,
    pub h_a: usize,
    pub h_c: usize,
    pub h_v: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub identity: IdentitySpec,
    pub config: SynthConfig,
    pub style_ids: Vec<usize>,
    pub frame_ids: Vec<usize>,
    pub sequence_ids: Vec<usize>,
    pub blobs: Vec<BlobEntry>,
    /// Digest of this manifest with `content_hash` blanked.
    pub content_hash: String,
}

impl DatasetManifest {
    fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.content_hash = String::new();
        storage::json_hash(&m)
    }
}

const BLOB_NAMES: [&str; 7] = ["audio", "exp", "pose", "vertices", "guide", "gt", "template"];

/// Write `manifest.json` plus one `.f32` blob per field; returns the manifest hash.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<String> {
    if ds.records.is_empty() {
        return Err(Error::argument("refusing to write an empty dataset"));
    }
    storage::ensure_dir(dir)?;
    let cfg = &ds.config;
    let t = ds.records.len();
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    for r in &ds.records {
        if r.audio.len() != cfg.h_a
            || r.exp.len() != cfg.h_c
            || r.mouth_vertices.coords.dim() != (cfg.h_v, 3)
            || r.guide.dim() != (h, w)
            || r.gt_image.dim() != (h, w, c)
            || r.masked_template.dim() != (h, w, c)
        {
            return Err(Error::argument(format!("record {} has inconsistent shapes", r.frame_id)));
        }
    }
    let collect_f32 = |f: &dyn Fn(&SampleRecord) -> Vec<f32>| -> Vec<f32> { ds.records.iter().flat_map(f).collect() };
    let fields: Vec<(&str, Vec<usize>, Vec<f32>)> = vec![
        ("audio", vec![t, cfg.h_a], collect_f32(&|r| r.audio.to_vec())),
        ("exp", vec![t, cfg.h_c], collect_f32(&|r| r.exp.iter().map(|&x| x as f32).collect())),
        ("pose", vec![t, 6], collect_f32(&|r| r.pose.iter().map(|&x| x as f32).collect())),
        ("vertices", vec![t, cfg.h_v, 3], collect_f32(&|r| r.mouth_vertices.coords.iter().map(|&x| x as f32).collect())),
        ("guide", vec![t, h, w], collect_f32(&|r| r.guide.iter().copied().collect())),
        ("gt", vec![t, h, w, c], collect_f32(&|r| r.gt_image.iter().copied().collect())),
        ("template", vec![t, h, w, c], collect_f32(&|r| r.masked_template.iter().copied().collect())),
    ];
    let mut blobs = Vec::new();
    for (name, shape, values) in fields {
        let mut b = BlobBuilder::new(format!("{name}.f32"));
        b.push(name, &shape, &values)?;
        blobs.push(b.write(dir)?);
    }
    let mut manifest = DatasetManifest {
        identity_tag: ds.identity.tag.clone(),
        t_total: t,
        h_a: cfg.h_a,
        h_c: cfg.h_c,
        h_v: cfg.h_v,
        height: h,
        width: w,
        channels: c,
        patch: cfg.patch,
        identity: ds.identity.clone(),
        config: cfg.clone(),
        style_ids: ds.records.iter().map(|r| r.style_id).collect(),
        frame_ids: ds.records.iter().map(|r| r.frame_id).collect(),
        sequence_ids: ds.records.iter().map(|r| r.sequence_id).collect(),
        blobs,
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_hash();
    storage::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest.content_hash)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = storage::read_json(&dir.join("manifest.json"))?;
    if m.compute_hash() != m.content_hash {
        return Err(Error::integrity("manifest.json", "manifest hash mismatch"));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let t = m.t_total;
    if m.style_ids.len() != t || m.frame_ids.len() != t || m.sequence_ids.len() != t {
        return Err(Error::integrity("manifest.json", "id lists disagree with frame count"));
    }
    let (h, w, c) = (m.height, m.width, m.channels);
    let expected: [Vec<usize>; 7] = [
        vec![t, m.h_a],
        vec![t, m.h_c],
        vec![t, 6],
        vec![t, m.h_v, 3],
        vec![t, h, w],
        vec![t, h, w, c],
        vec![t, h, w, c],
    ];
    let mut data: Vec<Vec<f32>> = Vec::new();
    for (name, shape) in BLOB_NAMES.iter().zip(expected.iter()) {
        let entry = m
            .blobs
            .iter()
            .find(|b| b.file == format!("{name}.f32"))
            .ok_or_else(|| Error::integrity(format!("{name}.f32"), "missing from manifest"))?;
        let contents = storage::read_blob(dir, entry)?;
        data.push(contents.get_shaped(name, shape)?.to_vec());
    }
    let [audio, exp, pose, verts, guide, gt, template]: [Vec<f32>; 7] = data.try_into().unwrap();
    let mut records = Vec::with_capacity(t);
    let img = h * w * c;
    for i in 0..t {
        records.push(SampleRecord {
            audio: Array1::from(audio[i * m.h_a..(i + 1) * m.h_a].to_vec()),
            exp: exp[i * m.h_c..(i + 1) * m.h_c].iter().map(|&x| x as f64).collect(),
            pose: std::array::from_fn(|j| pose[i * 6 + j] as f64),
            mouth_vertices: MouthVertexSet {
                coords: Array2::from_shape_vec(
                    (m.h_v, 3),
                    verts[i * m.h_v * 3..(i + 1) * m.h_v * 3].iter().map(|&x| x as f64).collect(),
                )
                .unwrap(),
            },
            guide: Array2::from_shape_vec((h, w), guide[i * h * w..(i + 1) * h * w].to_vec()).unwrap(),
            gt_image: Array3::from_shape_vec((h, w, c), gt[i * img..(i + 1) * img].to_vec()).unwrap(),
            masked_template: Array3::from_shape_vec((h, w, c), template[i * img..(i + 1) * img].to_vec()).unwrap(),
            style_id: m.style_ids[i],
            frame_id: m.frame_ids[i],
            sequence_id: m.sequence_ids[i],
            identity_tag: m.identity_tag.clone(),
        });
    }
    Ok(Dataset {
        identity: m.identity,
        config: m.config,
        records,
    })
}
