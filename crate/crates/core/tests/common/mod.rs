//! Central finite differences against autodiff, all in f64.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use talkmem::audio2expression::{self, A2EConfig, A2ELossWeights, A2EMemory, A2EModel, FrameTable, MouthGeometry};
use talkmem::explicit_memory::{build_explicit_memory, BuildOptions};
use talkmem::memory_attention::{self, AttentionDims, AttentionParams, SimKind};
use talkmem::nn::{self, ParamGroup, ParamStore};
use talkmem::renderer::{
    self, Discriminator, DiscriminatorConfig, NrFrameTable, NrLossWeights, NrMemory, RandomConvFeatures, RendererConfig,
    RendererModel,
};
use talkmem::audio2expression::A2ETrainConfig;
use talkmem::eval_harness::{AblationPlan, DataProtocol, ExperimentConfig, Sweeps, Variant};
use talkmem::renderer::NrTrainConfig;
use talkmem::synth_data::{generate_identity, Dataset, DatasetPlan, SynthConfig};

pub const EPS: f64 = 1e-5;
pub const SAMPLES: usize = 24;
pub const TOL: f64 = 1e-3;

/// Relative error with a floor so that vanishing entries compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare autodiff against central differences on `SAMPLES` random
/// `(parameter, index)` entries of the trainable params in `store`.
pub fn check(store: &ParamStore, seed: u64, loss: impl Fn() -> Tensor) -> usize {
    let grads = loss().backward().unwrap();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Frozen)
        .map(|(n, _)| n.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SAMPLES {
        let name = &names[rng.random_range(0..names.len())];
        let var = store.var(name).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => nn::to_f64_vec(g).unwrap(),
            None => vec![0.0; store.values_f64(name).unwrap().len()],
        };
        let base = store.values_f64(name).unwrap();
        let i = rng.random_range(0..base.len());
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            store.assign_f64(name, v).unwrap();
            nn::scalar_f64(&loss()).unwrap()
        };
        let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
        store.assign_f64(name, base).unwrap();
        let e = rel_err(analytic[i], numeric);
        assert!(e < TOL, "{name}[{i}]: autodiff {} vs numeric {numeric} (rel {e:e})", analytic[i]);
    }
    SAMPLES
}

pub fn attend_gradients() -> usize {
    let mut total = 0;
    for (k, kind) in [SimKind::Dot, SimKind::NegL2].into_iter().enumerate() {
        let mut store = ParamStore::new(DType::F64, 11 + k as u64);
        let dims = AttentionDims { d_q: 5, d_k: 4, d_v: 3, hidden: 6, h_out: 4, d_out: 2 };
        let params = AttentionParams::register(&mut store, "a", dims, kind).unwrap();
        let q = store.normal("q", &[3, 5], 1.0, ParamGroup::Model).unwrap();
        let keys = store.normal("k", &[7, 4], 1.0, ParamGroup::Model).unwrap();
        let values = store.normal("v", &[7, 3], 1.0, ParamGroup::Model).unwrap();
        let r = nn::tensor_from_f64((0..6).map(|i| (i as f64 * 0.7).sin()).collect(), &[3, 2], DType::F64).unwrap();
        let n = check(&store, 100 + k as u64, || {
            (memory_attention::attend(&q, &keys, &values, &params).unwrap() * &r)
                .unwrap()
                .sum_all()
                .unwrap()
        });
        total += n;
    }
    total
}

pub fn pairwise_cosine_corr_gradients() -> usize {
    let mut store = ParamStore::new(DType::F64, 5);
    let x = store.normal("x", &[6, 4], 1.0, ParamGroup::Memory).unwrap();
    
    check(&store, 7, || memory_attention::pairwise_cosine_corr(&x).unwrap())
}

pub fn tiny_a2e_data() -> Dataset {
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
    Dataset::generate(&id, &cfg, DatasetPlan { sequences: 2, frames_per_sequence: 6, seed: 3 }).unwrap()
}

pub fn a2e_total_loss_gradients() -> usize {
    let ds = tiny_a2e_data();
    let basis = ds.basis().unwrap();
    let cfg = A2EConfig {
        h_a: 6,
        h_c: 5,
        width: 8,
        heads: 2,
        ff: 8,
        layers: 1,
        m: 5,
        memory: A2EMemory::Implicit,
        init_std: 0.5,
        ..A2EConfig::default()
    };
    let model = A2EModel::new(cfg, DType::F64).unwrap();
    let table = FrameTable::new(&ds, &basis).unwrap();
    let geom = MouthGeometry::new(&basis, DType::F64).unwrap();
    let batch = table.batch(&[(0..4).collect(), (6..10).collect()], DType::F64).unwrap();
    
    check(&model.store, 3, || {
        audio2expression::a2e_loss(&model, &batch, &geom, A2ELossWeights::default())
            .unwrap()
            .total
    })
}

pub fn renderer_generator_loss_gradients() -> usize {
    let synth = SynthConfig { height: 8, width: 8, patch: 4, h_v: 4, v_total: 12, ..SynthConfig::default() };
    let id = generate_identity(2, &synth).unwrap();
    let ds = Dataset::generate(&id, &synth, DatasetPlan { sequences: 1, frames_per_sequence: 6, seed: 4 }).unwrap();
    let bank = build_explicit_memory(&ds.vertex_patch_pool().unwrap(), &BuildOptions::new(3, 0, id.tag.clone())).unwrap();
    let rc = RendererConfig {
        height: 8,
        width: 8,
        patch: 4,
        h_v: 4,
        base_channels: 2,
        depth: 1,
        key_hidden: 4,
        memory: NrMemory::Explicit,
        ..RendererConfig::default()
    };
    let model = RendererModel::new(rc.clone(), DType::F64).unwrap();
    let prepared = model.prepare_bank(&bank).unwrap();
    let disc = Discriminator::new(DiscriminatorConfig { channels: 2, ..DiscriminatorConfig::default() }, DType::F64).unwrap();
    let feats = RandomConvFeatures::new(3, DType::F64).unwrap();
    let table = NrFrameTable::new(&ds, &rc).unwrap();
    let (x, q, gt) = table.batch(&[0, 3], DType::F64).unwrap();
    
    check(&model.store, 9, || {
        renderer::generator_loss_tensors(&model, &x, &q, &gt, Some(&prepared), &disc, &feats, NrLossWeights::default())
            .unwrap()
            .total
    })
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        h_a: 6,
        h_c: 5,
        h_v: 4,
        v_total: 12,
        h_id: 2,
        height: 16,
        width: 16,
        patch: 4,
        ..SynthConfig::default()
    }
}

pub fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        synth: tiny_synth(),
        data: DataProtocol {
            sequences: 4,
            frames_per_sequence: 8,
            heldout_sequences: 1,
            identity_seed: 100,
        },
        a2e: A2EConfig {
            width: 8,
            heads: 2,
            ff: 8,
            layers: 1,
            m: 6,
            ..A2EConfig::default()
        },
        a2e_train: A2ETrainConfig {
            lr: 1e-3,
            epochs: 2,
            window: 6,
            batch_size: 4,
            ..A2ETrainConfig::default()
        },
        renderer: RendererConfig {
            base_channels: 4,
            depth: 2,
            key_hidden: 8,
            implicit_slots: 8,
            ..RendererConfig::default()
        },
        renderer_train: NrTrainConfig {
            lr: 1e-3,
            disc_lr: 1e-3,
            epochs: 1,
            ..NrTrainConfig::default()
        },
        disc: DiscriminatorConfig {
            channels: 4,
            ..DiscriminatorConfig::default()
        },
        bank_n: 6,
        explicit_a2e_pairs: 6,
    }
}

pub fn tiny_plan() -> AblationPlan {
    AblationPlan {
        variants: vec![
            Variant { a2e_memory: A2EMemory::None, nr_memory: NrMemory::Explicit },
            Variant { a2e_memory: A2EMemory::Implicit, nr_memory: NrMemory::None },
            Variant { a2e_memory: A2EMemory::Explicit, nr_memory: NrMemory::Implicit },
        ],
        sweeps: Sweeps { m: vec![4], n: vec![4], d: vec![4] },
        seeds: vec![0, 1],
    }
}
