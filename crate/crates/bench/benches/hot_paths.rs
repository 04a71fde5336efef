use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medreid_core::backbone::BackboneConfig;
use medreid_core::compa::CompaConfig;
use medreid_core::med_prior::MedPriorConfig;
use medreid_core::model::{ModelConfig, ReidModel};
use medreid_core::retrieval::{cmc_rank_k, rank, EmbeddingRecord};

fn small_model() -> ReidModel {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            depth: 2,
            dim: 64,
            heads: 2,
            image_size: 64,
            ..Default::default()
        },
        compa: CompaConfig {
            d_m: 64,
            ..Default::default()
        },
        med: MedPriorConfig::default(),
        n_identities: 8,
    };
    ReidModel::init(cfg, 0, DType::F32, &Device::Cpu).unwrap().0
}

fn bench_forward(c: &mut Criterion) {
    let model = small_model();
    let images = candle_core::Tensor::rand(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
    c.bench_function("embed_2x64x64", |b| {
        b.iter(|| model.embed_images(&images, None).unwrap())
    });
}

fn bench_adapter_generation(c: &mut Criterion) {
    let model = small_model();
    let images = candle_core::Tensor::rand(0f32, 1f32, (4, 3, 64, 64), &Device::Cpu).unwrap();
    c.bench_function("adapters_4x64x64", |b| {
        b.iter(|| model.adapters_for(&images, None).unwrap())
    });
}

fn bench_cmc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mk = |id: usize, pid: usize, rng: &mut ChaCha8Rng| {
        let mut e: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = e.iter().map(|x| x * x).sum::<f32>().sqrt();
        e.iter_mut().for_each(|x| *x /= n);
        EmbeddingRecord {
            record_id: format!("r{id:03}"),
            patient_id: format!("p{pid:02}"),
            modality_label: "a".into(),
            embedding: e,
        }
    };
    let gallery: Vec<_> = (0..100).map(|i| mk(i, i % 20, &mut rng)).collect();
    let queries: Vec<_> = (100..120).map(|i| mk(i, i % 20, &mut rng)).collect();
    let patient_of: std::collections::BTreeMap<String, String> = gallery
        .iter()
        .chain(queries.iter())
        .map(|r| (r.record_id.clone(), r.patient_id.clone()))
        .collect();
    c.bench_function("cmc_20x100", |b| {
        b.iter(|| {
            let results: Vec<_> = queries.iter().map(|q| rank(q, &gallery)).collect();
            cmc_rank_k(&results, &patient_of, 1).unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_adapter_generation, bench_cmc);
criterion_main!(benches);
