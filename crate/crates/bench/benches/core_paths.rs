use std::hint::black_box;

use candle_core::Device;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use supportmem::evalsuite::corpus_metrics;
use supportmem::membank::MemoryBank;
use supportmem::netcore::{Batch, DecodeConfig, Dropout, EncoderInputs, MemorySelection, ModelConfig, SpecialIds};
use supportmem::{EncodedSample, StrategyMemoryModel};

const SP: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

fn membank(c: &mut Criterion) {
    let mut group = c.benchmark_group("membank");
    for dim in [64usize, 768] {
        let row: Vec<f32> = (0..dim).map(|i| i as f32 * 1e-3).collect();
        group.throughput(Throughput::Elements(1));
        group.bench_with_input(BenchmarkId::new("store_full", dim), &dim, |b, &dim| {
            let mut bank = MemoryBank::new(8, 64, dim).unwrap();
            for g in 0..8 {
                for _ in 0..64 {
                    bank.store(g, &row).unwrap();
                }
            }
            let mut g = 0;
            b.iter(|| {
                bank.store(g, black_box(&row)).unwrap();
                g = (g + 1) % 8;
            });
        });
        group.bench_with_input(BenchmarkId::new("read_full", dim), &dim, |b, &dim| {
            let mut bank = MemoryBank::new(8, 64, dim).unwrap();
            for _ in 0..64 {
                bank.store(3, &row).unwrap();
            }
            b.iter(|| black_box(bank.read(3).unwrap()));
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let words = ["i", "am", "sorry", "to", "hear", "that", "have", "you", "talked", "with", "a", "friend", "about", "it", "?", "."];
    let sentence = |seed: usize, len: usize| -> String {
        (0..len).map(|k| words[(seed * 7 + k * 3 + k * k) % words.len()]).collect::<Vec<_>>().join(" ")
    };
    let mut group = c.benchmark_group("metrics");
    for n in [100usize, 1000] {
        let hyps: Vec<String> = (0..n).map(|i| sentence(i, 8 + i % 9)).collect();
        let refs: Vec<String> = (0..n).map(|i| sentence(i + 1, 10 + i % 7)).collect();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("corpus_metrics", n), &n, |b, _| {
            b.iter(|| black_box(corpus_metrics(&hyps, &refs).unwrap()));
        });
    }
    group.finish();
}

fn sample(i: usize, vocab: u32) -> EncodedSample {
    let ids = |n: usize, off: usize| -> Vec<u32> { (0..n).map(|k| 4 + ((k * 13 + off) as u32 % (vocab - 4))).collect() };
    EncodedSample {
        conv_id: i,
        turn: 1,
        context_ids: ids(96, i),
        strategy_ids: ids(64, i + 5),
        response_ids: ids(20, i + 9),
        strategy: i % 8,
        concepts: Vec::new(),
        emotions: Vec::new(),
        response_text: String::new(),
    }
}

fn model_paths(c: &mut Criterion) {
    let vocab = 2000;
    let model = StrategyMemoryModel::new(ModelConfig::test_profile(vocab), &Device::Cpu).unwrap();
    let mut bank = MemoryBank::new(8, 64, 64).unwrap();
    for g in 0..8 {
        for k in 0..16 {
            bank.store(g, &[0.01 * (g + k) as f32; 64]).unwrap();
        }
    }
    let samples: Vec<EncodedSample> = (0..8).map(|i| sample(i, vocab as u32)).collect();
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let batch = Batch::collate(&refs, SP, model.dtype(), model.device()).unwrap();

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_batch8", |b| {
        b.iter(|| {
            let out = model
                .forward(&batch, Some(&bank), MemorySelection::Gold, 0.3, 0.1, &mut Dropout::off())
                .unwrap();
            black_box(out.total.to_scalar::<f32>().unwrap())
        });
    });
    group.bench_function("forward_backward_batch8", |b| {
        b.iter(|| {
            let out = model
                .forward(&batch, Some(&bank), MemorySelection::Gold, 0.3, 0.1, &mut Dropout::off())
                .unwrap();
            black_box(out.total.backward().unwrap())
        });
    });
    let one = EncoderInputs::collate(&refs[..1], SP, model.dtype(), model.device()).unwrap();
    let ctx = model.prepare(&one, Some(&bank), MemorySelection::Predicted).unwrap();
    let decode = DecodeConfig {
        max_steps: 32,
        ..DecodeConfig::greedy()
    };
    group.bench_function("greedy_decode_32", |b| {
        b.iter(|| black_box(model.generate(&ctx, &decode, SP).unwrap()));
    });
    group.finish();
}

criterion_group!(benches, membank, metrics, model_paths);
criterion_main!(benches);
