mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supportmem::features::EncodedSample;
use supportmem::membank::MemoryBank;
use supportmem::netcore::{
    fuse_memory, masked_max_pool, Batch, DecodeConfig, DecodeMode, Dropout, EncoderInputs, MemorySelection,
    ModelConfig, MultiHeadAttention, SpecialIds, StrategyMemoryModel,
};

const SP: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    unk: 3,
};

fn sample(ctx: &[u32], strat: &[u32], resp: &[u32], g: usize) -> EncodedSample {
    EncodedSample {
        conv_id: 0,
        turn: 0,
        context_ids: ctx.to_vec(),
        strategy_ids: strat.to_vec(),
        response_ids: resp.to_vec(),
        strategy: g,
        concepts: Vec::new(),
        emotions: Vec::new(),
        response_text: String::new(),
    }
}

fn two_samples() -> Vec<EncodedSample> {
    vec![
        sample(&[1, 5, 6, 7, 8, 2], &[1, 5, 6, 2], &[9, 10, 11], 2),
        sample(&[1, 12, 13, 2], &[1, 12, 2], &[14, 15], 5),
    ]
}

fn test_model(vocab: usize) -> StrategyMemoryModel {
    common::model(ModelConfig::test_profile(vocab))
}

fn cpu() -> Device {
    Device::Cpu
}

#[test]
fn ten_token_context_encodes_to_ten_by_sixty_four() {
    let m = test_model(30);
    let ids = Tensor::new(&[[1u32, 4, 5, 6, 7, 8, 9, 10, 11, 2]], &cpu()).unwrap();
    let mask = Tensor::ones((1, 10), DType::F32, &cpu()).unwrap();
    let h = m.encode_context(&ids, &mask, &mut Dropout::off()).unwrap();
    assert_eq!(h.dims(), &[1, 10, 64]);
}

#[test]
fn inputs_longer_than_the_position_limit_are_rejected() {
    let m = common::model(ModelConfig {
        max_positions: 8,
        ..ModelConfig::test_profile(30)
    });
    let ids = Tensor::ones((1, 9), DType::U32, &cpu()).unwrap();
    let mask = Tensor::ones((1, 9), DType::F32, &cpu()).unwrap();
    assert!(m.encode_context(&ids, &mask, &mut Dropout::off()).is_err());
}

#[test]
fn decoder_is_teacher_forced_on_shifted_gold() {
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let b = Batch::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    assert_eq!(b.decoder_input.to_vec2::<u32>().unwrap(), vec![vec![1, 9, 10, 11], vec![1, 14, 15, 0]]);
    assert_eq!(b.decoder_target.to_vec2::<u32>().unwrap(), vec![vec![9, 10, 11, 2], vec![14, 15, 2, 0]]);
    assert_eq!(b.gold_strategies, vec![2, 5]);
}

#[test]
fn single_row_memory_fuses_to_that_row() {
    let d = 4;
    let att = MultiHeadAttention::identity(d, DType::F64, &cpu()).unwrap();
    let h = Tensor::new(&[[[0.3f64, -1.0, 2.0, 0.5], [1.0, 0.0, -0.5, 0.25]]], &cpu()).unwrap();
    let h_mask = Tensor::ones((1, 2), DType::F64, &cpu()).unwrap();
    let v = [0.7f64, -0.2, 1.5, 3.0];
    let one = Tensor::new(&[[v]], &cpu()).unwrap();
    let (m, avail) = fuse_memory(&att, &h, &h_mask, &one, &Tensor::ones((1, 1), DType::F64, &cpu()).unwrap()).unwrap();
    assert_eq!(avail.to_vec2::<f64>().unwrap(), vec![vec![1.0]]);
    let got = m.to_vec2::<f64>().unwrap()[0].clone();
    for (a, b) in got.iter().zip(v) {
        assert!((a - b).abs() < 1e-12, "{got:?}");
    }

    let two = Tensor::new(&[[v, v]], &cpu()).unwrap();
    let (m2, _) = fuse_memory(&att, &h, &h_mask, &two, &Tensor::ones((1, 2), DType::F64, &cpu()).unwrap()).unwrap();
    let diff: f64 = (m2 - &m).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn empty_memory_fuses_to_finite_zero() {
    let att = MultiHeadAttention::identity(4, DType::F32, &cpu()).unwrap();
    let h = Tensor::ones((2, 3, 4), DType::F32, &cpu()).unwrap();
    let mask = Tensor::ones((2, 3), DType::F32, &cpu()).unwrap();
    let empty = Tensor::zeros((2, 0, 4), DType::F32, &cpu()).unwrap();
    let (m, avail) = fuse_memory(&att, &h, &mask, &empty, &Tensor::zeros((2, 0), DType::F32, &cpu()).unwrap()).unwrap();
    assert_eq!(m.to_vec2::<f32>().unwrap(), vec![vec![0.0; 4]; 2]);
    assert_eq!(avail.to_vec2::<f32>().unwrap(), vec![vec![0.0]; 2]);

    // a mix of empty and populated matrices in one batch
    let model = test_model(30);
    let mut bank = MemoryBank::new(8, 4, 64).unwrap();
    bank.store(2, &[0.5; 64]).unwrap();
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let b = Batch::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let out = model.forward(&b, Some(&bank), MemorySelection::Gold, 0.3, 0.1, &mut Dropout::off()).unwrap();
    let rows = out.fused.to_vec2::<f32>().unwrap();
    assert!(rows[0].iter().any(|&x| x != 0.0));
    assert!(rows[1].iter().all(|&x| x == 0.0));
    assert!(out.breakdown().unwrap().total.is_finite());
}

#[test]
fn disabled_memory_matches_decoding_over_context_alone() {
    let model = test_model(30);
    let mut bank = MemoryBank::new(8, 4, 64).unwrap();
    for g in 0..8 {
        bank.store(g, &[0.25; 64]).unwrap();
    }
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let b = Batch::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let out = model.forward(&b, Some(&bank), MemorySelection::Disabled, 0.3, 0.1, &mut Dropout::off()).unwrap();
    assert_eq!(out.fused.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);

    let mut off = Dropout::off();
    let h = model.encode_context(&b.inputs.context_ids, &b.inputs.context_mask, &mut off).unwrap();
    let alone = model
        .decode_logits(&h, &b.inputs.context_mask, &b.decoder_input, &b.decoder_mask, &mut off)
        .unwrap();
    let diff: f32 = (out.logits - alone).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn next_token_distribution_is_normalized() {
    let model = test_model(30);
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let inputs = EncoderInputs::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let ctx = model.prepare(&inputs, None, MemorySelection::Disabled).unwrap();
    for prefix in [vec![vec![1u32], vec![1]], vec![vec![1, 7, 8], vec![1, 9, 9]]] {
        for row in model.next_token_distribution(&ctx, &prefix).unwrap() {
            assert_eq!(row.len(), 30);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "{sum}");
        }
    }
}

#[test]
fn decoding_respects_the_step_limit_and_is_deterministic() {
    let model = test_model(30);
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let inputs = EncoderInputs::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let ctx = model.prepare(&inputs, None, MemorySelection::Disabled).unwrap();
    for cfg in [DecodeConfig::greedy(), DecodeConfig::default()] {
        let a = model.generate(&ctx, &cfg, SP).unwrap();
        assert_eq!(a.len(), 2);
        for seq in &a {
            assert!(seq.len() <= 64);
            assert!(seq.iter().all(|&t| t > 3));
        }
        assert_eq!(model.generate(&ctx, &cfg, SP).unwrap(), a);
    }
    let short = DecodeConfig {
        max_steps: 3,
        min_tokens: 3,
        ..DecodeConfig::greedy()
    };
    for seq in model.generate(&ctx, &short, SP).unwrap() {
        assert_eq!(seq.len(), 3);
    }
    let one_beam = DecodeConfig {
        mode: DecodeMode::Beam,
        beam_size: 1,
        ..DecodeConfig::default()
    };
    assert_eq!(
        model.generate(&ctx, &one_beam, SP).unwrap(),
        model.generate(&ctx, &DecodeConfig::greedy(), SP).unwrap()
    );
}

#[test]
fn inference_leaves_parameters_and_bank_untouched() {
    let model = test_model(30);
    let mut bank = MemoryBank::new(8, 4, 64).unwrap();
    bank.store(1, &[0.1; 64]).unwrap();
    let before_bank = bank.snapshot();
    let before: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
        .collect();
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let inputs = EncoderInputs::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let ctx = model.prepare(&inputs, Some(&bank), MemorySelection::Predicted).unwrap();
    model.generate(&ctx, &DecodeConfig::default(), SP).unwrap();
    let after: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
        .collect();
    assert_eq!(before, after);
    assert_eq!(bank.snapshot(), before_bank);
}

#[test]
fn prediction_is_argmax_of_finite_scores() {
    let model = test_model(30);
    let s = two_samples();
    let refs: Vec<&EncodedSample> = s.iter().collect();
    let inputs = EncoderInputs::collate(&refs, SP, DType::F32, &cpu()).unwrap();
    let ctx = model.prepare(&inputs, None, MemorySelection::Disabled).unwrap();
    for (row, &p) in ctx.scores.iter().zip(&ctx.predicted) {
        assert_eq!(row.len(), 8);
        assert!(row.iter().all(|x| x.is_finite()));
        assert!(row.iter().all(|&x| x <= row[p]));
    }
}

proptest! {
    #[test]
    fn max_pool_takes_componentwise_max_of_unmasked_rows(
        seed in any::<u64>(),
        b in 1usize..4,
        t in 1usize..6,
        d in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lens: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t)).collect();
        let mask: Vec<f64> = (0..b * t).map(|n| if n % t < lens[n / t] { 1.0 } else { 0.0 }).collect();
        let xt = Tensor::from_vec(x.clone(), (b, t, d), &Device::Cpu).unwrap();
        let mt = Tensor::from_vec(mask, (b, t), &Device::Cpu).unwrap();
        let pooled = masked_max_pool(&xt, &mt).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..b {
            for k in 0..d {
                let want = (0..lens[i]).map(|j| x[(i * t + j) * d + k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(pooled[i][k], want);
            }
        }
    }

    #[test]
    fn pad_content_does_not_change_pooled_rows(seed in any::<u64>(), pad_value in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d) = (5, 3);
        let x: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        for v in &mut y[3 * d..] {
            *v = pad_value;
        }
        let mask = Tensor::new(&[[1.0f64, 1.0, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let a = masked_max_pool(&Tensor::from_vec(x, (1, t, d), &Device::Cpu).unwrap(), &mask).unwrap();
        let b = masked_max_pool(&Tensor::from_vec(y, (1, t, d), &Device::Cpu).unwrap(), &mask).unwrap();
        prop_assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
    }
}
