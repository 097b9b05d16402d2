mod common;

use common::{gaussian_mat, rng};
use lmort_core::synthetic_llm::{Emulator, EmulatorConfig};
use lmort_core::tensor::Mat;
use lmort_core::tuner::{
    count_params, encode, self_bi_attention, tuner_backward, tuner_forward, ConnectionMode, OutputGrad, Reduction,
    TunerConfig, TunerParams,
};
use proptest::prelude::*;

fn config(blocks: usize, heads: usize, head_dim: usize) -> TunerConfig {
    TunerConfig {
        n_blocks: blocks,
        d_model: heads * head_dim,
        n_heads: heads,
        ffn_multiplier: 2,
        ..TunerConfig::default()
    }
}

fn pad(m: &Mat, extra: usize, fill: f64) -> Mat {
    let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
    for k in 0..extra {
        rows.push(vec![fill + k as f64; m.cols()]);
    }
    Mat::from_rows(&rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn padding_changes_nothing(seed in any::<u64>(), n in 1usize..6, extra in 1usize..4, u2a in any::<bool>(), reduce in any::<bool>()) {
        let mut c = config(2, 2, 3);
        c.seed = seed;
        if u2a { c.connection_mode = ConnectionMode::UToA; }
        let d_llm = if reduce { c.reduction = Some(Reduction { hidden_dim: 5, out_dim: 6 }); 4 } else { 6 };
        let mut r = rng(seed);
        let h_a = gaussian_mat(&mut r, n, d_llm);
        let h_u = gaussian_mat(&mut r, n, d_llm);
        let params = TunerParams::init(&c, d_llm).unwrap();
        let mask = vec![true; n];
        let (out, _) = tuner_forward(&h_a, &h_u, &mask, &params, &c).unwrap();
        let pooled = encode(&h_a, &h_u, &mask, &params, &c).unwrap();

        let mut padded_mask = mask.clone();
        padded_mask.extend(std::iter::repeat_n(false, extra));
        let pa = pad(&h_a, extra, 7.0);
        let pu = pad(&h_u, extra, -3.0);
        let (out_p, _) = tuner_forward(&pa, &pu, &padded_mask, &params, &c).unwrap();
        let pooled_p = encode(&pa, &pu, &padded_mask, &params, &c).unwrap();
        for i in 0..n {
            for (a, b) in out.row(i).iter().zip(out_p.row(i)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
        for (a, b) in pooled.values.iter().zip(&pooled_p.values) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), n in 1usize..7, mask_bits in any::<u8>()) {
        let mut mask: Vec<bool> = (0..n).map(|i| mask_bits >> i & 1 == 1).collect();
        mask[0] = true;
        let c = config(2, 2, 2);
        let mut r = rng(seed);
        let h = gaussian_mat(&mut r, n, 4);
        let params = TunerParams::init(&TunerConfig { seed, ..c.clone() }, 4).unwrap();
        let (_, tape) = tuner_forward(&h, &h, &mask, &params, &c).unwrap();
        for block in tape.blocks() {
            let mut heads = block.self_attention().probs().to_vec();
            heads.extend(block.cross_attention().unwrap().probs().iter().cloned());
            for p in heads {
                for i in 0..p.rows() {
                    let row = p.row(i);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for (j, &m) in mask.iter().enumerate() {
                        if !m { prop_assert_eq!(row[j], 0.0); }
                    }
                }
            }
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let c = config(3, 2, 4);
    let mut r = rng(1);
    let h_a = gaussian_mat(&mut r, 6, 8);
    let h_u = gaussian_mat(&mut r, 6, 8);
    let mask = [true, true, true, false, true, true];
    let p = TunerParams::init(&c, 8).unwrap();
    let (a, _) = tuner_forward(&h_a, &h_u, &mask, &p, &c).unwrap();
    let (b, _) = tuner_forward(&h_a, &h_u, &mask, &p, &c).unwrap();
    let bits = |m: &Mat| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn shapes_for_varied_configs() {
    for (blocks, heads, hd, n) in [(1, 1, 1, 1), (2, 3, 2, 4), (4, 2, 5, 3)] {
        let c = config(blocks, heads, hd);
        let d = c.d_model;
        let mut r = rng(n as u64);
        let h = gaussian_mat(&mut r, n, d);
        let p = TunerParams::init(&c, d).unwrap();
        let (out, _) = tuner_forward(&h, &h, &vec![true; n], &p, &c).unwrap();
        assert_eq!(out.shape(), (n, d));
    }
}

#[test]
fn key_bias_gradient_vanishes() {
    // softmax is shift invariant along each row, so key biases never matter
    let c = config(2, 2, 3);
    let mut r = rng(8);
    let h_a = gaussian_mat(&mut r, 5, 6);
    let h_u = gaussian_mat(&mut r, 5, 6);
    let p = TunerParams::init(&c, 6).unwrap();
    let (_, tape) = tuner_forward(&h_a, &h_u, &[true, true, false, true, true], &p, &c).unwrap();
    let g = tuner_backward(&p, &tape, &OutputGrad::Tokens(gaussian_mat(&mut r, 5, 6))).unwrap();
    for (name, m) in g.tensors() {
        assert!(m.all_finite());
        if name.ends_with(".bk") {
            assert!(m.as_slice().iter().all(|x| x.abs() < 1e-12), "{name}");
        }
    }
}

#[test]
fn self_attention_over_identical_keys_returns_common_value() {
    let c = config(1, 2, 2);
    let p = TunerParams::init(&c, 4).unwrap();
    let row = vec![0.3, -1.0, 2.0, 0.5];
    let x = Mat::from_rows(&[row.clone(), row.clone(), row.clone()]);
    let out = self_bi_attention(&x, &[true; 3], &p.blocks[0].self_attn, 2).unwrap();
    for i in 1..3 {
        for (a, b) in out.row(0).iter().zip(out.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn count_grows_by_one_block() {
    for reduction in [None, Some(Reduction { hidden_dim: 10, out_dim: 8 })] {
        for cross in [true, false] {
            let base = TunerConfig { cross_attention: cross, reduction, ..config(1, 2, 4) };
            let deeper = TunerConfig { n_blocks: 2, ..base.clone() };
            let d = base.d_model;
            let ffn = base.ffn_multiplier;
            let attn = 4 * d * d + 4 * d;
            let c = usize::from(cross);
            let block = attn * (1 + c) + 2 * ffn * d * d + ffn * d + d + 2 * d * (2 + c);
            let d_llm = if reduction.is_some() { 5 } else { d };
            assert_eq!(count_params(&deeper, d_llm) - count_params(&base, d_llm), block);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn emulator_is_causal(seed in 0u64..1000, tokens in proptest::collection::vec(0u32..64, 1..12), extra in 0u32..64) {
        let emu = Emulator::build(EmulatorConfig { seed, vocab_size: 64, d_model: 8, n_layers: 3, n_heads: 2, max_seq_len: 16 }).unwrap();
        let layers = emu.all_layers();
        let a = emu.encode_layers("a", &tokens, &layers).unwrap();
        let mut longer = tokens.clone();
        longer.push(extra);
        let b = emu.encode_layers("b", &longer, &layers).unwrap();
        let prefix = tokens.len() * 8;
        for (sa, sb) in a.states.iter().zip(&b.states) {
            prop_assert_eq!(&sa[..], &sb[..prefix]);
        }
    }
}

#[test]
fn emulator_layer_zero_only() {
    let emu = Emulator::build(EmulatorConfig::default()).unwrap();
    let s = emu.encode_layers("x", &[1, 2, 3], &[0]).unwrap();
    assert_eq!(s.layer_indices, vec![0]);
    assert_eq!(s.states.len(), 1);
    assert_eq!(s.states[0].len(), 3 * 64);
    let seeds: Vec<_> = [1, 2]
        .iter()
        .map(|&seed| Emulator::build(EmulatorConfig { seed, ..EmulatorConfig::default() }).unwrap())
        .collect();
    assert_ne!(seeds[0].flat_weights(), seeds[1].flat_weights());
    assert!(Emulator::build(EmulatorConfig { d_model: 10, n_heads: 3, ..EmulatorConfig::default() }).is_err());
}
