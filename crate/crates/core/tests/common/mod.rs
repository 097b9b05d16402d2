#![allow(dead_code)]

use lmort_core::tensor::Mat;
use lmort_core::tuner::{tuner_backward, tuner_forward, OutputGrad, TunerConfig, TunerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, gaussian_vec(rng, rows * cols))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn set_value(p: &mut TunerParams, tensor: usize, k: usize, v: f64) {
    let mut t = 0;
    p.for_each_mut(|_, m| {
        if t == tensor {
            m.as_mut_slice()[k] = v;
        }
        t += 1;
    });
}

/// Worst parameter gradient mismatch against central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    /// Failures that pass at step `h / 10`.
    pub resolved_finer: usize,
    /// Worst relative error among failures at step `h / 10`.
    pub worst_rel_finer: f64,
}

/// Smallest distance of any reduction pre-activation from the ReLU kink,
/// relative to how far a single `h` probe can move it. Values above 1 mean no
/// central difference of step `h` straddles a kink.
pub fn kink_clearance(h_a: &Mat, h_u: &Mat, params: &TunerParams, h: f64) -> f64 {
    let Some(red) = &params.reduction else {
        return f64::INFINITY;
    };
    let mut clearance = f64::INFINITY;
    for x in [h_a, h_u] {
        let mut z = x.matmul(&red.w1);
        z.add_row_broadcast(&red.b1);
        for t in 0..x.rows() {
            let reach = h * x.row(t).iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for zv in z.row(t) {
                clearance = clearance.min(zv.abs() / reach);
            }
        }
    }
    clearance
}

/// Central-difference check of every parameter gradient for the scalar
/// objective `sum(weights ⊙ output)`. Inputs are redrawn until no probe
/// crosses a reduction ReLU kink. Failing entries are rechecked at `h / 10`.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    config: &TunerConfig,
    d_llm: usize,
    mask: &[bool],
    seed: u64,
    perturb: f64,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheck {
    let n = mask.len();
    let mut r = rng(seed);
    let (h_a, h_u, weights, params) = loop {
        let h_a = gaussian_mat(&mut r, n, d_llm);
        let h_u = gaussian_mat(&mut r, n, d_llm);
        let weights = gaussian_mat(&mut r, n, config.d_model);
        let mut params = TunerParams::init(config, d_llm).unwrap();
        // move biases and gains away from their initial constants
        if perturb > 0.0 {
            params.for_each_mut(|_, m| {
                for x in m.as_mut_slice() {
                    *x += perturb * r.sample::<f64, _>(StandardNormal);
                }
            });
        }
        if kink_clearance(&h_a, &h_u, &params, h) > 1.0 {
            break (h_a, h_u, weights, params);
        }
    };

    let objective = |p: &TunerParams| -> f64 {
        let (out, _) = tuner_forward(&h_a, &h_u, mask, p, config).unwrap();
        out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = tuner_forward(&h_a, &h_u, mask, &params, config).unwrap();
    let grads = tuner_backward(&params, &tape, &OutputGrad::Tokens(weights.clone())).unwrap();

    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.as_slice().to_vec()))
        .collect();
    let originals: Vec<Vec<f64>> = params
        .tensors()
        .into_iter()
        .map(|(_, m)| m.as_slice().to_vec())
        .collect();

    let mut check = GradCheck {
        checked: 0,
        failures: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
        resolved_finer: 0,
        worst_rel_finer: 0.0,
    };
    let rel_error = |numeric: f64, analytic: f64| {
        let diff = (numeric - analytic).abs();
        if diff <= abs_floor {
            0.0
        } else {
            diff / numeric.abs().max(analytic.abs())
        }
    };
    let mut work = params.clone();
    let central = |work: &mut TunerParams, t: usize, k: usize, x: f64, step: f64| {
        set_value(work, t, k, x + step);
        let plus = objective(work);
        set_value(work, t, k, x - step);
        let minus = objective(work);
        set_value(work, t, k, x);
        (plus - minus) / (2.0 * step)
    };
    for (t, (name, g)) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let x = originals[t][k];
            let rel = rel_error(central(&mut work, t, k, x, h), g[k]);
            check.checked += 1;
            if rel >= rel_tol {
                check.failures += 1;
                let finer = rel_error(central(&mut work, t, k, x, h / 10.0), g[k]);
                check.worst_rel_finer = check.worst_rel_finer.max(finer);
                if finer < rel_tol {
                    check.resolved_finer += 1;
                }
            }
            if rel > check.worst_rel {
                check.worst_rel = rel;
                check.worst_name = format!("{name}[{k}]");
            }
        }
    }
    check
}

pub mod strategies {
    use lmort_core::hidden_states::LayeredStates;
    use lmort_core::tuner::{ConnectionMode, Reduction, TunerConfig, TunerParams};
    use proptest::prelude::*;
    use rand::Rng;

    pub fn finite_f32() -> impl Strategy<Value = f32> {
        prop_oneof![
            -1.0e6f32..1.0e6f32,
            Just(0.0f32),
            Just(-0.0f32),
            Just(f32::MIN_POSITIVE),
            Just(f32::MAX),
        ]
    }

    pub fn sequence_id() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9_\\-\u{e9}\u{4e2d}]{1,12}"
    }

    fn record(d: usize, layers: Vec<u32>) -> impl Strategy<Value = LayeredStates> {
        (sequence_id(), 1usize..6).prop_flat_map(move |(id, n)| {
            let layers = layers.clone();
            let count = layers.len();
            (
                proptest::collection::vec(proptest::collection::vec(finite_f32(), n * d), count),
                proptest::collection::vec(any::<bool>(), n),
                0..n,
            )
                .prop_map(move |(states, mut mask, keep)| {
                    mask[keep] = true;
                    LayeredStates {
                        sequence_id: id.clone(),
                        d_model: d,
                        layer_indices: layers.clone(),
                        states,
                        attention_mask: mask,
                    }
                })
        })
    }

    /// Record sets that share one width and one layer set.
    pub fn dump_records() -> impl Strategy<Value = Vec<LayeredStates>> {
        (1usize..6, proptest::collection::btree_set(0u32..12, 1..4), 0usize..5).prop_flat_map(
            |(d, layers, count)| {
                let layers: Vec<u32> = layers.into_iter().collect();
                proptest::collection::vec(record(d, layers), count)
            },
        )
    }

    /// `(ids, dim, data)` with unique ids.
    pub fn vector_file() -> impl Strategy<Value = (Vec<String>, usize, Vec<f32>)> {
        (0usize..8, proptest::collection::btree_set(sequence_id(), 0..10)).prop_flat_map(|(dim, ids)| {
            let ids: Vec<String> = ids.into_iter().collect();
            let len = ids.len() * dim;
            (Just(ids), Just(dim), proptest::collection::vec(finite_f32(), len))
        })
    }

    /// Random tuner configs paired with a compatible backbone width.
    pub fn tuner_config() -> impl Strategy<Value = (TunerConfig, usize)> {
        (
            1usize..4,
            1usize..4,
            1usize..5,
            1usize..4,
            any::<bool>(),
            any::<bool>(),
            any::<bool>(),
            proptest::option::of((1usize..9, 1usize..9)),
            any::<u64>(),
            (0u32..40, 0u32..40),
        )
            .prop_map(
                |(blocks, heads, head_dim, mult, cross, u2a, reread, reduction, seed, (a, u))| {
                    let d = heads * head_dim;
                    let (reduction, d_llm) = match reduction {
                        Some((hidden, d_llm)) => (Some(Reduction { hidden_dim: hidden, out_dim: d }), d_llm),
                        None => (None, d),
                    };
                    let config = TunerConfig {
                        n_blocks: blocks,
                        d_model: d,
                        n_heads: heads,
                        ffn_multiplier: mult,
                        connection_mode: if u2a { ConnectionMode::UToA } else { ConnectionMode::AToU },
                        reduction,
                        seed,
                        align_layer: a,
                        uniform_layer: u,
                        cross_attention: cross,
                        reread_self_source: reread,
                        ..TunerConfig::default()
                    };
                    (config, d_llm)
                },
            )
    }

    /// Initialised parameters with every value moved to a random `f32`.
    pub fn scrambled_params(config: &TunerConfig, d_llm: usize, seed: u64) -> TunerParams {
        let mut p = TunerParams::init(config, d_llm).unwrap();
        let mut r = super::rng(seed);
        p.for_each_mut(|_, m| {
            for x in m.as_mut_slice() {
                *x = r.random_range(-3.0f32..3.0) as f64;
            }
        });
        p
    }
}
