mod common;

use common::{from_rows, max_diff, to_rows};
use mra_core::adapter::{
    fuse, gate, init_adapter, map_high, map_low, AdapterConfig, AdapterDims, FusionDirection,
    FusionType, GateActivation, GateGranularity, MappingStructure, ALL_DIRECTIONS,
    ALL_FUSION_TYPES, ALL_GATES, ALL_STRUCTURES,
};
use mra_core::tensor::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor};
use mra_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const P: &str = "adapter.0";

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn grid(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut rng(seed))
}

fn all_configs() -> Vec<AdapterConfig> {
    let mut out = Vec::new();
    for &fusion_direction in &ALL_DIRECTIONS {
        for &fusion_type in &ALL_FUSION_TYPES {
            for &mapping_structure in &ALL_STRUCTURES {
                for &gate_activation in &ALL_GATES {
                    out.push(AdapterConfig {
                        fusion_direction,
                        fusion_type,
                        mapping_structure,
                        gate_activation,
                        ..Default::default()
                    });
                }
            }
        }
    }
    out
}

fn params(cfg: &AdapterConfig, dims: AdapterDims, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_adapter(&mut s, &mut rng(seed), P, cfg, dims);
    s.cast()
}

/// Replaces every parameter with fresh random values so no term is trivially zero.
fn randomize(p: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in p.iter_mut() {
        *t = Tensor::uniform(t.shape(), -scale, scale, &mut r);
    }
}

fn eval_fuse(
    p: &ParamStore<f64>,
    cfg: &AdapterConfig,
    low: &Tensor<f64>,
    high: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let l = g.input(low.clone()).unwrap();
    let h = g.input(high.clone()).unwrap();
    let out = fuse(&mut g, p, P, cfg, l, h).unwrap();
    g.value(out).clone()
}

fn eval_gate(
    p: &ParamStore<f64>,
    cfg: &AdapterConfig,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let a = g.input(a.clone()).unwrap();
    let b = g.input(b.clone()).unwrap();
    let out = gate(&mut g, p, P, cfg, a, b).unwrap();
    g.value(out).clone()
}

#[test]
fn map_low_zero_input_zero_final_is_zero() {
    let cfg = AdapterConfig::default();
    let p = params(&cfg, AdapterDims { low: 4, high: 6 }, 1);
    assert!(p
        .get("adapter.0.f_low.conv2.w")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 3, 4])).unwrap();
    let y = map_low(&mut g, &p, P, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn map_low_matches_loop_oracle() {
    let cfg = AdapterConfig::default();
    for seed in 0..5 {
        let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, seed);
        randomize(&mut p, seed + 10, 0.5);
        let x = grid(2, 2, 4, seed + 20);
        let mut g = Graph::new();
        let v = g.input(x.clone()).unwrap();
        let y = map_low(&mut g, &p, P, v).unwrap();
        let expect = common::map_apply(&p, "adapter.0.f_low", &to_rows(&x), 2, 2);
        assert!(max_diff(&to_rows(g.value(y)), &expect) <= 1e-6);
    }
}

#[test]
fn map_low_channel_mismatch_is_shape_error() {
    let p = params(
        &AdapterConfig::default(),
        AdapterDims { low: 4, high: 6 },
        1,
    );
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2, 5])).unwrap();
    assert!(matches!(
        map_low(&mut g, &p, P, x),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn map_high_matches_direct_mlp() {
    let cfg = AdapterConfig::default();
    let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, 2);
    randomize(&mut p, 3, 1.0);
    let x = grid(1, 1, 6, 4);
    let w1 = p.get("adapter.0.f_high.fc1.w").unwrap().clone();
    let b1 = p.get("adapter.0.f_high.fc1.b").unwrap().clone();
    let w2 = p.get("adapter.0.f_high.fc2.w").unwrap().clone();
    let b2 = p.get("adapter.0.f_high.fc2.b").unwrap().clone();
    let hidden: Vec<f64> = (0..4)
        .map(|j| {
            common::gelu(b1.data()[j] + (0..6).map(|i| x.data()[i] * w1.at(&[i, j])).sum::<f64>())
        })
        .collect();
    let expect: Vec<f64> = (0..4)
        .map(|o| b2.data()[o] + (0..4).map(|j| hidden[j] * w2.at(&[j, o])).sum::<f64>())
        .collect();
    let mut g = Graph::new();
    let v = g.input(x).unwrap();
    let y = map_high(&mut g, &p, P, v).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4]);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn map_high_zero_weights_zero_output_and_shape() {
    let mut p = params(
        &AdapterConfig::default(),
        AdapterDims { low: 4, high: 6 },
        2,
    );
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let v = g.input(grid(32, 32, 6, 1)).unwrap();
    let y = map_high(&mut g, &p, P, v).unwrap();
    assert_eq!(g.shape(y), &[32, 32, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_gate_weights() {
    for (kind, expect) in [
        (GateActivation::Tanh, 0.0),
        (GateActivation::Sigmoid, 0.5),
        (GateActivation::Hsigmoid, 0.5),
    ] {
        let cfg = AdapterConfig {
            gate_activation: kind,
            ..Default::default()
        };
        let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, 5);
        for (name, t) in p.iter_mut() {
            if name.contains(".gate.") {
                t.data_mut().fill(0.0);
            }
        }
        let g = eval_gate(&p, &cfg, &grid(3, 2, 4, 1), &grid(3, 2, 4, 2));
        assert_eq!(g.shape(), &[4]);
        assert!(
            g.data().iter().all(|&v| v == expect),
            "{kind:?}: {:?}",
            g.data()
        );
    }
}

#[test]
fn gate_matches_formula() {
    for granularity in [GateGranularity::Channel, GateGranularity::Scalar] {
        for &kind in &ALL_GATES {
            let cfg = AdapterConfig {
                gate_activation: kind,
                gate_granularity: granularity,
                ..Default::default()
            };
            let mut p = params(&cfg, AdapterDims { low: 2, high: 3 }, 6);
            randomize(&mut p, 7, 1.0);
            let (a, b) = (grid(2, 2, 2, 8), grid(2, 2, 2, 9));
            let got = eval_gate(&p, &cfg, &a, &b);
            let expect = common::gate(&p, P, &cfg, &to_rows(&a), &to_rows(&b));
            for (x, y) in got.data().iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-12, "{kind:?} {granularity:?}");
            }
        }
    }
}

#[test]
fn gate_rejects_mismatched_inputs() {
    let cfg = AdapterConfig::default();
    let p = params(&cfg, AdapterDims { low: 4, high: 6 }, 1);
    let mut g = Graph::new();
    let a = g.input(grid(2, 2, 4, 1)).unwrap();
    let b = g.input(grid(2, 3, 4, 1)).unwrap();
    assert!(matches!(
        gate(&mut g, &p, P, &cfg, a, b),
        Err(Error::Alignment { .. })
    ));
}

#[test]
fn identity_at_initialization_for_every_variant() {
    let dims = AdapterDims { low: 4, high: 6 };
    for cfg in all_configs() {
        for seed in 0..3 {
            let p = params(&cfg, dims, seed);
            let low = grid(3, 3, 4, seed + 1);
            let high = grid(3, 3, 6, seed + 2);
            let out = eval_fuse(&p, &cfg, &low, &high);
            let target = match cfg.fusion_direction {
                FusionDirection::HighToLow => &low,
                FusionDirection::LowToHigh => &high,
            };
            assert_eq!(out.data(), target.data(), "{cfg:?}");
        }
    }
}

#[test]
fn fuse_matches_term_by_term_evaluation() {
    let dims = AdapterDims { low: 2, high: 3 };
    for cfg in all_configs() {
        let mut p = params(&cfg, dims, 11);
        randomize(&mut p, 12, 0.8);
        let (low, high) = (grid(1, 1, 2, 13), grid(1, 1, 3, 14));
        let got = eval_fuse(&p, &cfg, &low, &high);
        let (_, expect) = common::fuse(&p, P, &cfg, &to_rows(&low), &to_rows(&high), 1, 1);
        assert!(max_diff(&to_rows(&got), &expect) <= 1e-12, "{cfg:?}");
    }
}

#[test]
fn sum_and_concat_agree_on_shape() {
    let dims = AdapterDims { low: 4, high: 6 };
    let (low, high) = (grid(3, 2, 4, 1), grid(3, 2, 6, 2));
    for fusion_type in [FusionType::Sum, FusionType::Concat] {
        let cfg = AdapterConfig {
            fusion_type,
            ..Default::default()
        };
        let mut p = params(&cfg, dims, 3);
        randomize(&mut p, 4, 0.5);
        assert_eq!(eval_fuse(&p, &cfg, &low, &high).shape(), &[3, 2, 4]);
    }
}

#[test]
fn misaligned_grids_are_rejected() {
    let cfg = AdapterConfig::default();
    let p = params(&cfg, AdapterDims { low: 4, high: 6 }, 1);
    let mut g = Graph::new();
    let l = g.input(grid(4, 4, 4, 1)).unwrap();
    let h = g.input(grid(2, 2, 6, 1)).unwrap();
    match fuse(&mut g, &p, P, &cfg, l, h).unwrap_err() {
        Error::Alignment { left, right, .. } => {
            assert_eq!(left, vec![4, 4, 4]);
            assert_eq!(right, vec![2, 2, 6]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn single_position_grid_is_legal() {
    let cfg = AdapterConfig::default();
    let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, 1);
    randomize(&mut p, 2, 0.5);
    let out = eval_fuse(&p, &cfg, &grid(1, 1, 4, 3), &grid(1, 1, 6, 4));
    assert_eq!(out.shape(), &[1, 1, 4]);
}

#[test]
fn gate_path_gradients() {
    let cfg = AdapterConfig::default();
    for seed in 0..3 {
        let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, seed);
        randomize(&mut p, seed + 40, 0.3);
        let gate_only: ParamStore<f64> = {
            let mut s = ParamStore::new();
            for (n, t) in p.iter().filter(|(n, _)| n.contains(".gate.")) {
                s.insert(n.clone(), t.clone());
            }
            s
        };
        let (a, b) = (grid(2, 2, 4, seed + 50), grid(2, 2, 4, seed + 60));
        let weights = grid(1, 1, 4, seed + 70).reshape(&[4]).unwrap();
        let reports = grad_check(
            |g, s| {
                let a = g.constant(a.clone())?;
                let b = g.constant(b.clone())?;
                let v = gate(g, s, P, &cfg, a, b)?;
                let w = g.constant(weights.clone())?;
                let y = g.mul(v, w)?;
                g.sum(y)
            },
            &gate_only,
            &GradCheckConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(reports.len(), 4);
        for r in reports {
            assert!(r.passed && r.max_rel_err <= 1e-3, "{r:?}");
        }
    }
}

#[test]
fn every_adapter_parameter_passes_grad_check() {
    let dims = AdapterDims { low: 4, high: 6 };
    let mut configs = all_configs();
    configs.push(AdapterConfig {
        gate_granularity: GateGranularity::Scalar,
        ..Default::default()
    });
    for (i, cfg) in configs.iter().enumerate() {
        let mut p = params(cfg, dims, i as u64);
        randomize(&mut p, 100 + i as u64, 0.4);
        let low = grid(2, 2, 4, 200 + i as u64);
        let high = grid(2, 2, 6, 300 + i as u64);
        let out_c = dims.target(cfg);
        let weights = grid(2, 2, out_c, 400 + i as u64);
        let reports = grad_check(
            |g, s| {
                let l = g.constant(low.clone())?;
                let h = g.constant(high.clone())?;
                let y = fuse(g, s, P, cfg, l, h)?;
                let w = g.constant(weights.clone())?;
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &p,
            &GradCheckConfig {
                seed: i as u64,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(reports.len(), p.len());
        for r in reports {
            assert!(r.passed, "{cfg:?}: {r:?}");
        }
    }
}

#[test]
fn structure_names_map_to_module_kinds() {
    use mra_core::adapter::MapKind;
    assert_eq!(MappingStructure::MlpConv.high_kind(), MapKind::Mlp);
    assert_eq!(MappingStructure::MlpConv.low_kind(), MapKind::Conv);
    assert_eq!(MappingStructure::ConvConv.high_kind(), MapKind::Conv);
    assert_eq!(MappingStructure::ConvMlp.low_kind(), MapKind::Mlp);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn map_low_preserves_shape(h in 1usize..9, w in 1usize..9, seed in 0u64..100) {
        let p = params(&AdapterConfig::default(), AdapterDims { low: 3, high: 5 }, seed);
        let mut g = Graph::new();
        let x = g.input(grid(h, w, 3, seed)).unwrap();
        let y = map_low(&mut g, &p, P, x).unwrap();
        prop_assert_eq!(g.shape(y), &[h, w, 3]);
    }

    #[test]
    fn gate_stays_in_range(seed in 0u64..10_000, kind in 0usize..2) {
        let gate_activation = [GateActivation::Tanh, GateActivation::Sigmoid][kind];
        let cfg = AdapterConfig { gate_activation, ..Default::default() };
        let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, seed);
        randomize(&mut p, seed + 1, 1.0);
        let g = eval_gate(&p, &cfg, &grid(2, 3, 4, seed + 2), &grid(2, 3, 4, seed + 3));
        for &v in g.data() {
            match gate_activation {
                GateActivation::Tanh => prop_assert!(v > -1.0 && v < 1.0),
                _ => prop_assert!(v > 0.0 && v < 1.0),
            }
        }
    }

    #[test]
    fn gate_is_permutation_invariant(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = AdapterConfig::default();
        let mut p = params(&cfg, AdapterDims { low: 4, high: 6 }, seed);
        randomize(&mut p, seed + 1, 1.0);
        let (a, b) = (grid(2, 3, 4, seed + 2), grid(2, 3, 4, seed + 3));
        let g0 = eval_gate(&p, &cfg, &a, &b);
        let g1 = eval_gate(&p, &cfg, &permute(&a, &perm), &permute(&b, &perm));
        prop_assert!(g0.max_abs_diff(&g1) <= 1e-12);
    }

    // A 3x3 convolution only commutes with arbitrary position shuffles when
    // its off-centre taps are zero, so the maps are made pointwise here.
    #[test]
    fn fusion_is_permutation_equivariant(
        seed in 0u64..1000,
        cfg_idx in 0usize..36,
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cfg = &all_configs()[cfg_idx];
        let mut p = params(cfg, AdapterDims { low: 3, high: 5 }, seed);
        randomize(&mut p, seed + 1, 0.5);
        for (name, t) in p.iter_mut() {
            if name.ends_with("conv1.w") {
                let s = t.shape().to_vec();
                let block = s[2] * s[3];
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    if i / block != 4 {
                        *v = 0.0;
                    }
                }
            }
        }
        let (low, high) = (grid(2, 3, 3, seed + 2), grid(2, 3, 5, seed + 3));
        let out = eval_fuse(&p, cfg, &low, &high);
        let out_p = eval_fuse(&p, cfg, &permute(&low, &perm), &permute(&high, &perm));
        prop_assert!(permute(&out, &perm).max_abs_diff(&out_p) <= 1e-12);
    }
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let rows = to_rows(t);
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    from_rows(&shuffled, &t.shape()[..2])
}
