//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion (written straight to stdout so it shows without `--nocapture`)
//! and then asserts the same condition.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{max_diff, random_images, tiny_model_config, to_rows};
use mra_core::adapter::{
    fuse, gate, init_adapter, AdapterConfig, AdapterDims, FusionDirection, GateActivation,
    GateGranularity, ALL_DIRECTIONS, ALL_FUSION_TYPES, ALL_GATES, ALL_STRUCTURES,
};
use mra_core::checks::gradient_suite;
use mra_core::config::RunConfig;
use mra_core::cost::{
    flops_estimate, mra_low_resolution, paper_scale_model, visual_token_count, Arch, TABLE1_PAIRS,
};
use mra_core::model::{forward_loss, MraModel, Stage, TokenSequence};
use mra_core::pathways::output_grid_shape;
use mra_core::rng::{stream, substream};
use mra_core::tensor::{GradCheckConfig, Graph, ParamStore, Tensor};
use mra_core::train::{evaluate_accuracy, frozen_params_digest, run_pipeline, run_stage1};
use mra_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, ok: bool, detail: impl AsRef<str>) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} criterion {criterion}: {}", detail.as_ref());
    let _ = out.flush();
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../cli/configs")
        .join(name)
}

fn load(name: &str) -> RunConfig {
    RunConfig::load(&config_path(name)).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn all_adapter_configs() -> Vec<AdapterConfig> {
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

#[test]
fn criterion_01_token_count() {
    let start = Instant::now();
    let n = visual_token_count(Arch::BaselineVit, 1022, 0).unwrap();
    let elapsed = start.elapsed();
    let ok = n == 5329 && elapsed < Duration::from_millis(1);
    report(
        1,
        ok,
        format!("baseline tokens at 1022 = {n} (want 5329) in {elapsed:?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_alignment() {
    let start = Instant::now();
    let mut cfg = tiny_model_config(448, 1024);
    cfg.low.depth = 1;
    let low = output_grid_shape(448, 14).unwrap();
    let high = output_grid_shape(1024, 32).unwrap();
    let mut m = MraModel::init(cfg, &mut rng(0)).unwrap();
    m.insert_adapters(&mut rng(1)).unwrap();
    let features = m.encode(&random_images(448, 1024, 2), Stage::Two).unwrap();
    let tokens = m.config.visual_tokens().unwrap();
    let elapsed = start.elapsed();
    let ok = (low.h, low.w) == (32, 32)
        && (high.h, high.w) == (32, 32)
        && features.shape()[..2] == [32, 32]
        && tokens == 1024
        && elapsed < Duration::from_secs(1);
    report(
        2,
        ok,
        format!(
            "low grid {}x{}, high grid {}x{}, decoder tokens {tokens} in {elapsed:?}",
            low.h, low.w, high.h, high.w
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_gate_contract() {
    let dims = AdapterDims { low: 4, high: 6 };
    let cfg = AdapterConfig {
        gate_activation: GateActivation::Tanh,
        gate_granularity: GateGranularity::Channel,
        ..Default::default()
    };
    let prefix = "adapter.0";
    let mut r = rng(3);
    let mut inside = true;
    let mut extreme = 0f64;
    for case in 0..1000 {
        let mut p = ParamStore::new();
        init_adapter(&mut p, &mut rng(case), prefix, &cfg, dims);
        let mut p: ParamStore<f64> = p.cast();
        for (name, t) in p.iter_mut() {
            if name.contains(".gate.") {
                *t = Tensor::uniform(t.shape(), -1.0, 1.0, &mut r);
            }
        }
        let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
        let target = dims.low;
        let a = Tensor::<f64>::uniform(&[h, w, target], -2.0, 2.0, &mut r);
        let b = Tensor::<f64>::uniform(&[h, w, target], -2.0, 2.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a).unwrap(), g.input(b).unwrap());
        let out = gate(&mut g, &p, prefix, &cfg, av, bv).unwrap();
        for &v in g.value(out).data() {
            extreme = extreme.max(v.abs());
            inside &= v > -1.0 && v < 1.0;
        }
    }

    let mut p = ParamStore::new();
    init_adapter(&mut p, &mut rng(7), prefix, &cfg, dims);
    let mut p: ParamStore<f64> = p.cast();
    for (name, t) in p.iter_mut() {
        if name.contains(".gate.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut g = Graph::new();
    let a = g
        .input(Tensor::<f64>::uniform(&[2, 2, 4], -2.0, 2.0, &mut r))
        .unwrap();
    let b = g
        .input(Tensor::<f64>::uniform(&[2, 2, 4], -2.0, 2.0, &mut r))
        .unwrap();
    let out = gate(&mut g, &p, prefix, &cfg, a, b).unwrap();
    let zero = g.value(out).data().iter().all(|&v| v == 0.0);

    let ok = inside && zero;
    report(
        3,
        ok,
        format!("1000 random gates inside (-1, 1): {inside} (max |g| = 1 - {:.1e}); zero weights give g = 0: {zero}", 1.0 - extreme),
    );
    assert!(ok);
}

#[test]
fn criterion_04_identity_insertion() {
    let cfg = load("tiny.toml");
    let data = cfg.train_set().unwrap();
    let model = MraModel::init(
        cfg.model_config(Stage::One),
        &mut substream(cfg.seed, stream::INIT),
    )
    .unwrap();
    let mut stage1 = cfg.stage_config(Stage::One);
    stage1.max_steps = Some(10);
    let mut trained = run_stage1(model, &stage1, &data, cfg.seed).unwrap().model();
    let [low, high] = cfg.resolutions(Stage::One);
    for (name, t) in trained.params.iter_mut() {
        if name.starts_with("final_high_proj.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let before: Vec<_> = (0..10)
        .map(|s| {
            let img = random_images(low, high, 100 + s);
            trained.encode(&img, Stage::One).unwrap()
        })
        .collect();
    let mut inserted = trained.clone();
    inserted.insert_adapters(&mut rng(5)).unwrap();
    let mut identical = 0;
    for (s, b) in before.iter().enumerate() {
        let img = random_images(low, high, 100 + s as u64);
        let after = inserted.encode(&img, Stage::Two).unwrap();
        let plain = trained.low_only(&img.low).unwrap();
        let same = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits());
        if after.shape() == b.shape()
            && same(after.data(), b.data())
            && same(after.data(), plain.data())
        {
            identical += 1;
        }
    }
    let ok = identical == 10;
    report(
        4,
        ok,
        format!("{identical}/10 inputs bit-identical after adapter insertion"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_gradient_fidelity() {
    let cfg = load("tiny.toml");
    let model_cfg = cfg.model_config(Stage::Two);
    assert!(model_cfg.low.width <= 16 && model_cfg.decoder.width <= 16);
    assert!(model_cfg.high.stage_widths.iter().all(|&w| w <= 16));
    assert!(model_cfg.low.depth == 2 && model_cfg.decoder.depth == 2);
    let start = Instant::now();
    let mut all_passed = true;
    let mut worst = 0f64;
    let mut checked = 0;
    for seed in 0..3 {
        let check = GradCheckConfig {
            step: 1e-4,
            tol: 1e-3,
            seed,
            ..Default::default()
        };
        for suite in gradient_suite(&model_cfg, seed, &check).unwrap() {
            all_passed &= suite.passed();
            worst = worst.max(suite.max_rel_err());
            checked += suite.checked();
        }
    }
    let elapsed = start.elapsed();
    let ok = all_passed && worst <= 1e-3 && elapsed < Duration::from_secs(300);
    report(
        5,
        ok,
        format!("3 seeds, {checked} elements, max relative error {worst:.2e}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_freezing() {
    let cfg = load("tiny.toml");
    let data = cfg.train_set().unwrap();
    let model = MraModel::init(
        cfg.model_config(Stage::One),
        &mut substream(cfg.seed, stream::INIT),
    )
    .unwrap();
    let frozen = ["low", "high", "decoder"];
    let before = frozen_params_digest(&model.params, &frozen).unwrap();
    let proj_before = frozen_params_digest(&model.params, &["projector"]).unwrap();
    let mut stage1 = cfg.stage_config(Stage::One);
    stage1.max_steps = Some(50);
    stage1.epochs = 50;
    let out = run_stage1(model, &stage1, &data, cfg.seed).unwrap();
    let steps = out.metrics.len();
    let params = &out.checkpoint.params;
    let after = frozen_params_digest(params, &frozen).unwrap();
    let proj_after = frozen_params_digest(params, &["projector"]).unwrap();
    let ok = steps == 50 && before == after && proj_before != proj_after;
    report(
        6,
        ok,
        format!(
            "{steps} steps; frozen digests unchanged: {}; projector changed: {}",
            before == after,
            proj_before != proj_after
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_oracle_equivalence() {
    let configs = all_adapter_configs();
    let prefix = "adapter.0";
    let mut r = rng(7);
    let mut worst = 0f64;
    for case in 0..100 {
        let mut cfg = configs[r.gen_range(0..configs.len())].clone();
        cfg.gate_granularity = if r.gen_bool(0.5) {
            GateGranularity::Channel
        } else {
            GateGranularity::Scalar
        };
        let dims = AdapterDims {
            low: r.gen_range(1..=4),
            high: r.gen_range(1..=4),
        };
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let mut p = ParamStore::new();
        init_adapter(&mut p, &mut rng(1000 + case), prefix, &cfg, dims);
        let mut p: ParamStore<f64> = p.cast();
        for (_, t) in p.iter_mut() {
            *t = Tensor::uniform(t.shape(), -1.0, 1.0, &mut r);
        }
        let low = Tensor::<f64>::uniform(&[h, w, dims.low], -1.0, 1.0, &mut r);
        let high = Tensor::<f64>::uniform(&[h, w, dims.high], -1.0, 1.0, &mut r);

        let mut g = Graph::new();
        let (lv, hv) = (
            g.input(low.clone()).unwrap(),
            g.input(high.clone()).unwrap(),
        );
        let out = fuse(&mut g, &p, prefix, &cfg, lv, hv).unwrap();
        let (expect_gate, expect) =
            common::fuse(&p, prefix, &cfg, &to_rows(&low), &to_rows(&high), h, w);
        worst = worst.max(max_diff(&to_rows(g.value(out)), &expect));

        let low_m = common::map_apply(&p, &format!("{prefix}.f_low"), &to_rows(&low), h, w);
        let high_m = common::map_apply(&p, &format!("{prefix}.f_high"), &to_rows(&high), h, w);
        let (tm, sm) = match cfg.fusion_direction {
            FusionDirection::HighToLow => (low_m, high_m),
            FusionDirection::LowToHigh => (high_m, low_m),
        };
        let c = tm[0].len();
        let mut g = Graph::new();
        let a = g.input(common::from_rows(&tm, &[h, w])).unwrap();
        let b = g.input(common::from_rows(&sm, &[h, w])).unwrap();
        let gv = gate(&mut g, &p, prefix, &cfg, a, b).unwrap();
        let got: Vec<f64> = g.value(gv).data().to_vec();
        let got = if got.len() == 1 { vec![got[0]; c] } else { got };
        worst = worst.max(max_diff(&vec![got], &vec![expect_gate]));
    }
    let ok = worst <= 1e-6;
    report(
        7,
        ok,
        format!("100 random fuse/gate cases, max elementwise difference {worst:.2e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_08_resolution_sensitivity() {
    let base = load("default.toml");
    assert_eq!(base.resolutions(Stage::Two), [112, 256]);
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let mut acc = [0.0; 2];
        for (i, high_pathway) in [true, false].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.high_pathway = high_pathway;
            let train = cfg.train_set().unwrap();
            let eval = cfg.eval_set().unwrap();
            let (_, s2) = run_pipeline(&cfg, &train).unwrap();
            acc[i] = evaluate_accuracy(&s2.model(), Stage::Two, &eval, true).unwrap();
        }
        lines.push(format!(
            "seed {seed}: mra {:.3} baseline {:.3}",
            acc[0], acc[1]
        ));
        gaps.push(acc[0] - acc[1]);
    }
    let elapsed = start.elapsed();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let ok = mean >= 0.10 && elapsed <= Duration::from_secs(30 * 60);
    report(
        8,
        ok,
        format!(
            "mean accuracy gap {mean:.3} (want >= 0.100) [{}] in {elapsed:.0?}",
            lines.join("; ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_cost_direction() {
    let text = 128;
    let mut ok = true;
    let mut parts = Vec::new();
    for &(baseline_res, high) in TABLE1_PAIRS.iter() {
        let low = mra_low_resolution(high);
        let base =
            flops_estimate(&paper_scale_model(Arch::BaselineVit, baseline_res, 0), text).unwrap();
        let mra = flops_estimate(&paper_scale_model(Arch::Mra, low, high), text).unwrap();
        ok &= mra.prefill_flops() < base.prefill_flops();
        parts.push(format!(
            "{baseline_res} vs {low}/{high}: {:.2e} < {:.2e}",
            mra.prefill_flops() as f64,
            base.prefill_flops() as f64
        ));
    }
    let &(top_base, top_high) = TABLE1_PAIRS.last().unwrap();
    let base_tokens = visual_token_count(Arch::BaselineVit, top_base, 0).unwrap();
    let mra_tokens = visual_token_count(Arch::Mra, mra_low_resolution(top_high), top_high).unwrap();
    ok &= (base_tokens, mra_tokens) == (5329, 1024);
    report(
        9,
        ok,
        format!(
            "{}; top-pair tokens {base_tokens}/{mra_tokens}",
            parts.join("; ")
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_overflow() {
    let cfg = load("tiny.toml");
    let model = MraModel::init(
        cfg.model_config(Stage::One),
        &mut substream(cfg.seed, stream::INIT),
    )
    .unwrap();
    let [low, high] = cfg.resolutions(Stage::One);
    let img = random_images(low, high, 9);
    let visual = model.config.visual_tokens().unwrap();
    let context = model.config.decoder.context_length;
    let room = context - visual;
    let seq = |instruction: usize| TokenSequence {
        instruction: vec![1; instruction],
        answer: vec![2, 3],
    };
    let mut g = Graph::new();
    let equal = forward_loss(
        &mut g,
        &model.config,
        &model.params,
        &img,
        &seq(room - 2),
        Stage::One,
    );
    let mut g = Graph::new();
    let over = forward_loss(
        &mut g,
        &model.config,
        &model.params,
        &img,
        &seq(room - 1),
        Stage::One,
    );
    let equal_ok = equal.is_ok();
    let over_ok = matches!(over, Err(Error::ContextOverflow { needed, context: c }) if needed == context + 1 && c == context);
    let ok = equal_ok && over_ok;
    report(
        10,
        ok,
        format!("context {context}, {visual} visual tokens: total == context succeeds: {equal_ok}; total == context + 1 overflows: {over_ok}"),
    );
    assert!(ok);
}

#[test]
fn criterion_11_ablation_matrix() {
    let base = load("tiny.toml");
    let data = base.train_set().unwrap();
    let start = Instant::now();
    let mut failures = Vec::new();
    let configs = all_adapter_configs();
    for adapter in &configs {
        let mut cfg = base.clone();
        cfg.model.adapter = adapter.clone();
        cfg.train.stage2.max_steps = Some(20);
        cfg.train.stage2.epochs = 20;
        match run_pipeline(&cfg, &data) {
            Ok((_, s2))
                if s2.metrics.len() == 20 && s2.metrics.iter().all(|m| m.loss.is_finite()) => {}
            Ok((_, s2)) => failures.push(format!("{adapter:?}: {} steps", s2.metrics.len())),
            Err(e) => failures.push(format!("{adapter:?}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let ok = configs.len() == 36 && failures.is_empty() && elapsed < Duration::from_secs(600);
    report(
        11,
        ok,
        format!(
            "{} of {} configurations trained 20 finite steps in {elapsed:.1?}",
            configs.len() - failures.len(),
            configs.len()
        ),
    );
    assert!(ok, "{failures:?}");
}
