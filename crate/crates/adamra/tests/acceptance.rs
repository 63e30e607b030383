//! End-to-end acceptance gate.
//!
//! Nine checks, each printing one `PASS`/`FAIL` line (visible under
//! `cargo test --test acceptance -- --nocapture`). Tolerances and runtime
//! budgets are pinned here in code; the checks fail rather than loosen.
//! Numbered prefixes keep the report order stable.

use std::time::Instant;

use adamra::bench::{parse_measurements_csv, scaling_fit, smat, time_forward};
use adamra::config::Rate;
use adamra::cost::flop_and_memory_model;
use adamra::diffcheck::check_layer_gradient;
use adamra::layer::AdamraConfig;
use adamra::tasks::model::ModelConfig;
use adamra::tasks::train::{train, TrainOptions};
use adamra::tasks::{gen_copy_task, DEFAULT_COPY_VOCAB};
use adamra::verify::{run_all, VerifyOptions};

/// Finds one property report by name and panics (after a FAIL line) if it
/// did not pass.
fn assert_property(reports: &[adamra::verify::PropertyReport], name: &str, label: &str) {
    let r = reports
        .iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("property {} missing from suite", name));
    if r.passed {
        println!("PASS {}", label);
    } else {
        println!("FAIL {}: {}", label, r.details);
        panic!("{} failed: {}", label, r.details);
    }
}

#[test]
fn a1_composite_scores_reproduce_reference_fixture() {
    let t0 = Instant::now();
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/table3.csv"
    ))
    .expect("fixture present");
    let rows = parse_measurements_csv(&text).expect("fixture parses");
    let records = smat(&rows).expect("scoring succeeds");

    // reference scores for the shipped fixture, two decimals, ±0.02
    let expected = [0.54, 1.43, 1.37, 1.61, 2.48, 1.67, 1.54, 2.76];
    assert_eq!(records.len(), expected.len());
    let mut worst = 0.0f64;
    for (rec, want) in records.iter().zip(expected) {
        worst = worst.max((rec.smat - want).abs());
        assert!(
            (rec.smat - want).abs() <= 0.02,
            "FAIL composite scoring: {} scored {:.4}, expected {:.2} ± 0.02",
            rec.model,
            rec.smat,
            want
        );
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 1.0, "budget exceeded: {:?}", dt);
    println!(
        "PASS composite scores match the reference fixture (worst gap {:.4}, {:?})",
        worst, dt
    );
}

#[test]
fn a2_kernel_attention_matches_quadratic_oracle() {
    let t0 = Instant::now();
    let reports = run_all(&VerifyOptions { seeds: 100, ..VerifyOptions::default() });
    assert_property(
        &reports,
        "kernel-equals-explicit-quadratic",
        "kernel attention equals the explicit quadratic form (100 instances, 1e-10)",
    );
    assert!(t0.elapsed().as_secs() < 10, "budget exceeded: {:?}", t0.elapsed());
}

#[test]
fn a3_layer_matches_explicit_loop_oracle() {
    let t0 = Instant::now();
    let reports = run_all(&VerifyOptions { seeds: 100, ..VerifyOptions::default() });
    assert_property(
        &reports,
        "layer-equals-scalar-oracle",
        "full layer equals the scalar-loop oracle (100 instances, 1e-10)",
    );
    assert!(t0.elapsed().as_secs() < 30, "budget exceeded: {:?}", t0.elapsed());
}

#[test]
fn a4_single_head_full_rate_collapses_to_kernel_attention() {
    let reports = run_all(&VerifyOptions { seeds: 100, ..VerifyOptions::default() });
    assert_property(
        &reports,
        "single-head-full-rate-collapse",
        "one full-resolution head with identity projections is plain kernel attention (1e-12)",
    );
}

#[test]
fn a5_analytic_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let cfg = AdamraConfig::new(
        8,
        3,
        2,
        vec![Rate::ONE, Rate::new(1, 2).unwrap(), Rate::new(1, 4).unwrap()],
    )
    .unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let report = check_layer_gradient(&cfg, 10, seed, 1e-5).expect("smooth instance");
        worst = worst.max(report.rel_error);
    }
    let dt = t0.elapsed();
    if worst <= 1e-5 {
        println!(
            "PASS analytic gradients match finite differences (20 instances, worst {:.3e}, {:?})",
            worst, dt
        );
    } else {
        println!("FAIL gradient check: worst relative error {:.3e} > 1e-5", worst);
        panic!("gradient check failed");
    }
    assert!(dt.as_secs() < 120, "budget exceeded: {:?}", dt);
}

#[test]
fn a6_forward_time_scales_linearly_not_quadratically() {
    let t0 = Instant::now();
    let grid = [512usize, 1024, 2048, 4096, 8192];
    let cfg = adamra::bench::bench_config();

    let mut series = Vec::new();
    for model in ["adamra", "softmax"] {
        let mut pts = Vec::new();
        for &n in &grid {
            let stats = time_forward(model, n, 5, 42).expect("timing succeeds");
            pts.push((n, stats.median_s));
        }
        let slope = scaling_fit(&pts).expect("fit succeeds");
        series.push((model, slope));
    }
    let adamra_slope = series[0].1;
    let softmax_slope = series[1].1;

    // analytic memory ratio must grow strictly with n
    let mut prev_ratio = 0.0;
    for &n in &grid {
        let est = flop_and_memory_model(&cfg, n).expect("cost model");
        let ratio = est.softmax.peak_floats() as f64 / est.adamra.peak_floats() as f64;
        assert!(
            ratio > prev_ratio,
            "FAIL scaling: memory ratio not strictly increasing at n={}",
            n
        );
        prev_ratio = ratio;
    }

    let dt = t0.elapsed();
    let ok = adamra_slope <= 1.3 && softmax_slope >= 1.7;
    if ok {
        println!(
            "PASS near-linear runtime scaling (slope {:.3} vs softmax {:.3}, memory ratio rises to {:.1}x, {:?})",
            adamra_slope, softmax_slope, prev_ratio, dt
        );
    } else {
        println!(
            "FAIL scaling: fitted slopes {:.3} (want <= 1.3) vs {:.3} (want >= 1.7)",
            adamra_slope, softmax_slope
        );
        panic!("scaling separation failed");
    }
    assert!(dt.as_secs() < 600, "budget exceeded: {:?}", dt);
}

#[test]
fn a7_routing_invariants_hold_over_1000_instances() {
    let reports = run_all(&VerifyOptions { seeds: 1000, ..VerifyOptions::default() });
    for (name, label) in [
        ("routing-is-a-partition", "every token is routed to exactly one head (1000 instances)"),
        ("router-rows-are-distributions", "router probabilities are row-stochastic (1000 instances)"),
        ("routing-survives-logit-shifts", "argmax routing is shift invariant (1000 instances)"),
        ("router-ties-pick-lowest-head", "exact ties break to the lowest head (1000 instances)"),
    ] {
        assert_property(&reports, name, label);
    }
}

#[test]
fn a8_copy_task_learns_with_default_configuration() {
    let t0 = Instant::now();
    let examples = 10_000;
    let held_out = 2_000;

    let cfg = ModelConfig::default_for(2);
    let mut opts = TrainOptions::default();
    assert_eq!(opts.steps, 2000, "default step budget is part of the contract");

    // accuracy gate: the fixed default seed
    let mut data = gen_copy_task(42, 64, DEFAULT_COPY_VOCAB, examples).expect("dataset");
    let test = data.split_off(held_out, "test").expect("split");
    opts.seed = 42;
    let (_, report) = train(&cfg, &data, &test, &opts).expect("training runs");
    let acc = report.final_test_accuracy;

    // routing non-degeneracy: four seeds, at most one may collapse
    let mut healthy = 0;
    let mut utilizations = Vec::new();
    for seed in [42u64, 43, 44, 45] {
        let (report_s, max_util) = if seed == 42 {
            let m = max_utilization(&report);
            (None, m)
        } else {
            let mut d = gen_copy_task(seed, 64, DEFAULT_COPY_VOCAB, examples).expect("dataset");
            let t = d.split_off(held_out, "test").expect("split");
            let mut o = opts.clone();
            o.seed = seed;
            let (_, r) = train(&cfg, &d, &t, &o).expect("training runs");
            let m = max_utilization(&r);
            (Some(r), m)
        };
        drop(report_s);
        utilizations.push(max_util);
        if max_util <= 0.95 {
            healthy += 1;
        }
    }

    let dt = t0.elapsed();
    let ok = acc >= 0.95 && healthy >= 3;
    if ok {
        println!(
            "PASS default configuration learns the copy task (test acc {:.4}, {} of 4 seeds route healthily, {:?})",
            acc, healthy, dt
        );
    } else {
        println!(
            "FAIL learnability: test acc {:.4} (want >= 0.95), healthy routing in {} of 4 seeds (max utilizations {:?})",
            acc, healthy, utilizations
        );
        panic!("learnability gate failed");
    }
    assert!(dt.as_secs() < 900, "budget exceeded: {:?}", dt);
}

fn max_utilization(report: &adamra::tasks::train::TrainReport) -> f64 {
    report
        .router_utilization
        .iter()
        .flat_map(|row| row.iter().copied())
        .fold(0.0, f64::max)
}

#[test]
fn a9_ablation_configurations_run_and_report() {
    // trend comparisons are reported, not gated: small scale cannot pin an
    // accuracy ordering, so this check only demands that the controls run
    let mut data = gen_copy_task(7, 64, DEFAULT_COPY_VOCAB, 1_200).expect("dataset");
    let test = data.split_off(400, "test").expect("split");
    let opts = TrainOptions { steps: 60, ..TrainOptions::default() };

    let mut ladder = ModelConfig::default_for(2);
    let mut single = ModelConfig::default_for(2);
    let shared = single.attention.c[0];
    single.attention.c = vec![shared; single.attention.heads];
    let mut alternate = ModelConfig::default_for(2);
    alternate.attention.c = vec![Rate::new(1, 2).unwrap(); alternate.attention.heads];
    ladder.attention.c = ladder.attention.c.clone();

    let mut lines = Vec::new();
    for (tag, cfg) in [("ladder", &ladder), ("single", &single), ("alternate", &alternate)] {
        let (_, report) = train(cfg, &data, &test, &opts).expect("control runs");
        assert!(!report.text().is_empty());
        assert!(report.metrics_csv().starts_with("epoch,"));
        lines.push(format!("{} acc {:.3}", tag, report.final_test_accuracy));
    }
    println!(
        "PASS resolution ablations run and emit reports ({}; ordering not gated)",
        lines.join(", ")
    );
}
