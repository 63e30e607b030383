//! The runtime property suite behind `verify`: every named check compares
//! the fast implementations against independent oracles or asserts a
//! structural invariant, over many seeded random instances.
//!
//! Each property reports pass/fail plus the first counterexample seed, so a
//! failure is immediately reproducible. The optional fault injection
//! switches the kernel stabilizer off (`eps = 0`) inside the denominator
//! property — a correct build must then *fail* that property, which keeps
//! the suite honest about its own sensitivity.

use crate::baseline::{kernel_attention, FeatureFn};
use crate::config::Rate;
use crate::cost::flop_and_memory_model;
use crate::error::Result;
use crate::layer::{
    adamra_forward, argmax_lowest, AdamraConfig, AdamraParams, Routing,
};
use crate::mat::{floats_allocated, rel_diff, reset_alloc_counter, Matrix};
use crate::oracle::{adamra_forward_loops, phi_dot, similarity_attention_loops};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How `run_all` should drive the properties.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random instances per property.
    pub seeds: usize,
    /// Base offset for instance seeds, so suites can be re-rolled.
    pub base_seed: u64,
    /// Run the kernel-denominator property with the stabilizer removed;
    /// that property must then fail.
    pub fault_drop_eps: bool,
}

impl Default for VerifyOptions {
    fn default() -> VerifyOptions {
        VerifyOptions { seeds: 100, base_seed: 0, fault_drop_eps: false }
    }
}

/// One property's outcome.
#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub name: &'static str,
    pub passed: bool,
    /// Counterexample seed and explanation on failure, instance count on
    /// success.
    pub details: String,
}

pub fn all_passed(reports: &[PropertyReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Runs every property and collects the reports.
pub fn run_all(opts: &VerifyOptions) -> Vec<PropertyReport> {
    vec![
        kernel_equals_explicit_quadratic(opts),
        layer_equals_scalar_oracle(opts),
        single_head_full_rate_collapse(opts),
        routing_is_a_partition(opts),
        router_rows_are_distributions(opts),
        routing_survives_logit_shifts(opts),
        router_ties_pick_lowest_head(opts),
        kernel_outputs_stay_in_value_hull(opts),
        landmarks_track_rates_monotonically(opts),
        kernel_denominator_stabilized(opts),
        allocations_match_cost_model(),
    ]
}

/// Wraps the per-seed loop: runs `check` for each instance seed and turns
/// the first failure into a report naming that seed.
fn for_each_seed(
    name: &'static str,
    opts: &VerifyOptions,
    mut check: impl FnMut(u64) -> std::result::Result<(), String>,
) -> PropertyReport {
    for i in 0..opts.seeds {
        let seed = opts.base_seed.wrapping_add(i as u64);
        if let Err(why) = check(seed) {
            return PropertyReport {
                name,
                passed: false,
                details: format!("counterexample seed {}: {}", seed, why),
            };
        }
    }
    PropertyReport {
        name,
        passed: true,
        details: format!("{} instances", opts.seeds),
    }
}

fn random_phi(rng: &mut impl Rng) -> FeatureFn {
    if rng.gen_bool(0.5) {
        FeatureFn::Relu
    } else {
        FeatureFn::EluPlusOne
    }
}

/// Random layer instance within the small-oracle envelope.
fn random_layer_instance(
    seed: u64,
) -> Result<(Matrix, AdamraParams, AdamraConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subheads = rng.gen_range(1..=2usize);
    let d = if subheads == 2 { 8 } else { *[4usize, 8].get(rng.gen_range(0..2)).unwrap() };
    let heads = rng.gen_range(1..=3usize);
    let c: Vec<Rate> = (0..heads)
        .map(|_| {
            let den = rng.gen_range(1..=4u32);
            Rate::new(rng.gen_range(1..=den), den).expect("num ≤ den")
        })
        .collect();
    let mut cfg = AdamraConfig::new(d, heads, subheads, c)?;
    cfg.phi = random_phi(&mut rng);
    cfg.gate_scaling = rng.gen_bool(0.75);
    let params = AdamraParams::init(&cfg, &mut rng)?;
    let n = rng.gen_range(2..=16usize);
    let x = Matrix::random_uniform(n, d, 1.0, &mut rng);
    Ok((x, params, cfg))
}

/// Fast kernel attention against the explicit double-sum with `sim =
/// φ(q)ᵀφ(k)`, the quadratic form it linearizes.
fn kernel_equals_explicit_quadratic(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("kernel-equals-explicit-quadratic", opts, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=32usize);
        let m = rng.gen_range(1..=32usize);
        let dk = rng.gen_range(1..=8usize);
        let dv = rng.gen_range(1..=8usize);
        let phi = random_phi(&mut rng);
        let q = Matrix::random_uniform(n, dk, 1.5, &mut rng);
        let k = Matrix::random_uniform(m, dk, 1.5, &mut rng);
        let v = Matrix::random_uniform(m, dv, 1.5, &mut rng);
        let eps = 1e-6;

        let fast = kernel_attention(&q, &k, &v, phi, eps).map_err(|e| e.to_string())?;
        let slow = similarity_attention_loops(&q, &k, &v, &|a, b| phi_dot(phi, a, b), eps);
        let diff = rel_diff(&fast, &slow);
        if diff > 1e-10 {
            return Err(format!("phi {}: relative difference {:.3e}", phi.name(), diff));
        }
        Ok(())
    })
}

/// The production layer against the straight-line scalar oracle.
fn layer_equals_scalar_oracle(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("layer-equals-scalar-oracle", opts, |seed| {
        let (x, params, cfg) = random_layer_instance(seed).map_err(|e| e.to_string())?;
        let (fast, _) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;
        let slow = adamra_forward_loops(&x, &params, &cfg);
        let diff = rel_diff(&fast, &slow);
        if diff > 1e-10 {
            return Err(format!(
                "n={} d={} H={} S={}: relative difference {:.3e}",
                x.rows(),
                cfg.d,
                cfg.heads,
                cfg.subheads,
                diff
            ));
        }
        Ok(())
    })
}

/// One head, one subhead, rate 1, identity projections: the layer must
/// reduce to plain kernel attention on the raw input.
fn single_head_full_rate_collapse(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("single-head-full-rate-collapse", opts, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = *[2usize, 4, 8].get(rng.gen_range(0..3)).unwrap();
        let mut cfg = AdamraConfig::new(d, 1, 1, vec![Rate::ONE]).map_err(|e| e.to_string())?;
        cfg.phi = random_phi(&mut rng);
        let mut p = AdamraParams::zeros(&cfg);
        let eye = Matrix::identity(d);
        p.qkv.w_q = eye.clone();
        p.qkv.w_k = eye.clone();
        p.qkv.w_v = eye.clone();
        p.sub[0][0].w_q = eye.clone();
        p.sub[0][0].w_k = eye.clone();
        p.sub[0][0].w_v = eye.clone();
        p.w_o = eye;
        // router column is all zeros: single head wins with probability 1

        let n = rng.gen_range(1..=16usize);
        let x = Matrix::random_uniform(n, d, 1.0, &mut rng);
        let (got, _) = adamra_forward(&x, &p, &cfg, seed).map_err(|e| e.to_string())?;
        let want = kernel_attention(&x, &x, &x, cfg.phi, cfg.eps).map_err(|e| e.to_string())?;
        let diff = rel_diff(&got, &want);
        if diff > 1e-12 {
            return Err(format!("relative difference {:.3e}", diff));
        }
        Ok(())
    })
}

/// Every token lands on exactly one head.
fn routing_is_a_partition(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("routing-is-a-partition", opts, |seed| {
        let (x, params, cfg) = random_layer_instance(seed).map_err(|e| e.to_string())?;
        let (_, trace) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;
        let n = x.rows();
        let mut owner = vec![None; n];
        for (h, head) in trace.heads.iter().enumerate() {
            for &t in &head.tokens {
                if t >= n {
                    return Err(format!("head {} owns out-of-range token {}", h, t));
                }
                if let Some(prev) = owner[t] {
                    return Err(format!("token {} owned by heads {} and {}", t, prev, h));
                }
                owner[t] = Some(h);
            }
        }
        for (t, o) in owner.iter().enumerate() {
            match o {
                None => return Err(format!("token {} unassigned", t)),
                Some(h) if *h != trace.routing.head_of[t] => {
                    return Err(format!(
                        "token {}: trace head {} disagrees with routing {}",
                        t, h, trace.routing.head_of[t]
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    })
}

/// Router probability rows sum to one and the winning gate is in (0,1].
fn router_rows_are_distributions(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("router-rows-are-distributions", opts, |seed| {
        let (x, params, cfg) = random_layer_instance(seed).map_err(|e| e.to_string())?;
        let (_, trace) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;
        for i in 0..x.rows() {
            let row = trace.routing.probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("row {} sums to {}", i, sum));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(format!("row {} has a negative probability", i));
            }
            let gate = trace.routing.gate[i];
            if !(gate > 0.0 && gate <= 1.0) {
                return Err(format!("gate[{}] = {}", i, gate));
            }
        }
        Ok(())
    })
}

/// Adding a per-row constant to the router logits (via a rank-one router
/// weight update) changes neither probabilities nor assignment.
fn routing_survives_logit_shifts(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("routing-survives-logit-shifts", opts, |seed| {
        let (x, params, cfg) = random_layer_instance(seed).map_err(|e| e.to_string())?;
        if cfg.routing != Routing::Learned {
            return Ok(()); // shift applies to the learned router only
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
        let (_, base) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;

        // w_router + u·1ᵀ adds the row-dependent constant (x_i·u) to every
        // logit of row i
        let mut shifted = params.clone();
        let u: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for r in 0..cfg.d {
            for h in 0..cfg.heads {
                let v = shifted.w_router.get(r, h) + u[r];
                shifted.w_router.set(r, h, v);
            }
        }
        let (_, moved) = adamra_forward(&x, &shifted, &cfg, seed).map_err(|e| e.to_string())?;

        if moved.routing.head_of != base.routing.head_of {
            return Err("assignment changed under a uniform logit shift".into());
        }
        let diff = rel_diff(&moved.routing.probs, &base.routing.probs);
        if diff > 1e-9 {
            return Err(format!("probabilities moved by {:.3e}", diff));
        }
        Ok(())
    })
}

/// Identical router columns make every head equally likely; the assignment
/// must then pick the lowest head index.
fn router_ties_pick_lowest_head(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("router-ties-pick-lowest-head", opts, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(2..=3usize);
        let c = (0..heads)
            .map(|i| Rate::new(1, i as u32 + 1).expect("valid rate"))
            .collect();
        let cfg = AdamraConfig::new(8, heads, 2, c).map_err(|e| e.to_string())?;
        let mut params = AdamraParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
        // duplicate one random column across all heads
        let col: Vec<f64> = (0..cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..cfg.d {
            for h in 0..heads {
                params.w_router.set(r, h, col[r]);
            }
        }
        let x = Matrix::random_uniform(rng.gen_range(1..=12), 8, 1.0, &mut rng);
        let (_, trace) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;
        if let Some(i) = trace.routing.head_of.iter().position(|&h| h != 0) {
            return Err(format!(
                "token {} went to head {} despite an exact tie",
                i, trace.routing.head_of[i]
            ));
        }
        // and argmax_lowest itself, on an explicit tied row
        if argmax_lowest(&[0.25, 0.25, 0.25, 0.25]) != 0 {
            return Err("argmax_lowest broke the tie upward".into());
        }
        Ok(())
    })
}

/// Kernel outputs stay inside the convex hull of the value rows *and the
/// origin*: the attention weights are nonnegative but sum to slightly less
/// than one (the stabilizer inflates the denominator), so every output is a
/// shrunk-toward-zero convex combination of the values.
fn kernel_outputs_stay_in_value_hull(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("kernel-outputs-stay-in-value-hull", opts, |seed| {
        let (x, params, cfg) = random_layer_instance(seed).map_err(|e| e.to_string())?;
        let (_, trace) = adamra_forward(&x, &params, &cfg, seed).map_err(|e| e.to_string())?;
        for (h, head) in trace.heads.iter().enumerate() {
            for (s, sub) in head.subheads.iter().enumerate() {
                let m = sub.v_p.rows();
                if m == 0 {
                    continue;
                }
                for r in 0..sub.out.rows() {
                    for c in 0..sub.v_p.cols() {
                        let mut lo: f64 = 0.0;
                        let mut hi: f64 = 0.0;
                        for j in 0..m {
                            lo = lo.min(sub.v_p.get(j, c));
                            hi = hi.max(sub.v_p.get(j, c));
                        }
                        let got = sub.out.get(r, c);
                        let slack = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
                        if got < lo - slack || got > hi + slack {
                            return Err(format!(
                                "head {} subhead {} row {} col {}: {} outside [{}, {}]",
                                h, s, r, c, got, lo, hi
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

/// Lower compression rates never yield more landmarks, and strictly lower
/// rates yield strictly fewer once the sequence is long enough to resolve
/// the difference.
fn landmarks_track_rates_monotonically(opts: &VerifyOptions) -> PropertyReport {
    for_each_seed("landmarks-track-rates-monotonically", opts, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let den_a = rng.gen_range(1..=16u32);
        let den_b = rng.gen_range(1..=16u32);
        let a = Rate::new(rng.gen_range(1..=den_a), den_a).expect("valid");
        let b = Rate::new(rng.gen_range(1..=den_b), den_b).expect("valid");
        let (fine, coarse) = if a.value() >= b.value() { (a, b) } else { (b, a) };
        for n in [1usize, 2, 3, 5, 8, 16, 64, 256, 1024] {
            let mf = fine.landmarks(n);
            let mc = coarse.landmarks(n);
            if mc > mf {
                return Err(format!(
                    "rate {} gives {} landmarks but coarser {} gives {} at n={}",
                    fine, mf, coarse, mc, n
                ));
            }
            if mf > n || mf == 0 {
                return Err(format!("rate {}: {} landmarks outside 1..={}", fine, mf, n));
            }
            // once a landmark step fits both rates, strictness must show up
            let strict_n = (2.0 / coarse.value().min(1.0)).ceil() as usize;
            if fine.value() >= 2.0 * coarse.value() && n >= strict_n && mc >= mf {
                return Err(format!(
                    "{}≥2×{} but landmarks {} !> {} at n={}",
                    fine, coarse, mf, mc, n
                ));
            }
        }
        Ok(())
    })
}

/// Zero-feature queries are the stabilizer's reason to exist: with it, they
/// produce exact zero rows; with it removed (fault injection) the same
/// instance must go NaN. The property asserts finiteness, so running it
/// under `--fault drop-eps` fails it deterministically.
fn kernel_denominator_stabilized(opts: &VerifyOptions) -> PropertyReport {
    let eps = if opts.fault_drop_eps { 0.0 } else { 1e-6 };
    for_each_seed("kernel-denominator-stabilized", opts, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=16usize);
        let m = rng.gen_range(1..=16usize);
        let dk = rng.gen_range(1..=8usize);
        let mut q = Matrix::random_uniform(n, dk, 1.0, &mut rng);
        // one query with no active ReLU features: numerator and raw
        // denominator are both exactly zero
        for v in q.row_mut(0) {
            *v = -1.0;
        }
        let k = Matrix::random_uniform(m, dk, 1.0, &mut rng);
        let v = Matrix::random_uniform(m, 3, 1.0, &mut rng);
        let out = kernel_attention(&q, &k, &v, FeatureFn::Relu, eps).map_err(|e| e.to_string())?;
        if !out.all_finite() {
            return Err("kernel output went non-finite (unstabilized 0/0)".into());
        }
        if out.row(0).iter().any(|&x| x != 0.0) {
            return Err("zero-feature query did not produce a zero row".into());
        }
        Ok(())
    })
}

/// The analytic cost model must track reality: floats actually allocated in
/// a forward pass stay within a factor of two of the model, and the layer's
/// measured growth is nothing like the baseline's quadratic.
fn allocations_match_cost_model() -> PropertyReport {
    let name = "allocations-match-cost-model";
    let cfg = crate::bench::bench_config();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = match AdamraParams::init(&cfg, &mut rng) {
        Ok(p) => p,
        Err(e) => return PropertyReport { name, passed: false, details: e.to_string() },
    };
    for n in [128usize, 512, 2048] {
        let est = match flop_and_memory_model(&cfg, n) {
            Ok(e) => e.adamra.peak_floats() as f64,
            Err(e) => return PropertyReport { name, passed: false, details: e.to_string() },
        };
        let x = Matrix::random_uniform(n, cfg.d, 1.0, &mut rng);
        reset_alloc_counter();
        if let Err(e) = adamra_forward(&x, &params, &cfg, 0) {
            return PropertyReport { name, passed: false, details: e.to_string() };
        }
        let measured = floats_allocated() as f64;
        let ratio = measured / est;
        if !(0.5..=2.0).contains(&ratio) {
            return PropertyReport {
                name,
                passed: false,
                details: format!(
                    "n={}: measured {} floats vs modeled {} (ratio {:.2})",
                    n, measured, est, ratio
                ),
            };
        }
    }
    PropertyReport { name, passed: true, details: "n ∈ {128, 512, 2048} within 2×".into() }
}
