//! Manual reverse-mode differentiation of the multi-resolution layer.
//!
//! [`adamra_backward`] walks the [`ForwardTrace`] in reverse and produces
//! exact derivatives of the forward computation with respect to every
//! parameter block and the input. Two conventions matter:
//!
//! * The routing argmax is treated as piecewise-constant: token→head
//!   assignments are frozen at their forward values, so no gradient crosses
//!   a routing decision boundary. Router weights still learn when gate
//!   scaling is on, because each token's output is scaled by its winning
//!   softmax probability and that probability is differentiable.
//! * With gate scaling off (the literal hard-mask reading), the router is
//!   disconnected from the loss and its gradient is identically zero, as is
//!   everything under random routing.

use crate::error::{Error, Result};
use crate::layer::{AdamraParams, ForwardTrace, Routing, SubheadTrace};
use crate::mat::{segment_bounds, Matrix};

/// Gradients of a sum-structured loss with respect to parameters and input,
/// given `upstream = ∂loss/∂output` of shape `n×d`.
pub fn adamra_backward(
    trace: &ForwardTrace,
    p: &AdamraParams,
    upstream: &Matrix,
) -> Result<(AdamraParams, Matrix)> {
    let cfg = &trace.cfg;
    p.validate(cfg)?;
    let n = trace.x.rows();
    if upstream.rows() != n || upstream.cols() != cfg.d {
        return Err(Error::ShapeMismatch {
            op: "adamra_backward",
            lrows: upstream.rows(),
            lcols: upstream.cols(),
            rrows: n,
            rcols: cfg.d,
        });
    }
    let dk = cfg.d_k();
    let mut g = AdamraParams::zeros(cfg);

    // ── output projection: out = gated · w_o ──
    // gated is trace.combined with per-row gate scaling re-applied
    let gate_on = cfg.gate_scaling;
    let mut gated = trace.combined.clone();
    if gate_on {
        for i in 0..n {
            let gi = trace.routing.gate[i];
            for x in gated.row_mut(i) {
                *x *= gi;
            }
        }
    }
    g.w_o = gated.matmul_tn(upstream)?;
    let d_gated = upstream.matmul_nt(&p.w_o)?; // n×(S·d_v)

    // ── gate scaling: gated_i = gate_i · combined_i ──
    let mut d_combined = d_gated;
    let mut d_gate = vec![0.0; n];
    if gate_on {
        for i in 0..n {
            let gi = trace.routing.gate[i];
            let comb = trace.combined.row(i);
            let row = d_combined.row_mut(i);
            let mut acc = 0.0;
            for (x, &c) in row.iter_mut().zip(comb) {
                acc += *x * c;
                *x *= gi;
            }
            d_gate[i] = acc;
        }
    }

    // ── router: gate_i = softmax(q·w_router)_i[h*] ──
    // d logits[i][j] = d gate_i · gate_i · (δ_{j,h*} − probs[i][j])
    let mut dq = Matrix::zeros(n, cfg.d);
    if gate_on && cfg.routing == Routing::Learned {
        let mut d_logits = Matrix::zeros(n, cfg.heads);
        for i in 0..n {
            let star = trace.routing.head_of[i];
            let gi = trace.routing.gate[i];
            let probs = trace.routing.probs.row(i);
            let row = d_logits.row_mut(i);
            for (j, (slot, &pj)) in row.iter_mut().zip(probs).enumerate() {
                let delta = if j == star { 1.0 } else { 0.0 };
                *slot = d_gate[i] * gi * (delta - pj);
            }
        }
        g.w_router = trace.q.matmul_tn(&d_logits)?;
        dq.add_assign(&d_logits.matmul_nt(&p.w_router)?)?;
    }

    // ── per-head attention stacks ──
    let mut dk_full = Matrix::zeros(n, cfg.d);
    let mut dv_full = Matrix::zeros(n, cfg.d);
    for (h, ht) in trace.heads.iter().enumerate() {
        if ht.tokens.is_empty() {
            continue;
        }
        let r = ht.tokens.len();
        let mem = &trace.memory.heads[h];
        let mut dq_h = Matrix::zeros(r, cfg.d);
        let mut dk_tilde = Matrix::zeros(mem.m, cfg.d);
        let mut dv_tilde = Matrix::zeros(mem.m, cfg.d);

        for (s, tr) in ht.subheads.iter().enumerate() {
            // upstream slice for this subhead: rows at this head's tokens,
            // columns of subhead s
            let mut d_out = Matrix::zeros(r, dk);
            for (row_idx, &tok) in ht.tokens.iter().enumerate() {
                d_out
                    .row_mut(row_idx)
                    .copy_from_slice(&d_combined.row(tok)[s * dk..(s + 1) * dk]);
            }

            let sp = &p.sub[h][s];
            let (d_q_p, d_k_p, d_v_p) = kernel_attention_backward(tr, &d_out, cfg.phi)?;

            // subhead projections: q_p = q_h·w_q, k_p = k̃·w_k, v_p = ṽ·w_v
            g.sub[h][s].w_q.add_assign(&ht.q_h.matmul_tn(&d_q_p)?)?;
            dq_h.add_assign(&d_q_p.matmul_nt(&sp.w_q)?)?;
            g.sub[h][s].w_k.add_assign(&mem.k_tilde.matmul_tn(&d_k_p)?)?;
            dk_tilde.add_assign(&d_k_p.matmul_nt(&sp.w_k)?)?;
            g.sub[h][s].w_v.add_assign(&mem.v_tilde.matmul_tn(&d_v_p)?)?;
            dv_tilde.add_assign(&d_v_p.matmul_nt(&sp.w_v)?)?;
        }

        // scatter query gradients back to token positions
        for (row_idx, &tok) in ht.tokens.iter().enumerate() {
            for (acc, &x) in dq.row_mut(tok).iter_mut().zip(dq_h.row(row_idx)) {
                *acc += x;
            }
        }

        // segment-mean backward: each landmark's gradient spreads uniformly
        // over the rows it averaged
        for seg in 0..mem.m {
            let (start, end) = segment_bounds(n, mem.m, seg);
            let inv = 1.0 / (end - start) as f64;
            for row in start..end {
                for (acc, &x) in dk_full.row_mut(row).iter_mut().zip(dk_tilde.row(seg)) {
                    *acc += x * inv;
                }
                for (acc, &x) in dv_full.row_mut(row).iter_mut().zip(dv_tilde.row(seg)) {
                    *acc += x * inv;
                }
            }
        }
    }

    // ── full-width projections: q = x·w_q, k = x·w_k, v = x·w_v ──
    g.qkv.w_q = trace.x.matmul_tn(&dq)?;
    g.qkv.w_k = trace.x.matmul_tn(&dk_full)?;
    g.qkv.w_v = trace.x.matmul_tn(&dv_full)?;
    let mut dx = dq.matmul_nt(&p.qkv.w_q)?;
    dx.add_assign(&dk_full.matmul_nt(&p.qkv.w_k)?)?;
    dx.add_assign(&dv_full.matmul_nt(&p.qkv.w_v)?)?;
    Ok((g, dx))
}

/// Reverse pass through one subhead's normalized kernel attention.
///
/// Forward (per trace): `A = φ(q_p)`, `B = φ(k_p)`, `S = Bᵀv_p`,
/// `z = Bᵀ1`, `out_i = (A_i·S) / (A_i·z + eps)`.
/// Returns gradients with respect to the three projected inputs.
fn kernel_attention_backward(
    tr: &SubheadTrace,
    d_out: &Matrix,
    phi: crate::baseline::FeatureFn,
) -> Result<(Matrix, Matrix, Matrix)> {
    let r = tr.out.rows();
    let dv = tr.out.cols();
    let dk = tr.phi_q.cols();

    // normalization: out_i = num_i / den_i
    let mut d_num = Matrix::zeros(r, dv);
    let mut d_den = vec![0.0; r];
    for i in 0..r {
        let den = tr.den[i];
        let mut acc = 0.0;
        for ((dn, &du), &o) in d_num.row_mut(i).iter_mut().zip(d_out.row(i)).zip(tr.out.row(i)) {
            *dn = du / den;
            acc -= du * o / den;
        }
        d_den[i] = acc;
    }

    // num = A·S, den_i = A_i·z + eps
    let mut d_a = d_num.matmul_nt(&tr.s_kv)?; // r×d_k
    for i in 0..r {
        for (slot, &zv) in d_a.row_mut(i).iter_mut().zip(&tr.s_k) {
            *slot += d_den[i] * zv;
        }
    }
    let d_s = tr.phi_q.matmul_tn(&d_num)?; // d_k×d_v
    let mut d_z = vec![0.0; dk];
    for i in 0..r {
        for (acc, &a) in d_z.iter_mut().zip(tr.phi_q.row(i)) {
            *acc += d_den[i] * a;
        }
    }

    // S = Bᵀ·v_p and z = Bᵀ·1
    let mut d_b = tr.v_p.matmul_nt(&d_s)?; // m×d_k
    for j in 0..d_b.rows() {
        for (slot, &zg) in d_b.row_mut(j).iter_mut().zip(&d_z) {
            *slot += zg;
        }
    }
    let d_v_p = tr.phi_k.matmul(&d_s)?; // m×d_v

    // feature maps: A = φ(q_p), B = φ(k_p)
    let mut d_q_p = d_a;
    for (slot, &x) in d_q_p.data_mut().iter_mut().zip(tr.q_p.data()) {
        *slot *= phi.derivative(x);
    }
    let mut d_k_p = d_b;
    for (slot, &x) in d_k_p.data_mut().iter_mut().zip(tr.k_p.data()) {
        *slot *= phi.derivative(x);
    }
    Ok((d_q_p, d_k_p, d_v_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::FeatureFn;
    use crate::config::Rate;
    use crate::layer::{adamra_forward, AdamraConfig, Routing};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_cfg(d: usize, heads: usize, subheads: usize) -> AdamraConfig {
        let rates = [Rate::ONE, Rate::new(1, 2).unwrap(), Rate::new(1, 3).unwrap()];
        let mut cfg = AdamraConfig::new(
            d,
            heads,
            subheads,
            (0..heads).map(|h| rates[h % 3]).collect(),
        )
        .unwrap();
        // C¹ feature map keeps finite differences clean in smoke tests
        cfg.phi = FeatureFn::EluPlusOne;
        cfg
    }

    /// Loss linear in the layer output: L = Σ out⊙G for fixed G, so the
    /// upstream gradient is exactly G and finite differences probe only the
    /// layer's own nonlinearity.
    fn linear_loss(out: &Matrix, g: &Matrix) -> f64 {
        out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = smooth_cfg(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(6, 8, 1.0, &mut rng);
        let (_, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        let (g, dx) = adamra_backward(&tr, &p, &Matrix::zeros(6, 8)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for (name, block) in g.blocks() {
            assert!(block.data().iter().all(|&v| v == 0.0), "{} not zero", name);
        }
    }

    #[test]
    fn gate_scaling_off_severs_router_gradient() {
        let mut cfg = smooth_cfg(8, 2, 2);
        cfg.gate_scaling = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(7, 8, 1.0, &mut rng);
        let (out, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        let upstream = Matrix::random_uniform(out.rows(), out.cols(), 1.0, &mut rng);
        let (g, _) = adamra_backward(&tr, &p, &upstream).unwrap();
        assert!(g.w_router.data().iter().all(|&v| v == 0.0));
        // but the rest of the layer still learns
        assert!(g.qkv.w_q.data().iter().any(|&v| v != 0.0));
        assert!(g.w_o.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn random_routing_severs_router_gradient() {
        let mut cfg = smooth_cfg(8, 2, 2);
        cfg.routing = Routing::Random;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(7, 8, 1.0, &mut rng);
        let (out, tr) = adamra_forward(&x, &p, &cfg, 9).unwrap();
        let upstream = Matrix::random_uniform(out.rows(), out.cols(), 1.0, &mut rng);
        let (g, _) = adamra_backward(&tr, &p, &upstream).unwrap();
        assert!(g.w_router.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_upstream_shape() {
        let cfg = smooth_cfg(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(5, 8, 1.0, &mut rng);
        let (_, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        assert!(adamra_backward(&tr, &p, &Matrix::zeros(5, 7)).is_err());
        assert!(adamra_backward(&tr, &p, &Matrix::zeros(4, 8)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = smooth_cfg(6, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(5, 6, 1.0, &mut rng);
        let target = Matrix::random_uniform(5, 6, 1.0, &mut rng);

        let (_, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        let (_, dx) = adamra_backward(&tr, &p, &target).unwrap();

        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let (op, trp) = adamra_forward(&xp, &p, &cfg, 0).unwrap();
            let (om, trm) = adamra_forward(&xm, &p, &cfg, 0).unwrap();
            // skip probes that flipped a routing decision
            if trp.routing.head_of != tr.routing.head_of
                || trm.routing.head_of != tr.routing.head_of
            {
                continue;
            }
            let numeric = (linear_loss(&op, &target) - linear_loss(&om, &target)) / (2.0 * h);
            let analytic = dx.data()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        assert!(worst < 1e-6, "worst input-gradient mismatch {:e}", worst);
    }

    #[test]
    fn parameter_gradients_match_finite_differences_spot_check() {
        // full-coverage gradient checking lives in the diffcheck module;
        // this guards the backward wiring for one representative block each
        let cfg = smooth_cfg(6, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(6, 6, 1.0, &mut rng);
        let target = Matrix::random_uniform(6, 6, 1.0, &mut rng);

        let (_, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        let (g, _) = adamra_backward(&tr, &p, &target).unwrap();

        // h balances truncation against roundoff for an O(1) loss; the floor
        // keeps near-zero-gradient coordinates from amplifying FD noise
        let h = 1e-5;
        let mut worst = 0.0f64;
        // probe a handful of coordinates in every block
        for block_idx in 0..g.blocks().len() {
            let block_len = g.blocks()[block_idx].1.data().len();
            for probe in [0, block_len / 2, block_len - 1] {
                let mut pp = p.clone();
                pp.blocks_mut()[block_idx].1.data_mut()[probe] += h;
                let mut pm = p.clone();
                pm.blocks_mut()[block_idx].1.data_mut()[probe] -= h;
                let (op, trp) = adamra_forward(&x, &pp, &cfg, 0).unwrap();
                let (om, trm) = adamra_forward(&x, &pm, &cfg, 0).unwrap();
                if trp.routing.head_of != tr.routing.head_of
                    || trm.routing.head_of != tr.routing.head_of
                {
                    continue;
                }
                let numeric = (linear_loss(&op, &target) - linear_loss(&om, &target)) / (2.0 * h);
                let analytic = g.blocks()[block_idx].1.data()[probe];
                let denom = numeric.abs().max(analytic.abs()).max(1e-3);
                let err = (numeric - analytic).abs() / denom;
                if err > worst {
                    worst = err;
                }
            }
        }
        assert!(worst < 1e-5, "worst parameter-gradient mismatch {:e}", worst);
    }

    #[test]
    fn router_gradient_is_nonzero_with_gate_scaling_on() {
        let cfg = smooth_cfg(8, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AdamraParams::init(&cfg, &mut rng).unwrap();
        let x = Matrix::random_uniform(9, 8, 1.0, &mut rng);
        let (out, tr) = adamra_forward(&x, &p, &cfg, 0).unwrap();
        let upstream = Matrix::random_uniform(out.rows(), out.cols(), 1.0, &mut rng);
        let (g, _) = adamra_backward(&tr, &p, &upstream).unwrap();
        assert!(g.w_router.data().iter().any(|&v| v != 0.0));
    }
}
