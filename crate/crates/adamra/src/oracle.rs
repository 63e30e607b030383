//! Deliberately naive reference evaluators.
//!
//! Everything here recomputes results with plain scalar loops and the
//! quadratic double-sum form of attention — no shared accumulators, no
//! factored summaries, no reuse of the production kernels. The point is
//! independence: when `verify` compares the fast paths against these, the
//! two sides share only the `Matrix` container and the layer's declared
//! rounding policy for landmark counts.
//!
//! Keep this code boring. Clarity over speed; these run on tiny inputs.

use crate::layer::{AdamraConfig, AdamraParams, Routing};
use crate::mat::Matrix;

/// Scalar triple-loop matrix product in i-j-k order.
pub fn matmul_loops(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "matmul_loops: inner dimensions differ");
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Normalized similarity attention, evaluated per query as an explicit
/// double sum: `out_i = Σⱼ sim(qᵢ,kⱼ)·vⱼ / (Σⱼ sim(qᵢ,kⱼ) + eps)`.
pub fn similarity_attention_loops(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    sim: &dyn Fn(&[f64], &[f64]) -> f64,
    eps: f64,
) -> Matrix {
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        let mut den = eps;
        let mut num = vec![0.0; v.cols()];
        for j in 0..k.rows() {
            let s = sim(q.row(i), k.row(j));
            den += s;
            for (b, acc) in num.iter_mut().enumerate() {
                *acc += s * v.get(j, b);
            }
        }
        for (b, acc) in num.iter().enumerate() {
            out.set(i, b, acc / den);
        }
    }
    out
}

/// The kernelized similarity `φ(q)ᵀφ(k)` as a scalar function, for feeding
/// [`similarity_attention_loops`].
pub fn phi_dot(phi: crate::baseline::FeatureFn, q: &[f64], k: &[f64]) -> f64 {
    let f = |x: f64| match phi {
        crate::baseline::FeatureFn::Relu => x.max(0.0),
        crate::baseline::FeatureFn::EluPlusOne => {
            if x > 0.0 {
                x + 1.0
            } else {
                x.exp()
            }
        }
    };
    q.iter().zip(k).map(|(&a, &b)| f(a) * f(b)).sum()
}

/// Straight-line evaluation of the full multi-resolution layer.
///
/// Follows the layer's published forward recipe step by step with explicit
/// loops, and evaluates each subhead's attention as the quadratic form via
/// [`similarity_attention_loops`] rather than the factored linear-time path.
/// Landmark counts come from the config's rounding rule, which has its own
/// direct unit tests; everything downstream of that count is recomputed
/// here from scratch.
///
/// Only learned routing is supported — random routing draws from a stateful
/// generator that a reference evaluator cannot reproduce independently.
pub fn adamra_forward_loops(x: &Matrix, p: &AdamraParams, cfg: &AdamraConfig) -> Matrix {
    assert_eq!(cfg.routing, Routing::Learned, "oracle only covers learned routing");
    let n = x.rows();
    let d = cfg.d;
    let dk = cfg.d_k();

    // full-width projections
    let q = matmul_loops(x, &p.qkv.w_q);
    let k = matmul_loops(x, &p.qkv.w_k);
    let v = matmul_loops(x, &p.qkv.w_v);

    // router distribution and argmax per token
    let logits = matmul_loops(&q, &p.w_router);
    let mut head_of = vec![0usize; n];
    let mut gate = vec![0.0f64; n];
    for i in 0..n {
        let row = logits.row(i);
        let mut z = 0.0;
        for &l in row {
            z += l.exp();
        }
        let mut best = 0;
        for j in 1..cfg.heads {
            if row[j].exp() / z > row[best].exp() / z {
                best = j;
            }
        }
        head_of[i] = best;
        gate[i] = row[best].exp() / z;
    }

    let mut out = Matrix::zeros(n, d);
    for h in 0..cfg.heads {
        // segment means at this head's resolution
        let m = cfg.landmarks(h, n);
        let mut k_tilde = Matrix::zeros(m, d);
        let mut v_tilde = Matrix::zeros(m, d);
        for s in 0..m {
            let start = s * n / m;
            let end = (s + 1) * n / m;
            for c in 0..d {
                let mut ka = 0.0;
                let mut va = 0.0;
                for r in start..end {
                    ka += k.get(r, c);
                    va += v.get(r, c);
                }
                k_tilde.set(s, c, ka / (end - start) as f64);
                v_tilde.set(s, c, va / (end - start) as f64);
            }
        }

        for i in 0..n {
            if head_of[i] != h {
                continue;
            }
            // this token's combined subhead output, width S·d_v
            let mut row = vec![0.0; cfg.subheads * dk];
            for s in 0..cfg.subheads {
                let sp = &p.sub[h][s];
                // project the single query row and the compressed memory
                let mut q_row = Matrix::zeros(1, dk);
                for b in 0..dk {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += q.get(i, t) * sp.w_q.get(t, b);
                    }
                    q_row.set(0, b, acc);
                }
                let k_p = matmul_loops(&k_tilde, &sp.w_k);
                let v_p = matmul_loops(&v_tilde, &sp.w_v);
                let att = similarity_attention_loops(
                    &q_row,
                    &k_p,
                    &v_p,
                    &|a, b| phi_dot(cfg.phi, a, b),
                    cfg.eps,
                );
                row[s * dk..(s + 1) * dk].copy_from_slice(att.row(0));
            }
            if cfg.gate_scaling {
                for x in row.iter_mut() {
                    *x *= gate[i];
                }
            }
            // output projection of this token's row
            for c in 0..d {
                let mut acc = 0.0;
                for (a, &ra) in row.iter().enumerate() {
                    acc += ra * p.w_o.get(a, c);
                }
                out.set(i, c, acc);
            }
        }
    }
    out
}
