//! Reference attention implementations used as baselines and building blocks.
//!
//! Two attention variants operate on already-projected Q/K/V blocks:
//!
//! * [`softmax_attention`] — the standard quadratic form `softmax(scale·QKᵀ)·V`.
//! * [`kernel_attention`] — linearized attention. Keys are folded into a
//!   `f×d_v` summary `S_kv = Σⱼ φ(Kⱼ)Vⱼᵀ` and a column-sum vector
//!   `s_k = Σⱼ φ(Kⱼ)`, so each query costs `O(f·d_v)` and the `n×m` score
//!   matrix is never materialized.
//!
//! [`multi_head_attention`] wraps either variant with per-head input
//! projections and an output projection, for head counts that tile the model
//! width exactly.

use crate::error::{Error, Result};
use crate::mat::Matrix;
use rand::Rng;

/// Feature map applied elementwise to queries and keys in kernel attention.
///
/// Both choices are nonnegative, which keeps the attention weights a convex
/// combination of value rows (up to the stabilizing denominator offset).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFn {
    /// `max(x, 0)`. Sparse features; exactly zero on the negative half-line.
    Relu,
    /// `elu(x) + 1`: `x + 1` for `x > 0`, `exp(x)` otherwise. Strictly positive.
    EluPlusOne,
}

impl FeatureFn {
    pub fn apply(&self, m: &Matrix) -> Matrix {
        match self {
            FeatureFn::Relu => m.relu(),
            FeatureFn::EluPlusOne => m.elu_plus_one(),
        }
    }

    /// Pointwise derivative of the feature map at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            FeatureFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FeatureFn::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureFn::Relu => "relu",
            FeatureFn::EluPlusOne => "elu1",
        }
    }

    pub fn parse(s: &str) -> Result<FeatureFn> {
        match s {
            "relu" => Ok(FeatureFn::Relu),
            "elu1" | "elu+1" => Ok(FeatureFn::EluPlusOne),
            other => Err(Error::InvalidArgument {
                op: "feature_fn",
                msg: format!("unknown feature map {:?} (expected relu or elu1)", other),
            }),
        }
    }
}

/// Selects the score computation inside [`multi_head_attention`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    /// Quadratic softmax attention. `scale = None` uses `1/√d_k`.
    Softmax { scale: Option<f64> },
    /// Linearized kernel attention with the given feature map.
    Kernel { phi: FeatureFn, eps: f64 },
}

/// One set of width-preserving `d×d` projections, as used in front of the
/// multi-resolution layer.
#[derive(Debug, Clone)]
pub struct QkvParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl QkvParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<QkvParams> {
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.rows() != w.cols() || w.rows() != w_q.rows() {
                return Err(Error::InvalidArgument {
                    op: "QkvParams::new",
                    msg: format!(
                        "{} must be square with side {}, got {}x{}",
                        name,
                        w_q.rows(),
                        w.rows(),
                        w.cols()
                    ),
                });
            }
        }
        Ok(QkvParams { w_q, w_k, w_v })
    }

    /// Uniform init on `±1/√d`, matching the fan-in of the projections.
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> QkvParams {
        let scale = 1.0 / (d as f64).sqrt();
        QkvParams {
            w_q: Matrix::random_uniform(d, d, scale, rng),
            w_k: Matrix::random_uniform(d, d, scale, rng),
            w_v: Matrix::random_uniform(d, d, scale, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }
}

/// Applies the three projections of [`QkvParams`] to a token matrix.
pub fn project_qkv(x: &Matrix, p: &QkvParams) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((x.matmul(&p.w_q)?, x.matmul(&p.w_k)?, x.matmul(&p.w_v)?))
}

/// Parameters for a conventional multi-head attention block.
///
/// Head width is fixed at `d_k = d_v = d / heads`; head counts that do not
/// divide the model width are rejected so the concatenated head outputs line
/// up with `w_o` exactly.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub d: usize,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
}

impl MultiHeadParams {
    pub fn new(
        d: usize,
        w_q: Vec<Matrix>,
        w_k: Vec<Matrix>,
        w_v: Vec<Matrix>,
        w_o: Matrix,
    ) -> Result<MultiHeadParams> {
        let heads = w_q.len();
        if heads == 0 || w_k.len() != heads || w_v.len() != heads {
            return Err(Error::InvalidArgument {
                op: "MultiHeadParams::new",
                msg: format!(
                    "need equal nonzero head counts, got q={} k={} v={}",
                    w_q.len(),
                    w_k.len(),
                    w_v.len()
                ),
            });
        }
        if !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument {
                op: "MultiHeadParams::new",
                msg: format!("{} heads do not tile width {}", heads, d),
            });
        }
        let dh = d / heads;
        for (name, mats) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            for (h, w) in mats.iter().enumerate() {
                if w.rows() != d || w.cols() != dh {
                    return Err(Error::InvalidArgument {
                        op: "MultiHeadParams::new",
                        msg: format!(
                            "{}[{}] must be {}x{}, got {}x{}",
                            name,
                            h,
                            d,
                            dh,
                            w.rows(),
                            w.cols()
                        ),
                    });
                }
            }
        }
        if w_o.rows() != d || w_o.cols() != d {
            return Err(Error::InvalidArgument {
                op: "MultiHeadParams::new",
                msg: format!("w_o must be {}x{}, got {}x{}", d, d, w_o.rows(), w_o.cols()),
            });
        }
        Ok(MultiHeadParams { d, w_q, w_k, w_v, w_o })
    }

    pub fn init<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Result<MultiHeadParams> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument {
                op: "MultiHeadParams::init",
                msg: format!("{} heads do not tile width {}", heads, d),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mk = |rng: &mut R| Matrix::random_uniform(d, dh, scale, rng);
        let w_q: Vec<Matrix> = (0..heads).map(|_| mk(rng)).collect();
        let w_k: Vec<Matrix> = (0..heads).map(|_| mk(rng)).collect();
        let w_v: Vec<Matrix> = (0..heads).map(|_| mk(rng)).collect();
        let w_o = Matrix::random_uniform(d, d, scale, rng);
        MultiHeadParams::new(d, w_q, w_k, w_v, w_o)
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }
}

fn check_qkv_shapes(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op,
            lrows: q.rows(),
            lcols: q.cols(),
            rrows: k.rows(),
            rcols: k.cols(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op,
            lrows: k.rows(),
            lcols: k.cols(),
            rrows: v.rows(),
            rcols: v.cols(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::InvalidArgument {
            op,
            msg: "attention over an empty key set".into(),
        });
    }
    Ok(())
}

/// `softmax(scale · Q Kᵀ) · V` with one weight row per query.
///
/// `scale = None` applies the usual `1/√d_k` temperature.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: Option<f64>) -> Result<Matrix> {
    check_qkv_shapes("softmax_attention", q, k, v)?;
    let scale = scale.unwrap_or(1.0 / (q.cols() as f64).sqrt());
    // one n×m buffer end to end: scores become weights in place
    let mut weights = q.matmul_nt(k)?;
    weights.scale_in_place(scale);
    weights.softmax_rows_in_place();
    weights.matmul(v)
}

/// Linearized attention: `out_i = φ(Q_i)ᵀ S_kv / (φ(Q_i)ᵀ s_k + eps)`.
///
/// The key/value side is folded once into `S_kv` (`f×d_v`) and `s_k` (`f`),
/// so the cost is linear in the number of queries and keys. Queries whose
/// feature vector is exactly zero (possible with ReLU) produce a zero output
/// row: the numerator vanishes and `eps` keeps the division defined.
///
/// `eps` is used as given; callers own its validation. Passing `eps = 0`
/// with a zero-feature query yields `0/0 = NaN` rather than a panic.
pub fn kernel_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    phi: FeatureFn,
    eps: f64,
) -> Result<Matrix> {
    check_qkv_shapes("kernel_attention", q, k, v)?;
    let phi_q = phi.apply(q);
    let phi_k = phi.apply(k);
    let s_kv = phi_k.matmul_tn(v)?;
    let mut s_k = vec![0.0; phi_k.cols()];
    for j in 0..phi_k.rows() {
        for (acc, &x) in s_k.iter_mut().zip(phi_k.row(j)) {
            *acc += x;
        }
    }

    let mut out = phi_q.matmul(&s_kv)?;
    for i in 0..out.rows() {
        let mut den = eps;
        for (&f, &s) in phi_q.row(i).iter().zip(&s_k) {
            den += f * s;
        }
        for x in out.row_mut(i) {
            *x /= den;
        }
    }
    Ok(out)
}

/// Multi-head attention over a token matrix `x` (`n×d`): per-head Q/K/V
/// projections, attention in the selected mode, concatenation, then `w_o`.
pub fn multi_head_attention(
    x: &Matrix,
    p: &MultiHeadParams,
    mode: AttentionMode,
) -> Result<Matrix> {
    if x.cols() != p.d {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lrows: x.rows(),
            lcols: x.cols(),
            rrows: p.d,
            rcols: p.d,
        });
    }
    let dh = p.d / p.heads();
    let mut concat = Matrix::zeros(x.rows(), p.d);
    for h in 0..p.heads() {
        let q = x.matmul(&p.w_q[h])?;
        let k = x.matmul(&p.w_k[h])?;
        let v = x.matmul(&p.w_v[h])?;
        let head = match mode {
            AttentionMode::Softmax { scale } => softmax_attention(&q, &k, &v, scale)?,
            AttentionMode::Kernel { phi, eps } => kernel_attention(&q, &k, &v, phi, eps)?,
        };
        for i in 0..x.rows() {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(head.row(i));
        }
    }
    concat.matmul(&p.w_o)
}
