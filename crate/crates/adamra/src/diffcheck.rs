//! Finite-difference gradient checking.
//!
//! The analytic reverse pass in [`crate::backward`] is validated here
//! against an oracle that knows nothing about the layer: flatten all
//! parameters into one vector, perturb one coordinate at a time, and take
//! central differences of a scalar loss. Agreement is judged with a single
//! whole-vector relative error, plus a per-block breakdown for diagnosing
//! which projection went wrong when it doesn't agree.

use crate::backward::adamra_backward;
use crate::error::{Error, Result};
use crate::layer::{adamra_forward, AdamraConfig, AdamraParams};
use crate::mat::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shape descriptor of one flattened block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// A parameter collection as one flat coordinate vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<BlockShape>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// Start offset and length of block `idx` within `values`.
    pub fn block_span(&self, idx: usize) -> (usize, usize) {
        let mut start = 0;
        for b in &self.layout[..idx] {
            start += b.rows * b.cols;
        }
        (start, self.layout[idx].rows * self.layout[idx].cols)
    }
}

/// Flattens all parameter blocks, in canonical block order, row-major
/// within each block.
pub fn flatten(p: &AdamraParams) -> ParamVector {
    let mut values = Vec::with_capacity(p.count());
    let mut layout = Vec::new();
    for (name, m) in p.blocks() {
        layout.push(BlockShape { name, rows: m.rows(), cols: m.cols() });
        values.extend_from_slice(m.data());
    }
    ParamVector { values, layout }
}

/// Rebuilds parameters from a flat vector. The vector's layout must match
/// what `cfg` dictates — block by block, shape by shape.
pub fn unflatten(v: &ParamVector, cfg: &AdamraConfig) -> Result<AdamraParams> {
    let mut p = AdamraParams::zeros(cfg);
    let mut offset = 0;
    {
        let blocks = p.blocks_mut();
        if blocks.len() != v.layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} blocks in vector, config wants {}",
                v.layout.len(),
                blocks.len()
            )));
        }
        for ((name, m), shape) in blocks.into_iter().zip(&v.layout) {
            if shape.name != name || shape.rows != m.rows() || shape.cols != m.cols() {
                return Err(Error::LayoutMismatch(format!(
                    "block {} is {}x{}, vector carries {} as {}x{}",
                    name,
                    m.rows(),
                    m.cols(),
                    shape.name,
                    shape.rows,
                    shape.cols
                )));
            }
            let len = m.data().len();
            if offset + len > v.values.len() {
                return Err(Error::LayoutMismatch("vector shorter than layout".into()));
            }
            m.data_mut().copy_from_slice(&v.values[offset..offset + len]);
            offset += len;
        }
    }
    if offset != v.values.len() {
        return Err(Error::LayoutMismatch(format!(
            "vector has {} values, layout consumes {}",
            v.values.len(),
            offset
        )));
    }
    Ok(p)
}

/// Central-difference gradient of `loss` at `theta`:
/// `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` per coordinate.
///
/// Any non-finite loss value aborts with the offending coordinate, since a
/// NaN would otherwise silently poison a single gradient entry.
pub fn finite_diff_grad(
    loss: &mut dyn FnMut(&ParamVector) -> f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "finite_diff_grad",
            msg: format!("step must be positive, got {}", h),
        });
    }
    let mut grad = theta.clone();
    let mut probe = theta.clone();
    for i in 0..theta.values.len() {
        let orig = theta.values[i];
        probe.values[i] = orig + h;
        let up = loss(&probe);
        probe.values[i] = orig - h;
        let down = loss(&probe);
        probe.values[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss { coord: i });
        }
        grad.values[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Whole-vector relative error `‖a−b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12)`.
pub fn grad_rel_error(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::LayoutMismatch("relative error across different layouts".into()));
    }
    Ok(slice_rel_error(&a.values, &b.values))
}

fn slice_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// One row of the gradient-check report.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

/// Outcome of one gradient-check instance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Whole-vector relative error; the pass/fail quantity.
    pub rel_error: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    /// Per-block table, fixed-width, for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "block                 analytic-l2    numeric-l2     rel-error\n",
        );
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<20}  {:>12.6e}  {:>12.6e}  {:>12.6e}\n",
                b.name, b.analytic_norm, b.numeric_norm, b.rel_error
            ));
        }
        out.push_str(&format!("whole-vector rel-error: {:.6e}\n", self.rel_error));
        out
    }
}

/// Smallest gap between the winning router logit and the runner-up across
/// all tokens, used to filter instances near an argmax flip.
pub fn router_margin(logits: &Matrix) -> f64 {
    let mut margin = f64::MAX;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = f64::MIN;
        let mut second = f64::MIN;
        for &x in row {
            if x > best {
                second = best;
                best = x;
            } else if x > second {
                second = x;
            }
        }
        if row.len() > 1 {
            margin = margin.min(best - second);
        }
    }
    margin
}

/// Checks one seeded instance of the layer's analytic gradient against
/// central finite differences.
///
/// The loss is the squared distance between the layer output and a fixed
/// random target, which makes every output coordinate (and so every
/// parameter) carry gradient. Instances are resampled (bounded retries)
/// when a router decision sits within 1e-3 of flipping, or — for the ReLU
/// feature map — when any pre-feature activation sits within 1e-3 of its
/// kink; both situations break the smoothness that central differences
/// assume.
pub fn check_layer_gradient(
    cfg: &AdamraConfig,
    n: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    const MAX_RESAMPLES: u64 = 64;
    let mut attempt_seed = seed;
    for _ in 0..MAX_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let p = AdamraParams::init(cfg, &mut rng)?;
        let x = Matrix::random_uniform(n, cfg.d, 1.0, &mut rng);
        let target = Matrix::random_uniform(n, cfg.d, 1.0, &mut rng);

        let (out, trace) = adamra_forward(&x, &p, cfg, seed)?;
        if !instance_is_smooth(cfg, &p, &trace) {
            attempt_seed = attempt_seed.wrapping_add(0x9e37_79b9);
            continue;
        }

        // analytic side: d/d_out ‖out − target‖² = 2(out − target)
        let mut upstream = out.clone();
        upstream.add_assign(&target.scale(-1.0))?;
        let upstream = upstream.scale(2.0);
        let (analytic_params, _) = adamra_backward(&trace, &p, &upstream)?;
        let analytic = flatten(&analytic_params);

        // numeric side
        let theta = flatten(&p);
        let cfg_inner = cfg.clone();
        let x_inner = x.clone();
        let target_inner = target.clone();
        let mut loss = move |v: &ParamVector| -> f64 {
            let params = match unflatten(v, &cfg_inner) {
                Ok(p) => p,
                Err(_) => return f64::NAN,
            };
            match adamra_forward(&x_inner, &params, &cfg_inner, seed) {
                Ok((o, _)) => o
                    .data()
                    .iter()
                    .zip(target_inner.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
                Err(_) => f64::NAN,
            }
        };
        let numeric = finite_diff_grad(&mut loss, &theta, h)?;

        let rel_error = grad_rel_error(&analytic, &numeric)?;
        let mut blocks = Vec::new();
        for idx in 0..analytic.layout.len() {
            let (start, len) = analytic.block_span(idx);
            let a = &analytic.values[start..start + len];
            let b = &numeric.values[start..start + len];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            blocks.push(BlockReport {
                name: analytic.layout[idx].name.clone(),
                analytic_norm: norm(a),
                numeric_norm: norm(b),
                rel_error: slice_rel_error(a, b),
            });
        }
        return Ok(GradCheckReport { seed: attempt_seed, rel_error, blocks });
    }
    Err(Error::InvalidArgument {
        op: "check_layer_gradient",
        msg: format!("no smooth instance found near seed {} after {} tries", seed, MAX_RESAMPLES),
    })
}

/// True when the instance is safely differentiable: router decisions have
/// margin, and (under ReLU) no feature-map input is near its kink.
fn instance_is_smooth(
    cfg: &AdamraConfig,
    p: &AdamraParams,
    trace: &crate::layer::ForwardTrace,
) -> bool {
    const MARGIN: f64 = 1e-3;
    let logits = match trace.q.matmul(&p.w_router) {
        Ok(l) => l,
        Err(_) => return false,
    };
    if cfg.heads > 1 && router_margin(&logits) < MARGIN {
        return false;
    }
    if cfg.phi == crate::baseline::FeatureFn::Relu {
        for ht in &trace.heads {
            for st in &ht.subheads {
                let near_kink = st
                    .q_p
                    .data()
                    .iter()
                    .chain(st.k_p.data())
                    .any(|&x| x.abs() < MARGIN);
                if near_kink {
                    return false;
                }
            }
        }
    }
    true
}
