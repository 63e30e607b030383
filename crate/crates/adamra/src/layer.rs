//! Adaptive multi-resolution attention.
//!
//! The layer combines three ideas on top of plain kernel attention:
//!
//! 1. **Multi-resolution memory.** Each head `h` sees the key/value sequence
//!    compressed to `m_h = max(1, round(n·c_h))` landmarks by segment means,
//!    with a different rate `c_h` per head — coarse heads summarize, the
//!    `c = 1` head (if present) keeps full detail.
//! 2. **Query routing.** A learned router scores every token against the
//!    heads (`softmax(Q·W)` row per token) and each token attends in exactly
//!    one head: the argmax. Heads therefore process disjoint token subsets,
//!    and the recombination step is a scatter, not a sum of overlaps.
//! 3. **Subheads.** Inside a head, queries and the compressed memory are
//!    projected into `S` narrow slices of width `d/S`, kernel attention runs
//!    per slice, and slices are concatenated before the output projection.
//!
//! [`adamra_forward`] returns the output together with a [`ForwardTrace`]
//! holding every intermediate needed for the manual reverse pass in
//! [`crate::backward`].

use crate::baseline::{FeatureFn, QkvParams};
use crate::config::{ConfigMap, Rate};
use crate::error::{Error, Result};
use crate::mat::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How tokens are assigned to heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Argmax over the learned router distribution `softmax(Q·W)`.
    Learned,
    /// Uniform random head per token from a seeded generator; the router
    /// matrix is ignored and no gate scaling is applied. Control setting.
    Random,
}

impl Routing {
    pub fn parse(s: &str) -> Result<Routing> {
        match s {
            "learned" => Ok(Routing::Learned),
            "random" => Ok(Routing::Random),
            other => Err(Error::InvalidConfig(format!(
                "routing must be learned or random, got {:?}",
                other
            ))),
        }
    }
}

/// Hyperparameters of one attention layer.
#[derive(Debug, Clone)]
pub struct AdamraConfig {
    /// Model width; token vectors are `d`-dimensional throughout.
    pub d: usize,
    /// Head count `H`; one compression rate per head.
    pub heads: usize,
    /// Subheads per head `S`; must divide `d` (`d_k = d_v = d/S`).
    pub subheads: usize,
    /// Per-head compression rates, in head order.
    pub c: Vec<Rate>,
    /// Feature map for the kernelized similarity.
    pub phi: FeatureFn,
    /// Denominator stabilizer; must be positive here (the attention kernel
    /// itself accepts anything, which the fault-injection mode relies on).
    pub eps: f64,
    pub routing: Routing,
    /// When on, each token's combined head output is scaled by its winning
    /// router probability, which is what lets gradients reach the router.
    /// Off reproduces a literal hard mask: the router gets zero gradient.
    pub gate_scaling: bool,
}

impl AdamraConfig {
    /// Three heads at full, half, and third resolution over a 64-wide model,
    /// two subheads each.
    pub fn default_layer() -> AdamraConfig {
        AdamraConfig::new(
            64,
            3,
            2,
            vec![Rate::ONE, Rate::new(1, 2).unwrap(), Rate::new(1, 3).unwrap()],
        )
        .unwrap()
    }

    pub fn new(d: usize, heads: usize, subheads: usize, c: Vec<Rate>) -> Result<AdamraConfig> {
        let cfg = AdamraConfig {
            d,
            heads,
            subheads,
            c,
            phi: FeatureFn::Relu,
            eps: 1e-6,
            routing: Routing::Learned,
            gate_scaling: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.subheads == 0 {
            return Err(Error::InvalidConfig(format!(
                "need at least one head and one subhead, got H={} S={}",
                self.heads, self.subheads
            )));
        }
        if self.d == 0 || !self.d.is_multiple_of(self.subheads) {
            return Err(Error::InvalidConfig(format!(
                "width {} is not divisible into {} subheads",
                self.d, self.subheads
            )));
        }
        if self.c.len() != self.heads {
            return Err(Error::InvalidConfig(format!(
                "{} compression rates for {} heads",
                self.c.len(),
                self.heads
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Key/query width per subhead (equal to the value width).
    pub fn d_k(&self) -> usize {
        self.d / self.subheads
    }

    /// Landmark count for head `h` at sequence length `n`.
    pub fn landmarks(&self, h: usize, n: usize) -> usize {
        self.c[h].landmarks(n)
    }

    /// Total scalar parameter count of [`AdamraParams`] under this config.
    pub fn param_count(&self) -> usize {
        let (d, h, s) = (self.d, self.heads, self.subheads);
        // three d×d projections + router + H·S subhead triples + output
        3 * d * d + d * h + h * s * 3 * d * (d / s) + d * d
    }

    /// Reads `adamra.*` keys from a config map, with this instance's current
    /// values as defaults.
    pub fn apply_config(&mut self, cfg: &mut ConfigMap) -> Result<()> {
        self.d = cfg.get("adamra.d", self.d)?;
        self.heads = cfg.get("adamra.heads", self.heads)?;
        self.subheads = cfg.get("adamra.subheads", self.subheads)?;
        self.c = cfg.get_list("adamra.c", self.c.clone())?;
        if let Some(s) = cfg.get_str("adamra.phi") {
            self.phi = FeatureFn::parse(&s)?;
        }
        self.eps = cfg.get("adamra.eps", self.eps)?;
        if let Some(s) = cfg.get_str("adamra.routing") {
            self.routing = Routing::parse(&s)?;
        }
        self.gate_scaling = cfg.get_bool("adamra.gate_scaling", self.gate_scaling)?;
        // heads may have changed while c did not: if c is now the wrong
        // length but uniform defaults would mask it, fail loudly instead
        self.validate()
    }
}

/// Projection weights of one subhead: queries and keys to width `d_k`,
/// values to width `d_v` (both `d/S` here).
#[derive(Debug, Clone)]
pub struct SubheadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// All weights of one layer. Field order is the canonical flattening order
/// used by serialization and the finite-difference checker: `qkv` (q, k, v),
/// `w_router`, then `sub[h][s]` (q, k, v per subhead), then `w_o`.
#[derive(Debug, Clone)]
pub struct AdamraParams {
    /// Full-width input projections shared by all heads.
    pub qkv: QkvParams,
    /// Router weights, `d×H`.
    pub w_router: Matrix,
    /// Per-head, per-subhead projections, indexed `sub[head][subhead]`.
    pub sub: Vec<Vec<SubheadParams>>,
    /// Output projection, `(S·d_v)×d`.
    pub w_o: Matrix,
}

impl AdamraParams {
    /// Seeded uniform `±1/√fan_in` initialization for every block. The
    /// router is initialized like any other projection — a zero router would
    /// start with every token tie-broken onto head 0.
    pub fn init<R: Rng>(cfg: &AdamraConfig, rng: &mut R) -> Result<AdamraParams> {
        cfg.validate()?;
        let d = cfg.d;
        let dk = cfg.d_k();
        let scale = 1.0 / (d as f64).sqrt();
        let qkv = QkvParams::init(d, rng);
        let w_router = Matrix::random_uniform(d, cfg.heads, scale, rng);
        let sub = (0..cfg.heads)
            .map(|_| {
                (0..cfg.subheads)
                    .map(|_| SubheadParams {
                        w_q: Matrix::random_uniform(d, dk, scale, rng),
                        w_k: Matrix::random_uniform(d, dk, scale, rng),
                        w_v: Matrix::random_uniform(d, dk, scale, rng),
                    })
                    .collect()
            })
            .collect();
        let w_o = Matrix::random_uniform(
            cfg.subheads * dk,
            d,
            1.0 / ((cfg.subheads * dk) as f64).sqrt(),
            rng,
        );
        Ok(AdamraParams { qkv, w_router, sub, w_o })
    }

    /// All-zero parameters with the shapes demanded by `cfg`; gradient
    /// accumulators start here.
    pub fn zeros(cfg: &AdamraConfig) -> AdamraParams {
        let d = cfg.d;
        let dk = cfg.d_k();
        AdamraParams {
            qkv: QkvParams {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
            },
            w_router: Matrix::zeros(d, cfg.heads),
            sub: (0..cfg.heads)
                .map(|_| {
                    (0..cfg.subheads)
                        .map(|_| SubheadParams {
                            w_q: Matrix::zeros(d, dk),
                            w_k: Matrix::zeros(d, dk),
                            w_v: Matrix::zeros(d, dk),
                        })
                        .collect()
                })
                .collect(),
            w_o: Matrix::zeros(cfg.subheads * dk, d),
        }
    }

    pub fn validate(&self, cfg: &AdamraConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d;
        let dk = cfg.d_k();
        let shape_err = |what: String| Err(Error::InvalidArgument {
            op: "AdamraParams::validate",
            msg: what,
        });
        if self.qkv.d() != d {
            return shape_err(format!("qkv width {} != {}", self.qkv.d(), d));
        }
        if self.w_router.rows() != d || self.w_router.cols() != cfg.heads {
            return shape_err(format!(
                "router is {}x{}, want {}x{}",
                self.w_router.rows(),
                self.w_router.cols(),
                d,
                cfg.heads
            ));
        }
        if self.sub.len() != cfg.heads {
            return shape_err(format!("{} head blocks for {} heads", self.sub.len(), cfg.heads));
        }
        for (h, head) in self.sub.iter().enumerate() {
            if head.len() != cfg.subheads {
                return shape_err(format!("head {} has {} subheads", h, head.len()));
            }
            for (s, p) in head.iter().enumerate() {
                for (name, w) in [("w_q", &p.w_q), ("w_k", &p.w_k), ("w_v", &p.w_v)] {
                    if w.rows() != d || w.cols() != dk {
                        return shape_err(format!(
                            "sub[{}][{}].{} is {}x{}, want {}x{}",
                            h,
                            s,
                            name,
                            w.rows(),
                            w.cols(),
                            d,
                            dk
                        ));
                    }
                }
            }
        }
        if self.w_o.rows() != cfg.subheads * dk || self.w_o.cols() != d {
            return shape_err(format!(
                "w_o is {}x{}, want {}x{}",
                self.w_o.rows(),
                self.w_o.cols(),
                cfg.subheads * dk,
                d
            ));
        }
        Ok(())
    }

    /// All weight blocks in canonical order, with stable names like
    /// `sub[1][0].w_k`. This order defines the flattened parameter layout.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("qkv.w_q".into(), &self.qkv.w_q),
            ("qkv.w_k".into(), &self.qkv.w_k),
            ("qkv.w_v".into(), &self.qkv.w_v),
            ("w_router".into(), &self.w_router),
        ];
        for (h, head) in self.sub.iter().enumerate() {
            for (s, sp) in head.iter().enumerate() {
                out.push((format!("sub[{}][{}].w_q", h, s), &sp.w_q));
                out.push((format!("sub[{}][{}].w_k", h, s), &sp.w_k));
                out.push((format!("sub[{}][{}].w_v", h, s), &sp.w_v));
            }
        }
        out.push(("w_o".into(), &self.w_o));
        out
    }

    /// Mutable view of the same blocks in the same order.
    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("qkv.w_q".into(), &mut self.qkv.w_q),
            ("qkv.w_k".into(), &mut self.qkv.w_k),
            ("qkv.w_v".into(), &mut self.qkv.w_v),
            ("w_router".into(), &mut self.w_router),
        ];
        for (h, head) in self.sub.iter_mut().enumerate() {
            for (s, sp) in head.iter_mut().enumerate() {
                out.push((format!("sub[{}][{}].w_q", h, s), &mut sp.w_q));
                out.push((format!("sub[{}][{}].w_k", h, s), &mut sp.w_k));
                out.push((format!("sub[{}][{}].w_v", h, s), &mut sp.w_v));
            }
        }
        out.push(("w_o".into(), &mut self.w_o));
        out
    }

    /// Number of scalar entries across all blocks.
    pub fn count(&self) -> usize {
        let mut n = self.qkv.w_q.data().len()
            + self.qkv.w_k.data().len()
            + self.qkv.w_v.data().len()
            + self.w_router.data().len()
            + self.w_o.data().len();
        for head in &self.sub {
            for p in head {
                n += p.w_q.data().len() + p.w_k.data().len() + p.w_v.data().len();
            }
        }
        n
    }
}

/// Segment-mean compressed keys and values for one head.
#[derive(Debug, Clone)]
pub struct HeadMemory {
    pub k_tilde: Matrix,
    pub v_tilde: Matrix,
    /// Landmark count `m_h`.
    pub m: usize,
}

/// Per-head compressed memory, heads in config order.
#[derive(Debug, Clone)]
pub struct CompressedMemory {
    pub heads: Vec<HeadMemory>,
}

/// Compresses full-width K and V once per head at that head's rate.
pub fn compress_memory(k: &Matrix, v: &Matrix, cfg: &AdamraConfig) -> Result<CompressedMemory> {
    cfg.validate()?;
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::InvalidArgument {
            op: "compress_memory",
            msg: format!("K has {} rows, V has {}; need equal and ≥ 1", k.rows(), v.rows()),
        });
    }
    let n = k.rows();
    let heads = (0..cfg.heads)
        .map(|h| {
            let m = cfg.landmarks(h, n);
            Ok(HeadMemory {
                k_tilde: k.segment_mean(m)?,
                v_tilde: v.segment_mean(m)?,
                m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedMemory { heads })
}

/// Which head each token attends in, and with what router confidence.
#[derive(Debug, Clone)]
pub struct RoutingAssignment {
    /// Router distribution, one row per token (rows sum to 1).
    pub probs: Matrix,
    /// Winning head per token: row argmax, lowest index on ties.
    pub head_of: Vec<usize>,
    /// Scaling factor per token: the winning probability under learned
    /// routing, exactly 1 under random routing.
    pub gate: Vec<f64>,
}

impl RoutingAssignment {
    /// Token indices routed to head `h`, ascending.
    pub fn tokens_of(&self, h: usize) -> Vec<usize> {
        (0..self.head_of.len()).filter(|&i| self.head_of[i] == h).collect()
    }
}

/// Index of the row maximum, preferring the lowest index on exact ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Assigns every query row to one head.
///
/// Learned mode scores rows against `w_router` and takes the per-row argmax
/// of the softmaxed logits; `seed` is unused. Random mode draws heads
/// uniformly from a generator seeded with `seed`, reports the uniform
/// distribution as `probs`, and fixes every gate at 1.
pub fn route(
    q: &Matrix,
    w_router: &Matrix,
    mode: Routing,
    seed: u64,
) -> Result<RoutingAssignment> {
    if q.cols() != w_router.rows() {
        return Err(Error::ShapeMismatch {
            op: "route",
            lrows: q.rows(),
            lcols: q.cols(),
            rrows: w_router.rows(),
            rcols: w_router.cols(),
        });
    }
    let n = q.rows();
    let h = w_router.cols();
    match mode {
        Routing::Learned => {
            let probs = q.matmul(w_router)?.softmax_rows();
            let head_of: Vec<usize> = (0..n).map(|i| argmax_lowest(probs.row(i))).collect();
            let gate = (0..n).map(|i| probs.get(i, head_of[i])).collect();
            Ok(RoutingAssignment { probs, head_of, gate })
        }
        Routing::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head_of: Vec<usize> = (0..n).map(|_| rng.gen_range(0..h)).collect();
            Ok(RoutingAssignment {
                probs: Matrix::from_fn(n, h, |_, _| 1.0 / h as f64),
                head_of,
                gate: vec![1.0; n],
            })
        }
    }
}

/// Intermediates of one subhead's kernel attention, kept for backward.
#[derive(Debug, Clone)]
pub struct SubheadTrace {
    /// Projected queries of the routed tokens, `r×d_k` (pre-feature-map).
    pub q_p: Matrix,
    /// Projected compressed keys, `m×d_k` (pre-feature-map).
    pub k_p: Matrix,
    /// Projected compressed values, `m×d_v`.
    pub v_p: Matrix,
    pub phi_q: Matrix,
    pub phi_k: Matrix,
    /// Key/value summary `φ(K)ᵀ·V`, `d_k×d_v`.
    pub s_kv: Matrix,
    /// Feature-wise key mass `Σⱼ φ(Kⱼ)`.
    pub s_k: Vec<f64>,
    /// Per-query denominators including eps.
    pub den: Vec<f64>,
    /// Normalized attention output, `r×d_v`.
    pub out: Matrix,
}

/// Intermediates of one head: which tokens it owns and its subhead runs.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Ascending token indices routed here (possibly empty).
    pub tokens: Vec<usize>,
    /// Rows of the full-width Q at `tokens`.
    pub q_h: Matrix,
    pub subheads: Vec<SubheadTrace>,
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub cfg: AdamraConfig,
    pub x: Matrix,
    /// Full-width projections of the input (Q, K, V).
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub memory: CompressedMemory,
    pub routing: RoutingAssignment,
    pub heads: Vec<HeadTrace>,
    /// Scattered, un-gated head outputs, one row per token, width `S·d_v`.
    pub combined: Matrix,
}

/// Runs the layer on `x` (`n×d`) and returns output plus trace.
///
/// `seed` only matters under random routing, where it fixes the head draw.
pub fn adamra_forward(
    x: &Matrix,
    p: &AdamraParams,
    cfg: &AdamraConfig,
    seed: u64,
) -> Result<(Matrix, ForwardTrace)> {
    p.validate(cfg)?;
    if x.cols() != cfg.d || x.rows() == 0 {
        return Err(Error::InvalidArgument {
            op: "adamra_forward",
            msg: format!("input is {}x{}, want n≥1 rows of width {}", x.rows(), x.cols(), cfg.d),
        });
    }
    let n = x.rows();
    let width = cfg.subheads * cfg.d_k();

    let q = x.matmul(&p.qkv.w_q)?;
    let k = x.matmul(&p.qkv.w_k)?;
    let v = x.matmul(&p.qkv.w_v)?;
    let memory = compress_memory(&k, &v, cfg)?;
    let routing = route(&q, &p.w_router, cfg.routing, seed)?;

    let mut combined = Matrix::zeros(n, width);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let tokens = routing.tokens_of(h);
        let q_h = q.gather_rows(&tokens);
        let mut subheads = Vec::with_capacity(cfg.subheads);
        if tokens.is_empty() {
            // nothing routed here: contributes nothing, computes nothing
            heads.push(HeadTrace { tokens, q_h, subheads });
            continue;
        }
        let mem = &memory.heads[h];
        for s in 0..cfg.subheads {
            let sp = &p.sub[h][s];
            let q_p = q_h.matmul(&sp.w_q)?;
            let k_p = mem.k_tilde.matmul(&sp.w_k)?;
            let v_p = mem.v_tilde.matmul(&sp.w_v)?;
            let tr = kernel_attention_traced(&q_p, &k_p, &v_p, cfg.phi, cfg.eps)?;

            // place this subhead's slice into the combined rows
            let lo = s * cfg.d_k();
            for (r, &tok) in tokens.iter().enumerate() {
                combined.row_mut(tok)[lo..lo + cfg.d_k()].copy_from_slice(tr.out.row(r));
            }
            subheads.push(SubheadTrace { q_p, k_p, v_p, ..tr });
        }
        heads.push(HeadTrace { tokens, q_h, subheads });
    }

    let mut gated = combined.clone();
    if cfg.gate_scaling {
        for i in 0..n {
            let g = routing.gate[i];
            for x in gated.row_mut(i) {
                *x *= g;
            }
        }
    }
    let out = gated.matmul(&p.w_o)?;

    let trace = ForwardTrace {
        cfg: cfg.clone(),
        x: x.clone(),
        q,
        k,
        v,
        memory,
        routing,
        heads,
        combined,
    };
    Ok((out, trace))
}

/// Kernel attention that returns its intermediates instead of just the
/// output. The visible numbers match [`kernel_attention`] exactly — same
/// operations, same order.
fn kernel_attention_traced(
    q_p: &Matrix,
    k_p: &Matrix,
    v_p: &Matrix,
    phi: FeatureFn,
    eps: f64,
) -> Result<SubheadTrace> {
    let phi_q = phi.apply(q_p);
    let phi_k = phi.apply(k_p);
    let s_kv = phi_k.matmul_tn(v_p)?;
    let mut s_k = vec![0.0; phi_k.cols()];
    for j in 0..phi_k.rows() {
        for (acc, &x) in s_k.iter_mut().zip(phi_k.row(j)) {
            *acc += x;
        }
    }
    let mut out = phi_q.matmul(&s_kv)?;
    let mut den = Vec::with_capacity(out.rows());
    for i in 0..out.rows() {
        let mut d = eps;
        for (&f, &s) in phi_q.row(i).iter().zip(&s_k) {
            d += f * s;
        }
        den.push(d);
        for x in out.row_mut(i) {
            *x /= d;
        }
    }
    Ok(SubheadTrace {
        q_p: Matrix::zeros(0, 0), // overwritten by the caller
        k_p: Matrix::zeros(0, 0),
        v_p: Matrix::zeros(0, 0),
        phi_q,
        phi_k,
        s_kv,
        s_k,
        den,
        out,
    })
}
