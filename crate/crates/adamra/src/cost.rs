//! Analytic cost model: multiply-add and allocated-float counts.
//!
//! [`flop_and_memory_model`] predicts, stage by stage, what one forward
//! pass costs — for the multi-resolution layer and for the two plain
//! baselines it is benchmarked against. The float counts mirror the actual
//! allocation sites of the implementations (including the trace the layer
//! retains for backward), which is what makes the instrumented-allocation
//! soundness check in the verification suite meaningful: measured counts
//! must stay within 2× of these numbers.
//!
//! The layer's counts are all linear in `n` for fixed config — there is no
//! quadratic stage to itemize. The softmax baseline's score stage carries
//! the `H·n²` term that dominates it at length.

use crate::error::Result;
use crate::layer::AdamraConfig;

/// Cost of one named stage.
#[derive(Debug, Clone, Copy)]
pub struct CostItem {
    pub stage: &'static str,
    /// Multiply-accumulate operations (transcendentals counted as one each).
    pub madds: u64,
    /// f64 values allocated during the stage.
    pub floats: u64,
}

/// Itemized cost of one model's forward pass.
#[derive(Debug, Clone)]
pub struct ModelCost {
    pub items: Vec<CostItem>,
}

impl ModelCost {
    pub fn total_madds(&self) -> u64 {
        self.items.iter().map(|i| i.madds).sum()
    }

    pub fn total_floats(&self) -> u64 {
        self.items.iter().map(|i| i.floats).sum()
    }

    /// Modeled allocation high-water mark. Both the layer (which retains
    /// its trace until backward) and the baselines (whose score buffers
    /// dominate everything else) hold essentially all allocated floats at
    /// once, so the model equates peak with total.
    pub fn peak_floats(&self) -> u64 {
        self.total_floats()
    }

    pub fn item(&self, stage: &str) -> Option<&CostItem> {
        self.items.iter().find(|i| i.stage == stage)
    }
}

/// Forward-pass costs for the layer and both baselines at length `n`.
#[derive(Debug, Clone)]
pub struct CostEstimate {
    pub adamra: ModelCost,
    pub softmax: ModelCost,
    pub kernel: ModelCost,
    /// Landmark counts per head at this `n`, for reporting.
    pub landmarks: Vec<usize>,
}

/// Builds the cost model. Baselines use the same head count as `cfg` when
/// it tiles the width (vanilla multi-head needs `H | d`), otherwise a
/// single head — the comparison cares about growth in `n`, not the head
/// constant.
pub fn flop_and_memory_model(cfg: &AdamraConfig, n: usize) -> Result<CostEstimate> {
    cfg.validate()?;
    let nu = n as u64;
    let d = cfg.d as u64;
    let h = cfg.heads as u64;
    let s = cfg.subheads as u64;
    let dk = cfg.d_k() as u64;
    let landmarks: Vec<usize> = (0..cfg.heads).map(|i| cfg.landmarks(i, n)).collect();
    let m: u64 = landmarks.iter().map(|&x| x as u64).sum();

    let adamra = ModelCost {
        items: vec![
            // q, k, v = x·W (three d×d products)
            CostItem { stage: "projection", madds: 3 * nu * d * d, floats: 3 * nu * d },
            // segment means of K and V at every head's resolution
            CostItem { stage: "compression", madds: 2 * h * nu * d, floats: 2 * d * m },
            // router logits, softmax, and per-token gate
            CostItem {
                stage: "routing",
                madds: nu * d * h + 2 * nu * h,
                floats: 2 * nu * h + nu,
            },
            // key/value side, once per (head, subhead): project the m_h
            // landmarks, feature-map them, fold into S_kv and s_k
            CostItem {
                stage: "memory",
                madds: 2 * m * d * d + m * d * dk + 2 * m * d,
                floats: 3 * m * d + h * s * dk * dk + h * d,
            },
            // query side, once per routed token: gather, project, feature-
            // map, numerator and denominator contractions
            CostItem {
                stage: "query",
                madds: nu * d * d + nu * d * dk + 2 * nu * d,
                floats: 4 * nu * d + s * nu,
            },
            // scatter/gate and the output projection
            CostItem { stage: "combine", madds: nu * d * d + nu * d, floats: 3 * nu * d },
            // input copy retained in the trace for backward
            CostItem { stage: "trace", madds: 0, floats: nu * d },
        ],
    };

    // baseline head width: reuse cfg.heads when it divides d
    let hb = if cfg.d.is_multiple_of(cfg.heads) { h } else { 1 };
    let dh = d / hb;

    let softmax = ModelCost {
        items: vec![
            CostItem { stage: "projection", madds: 3 * nu * d * d, floats: 3 * nu * d },
            // Q·Kᵀ per head, then scale/exp/normalize in place — this is
            // the quadratic stage
            CostItem {
                stage: "scores",
                madds: nu * nu * d + 3 * hb * nu * nu,
                floats: hb * nu * nu,
            },
            CostItem { stage: "weighted-sum", madds: nu * nu * d, floats: nu * d },
            CostItem { stage: "combine", madds: nu * d * d, floats: 2 * nu * d },
        ],
    };

    let kernel = ModelCost {
        items: vec![
            CostItem { stage: "projection", madds: 3 * nu * d * d, floats: 3 * nu * d },
            CostItem {
                stage: "memory",
                madds: nu * d * dh + nu * d + 2 * nu * d,
                floats: nu * d + hb * dh * dh + hb * dh,
            },
            CostItem {
                stage: "query",
                madds: nu * d * dh + nu * d + nu * d,
                floats: 2 * nu * d,
            },
            CostItem { stage: "combine", madds: nu * d * d, floats: 2 * nu * d },
        ],
    };

    Ok(CostEstimate { adamra, softmax, kernel, landmarks })
}
