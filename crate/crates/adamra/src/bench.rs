//! Timing harness, growth-law fits, and the speed/memory/accuracy score.
//!
//! [`time_forward`] measures one model's forward pass at a given sequence
//! length — median of several single-threaded, batch-1 passes with warmups
//! discarded — and attaches the analytic float count from the cost model so
//! measured time and modeled memory travel together. [`scaling_fit`] turns a
//! series of such measurements into a log-log slope, the machine-independent
//! way to tell linear from quadratic growth. [`smat`] combines speed,
//! memory, and accuracy columns into one score per model.

use crate::baseline::{multi_head_attention, AttentionMode, MultiHeadParams};
use crate::config::Rate;
use crate::cost::flop_and_memory_model;
use crate::error::{Error, Result};
use crate::layer::{adamra_forward, AdamraConfig, AdamraParams};
use crate::mat::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Instant;

/// Untimed passes before measurement starts.
pub const WARMUPS: usize = 3;

/// The attention setup every benchmark tag shares: width 64, four heads at
/// geometrically coarser resolutions. The baselines reuse its width and
/// feature map so all three tags price the same problem.
pub fn bench_config() -> AdamraConfig {
    AdamraConfig::new(
        64,
        4,
        2,
        vec![
            Rate::new(1, 4).unwrap(),
            Rate::new(1, 8).unwrap(),
            Rate::new(1, 16).unwrap(),
            Rate::new(1, 32).unwrap(),
        ],
    )
    .expect("benchmark config is statically valid")
}

/// One model's timing at one sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    pub model: String,
    pub n: usize,
    pub trials: usize,
    pub median_s: f64,
    pub min_s: f64,
    /// Modeled allocation high-water mark for this forward pass.
    pub analytic_floats: u64,
}

/// Times `trials` forward passes of the tagged model on seeded random
/// input. Tags: `softmax`, `kernel`, `adamra`.
pub fn time_forward(model: &str, n: usize, trials: usize, seed: u64) -> Result<TimingStats> {
    if n < 64 {
        return Err(Error::InvalidArgument {
            op: "time_forward",
            msg: format!("n must be ≥ 64, got {}", n),
        });
    }
    if trials < 5 {
        return Err(Error::InvalidArgument {
            op: "time_forward",
            msg: format!("need ≥ 5 trials for a stable median, got {}", trials),
        });
    }
    let cfg = bench_config();
    let estimate = flop_and_memory_model(&cfg, n)?;
    let analytic_floats = match model {
        "adamra" => estimate.adamra.peak_floats(),
        "softmax" => estimate.softmax.peak_floats(),
        "kernel" => estimate.kernel.peak_floats(),
        other => return Err(Error::UnknownModelTag(other.to_string())),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::random_uniform(n, cfg.d, 1.0, &mut rng);
    // the baselines need a head count dividing the width; the cost model
    // makes the same single-head fallback
    let hb = if cfg.d.is_multiple_of(cfg.heads) { cfg.heads } else { 1 };

    let layer_params;
    let baseline_params;
    let mut pass: Box<dyn FnMut() -> Result<Matrix>> = match model {
        "adamra" => {
            layer_params = AdamraParams::init(&cfg, &mut rng)?;
            Box::new(move || Ok(adamra_forward(&x, &layer_params, &cfg, seed)?.0))
        }
        "softmax" => {
            baseline_params = MultiHeadParams::init(cfg.d, hb, &mut rng)?;
            Box::new(move || {
                multi_head_attention(&x, &baseline_params, AttentionMode::Softmax { scale: None })
            })
        }
        "kernel" => {
            baseline_params = MultiHeadParams::init(cfg.d, hb, &mut rng)?;
            let mode = AttentionMode::Kernel { phi: cfg.phi, eps: 1e-6 };
            Box::new(move || multi_head_attention(&x, &baseline_params, mode))
        }
        _ => unreachable!("tag validated above"),
    };

    for _ in 0..WARMUPS {
        black_box(pass()?);
    }
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        black_box(pass()?);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let median_s = if trials % 2 == 1 {
        times[trials / 2]
    } else {
        0.5 * (times[trials / 2 - 1] + times[trials / 2])
    };
    Ok(TimingStats {
        model: model.to_string(),
        n,
        trials,
        median_s,
        min_s: times[0],
        analytic_floats,
    })
}

/// Least-squares slope of `log(seconds)` against `log(n)`.
///
/// Needs at least four points whose lengths span a factor of eight, so a
/// quadratic can't masquerade as linear inside measurement noise.
pub fn scaling_fit(series: &[(usize, f64)]) -> Result<f64> {
    if series.len() < 4 {
        return Err(Error::InvalidArgument {
            op: "scaling_fit",
            msg: format!("need ≥ 4 points, got {}", series.len()),
        });
    }
    let mut lo = usize::MAX;
    let mut hi = 0usize;
    for &(n, t) in series {
        if n == 0 || t <= 0.0 || !t.is_finite() {
            return Err(Error::InvalidArgument {
                op: "scaling_fit",
                msg: format!("degenerate point (n={}, t={})", n, t),
            });
        }
        lo = lo.min(n);
        hi = hi.max(n);
    }
    if hi < lo.saturating_mul(8) {
        return Err(Error::InvalidArgument {
            op: "scaling_fit",
            msg: format!("lengths span only {}..{}, need ≥ 8×", lo, hi),
        });
    }
    let pts: Vec<(f64, f64)> =
        series.iter().map(|&(n, t)| ((n as f64).ln(), t.ln())).collect();
    let m = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    Ok(sxy / sxx)
}

/// Maps values onto `[0, 1]` with the minimum at 0 and the maximum at 1.
/// `label` names the column in the constant-input error.
pub fn minmax_norm(xs: &[f64], label: &str) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "minmax_norm",
            msg: format!("column '{}' needs ≥ 2 values, got {}", label, xs.len()),
        });
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "minmax_norm",
            msg: format!("column '{}' contains a non-finite value", label),
        });
    }
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::ConstantColumn(label.to_string()));
    }
    Ok(xs.iter().map(|&v| (v - min) / (max - min)).collect())
}

/// Raw per-model measurements: throughput, memory footprint, accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    pub model: String,
    pub speed: f64,
    pub mem_mb: f64,
    pub acc: f64,
}

/// One model's normalized columns and composite score.
#[derive(Debug, Clone, PartialEq)]
pub struct SmatRecord {
    pub model: String,
    pub speed: f64,
    pub mem_mb: f64,
    pub acc: f64,
    pub s_norm: f64,
    pub m_norm: f64,
    pub acc_norm: f64,
    pub smat: f64,
}

/// Scores every model as `s_norm + (1 − m_norm) + acc_norm`, each column
/// min-max normalized across the given records. Higher speed and accuracy
/// help, higher memory hurts; the best possible score is exactly 3.
pub fn smat(rows: &[RawMeasurement]) -> Result<Vec<SmatRecord>> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "smat",
            msg: format!("need ≥ 2 records to normalize, got {}", rows.len()),
        });
    }
    let speeds: Vec<f64> = rows.iter().map(|r| r.speed).collect();
    let mems: Vec<f64> = rows.iter().map(|r| r.mem_mb).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.acc).collect();
    let s_norm = minmax_norm(&speeds, "speed")?;
    let m_norm = minmax_norm(&mems, "mem_mb")?;
    let acc_norm = minmax_norm(&accs, "acc")?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| SmatRecord {
            model: r.model.clone(),
            speed: r.speed,
            mem_mb: r.mem_mb,
            acc: r.acc,
            s_norm: s_norm[i],
            m_norm: m_norm[i],
            acc_norm: acc_norm[i],
            smat: s_norm[i] + (1.0 - m_norm[i]) + acc_norm[i],
        })
        .collect())
}

/// Formats with `sig` significant digits, plain decimal where practical.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    assert!(sig >= 1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if exp >= sig as i32 || exp < -4 {
        format!("{:.*e}", sig - 1, x)
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        format!("{:.*}", decimals, x)
    }
}

/// `model,n,trials,median_s,min_s,analytic_floats` rows.
pub fn timings_csv(stats: &[TimingStats]) -> String {
    let mut out = String::from("model,n,trials,median_s,min_s,analytic_floats\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.model,
            s.n,
            s.trials,
            fmt_sig(s.median_s, 6),
            fmt_sig(s.min_s, 6),
            s.analytic_floats
        ));
    }
    out
}

/// `model,speed,mem_mb,acc,s_norm,m_norm,acc_norm,smat` rows.
pub fn smat_csv(records: &[SmatRecord]) -> String {
    let mut out = String::from("model,speed,mem_mb,acc,s_norm,m_norm,acc_norm,smat\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model,
            fmt_sig(r.speed, 6),
            fmt_sig(r.mem_mb, 6),
            fmt_sig(r.acc, 6),
            fmt_sig(r.s_norm, 6),
            fmt_sig(r.m_norm, 6),
            fmt_sig(r.acc_norm, 6),
            fmt_sig(r.smat, 6)
        ));
    }
    out
}

/// Reads `model,speed,mem_mb,acc` rows (the raw half of the scored schema).
pub fn parse_measurements_csv(text: &str) -> Result<Vec<RawMeasurement>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty input".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != 4 || cols[0] != "model" || cols[1] != "speed" || cols[3] != "acc"
        || !(cols[2] == "mem_mb" || cols[2] == "mem")
    {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header model,speed,mem_mb,acc; got '{}'", header),
        });
    }
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {} value '{}'", what, s),
            })
        };
        rows.push(RawMeasurement {
            model: fields[0].to_string(),
            speed: num(fields[1], "speed")?,
            mem_mb: num(fields[2], "mem_mb")?,
            acc: num(fields[3], "acc")?,
        });
    }
    Ok(rows)
}
