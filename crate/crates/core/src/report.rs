//! Report sinks: JSON Lines, a human-readable summary, and histogram CSV for
//! plotting bootstrap distributions.

use std::io::{self, Write};

use serde::Serialize;

use crate::pipeline::WindowReport;

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

/// One JSON object per line.
pub fn write_jsonl<W: Write>(out: &mut W, report: &WindowReport) -> io::Result<()> {
    serde_json::to_writer(&mut *out, report)?;
    out.write_all(b"\n")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.6e}"))
}

pub fn write_summary<W: Write>(out: &mut W, report: &WindowReport) -> io::Result<()> {
    writeln!(
        out,
        "window {} [{:.3}s .. {:.3}s] {} frames, mode {:?}",
        report.window_id, report.t_start, report.t_end, report.frames, report.mode
    )?;
    for s in &report.specs {
        writeln!(
            out,
            "  {:<16} n={:<6} u={:.6e} rel={} ci=[{:.6e}, {:.6e}] ({:?})",
            s.spec_id,
            s.n,
            s.estimate.u,
            fmt_opt(s.estimate.relative),
            s.estimate.interval.0,
            s.estimate.interval.1,
            s.referencing
        )?;
    }
    if let Some(p) = &report.pooled {
        writeln!(out, "  {:<16} u={:.6e} rel={}", "pooled", p.u, fmt_opt(p.relative))?;
    }
    for h in &report.hypotheses {
        writeln!(
            out,
            "  H0 {} vs {}: r={:.4} p={:.4} {}",
            h.spec_id,
            h.result.covariate,
            h.result.statistic,
            h.result.p_value,
            if h.result.rejected { "rejected" } else { "retained" }
        )?;
    }
    for d in &report.dependencies {
        writeln!(
            out,
            "  dependency {} on {}: cov={:.6e} r={:.4}",
            d.spec_id, d.report.covariate, d.report.covariance, d.report.pearson_r
        )?;
    }
    if let Some(p) = &report.propagation {
        writeln!(
            out,
            "  u_C={:.6e} ({:?}), {:?} gives {:.6e}, rel={}",
            p.u_combined,
            p.mode,
            p.alternative_mode,
            p.u_alternative,
            fmt_opt(p.relative)
        )?;
    }
    if let Some(v) = &report.verdict {
        writeln!(
            out,
            "  {} pfh={:.3e} limit={:.1e} ({}) margin={:.2} orders",
            if v.pass { "PASS" } else { "FAIL" },
            v.pfh,
            v.limit.lambda,
            v.limit.label,
            v.margin_orders
        )?;
    }
    for e in &report.errors {
        writeln!(
            out,
            "  error [{}{}]: {}",
            e.stage,
            e.spec_id.as_deref().map(|s| format!(" {s}")).unwrap_or_default(),
            e.message
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<Bin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect()
}

#[derive(Serialize)]
struct PlotRow<'a> {
    window_id: u64,
    spec_id: &'a str,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

/// Histogram rows of the bootstrapped mean absolute deviation, per spec.
pub struct PlotWriter<W: Write> {
    csv: csv::Writer<W>,
    bins: usize,
}

impl<W: Write> PlotWriter<W> {
    pub fn new(out: W, bins: usize) -> Self {
        Self {
            csv: csv::Writer::from_writer(out),
            bins,
        }
    }

    pub fn write(&mut self, report: &WindowReport) -> csv::Result<()> {
        for (spec_id, boot) in &report.bootstraps {
            for (i, b) in histogram(&boot.resample_means, self.bins).iter().enumerate() {
                self.csv.serialize(PlotRow {
                    window_id: report.window_id,
                    spec_id,
                    bin: i,
                    lo: b.lo,
                    hi: b.hi,
                    count: b.count,
                })?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.csv.flush()
    }
}
