//! Evaluation metrics for smoothing runs: rate variability, label shares,
//! buffer extremes, and the billing rate actually obtained.

use crate::smoother::{BillingStatement, RateLabel, SmootherConfig, TransmissionLog};
use crate::trace::FrameTrace;
use crate::{Error, Result};

/// Summary quantities of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Coefficient of variation of the per-step transmission rates.
    pub variability: f64,
    /// Fractions of records labeled below / at / above the target rate.
    pub p_r1: f64,
    pub p_cer: f64,
    pub p_r2: f64,
    /// Integer label counts behind the shares; they partition the record
    /// count exactly, which the floating shares cannot promise.
    pub n_r1: u64,
    pub n_cer: u64,
    pub n_r2: u64,
    /// Largest buffer level seen at any decision or arrival boundary, bytes.
    pub max_buffer: u64,
    /// Net ledger drift, bytes per second.
    pub net_per_second: f64,
    /// Arrivals discarded (fully or partially) by the capacity cap.
    pub overflows: u64,
    /// Records that overdrew the buffer. Structurally zero: the sender
    /// never dequeues more than is queued.
    pub underflows: u64,
    /// Mean transmitted rate over the uninflated trace mean rate.
    pub cer_t_obtained_ratio: f64,
}

/// Coefficient of variation: population standard deviation over the mean.
///
/// Population (not sample) deviation, so a single rate gives exactly zero.
pub fn variability(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::invalid("variability of an empty rate list"));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::invalid(format!(
            "variability undefined for non-positive mean rate {mean}"
        )));
    }
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// The unsmoothed comparison stream: each frame sent within its own frame
/// period, i.e. one rate of `size_bytes * 8 * fps` per frame.
pub fn baseline_rates(trace: &FrameTrace) -> Vec<f64> {
    trace
        .frames()
        .iter()
        .map(|f| f.size_bytes as f64 * 8.0 * trace.fps())
        .collect()
}

/// Computes [`RunMetrics`] from a finished run.
pub fn run_metrics(
    log: &TransmissionLog,
    bill: &BillingStatement,
    cfg: &SmootherConfig,
) -> Result<RunMetrics> {
    if log.records.is_empty() {
        return Err(Error::invalid("metrics of an empty log"));
    }
    let n = log.records.len();
    let mut n_r1 = 0u64;
    let mut n_cer = 0u64;
    let mut n_r2 = 0u64;
    let mut max_buffer = 0u64;
    let mut underflows = 0u64;
    let mut rate_sum = 0.0f64;
    for r in &log.records {
        match r.label {
            RateLabel::R1 => n_r1 += 1,
            RateLabel::Cer => n_cer += 1,
            RateLabel::R2 => n_r2 += 1,
        }
        max_buffer = max_buffer.max(r.buffer_before).max(r.buffer_after);
        if r.sent_bytes > r.buffer_before {
            underflows += 1;
        }
        rate_sum += r.rate_bps;
    }
    let rates: Vec<f64> = log.records.iter().map(|r| r.rate_bps).collect();
    let cer = cfg.cer_t / (1.0 + cfg.alpha);
    Ok(RunMetrics {
        variability: variability(&rates)?,
        p_r1: n_r1 as f64 / n as f64,
        p_cer: n_cer as f64 / n as f64,
        p_r2: n_r2 as f64 / n as f64,
        n_r1,
        n_cer,
        n_r2,
        max_buffer,
        net_per_second: bill.net_per_second,
        overflows: log.overflow_events,
        underflows,
        cer_t_obtained_ratio: (rate_sum / n as f64) / cer,
    })
}

/// One-row CSV rendering (with header) for side-by-side comparisons.
pub fn to_csv_row(m: &RunMetrics) -> String {
    format!(
        "variability,p_r1,p_cer,p_r2,max_buffer_bytes,net_per_second,overflows,underflows,cer_t_obtained_ratio\n{},{},{},{},{},{},{},{},{}\n",
        m.variability,
        m.p_r1,
        m.p_cer,
        m.p_r2,
        m.max_buffer,
        m.net_per_second,
        m.overflows,
        m.underflows,
        m.cer_t_obtained_ratio
    )
}
