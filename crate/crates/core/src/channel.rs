//! Radio channel capacity traces and their aggregation into per-step
//! feedback for the rate smoother.
//!
//! The channel is modeled as a sequence of per-TTI achievable rates (what one
//! resource block would carry in that TTI, in bits/second). The smoother does
//! not consume TTIs directly; it sees one `(r_c, r_max)` pair per
//! transmission step, produced by averaging the TTI rates over each step
//! window and applying a scheduling policy.

use rand::rngs::StdRng;
use rand::Rng;
use rand::SeedableRng;

use crate::{Error, Result};

/// Default TTI length in seconds (1 ms).
pub const DEFAULT_TTI: f64 = 0.001;

/// Per-TTI achievable rate trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    /// Achievable rate of a single resource block in each TTI, bits/second.
    pub rates: Vec<f64>,
    /// TTI duration in seconds.
    pub tti: f64,
}

impl ChannelTrace {
    pub fn new(rates: Vec<f64>, tti: f64) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("channel trace has no TTIs"));
        }
        if !(tti > 0.0) || !tti.is_finite() {
            return Err(Error::invalid(format!("tti must be positive, got {tti}")));
        }
        if let Some(bad) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid(format!(
                "channel rates must be finite and >= 0, got {bad}"
            )));
        }
        Ok(ChannelTrace { rates, tti })
    }
}

/// What the scheduler grants the stream on average, as a fraction of TTIs:
/// `prbs_per_alloc` resource blocks every `alloc_every_n_ttis` TTIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvgPolicy {
    pub prbs_per_alloc: u32,
    pub alloc_every_n_ttis: u32,
}

/// Sustainable and burst rates for one transmission step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackWindow {
    /// Average grant under the long-run scheduling policy, bits/second.
    pub r_c: f64,
    /// Burst ceiling if every resource block in the TTI went to this stream.
    pub r_max: f64,
}

/// Per-step feedback derived from a channel trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeed {
    pub windows: Vec<FeedbackWindow>,
    /// Step length the windows were computed for, seconds.
    pub window: f64,
}

impl ChannelFeed {
    /// Feedback for transmission step `step`. Steps past the end of the
    /// trace keep seeing the last window: the channel is assumed to hold its
    /// most recent state rather than vanish.
    pub fn window_at(&self, step: usize) -> FeedbackWindow {
        self.windows[step.min(self.windows.len() - 1)]
    }

    /// Collapses the feed to its per-run mean, for experiments that want the
    /// long-run grant without per-step fluctuation.
    pub fn frozen(&self) -> ChannelFeed {
        let n = self.windows.len() as f64;
        let r_c = self.windows.iter().map(|w| w.r_c).sum::<f64>() / n;
        let r_max = self.windows.iter().map(|w| w.r_max).sum::<f64>() / n;
        ChannelFeed {
            windows: vec![FeedbackWindow { r_c, r_max }],
            window: self.window,
        }
    }
}

/// Aggregates a TTI-level trace into per-step feedback.
///
/// The step length `rtp_period` must be an integer number of TTIs. For each
/// full window of `rtp_period / tti` TTIs:
///
/// * `r_c  = mean_rate * prbs_per_alloc / alloc_every_n_ttis`
/// * `r_max = mean_rate * prbs_per_tti`
///
/// where `mean_rate` is the window average of the per-TTI single-block rate.
/// A trailing partial window is dropped. Policies that on average grant more
/// than the burst ceiling (`prbs_per_alloc / alloc_every_n_ttis >
/// prbs_per_tti`) are rejected.
pub fn aggregate_feedback(
    ct: &ChannelTrace,
    rtp_period: f64,
    avg: AvgPolicy,
    max_prbs: u32,
) -> Result<ChannelFeed> {
    if !(rtp_period > 0.0) || !rtp_period.is_finite() {
        return Err(Error::invalid(format!(
            "rtp_period must be positive, got {rtp_period}"
        )));
    }
    let per_window = rtp_period / ct.tti;
    let w = per_window.round();
    if w < 1.0 || (per_window - w).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "rtp_period {rtp_period} is not an integer number of TTIs of {}",
            ct.tti
        )));
    }
    let w = w as usize;
    if avg.prbs_per_alloc == 0 || avg.alloc_every_n_ttis == 0 || max_prbs == 0 {
        return Err(Error::invalid("scheduling policy counts must be positive"));
    }
    let avg_ratio = avg.prbs_per_alloc as f64 / avg.alloc_every_n_ttis as f64;
    if avg_ratio > max_prbs as f64 {
        return Err(Error::invalid(format!(
            "average grant of {avg_ratio} blocks/TTI exceeds the burst ceiling of {max_prbs}"
        )));
    }
    if ct.rates.len() < w {
        return Err(Error::invalid(format!(
            "channel trace has {} TTIs, shorter than one step window of {w}",
            ct.rates.len()
        )));
    }

    let windows = ct
        .rates
        .chunks_exact(w)
        .map(|chunk| {
            let mean = chunk.iter().sum::<f64>() / w as f64;
            FeedbackWindow {
                r_c: mean * avg_ratio,
                r_max: mean * max_prbs as f64,
            }
        })
        .collect();
    Ok(ChannelFeed {
        windows,
        window: rtp_period,
    })
}

/// Generates a synthetic channel trace: per-TTI rates drawn from a normal
/// distribution with the given mean and relative standard deviation, clamped
/// at zero. Deterministic for a fixed seed.
pub fn synth_channel(
    mean_rate: f64,
    rel_stddev: f64,
    n_ttis: usize,
    tti: f64,
    seed: u64,
) -> Result<ChannelTrace> {
    if !(mean_rate > 0.0) || !mean_rate.is_finite() {
        return Err(Error::invalid(format!(
            "mean channel rate must be positive, got {mean_rate}"
        )));
    }
    if !(rel_stddev >= 0.0) || !rel_stddev.is_finite() {
        return Err(Error::invalid(format!(
            "relative stddev must be >= 0, got {rel_stddev}"
        )));
    }
    if n_ttis == 0 {
        return Err(Error::invalid("n_ttis must be positive"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let stddev = mean_rate * rel_stddev;
    let rates = (0..n_ttis)
        .map(|_| {
            if stddev == 0.0 {
                mean_rate
            } else {
                let dist = rand_distr::Normal::new(mean_rate, stddev)
                    .expect("stddev checked finite and >= 0");
                rng.sample::<f64, _>(dist).max(0.0)
            }
        })
        .collect();
    ChannelTrace::new(rates, tti)
}

/// Parses a channel trace from CSV: optional `#tti_seconds=` directive, then
/// a `tti_index,prb_bps` header, then rows.
pub fn parse_channel(text: &str) -> Result<ChannelTrace> {
    const HEADER: &str = "tti_index,prb_bps";
    let mut tti = DEFAULT_TTI;
    let mut header_seen = false;
    let mut rates: Vec<f64> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.strip_prefix("tti_seconds=") {
                tti = v
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(lno, format!("bad tti_seconds directive: {e}")))?;
            }
            continue;
        }
        if !header_seen {
            if line.trim() != HEADER {
                return Err(Error::parse(
                    lno,
                    format!("expected header {HEADER:?}, got {line:?}"),
                ));
            }
            header_seen = true;
            continue;
        }
        let (idx, rate) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(lno, "expected 2 comma-separated fields"))?;
        let idx: u64 = idx
            .trim()
            .parse()
            .map_err(|e| Error::parse(lno, format!("bad tti_index field {idx:?}: {e}")))?;
        if idx != rates.len() as u64 {
            return Err(Error::parse(
                lno,
                format!("tti_index {idx} out of order (expected {})", rates.len()),
            ));
        }
        let rate: f64 = rate
            .trim()
            .parse()
            .map_err(|e| Error::parse(lno, format!("bad prb_bps field {rate:?}: {e}")))?;
        rates.push(rate);
    }
    if rates.is_empty() {
        return Err(Error::parse(0, "empty input: no TTI records"));
    }
    ChannelTrace::new(rates, tti)
}

/// Serializes a channel trace so `parse_channel(to_csv(ct)) == ct`.
pub fn to_csv(ct: &ChannelTrace) -> String {
    let mut out = String::new();
    out.push_str(&format!("#tti_seconds={}\n", ct.tti));
    out.push_str("tti_index,prb_bps\n");
    for (i, r) in ct.rates.iter().enumerate() {
        out.push_str(&format!("{i},{r}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_channel_known_policy_rates() {
        // 320 kbit/s per block, one block every 4 TTIs -> 80 kbit/s average;
        // 9 blocks per TTI -> 2.88 Mbit/s burst ceiling.
        let ct = ChannelTrace::new(vec![320_000.0; 300], DEFAULT_TTI).unwrap();
        let feed = aggregate_feedback(
            &ct,
            0.03,
            AvgPolicy {
                prbs_per_alloc: 1,
                alloc_every_n_ttis: 4,
            },
            9,
        )
        .unwrap();
        assert_eq!(feed.windows.len(), 10);
        for w in &feed.windows {
            assert!((w.r_c - 80_000.0).abs() < 1e-6);
            assert!((w.r_max - 2_880_000.0).abs() < 1e-3);
        }
    }

    #[test]
    fn partial_trailing_window_is_dropped() {
        let ct = ChannelTrace::new(vec![100.0; 35], DEFAULT_TTI).unwrap();
        let feed = aggregate_feedback(
            &ct,
            0.01,
            AvgPolicy {
                prbs_per_alloc: 1,
                alloc_every_n_ttis: 1,
            },
            2,
        )
        .unwrap();
        assert_eq!(feed.windows.len(), 3);
    }

    #[test]
    fn non_integer_window_is_rejected() {
        let ct = ChannelTrace::new(vec![100.0; 100], DEFAULT_TTI).unwrap();
        let err = aggregate_feedback(
            &ct,
            0.0305,
            AvgPolicy {
                prbs_per_alloc: 1,
                alloc_every_n_ttis: 4,
            },
            9,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn average_above_burst_ceiling_is_rejected() {
        let ct = ChannelTrace::new(vec![100.0; 100], DEFAULT_TTI).unwrap();
        let err = aggregate_feedback(
            &ct,
            0.01,
            AvgPolicy {
                prbs_per_alloc: 8,
                alloc_every_n_ttis: 2,
            },
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn steps_past_the_end_hold_the_last_window() {
        let ct = ChannelTrace::new(
            (0..20).map(|i| 100.0 + i as f64).collect(),
            DEFAULT_TTI,
        )
        .unwrap();
        let feed = aggregate_feedback(
            &ct,
            0.01,
            AvgPolicy {
                prbs_per_alloc: 1,
                alloc_every_n_ttis: 1,
            },
            1,
        )
        .unwrap();
        assert_eq!(feed.windows.len(), 2);
        assert_eq!(feed.window_at(1), feed.window_at(99));
    }

    #[test]
    fn frozen_feed_is_flat_at_the_mean() {
        let ct = ChannelTrace::new(vec![100.0, 300.0, 100.0, 300.0], DEFAULT_TTI).unwrap();
        let feed = aggregate_feedback(
            &ct,
            0.002,
            AvgPolicy {
                prbs_per_alloc: 1,
                alloc_every_n_ttis: 2,
            },
            4,
        )
        .unwrap();
        let frozen = feed.frozen();
        assert_eq!(frozen.windows.len(), 1);
        assert!((frozen.window_at(0).r_c - 100.0).abs() < 1e-9);
        assert!((frozen.window_at(0).r_max - 800.0).abs() < 1e-9);
    }

    #[test]
    fn synth_is_deterministic_and_nonnegative() {
        let a = synth_channel(320_000.0, 0.2, 500, DEFAULT_TTI, 9).unwrap();
        let b = synth_channel(320_000.0, 0.2, 500, DEFAULT_TTI, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.rates.iter().all(|r| *r >= 0.0));
        let c = synth_channel(320_000.0, 0.2, 500, DEFAULT_TTI, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_zero_stddev_is_constant() {
        let ct = synth_channel(250.0, 0.0, 10, DEFAULT_TTI, 1).unwrap();
        assert!(ct.rates.iter().all(|r| *r == 250.0));
    }

    #[test]
    fn csv_round_trip() {
        let ct = synth_channel(320_000.0, 0.35, 64, 0.002, 3).unwrap();
        let back = parse_channel(&to_csv(&ct)).unwrap();
        assert_eq!(back, ct);
    }

    #[test]
    fn parse_rejects_bad_header_and_order() {
        assert!(matches!(
            parse_channel("tti,rate\n0,100\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_channel("tti_index,prb_bps\n0,100\n2,100\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn prop_round_trip(
            rates in proptest::collection::vec(0.0f64..1e7, 1..100),
            tti in prop_oneof![Just(0.001), Just(0.002), Just(0.0005)],
        ) {
            let ct = ChannelTrace::new(rates, tti).unwrap();
            let back = parse_channel(&to_csv(&ct)).unwrap();
            prop_assert_eq!(back, ct);
        }

        #[test]
        fn prop_r_max_dominates_r_c(
            rates in proptest::collection::vec(0.0f64..1e7, 30..120),
            alloc_every in 1u32..6,
            max_prbs in 1u32..12,
        ) {
            let ct = ChannelTrace::new(rates, DEFAULT_TTI).unwrap();
            let feed = aggregate_feedback(
                &ct,
                0.03,
                AvgPolicy { prbs_per_alloc: 1, alloc_every_n_ttis: alloc_every },
                max_prbs,
            ).unwrap();
            for w in &feed.windows {
                // avg ratio <= 1 <= max_prbs, so r_c <= r_max window by window.
                prop_assert!(w.r_c <= w.r_max + 1e-9);
            }
        }
    }
}
