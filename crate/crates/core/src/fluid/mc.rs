//! Discrete-event simulation of the fluid buffer, used as an independent
//! check on the analytic solver.
//!
//! The on-source count is an exact continuous-time Markov chain; between
//! its jumps the buffer level moves piecewise-linearly, changing slope at
//! the thresholds and pinning at the edges (and at a threshold whenever the
//! drift points toward it from both sides). Every path functional is
//! integrated exactly over each linear segment, so the only error is
//! statistical, quantified by batch means.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp};

use super::FluidParams;
use crate::{Error, Result};

/// Minimum expected number of source transitions for a meaningful run.
const MIN_TRANSITIONS: f64 = 1e5;
/// Fraction of the horizon discarded as warmup.
const WARMUP_FRACTION: f64 = 0.1;
/// Number of batch-means windows over the measurement span.
const BATCHES: usize = 20;

/// One level probe: estimated stationary probability that the buffer sits
/// at or below `level`, with its batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McProbe {
    pub level: f64,
    pub fraction: f64,
    pub se: f64,
}

/// Simulation estimates with batch-means standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub throughput: f64,
    pub throughput_se: f64,
    pub loss_probability: f64,
    pub loss_probability_se: f64,
    /// One entry per requested probe level, in request order.
    pub below: Vec<McProbe>,
    pub p_low: f64,
    pub p_low_se: f64,
    pub p_mid: f64,
    pub p_mid_se: f64,
    pub p_high: f64,
    pub p_high_se: f64,
    /// Source transitions simulated after time zero.
    pub transitions: u64,
}

/// Horizon long enough for roughly `transitions` source jumps: the
/// stationary jump rate of the source chain is `n * 2 rho beta / (rho + beta)`.
pub fn horizon_for_transitions(params: &FluidParams, transitions: f64) -> f64 {
    let rate = params.n as f64 * 2.0 * params.rho * params.beta / (params.rho + params.beta);
    transitions / rate
}

/// Per-batch accumulator for time, arrived fluid, lost fluid, and time
/// spent at or below each probe level.
struct Acc {
    warmup: f64,
    batch_len: f64,
    probes: Vec<f64>,
    time: Vec<f64>,
    arrived: Vec<f64>,
    lost: Vec<f64>,
    below: Vec<Vec<f64>>,
}

/// Fraction of a linear sweep from `x0` to `x1` spent at or below `p`.
fn fraction_below(x0: f64, x1: f64, p: f64) -> f64 {
    if x0 == x1 {
        return if x0 <= p { 1.0 } else { 0.0 };
    }
    let u = ((p - x0) / (x1 - x0)).clamp(0.0, 1.0);
    if x1 > x0 {
        u
    } else {
        1.0 - u
    }
}

impl Acc {
    fn new(warmup: f64, batch_len: f64, probes: Vec<f64>) -> Acc {
        Acc {
            warmup,
            batch_len,
            probes,
            time: vec![0.0; BATCHES],
            arrived: vec![0.0; BATCHES],
            lost: vec![0.0; BATCHES],
            below: vec![vec![0.0; BATCHES]; 0],
        }
        .init_below()
    }

    fn init_below(mut self) -> Acc {
        self.below = vec![vec![0.0; BATCHES]; self.probes.len()];
        self
    }

    /// Adds one linear segment, clipping away warmup and splitting at batch
    /// boundaries so each slice lands in exactly one window.
    fn add(&mut self, t0: f64, t1: f64, x0: f64, x1: f64, input_rate: f64, loss_rate: f64) {
        if t1 <= self.warmup || t1 <= t0 {
            return;
        }
        let x_at = |t: f64| x0 + (x1 - x0) * ((t - t0) / (t1 - t0));
        let mut cur = t0.max(self.warmup);
        while cur < t1 {
            let b = (((cur - self.warmup) / self.batch_len) as usize).min(BATCHES - 1);
            let b_end = self.warmup + (b as f64 + 1.0) * self.batch_len;
            let end = if b == BATCHES - 1 { t1 } else { t1.min(b_end) };
            if end <= cur {
                break;
            }
            let dt = end - cur;
            let xa = x_at(cur);
            let xb = x_at(end);
            self.time[b] += dt;
            self.arrived[b] += input_rate * dt;
            self.lost[b] += loss_rate * dt;
            for (slot, &p) in self.probes.iter().enumerate() {
                self.below[slot][b] += fraction_below(xa, xb, p) * dt;
            }
            cur = end;
        }
    }
}

/// Level intervals with their drain rates, thresholds deduplicated.
fn gaps(params: &FluidParams) -> Vec<(f64, f64, f64)> {
    let rates = params.rates();
    let edges = [0.0, params.a1, params.a2, params.k];
    let mut out = Vec::new();
    for j in 0..3 {
        if edges[j + 1] > edges[j] {
            out.push((edges[j], edges[j + 1], rates[j]));
        }
    }
    out
}

/// Motion of the level at position `pos` for input rate `il`:
/// `(slope, target, loss_rate)`. A zero slope means the level is pinned;
/// pinning at the cap sheds the surplus as loss.
fn motion(gaps: &[(f64, f64, f64)], k: f64, il: f64, pos: f64) -> (f64, f64, f64) {
    if pos == 0.0 {
        let (_, hi, c) = gaps[0];
        return if il > c { (il - c, hi, 0.0) } else { (0.0, 0.0, 0.0) };
    }
    if pos == k {
        let (lo, _, c) = *gaps.last().expect("nonempty");
        return if il < c { (il - c, lo, 0.0) } else { (0.0, 0.0, il - c) };
    }
    for (g, &(lo, hi, c)) in gaps.iter().enumerate() {
        if pos == hi {
            // Interior threshold between gap g and g+1.
            let c_above = gaps[g + 1].2;
            if il > c_above {
                return (il - c_above, gaps[g + 1].1, 0.0);
            }
            if il < c {
                return (il - c, lo, 0.0);
            }
            return (0.0, 0.0, 0.0);
        }
        if pos > lo && pos < hi {
            let slope = il - c;
            return (slope, if slope > 0.0 { hi } else { lo }, 0.0);
        }
    }
    unreachable!("level {pos} outside [0, {k}]");
}

/// Advances the level from `t0` to `t1` in state with input rate `il`,
/// emitting exactly-integrated linear segments. Boundary hits snap the
/// position so edge and threshold comparisons stay exact.
fn advance_level(
    gaps: &[(f64, f64, f64)],
    k: f64,
    il: f64,
    acc: &mut Acc,
    pos: &mut f64,
    t0: f64,
    t1: f64,
) {
    let mut t = t0;
    let mut x = *pos;
    while t < t1 {
        let (slope, target, loss_rate) = motion(gaps, k, il, x);
        if slope == 0.0 {
            acc.add(t, t1, x, x, il, loss_rate);
            t = t1;
        } else {
            let dt_hit = (target - x) / slope;
            if t + dt_hit >= t1 {
                let mut x_end = x + slope * (t1 - t);
                x_end = if slope > 0.0 { x_end.min(target) } else { x_end.max(target) };
                acc.add(t, t1, x, x_end, il, 0.0);
                x = x_end;
                t = t1;
            } else {
                acc.add(t, t + dt_hit, x, target, il, 0.0);
                x = target;
                t += dt_hit;
            }
        }
    }
    *pos = x;
}

fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let b = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / b;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0);
    (mean, (var / b).sqrt())
}

/// Simulates the model for `horizon` time units and estimates throughput,
/// loss probability, the regime split, and `P(level <= p)` for each
/// requested probe. Rejects horizons too short for `MIN_TRANSITIONS`
/// expected source jumps. Deterministic per seed.
pub fn mc_oracle(
    params: &FluidParams,
    horizon: f64,
    seed: u64,
    probes: &[f64],
) -> Result<McEstimate> {
    params.validate()?;
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    let expected = params.n as f64 * 2.0 * params.rho * params.beta
        / (params.rho + params.beta)
        * horizon;
    if expected < MIN_TRANSITIONS {
        return Err(Error::invalid(format!(
            "horizon {horizon} yields about {expected:.0} source transitions; \
             need at least {MIN_TRANSITIONS:.0} for stable batch means"
        )));
    }

    // Regime accounting always probes the two thresholds; user probes are
    // reported separately in request order.
    let mut all_probes = probes.to_vec();
    all_probes.push(params.a1);
    all_probes.push(params.a2);
    let warmup = WARMUP_FRACTION * horizon;
    let batch_len = (horizon - warmup) / BATCHES as f64;
    let mut acc = Acc::new(warmup, batch_len, all_probes);

    let n = params.n;
    let gaps = gaps(params);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut state = ((n as f64 * params.p_on()).round() as usize).min(n);
    let mut x = 0.0f64;
    let mut t = 0.0f64;
    let mut transitions = 0u64;

    while t < horizon {
        let up = (n - state) as f64 * params.rho;
        let down = state as f64 * params.beta;
        let total = up + down;
        let dwell = Exp::new(total).expect("positive rate").sample(&mut rng);
        let t_end = (t + dwell).min(horizon);
        let il = state as f64 * params.lambda;
        advance_level(&gaps, params.k, il, &mut acc, &mut x, t, t_end);
        t = t_end;
        if t >= horizon {
            break;
        }
        if rng.gen::<f64>() * total < up {
            state += 1;
        } else {
            state -= 1;
        }
        transitions += 1;
    }

    let t_per_batch: Vec<f64> = (0..BATCHES)
        .map(|b| (acc.arrived[b] - acc.lost[b]) / acc.time[b])
        .collect();
    let pl_per_batch: Vec<f64> = (0..BATCHES)
        .map(|b| {
            if acc.arrived[b] > 0.0 {
                acc.lost[b] / acc.arrived[b]
            } else {
                0.0
            }
        })
        .collect();
    let (throughput, throughput_se) = mean_and_se(&t_per_batch);
    let (loss_probability, loss_probability_se) = mean_and_se(&pl_per_batch);

    let probe_fracs: Vec<Vec<f64>> = (0..acc.probes.len())
        .map(|slot| {
            (0..BATCHES)
                .map(|b| acc.below[slot][b] / acc.time[b])
                .collect()
        })
        .collect();
    let below: Vec<McProbe> = probes
        .iter()
        .enumerate()
        .map(|(slot, &level)| {
            let (fraction, se) = mean_and_se(&probe_fracs[slot]);
            McProbe { level, fraction, se }
        })
        .collect();
    let a1_fracs = &probe_fracs[probes.len()];
    let a2_fracs = &probe_fracs[probes.len() + 1];
    let mid_fracs: Vec<f64> = a1_fracs.iter().zip(a2_fracs).map(|(lo, hi)| hi - lo).collect();
    let high_fracs: Vec<f64> = a2_fracs.iter().map(|f| 1.0 - f).collect();
    let (p_low, p_low_se) = mean_and_se(a1_fracs);
    let (p_mid, p_mid_se) = mean_and_se(&mid_fracs);
    let (p_high, p_high_se) = mean_and_se(&high_fracs);

    Ok(McEstimate {
        throughput,
        throughput_se,
        loss_probability,
        loss_probability_se,
        below,
        p_low,
        p_low_se,
        p_mid: p_mid.max(0.0),
        p_mid_se,
        p_high: p_high.max(0.0),
        p_high_se,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{loss_probability, solve, throughput, FluidParams};
    use super::*;

    fn two_state_params() -> FluidParams {
        FluidParams::new(1, 1.0, 2.0, 3.0, 2.0, 0.0, 1.3, 2.6, 4.0).unwrap()
    }

    #[test]
    fn short_horizon_is_rejected() {
        let p = two_state_params();
        let err = mc_oracle(&p, 1.0, 7, &[]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");
    }

    #[test]
    fn horizon_budget_meets_the_transition_floor() {
        let p = two_state_params();
        let h = horizon_for_transitions(&p, 3e5);
        // Jump rate is 2 rho beta / (rho + beta) = 4/3 per unit time.
        assert!((h - 225_000.0).abs() < 1e-6);
        let est = mc_oracle(&p, h, 11, &[]).unwrap();
        // The realized count is Poisson around 3e5; a 5-sigma band is ~2.7e3.
        assert!(est.transitions > 295_000 && est.transitions < 305_000);
    }

    #[test]
    fn same_seed_reproduces_the_estimate() {
        let p = two_state_params();
        let a = mc_oracle(&p, 80_000.0, 42, &[1.0, 2.0]).unwrap();
        let b = mc_oracle(&p, 80_000.0, 42, &[1.0, 2.0]).unwrap();
        assert_eq!(a, b);
        let c = mc_oracle(&p, 80_000.0, 43, &[1.0, 2.0]).unwrap();
        assert!(a.throughput != c.throughput);
    }

    #[test]
    fn loss_is_exactly_zero_when_the_top_rate_clears_the_peak() {
        let p = FluidParams::new(2, 1.0, 3.0, 1.0, 2.3, 0.2, 1.0, 2.0, 4.0).unwrap();
        let est = mc_oracle(&p, horizon_for_transitions(&p, 2e5), 3, &[]).unwrap();
        assert_eq!(est.loss_probability, 0.0);
        assert_eq!(est.loss_probability_se, 0.0);
        // With no loss the carried rate must match the offered load within
        // statistical error.
        let gap = (est.throughput - p.offered_load()).abs();
        assert!(gap <= 4.0 * est.throughput_se, "gap {gap} se {}", est.throughput_se);
    }

    #[test]
    fn simulation_agrees_with_the_closed_form_solution() {
        let p = two_state_params();
        let sol = solve(&p).unwrap();
        let probes = [0.4, 2.0, 3.6];
        let est = mc_oracle(&p, horizon_for_transitions(&p, 3e5), 7, &probes).unwrap();

        let t_gap = (est.throughput - throughput(&sol)).abs();
        assert!(
            t_gap <= 3.0 * est.throughput_se,
            "throughput gap {t_gap:.3e} vs se {:.3e}",
            est.throughput_se
        );
        let pl_gap = (est.loss_probability - loss_probability(&sol)).abs();
        assert!(
            pl_gap <= 3.0 * est.loss_probability_se + 1e-12,
            "loss gap {pl_gap:.3e} vs se {:.3e}",
            est.loss_probability_se
        );
        for probe in &est.below {
            let want = sol.total_cdf(probe.level);
            let gap = (probe.fraction - want).abs();
            assert!(
                gap <= 3.0 * probe.se + 1e-12,
                "probe {}: gap {gap:.3e} vs se {:.3e}",
                probe.level,
                probe.se
            );
        }
        // Regime split is a partition of the measurement time.
        let total = est.p_low + est.p_mid + est.p_high;
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_fraction_below_handles_all_orientations() {
        assert_eq!(fraction_below(1.0, 3.0, 2.0), 0.5);
        assert_eq!(fraction_below(3.0, 1.0, 2.0), 0.5);
        assert_eq!(fraction_below(1.0, 3.0, 0.5), 0.0);
        assert_eq!(fraction_below(1.0, 3.0, 3.5), 1.0);
        assert_eq!(fraction_below(2.0, 2.0, 2.0), 1.0);
        assert_eq!(fraction_below(2.5, 2.5, 2.0), 0.0);
    }
}
