//! Cross-validation of the analytic fluid solver against the event-driven
//! simulator on a fixed family of models spanning no-loss, moderate-loss,
//! and heavy-loss regimes with 2 to 8 sources.

use vsmooth::fluid::{
    horizon_for_transitions, loss_probability, mc_oracle, solve, solve_single, throughput,
    FluidParams,
};

/// Loss probabilities span 0 (exactly, instance 0) through roughly 0.26
/// (instance 4); every nonzero loss is large enough for the simulator to
/// resolve within the batch-means error at the chosen horizon.
fn suite() -> Vec<FluidParams> {
    [
        (2, 1.0, 3.0, 1.0, 2.3, 0.2, 1.0, 2.0, 4.0),
        (4, 1.5, 1.0, 1.0, 2.3, 0.3, 1.0, 2.0, 3.0),
        (4, 2.0, 1.0, 1.0, 2.2, 0.25, 1.0, 2.0, 3.0),
        (8, 1.0, 1.4, 1.0, 3.2, 0.2, 2.0, 4.0, 6.0),
        (8, 2.0, 1.0, 1.0, 3.3, 0.2, 2.0, 4.0, 6.0),
    ]
    .into_iter()
    .map(|(n, rho, beta, lambda, cer_t, alpha, a1, a2, k)| {
        FluidParams::new(n, rho, beta, lambda, cer_t, alpha, a1, a2, k).unwrap()
    })
    .collect()
}

#[test]
fn every_suite_instance_solves_within_the_residual_gate() {
    for (idx, p) in suite().iter().enumerate() {
        let sol = solve(p).unwrap_or_else(|e| panic!("instance {idx}: {e}"));
        assert!(
            sol.residual() <= 1e-10,
            "instance {idx}: residual {:.3e}",
            sol.residual()
        );
        let pl = loss_probability(&sol);
        assert!((0.0..=1.0).contains(&pl), "instance {idx}: loss {pl}");
    }
}

#[test]
fn simulator_confirms_the_solver_on_every_instance() {
    // Tail probabilities below the simulator's resolution cannot be
    // distinguished from an exact-zero observation: a stationary share of
    // 1e-6 amounts to well under a second of expected occupancy over the
    // whole run, so zero observed episodes (hence zero variance) is the
    // normal outcome. Occupancy comparisons therefore carry a small
    // absolute floor on top of the statistical band.
    const RESOLUTION_FLOOR: f64 = 2e-6;
    for (idx, p) in suite().iter().enumerate() {
        let sol = solve(p).unwrap();
        let horizon = horizon_for_transitions(p, 1e6);
        let probes = [0.5 * p.a1, 0.5 * (p.a2 + p.k)];
        let est = mc_oracle(p, horizon, 1000 + idx as u64, &probes).unwrap();

        let t_gap = (est.throughput - throughput(&sol)).abs();
        assert!(
            t_gap <= 3.0 * est.throughput_se,
            "instance {idx}: throughput gap {t_gap:.3e} vs se {:.3e}",
            est.throughput_se
        );
        let pl_gap = (est.loss_probability - loss_probability(&sol)).abs();
        assert!(
            pl_gap <= 3.0 * est.loss_probability_se + 1e-12,
            "instance {idx}: loss gap {pl_gap:.3e} vs se {:.3e}",
            est.loss_probability_se
        );
        for probe in &est.below {
            let want = sol.total_cdf(probe.level);
            let gap = (probe.fraction - want).abs();
            assert!(
                gap <= 3.0 * probe.se + RESOLUTION_FLOOR,
                "instance {idx} probe {}: gap {gap:.3e} vs se {:.3e}",
                probe.level,
                probe.se
            );
        }
        let reg = vsmooth::fluid::regime_probabilities(&sol);
        for (name, analytic, simulated, se) in [
            ("p_low", reg.p_low, est.p_low, est.p_low_se),
            ("p_mid", reg.p_mid, est.p_mid, est.p_mid_se),
            ("p_high", reg.p_high, est.p_high, est.p_high_se),
        ] {
            let gap = (analytic - simulated).abs();
            assert!(
                gap <= 3.0 * se + RESOLUTION_FLOOR,
                "instance {idx} {name}: {analytic} vs {simulated} (se {se:.3e})"
            );
        }
    }
}

#[test]
fn flat_rates_reduce_to_the_single_region_model() {
    // alpha = 0 collapses the three regions to one drain rate; the stitched
    // solver and the direct single-region solver must then agree.
    for (n, rho, beta, lambda, cer_t) in
        [(2usize, 1.0, 2.0, 1.0, 1.5), (4, 1.5, 1.0, 1.0, 2.7), (6, 1.0, 1.0, 1.0, 3.5)]
    {
        let p = FluidParams::new(n, rho, beta, lambda, cer_t, 0.0, 1.0, 2.0, 5.0).unwrap();
        let three = solve(&p).unwrap();
        let one = solve_single(&p).unwrap();
        let mut worst: f64 = 0.0;
        for g in 0..=500 {
            let x = p.k * g as f64 / 500.0;
            for i in 0..=p.n {
                worst = worst.max((three.cdf(i, x) - one.cdf(i, x)).abs());
            }
        }
        assert!(worst <= 1e-8, "n={n}: largest gap {worst:.3e}");
    }
}
