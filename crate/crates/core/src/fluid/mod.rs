//! Stationary analysis of a finite fluid buffer fed by homogeneous
//! exponential on-off sources and drained at a level-dependent rate.
//!
//! The buffer occupies `[0, k]`. While the level is below `a1` the server
//! drains at a reduced rate, between `a1` and `a2` at the nominal target
//! rate, and above `a2` at an accelerated rate; each of the three rates is a
//! fixed multiple of the target rate `cer_t` through the tuning knob
//! `alpha`. `n` sources switch on at rate `rho` and off at rate `beta`
//! independently, and each contributes `lambda` of fluid per unit time
//! while on.
//!
//! In every region the vector of joint stationary CDFs
//! `F_i(x) = P(level <= x, i sources on)` satisfies a linear ODE whose
//! basis comes from a generalized eigenproblem; [`solve`] stitches the
//! three regional expansions together at the thresholds and the edges,
//! yielding a closed-form distribution that [`throughput`],
//! [`loss_probability`], [`regime_probabilities`] and [`delay_probability`]
//! read off. [`mc_oracle`] provides an independent discrete-event check of
//! the same model.

mod mc;
mod spectral;

pub use mc::{horizon_for_transitions, mc_oracle, McEstimate, McProbe};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};
use spectral::{pencil_eigenpairs, Tridiagonal};

/// Largest supported source count. The boundary system is dense of order
/// `3 (n + 1)`; beyond this size the exponentials in the expansion routinely
/// overflow the dynamic range of `f64` anyway.
pub const MAX_SOURCES: usize = 64;

/// Model parameters for the fluid buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidParams {
    /// Number of independent on-off sources, `1..=MAX_SOURCES`.
    pub n: usize,
    /// Per-source off-to-on rate.
    pub rho: f64,
    /// Per-source on-to-off rate.
    pub beta: f64,
    /// Fluid rate contributed by one source while on.
    pub lambda: f64,
    /// Target drain rate; the middle region drains at exactly this rate.
    pub cer_t: f64,
    /// Rate spread: the lower region drains at `cer_t * (1 - alpha)`, the
    /// upper one at `cer_t * (1 + alpha)`.
    pub alpha: f64,
    /// Lower threshold, `0 < a1`.
    pub a1: f64,
    /// Upper threshold, `a1 <= a2 < k`.
    pub a2: f64,
    /// Buffer capacity.
    pub k: f64,
}

impl FluidParams {
    /// Validating constructor; see the field docs for the constraints.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        rho: f64,
        beta: f64,
        lambda: f64,
        cer_t: f64,
        alpha: f64,
        a1: f64,
        a2: f64,
        k: f64,
    ) -> Result<Self> {
        let p = FluidParams { n, rho, beta, lambda, cer_t, alpha, a1, a2, k };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("source count n must be at least 1"));
        }
        if self.n > MAX_SOURCES {
            return Err(Error::invalid(format!(
                "source count n = {} exceeds the supported maximum {MAX_SOURCES}",
                self.n
            )));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("cer_t", self.cer_t),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.a1.is_finite() || !self.a2.is_finite() || !self.k.is_finite() {
            return Err(Error::invalid("thresholds and capacity must be finite"));
        }
        if !(self.a1 > 0.0 && self.a1 <= self.a2 && self.a2 < self.k) {
            return Err(Error::invalid(format!(
                "thresholds must satisfy 0 < a1 <= a2 < k, got a1 = {}, a2 = {}, k = {}",
                self.a1, self.a2, self.k
            )));
        }
        // Every state must have nonzero net drift in every region; a state
        // whose input rate matches a service rate would pin probability mass
        // at interior levels in a way the exponential expansion cannot
        // carry.
        for c in self.rates() {
            drift(self.n, self.lambda, c)?;
        }
        Ok(())
    }

    /// Drain rates of the three regions, low to high.
    pub fn rates(&self) -> [f64; 3] {
        [
            self.cer_t * (1.0 - self.alpha),
            self.cer_t,
            self.cer_t * (1.0 + self.alpha),
        ]
    }

    /// Long-run probability that one source is on.
    pub fn p_on(&self) -> f64 {
        self.rho / (self.rho + self.beta)
    }

    /// Mean offered fluid rate `n * lambda * p_on`.
    pub fn offered_load(&self) -> f64 {
        self.n as f64 * self.lambda * self.p_on()
    }
}

/// Stationary distribution of the number of on sources: binomial with
/// success probability `rho / (rho + beta)`. Computed by a multiplicative
/// recurrence anchored at the mode so extreme rate ratios lose only the
/// tails to underflow, never the bulk.
pub fn on_pmf(n: usize, rho: f64, beta: f64) -> Vec<f64> {
    assert!(n >= 1, "need at least one source");
    assert!(rho > 0.0 && beta > 0.0, "switching rates must be positive");
    let p = rho / (rho + beta);
    let q = 1.0 - p;
    let mode = (((n as f64 + 1.0) * p).floor() as usize).min(n);
    let mut u = vec![0.0; n + 1];
    u[mode] = 1.0;
    for i in mode..n {
        u[i + 1] = u[i] * ((n - i) as f64 * p) / ((i + 1) as f64 * q);
    }
    for i in (0..mode).rev() {
        u[i] = u[i + 1] * ((i + 1) as f64 * q) / ((n - i) as f64 * p);
    }
    let s: f64 = u.iter().sum();
    u.iter().map(|x| x / s).collect()
}

pub(crate) fn generator_tri(n: usize, rho: f64, beta: f64) -> Tridiagonal {
    let mut sub = Vec::with_capacity(n);
    let mut diag = Vec::with_capacity(n + 1);
    let mut sup = Vec::with_capacity(n);
    for i in 0..=n {
        diag.push(-(((n - i) as f64) * rho + (i as f64) * beta));
        if i > 0 {
            sub.push(((n - i + 1) as f64) * rho);
        }
        if i < n {
            sup.push(((i + 1) as f64) * beta);
        }
    }
    Tridiagonal { sub, diag, sup }
}

/// Generator of the on-source birth-death chain, in the column convention
/// where `M[i][j]` is the flow rate from state `j` into state `i`; columns
/// sum to zero and `M * on_pmf = 0`.
pub fn generator(n: usize, rho: f64, beta: f64) -> DMatrix<f64> {
    assert!(n >= 1, "need at least one source");
    assert!(rho > 0.0 && beta > 0.0, "switching rates must be positive");
    generator_tri(n, rho, beta).to_dense()
}

/// Net drift `i * lambda - c` per state at service rate `c`. A zero (or
/// numerically vanishing) entry is rejected: the drift matrix must be
/// invertible for the expansion to exist.
pub fn drift(n: usize, lambda: f64, c: f64) -> Result<Vec<f64>> {
    let scale = (n as f64 * lambda).max(c.abs()).max(1.0);
    (0..=n)
        .map(|i| {
            let d = i as f64 * lambda - c;
            if d.abs() <= 1e-9 * scale {
                Err(Error::invalid(format!(
                    "state {i} has zero net drift: input rate {} coincides with service rate {c}",
                    i as f64 * lambda
                )))
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// One service region of the solved model, with its exponential expansion
/// `F_i(x) = sum_j a[j] * v[j][i] * exp(z[j] * (x - anchor[j]))`.
///
/// Each mode is anchored at the boundary where its exponential is largest
/// (growing modes at `x_hi`, decaying and constant modes at `x_lo`) so every
/// stored factor stays bounded by one inside the region.
#[derive(Debug, Clone)]
pub struct Region {
    pub x_lo: f64,
    pub x_hi: f64,
    /// Drain rate in this region.
    pub c: f64,
    /// Expansion eigenvalues, ascending.
    pub z: Vec<f64>,
    /// Eigenvectors, `v[j][i]` indexed by mode then state.
    pub v: Vec<Vec<f64>>,
    /// Expansion coefficients.
    pub a: Vec<f64>,
    /// Per-mode anchor point.
    pub anchor: Vec<f64>,
}

impl Region {
    /// Raw expansion value for state `i` at level `x` (no clamping).
    pub fn eval(&self, i: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.z.len() {
            acc += self.a[j] * self.v[j][i] * (self.z[j] * (x - self.anchor[j])).exp();
        }
        acc
    }
}

/// A solved stationary distribution.
#[derive(Debug, Clone)]
pub struct FluidSolution {
    params: FluidParams,
    regions: Vec<Region>,
    pmf: Vec<f64>,
    residual: f64,
}

impl FluidSolution {
    pub fn params(&self) -> &FluidParams {
        &self.params
    }

    /// Marginal distribution of the on-source count (also `F_i(k)` with atoms
    /// included).
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Relative sup-norm residual of the boundary system that produced the
    /// expansion coefficients.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    fn region_at(&self, x: f64) -> &Region {
        self.regions
            .iter()
            .find(|r| x < r.x_hi)
            .unwrap_or_else(|| self.regions.last().expect("at least one region"))
    }

    /// Unclamped expansion value; a threshold level belongs to the region
    /// above it, so any probability atom sitting on the threshold is
    /// included.
    fn eval_raw(&self, i: usize, x: f64) -> f64 {
        self.region_at(x).eval(i, x)
    }

    /// Joint stationary CDF `P(level <= x, i sources on)`, clamped into
    /// `[0, pmf(i)]`. Right-continuous: threshold atoms count at the
    /// threshold itself, and `x >= k` returns the full marginal mass.
    pub fn cdf(&self, i: usize, x: f64) -> f64 {
        assert!(i < self.pmf.len(), "state index {i} out of range");
        if x < 0.0 {
            return 0.0;
        }
        if x >= self.params.k {
            return self.pmf[i];
        }
        self.eval_raw(i, x).clamp(0.0, self.pmf[i])
    }

    /// Marginal buffer-level CDF `P(level <= x)`.
    pub fn total_cdf(&self, x: f64) -> f64 {
        (0..self.pmf.len()).map(|i| self.cdf(i, x)).sum()
    }

    /// Probability mass pinned at the capacity in state `i`.
    pub fn cap_atom(&self, i: usize) -> f64 {
        let last = self.regions.last().expect("at least one region");
        (self.pmf[i] - last.eval(i, self.params.k)).max(0.0)
    }
}

struct RegionSpec {
    x_lo: f64,
    x_hi: f64,
    c: f64,
}

/// The expansion degenerates when the mean offered load coincides with a
/// service rate: the decaying and constant modes collide.
fn criticality_guard(params: &FluidParams, rates: &[f64]) -> Result<()> {
    let mean = params.offered_load();
    for &c in rates {
        if (mean - c).abs() < 1e-6 * mean.abs().max(c.abs()).max(1.0) {
            return Err(Error::Degenerate(format!(
                "offered load {mean} sits at or numerically near the service rate {c}; \
                 the stationary expansion is critical there"
            )));
        }
    }
    Ok(())
}

/// Solves the three-region model.
///
/// Fails with a degenerate-model error when the load is critical, when the
/// expansion spectrum collapses, or when the boundary system is singular;
/// fails with a numeric error when a residual or sanity gate is exceeded.
pub fn solve(params: &FluidParams) -> Result<FluidSolution> {
    params.validate()?;
    let rates = params.rates();
    criticality_guard(params, &rates)?;
    let specs = [
        RegionSpec { x_lo: 0.0, x_hi: params.a1, c: rates[0] },
        RegionSpec { x_lo: params.a1, x_hi: params.a2, c: rates[1] },
        RegionSpec { x_lo: params.a2, x_hi: params.k, c: rates[2] },
    ];
    assemble_and_solve(params, &specs)
}

/// Solves the single-region variant: one drain rate `cer_t` over the whole
/// buffer `[0, k]`, ignoring the thresholds. With `alpha = 0` this is the
/// same model as [`solve`] and the two must agree.
pub fn solve_single(params: &FluidParams) -> Result<FluidSolution> {
    params.validate()?;
    criticality_guard(params, &[params.cer_t])?;
    let specs = [RegionSpec { x_lo: 0.0, x_hi: params.k, c: params.cer_t }];
    assemble_and_solve(params, &specs)
}

fn inf_norm_mat(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn inf_norm_dvec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn assemble_and_solve(params: &FluidParams, specs: &[RegionSpec]) -> Result<FluidSolution> {
    let n = params.n;
    let size = n + 1;
    let lam = params.lambda;
    let pmf = on_pmf(n, params.rho, params.beta);
    let m_tri = generator_tri(n, params.rho, params.beta);

    let mut regions: Vec<Region> = Vec::with_capacity(specs.len());
    for s in specs {
        let d = drift(n, lam, s.c)?;
        let pairs = pencil_eigenpairs(&m_tri, &d, &pmf)?;
        let z: Vec<f64> = pairs.iter().map(|p| p.z).collect();
        let v: Vec<Vec<f64>> = pairs.into_iter().map(|p| p.v).collect();
        let anchor: Vec<f64> = z
            .iter()
            .map(|&zj| if zj > 0.0 { s.x_hi } else { s.x_lo })
            .collect();
        regions.push(Region {
            x_lo: s.x_lo,
            x_hi: s.x_hi,
            c: s.c,
            z,
            v,
            a: vec![0.0; size],
            anchor,
        });
    }

    // Boundary conditions, one row per constraint; unknowns are the
    // expansion coefficients laid out region-major.
    let total = specs.len() * size;
    let basis_row = |r: usize, i: usize, x: f64| -> Vec<f64> {
        let mut row = vec![0.0; total];
        let reg = &regions[r];
        for j in 0..size {
            row[r * size + j] = reg.v[j][i] * ((reg.z[j] * (x - reg.anchor[j])).exp());
        }
        row
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut rhs: Vec<f64> = Vec::with_capacity(total);

    // The buffer cannot sit at the bottom while draining slower than it
    // fills: F_i(0) = 0 for states that drift up in the first region.
    for i in 0..size {
        if (i as f64) * lam > specs[0].c {
            rows.push(basis_row(0, i, specs[0].x_lo));
            rhs.push(0.0);
        }
    }
    // The CDF is continuous across an interior threshold except for states
    // that drift up below it and down above it; those stick to the
    // threshold and carry an atom, so their continuity row is dropped.
    for b in 0..specs.len() - 1 {
        let x = specs[b].x_hi;
        for i in 0..size {
            let il = (i as f64) * lam;
            if specs[b].c < il && il < specs[b + 1].c {
                continue;
            }
            let mut row = basis_row(b, i, x);
            let upper = basis_row(b + 1, i, x);
            for (rv, uv) in row.iter_mut().zip(&upper) {
                *rv -= uv;
            }
            rows.push(row);
            rhs.push(0.0);
        }
    }
    // The buffer cannot sit at the cap while draining faster than it fills:
    // F_i(k) reaches the full marginal mass for states that drift down in
    // the last region.
    let last = specs.len() - 1;
    for i in 0..size {
        if (i as f64) * lam < specs[last].c {
            rows.push(basis_row(last, i, specs[last].x_hi));
            rhs.push(pmf[i]);
        }
    }

    // Up-drift entry rows plus down-drift cap rows plus non-sticky
    // continuity rows always close the count; a mismatch means the drift
    // pattern violates that invariant.
    if rows.len() != total {
        return Err(Error::Degenerate(format!(
            "boundary system has {} rows for {total} unknowns; the drift pattern does not close it",
            rows.len()
        )));
    }

    let a_mat = DMatrix::from_fn(total, total, |r, c| rows[r][c]);
    let b_vec = DVector::from_fn(total, |r, _| rhs[r]);
    let lu = a_mat.clone().full_piv_lu();
    let mut x = lu.solve(&b_vec).ok_or_else(|| {
        Error::Degenerate(
            "singular boundary system; no unique piecewise expansion at these parameters".into(),
        )
    })?;
    // One step of iterative refinement, then a hard relative-residual gate.
    let r1 = &a_mat * &x - &b_vec;
    if let Some(dx) = lu.solve(&r1) {
        x -= dx;
    }
    let r2 = &a_mat * &x - &b_vec;
    let denom = inf_norm_mat(&a_mat) * inf_norm_dvec(&x) + inf_norm_dvec(&b_vec);
    let rel = inf_norm_dvec(&r2) / denom.max(f64::MIN_POSITIVE);
    if !(rel <= 1e-10) || !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "boundary system residual {rel:.3e} exceeds the 1e-10 gate"
        )));
    }

    for (r, reg) in regions.iter_mut().enumerate() {
        for j in 0..size {
            reg.a[j] = x[r * size + j];
        }
    }

    let sol = FluidSolution { params: params.clone(), regions, pmf, residual: rel };
    validate_solution(&sol)?;
    Ok(sol)
}

/// Post-solve sanity gates: atoms nonnegative, every raw component inside
/// `[0, pmf(i)]` and nondecreasing on a sampled grid, and unit total mass
/// once the cap atoms are counted.
fn validate_solution(sol: &FluidSolution) -> Result<()> {
    let states = sol.pmf.len();
    let k = sol.params.k;
    let last = sol.regions.last().expect("at least one region");

    for b in 0..sol.regions.len() - 1 {
        let x = sol.regions[b].x_hi;
        for i in 0..states {
            let atom = sol.regions[b + 1].eval(i, x) - sol.regions[b].eval(i, x);
            if !(atom >= -1e-9) {
                return Err(Error::Numeric(format!(
                    "negative probability atom {atom:.3e} for state {i} at level {x}"
                )));
            }
        }
    }
    for i in 0..states {
        let atom = sol.pmf[i] - last.eval(i, k);
        if !(atom >= -1e-9) {
            return Err(Error::Numeric(format!(
                "negative probability atom {atom:.3e} for state {i} at the cap"
            )));
        }
    }

    let grid = 1000;
    let mut prev = vec![0.0f64; states];
    for g in 0..grid {
        let x = k * g as f64 / (grid - 1) as f64;
        for i in 0..states {
            let f = sol.eval_raw(i, x);
            if !(f >= -1e-9) || !(f <= sol.pmf[i] + 1e-9) {
                return Err(Error::Numeric(format!(
                    "distribution component {i} leaves [0, {}] at level {x}: {f}",
                    sol.pmf[i]
                )));
            }
            if g > 0 && !(f >= prev[i] - 1e-9) {
                return Err(Error::Numeric(format!(
                    "distribution component {i} decreases near level {x}"
                )));
            }
            prev[i] = f;
        }
    }

    let lam = sol.params.lambda;
    let mut mass = 0.0;
    for i in 0..states {
        if (i as f64) * lam > last.c {
            mass += sol.pmf[i];
        } else {
            mass += last.eval(i, k);
        }
    }
    if !((mass - 1.0).abs() <= 1e-6) {
        return Err(Error::Numeric(format!(
            "total probability at the cap is {mass}, expected 1"
        )));
    }
    Ok(())
}

/// Long-run carried fluid rate: the offered load minus the overflow rate,
/// which accrues only from up-drift states pinned at the cap.
pub fn throughput(sol: &FluidSolution) -> f64 {
    let p = sol.params();
    let offered = p.offered_load();
    let direct: f64 = sol
        .pmf()
        .iter()
        .enumerate()
        .map(|(i, q)| (i as f64) * p.lambda * q)
        .sum();
    debug_assert!(
        (direct - offered).abs() <= 1e-9 * offered.max(1.0),
        "pmf mean {direct} disagrees with closed-form offered load {offered}"
    );
    let c_top = sol.regions().last().expect("at least one region").c;
    let mut loss = 0.0;
    for i in 0..=p.n {
        let il = (i as f64) * p.lambda;
        if il > c_top {
            loss += (il - c_top) * sol.cap_atom(i);
        }
    }
    offered - loss
}

/// Fraction of offered fluid lost to buffer overflow, in `[0, 1]`.
pub fn loss_probability(sol: &FluidSolution) -> f64 {
    let pl = 1.0 - throughput(sol) / sol.params().offered_load();
    pl.clamp(0.0, 1.0)
}

/// Stationary occupancy split across the three drain regions. A threshold
/// atom counts toward the region below it (it is mass at, not above, the
/// threshold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeSplit {
    pub p_low: f64,
    pub p_mid: f64,
    pub p_high: f64,
}

pub fn regime_probabilities(sol: &FluidSolution) -> RegimeSplit {
    let p = sol.params();
    let low = sol.total_cdf(p.a1);
    let at_a2 = sol.total_cdf(p.a2);
    RegimeSplit {
        p_low: low,
        p_mid: (at_a2 - low).max(0.0),
        p_high: (1.0 - at_a2).max(0.0),
    }
}

/// Heuristic probability that a fluid particle arrives while the level is
/// above threshold `m` (1 for `a1`, 2 for `a2`): the stationary tail mass
/// rescaled by the ratio of the drain rate above the threshold to the
/// carried throughput. The reading is approximate and can exceed one under
/// heavy load; the returned flag reports whether the value was clamped
/// into `[0, 1]`.
pub fn delay_probability(sol: &FluidSolution, threshold: usize) -> Result<(f64, bool)> {
    let p = sol.params();
    let (level, c_above) = match threshold {
        1 => (p.a1, p.rates()[1]),
        2 => (p.a2, p.rates()[2]),
        _ => {
            return Err(Error::invalid(format!(
                "threshold index must be 1 or 2, got {threshold}"
            )))
        }
    };
    let raw = (1.0 - sol.total_cdf(level)) * c_above / throughput(sol);
    let clamped = !(0.0..=1.0).contains(&raw);
    Ok((raw.clamp(0.0, 1.0), clamped))
}

/// Parses a flat `key=value` parameter file. Keys: `n`, `rho`, `beta`,
/// `lambda`, `cer_t`, `alpha`, `a1`, `a2`, `k`; `#` starts a comment; every
/// key is required and may appear once.
pub fn parse_params(text: &str) -> Result<FluidParams> {
    const FLOAT_KEYS: [&str; 8] = ["rho", "beta", "lambda", "cer_t", "alpha", "a1", "a2", "k"];
    let mut floats: [Option<f64>; 8] = [None; 8];
    let mut n_val: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let ln = idx + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(ln, "expected key=value"))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "n" {
            if n_val.is_some() {
                return Err(Error::parse(ln, "duplicate key 'n'"));
            }
            n_val = Some(value.parse().map_err(|_| {
                Error::parse(ln, format!("'{value}' is not a whole number"))
            })?);
        } else if let Some(slot) = FLOAT_KEYS.iter().position(|k| *k == key) {
            if floats[slot].is_some() {
                return Err(Error::parse(ln, format!("duplicate key '{key}'")));
            }
            let v: f64 = value
                .parse()
                .map_err(|_| Error::parse(ln, format!("'{value}' is not a number")))?;
            floats[slot] = Some(v);
        } else {
            return Err(Error::parse(ln, format!("unknown key '{key}'")));
        }
    }
    let n = n_val.ok_or_else(|| Error::invalid("missing key 'n'"))?;
    let get = |name: &str| {
        let slot = FLOAT_KEYS.iter().position(|k| *k == name).expect("known key");
        floats[slot].ok_or_else(|| Error::invalid(format!("missing key '{name}'")))
    };
    FluidParams::new(
        n,
        get("rho")?,
        get("beta")?,
        get("lambda")?,
        get("cer_t")?,
        get("alpha")?,
        get("a1")?,
        get("a2")?,
        get("k")?,
    )
}

/// Renders the per-state CDFs on a uniform grid of `points >= 2` levels
/// from 0 to the capacity, as CSV with header `x,F_0,...,F_n`.
pub fn to_cdf_csv(sol: &FluidSolution, points: usize) -> String {
    assert!(points >= 2, "need at least the two endpoints");
    let states = sol.pmf().len();
    let mut out = String::from("x");
    for i in 0..states {
        out.push_str(&format!(",F_{i}"));
    }
    out.push('\n');
    let k = sol.params().k;
    for g in 0..points {
        let x = k * g as f64 / (points - 1) as f64;
        out.push_str(&format!("{x}"));
        for i in 0..states {
            out.push_str(&format!(",{}", sol.cdf(i, x)));
        }
        out.push('\n');
    }
    out
}

/// Key-value summary of the solved model's headline quantities.
pub fn summary_text(sol: &FluidSolution) -> String {
    let p = sol.params();
    let t = throughput(sol);
    let reg = regime_probabilities(sol);
    let (d1, d1c) = delay_probability(sol, 1).expect("threshold 1 is valid");
    let (d2, d2c) = delay_probability(sol, 2).expect("threshold 2 is valid");
    format!(
        "n={}\noffered_load={}\nthroughput={}\nloss_probability={}\n\
         p_low={}\np_mid={}\np_high={}\n\
         delay_above_a1={}\ndelay_above_a1_clamped={}\n\
         delay_above_a2={}\ndelay_above_a2_clamped={}\n\
         boundary_residual={:e}\n",
        p.n,
        p.offered_load(),
        t,
        loss_probability(sol),
        reg.p_low,
        reg.p_mid,
        reg.p_high,
        d1,
        d1c,
        d2,
        d2c,
        sol.residual()
    )
}
