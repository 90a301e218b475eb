//! Eigen machinery for the fluid solver.
//!
//! The stationary CDF vector of each service region satisfies
//! `D F'(x) = M F(x)` with tridiagonal generator `M` and nonsingular
//! diagonal drift `D`, so the expansion basis comes from the pencil
//! `z D v = M v`. Eigenvalues are taken from a dense Schur sweep of
//! `D^{-1} M` (the birth-death structure keeps the spectrum real);
//! eigenvectors are then sharpened by tridiagonal inverse iteration with a
//! pencil Rayleigh update, which is both faster and more accurate than
//! extracting them from the dense decomposition.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Tridiagonal matrix in banded storage. `sub[i]` sits at `(i+1, i)`,
/// `diag[i]` at `(i, i)`, `sup[i]` at `(i, i+1)`.
#[derive(Debug, Clone)]
pub(crate) struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn size(&self) -> usize {
        self.diag.len()
    }

    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        let n = self.size();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.sub[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.sup[i] * v[i + 1];
            }
            out[i] = acc;
        }
        out
    }

    pub fn inf_norm(&self) -> f64 {
        let n = self.size();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i].abs();
                if i > 0 {
                    s += self.sub[i - 1].abs();
                }
                if i + 1 < n {
                    s += self.sup[i].abs();
                }
                s
            })
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i > 0 {
                m[(i, i - 1)] = self.sub[i - 1];
            }
            if i + 1 < n {
                m[(i, i + 1)] = self.sup[i];
            }
        }
        m
    }
}

/// One eigenpair of the pencil, with `v` scaled to sup-norm one and a
/// deterministic sign (largest-magnitude component positive).
#[derive(Debug, Clone)]
pub(crate) struct EigenPair {
    pub z: f64,
    pub v: Vec<f64>,
}

fn inf_norm_vec(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn normalize_sup(v: &mut [f64]) -> Result<()> {
    let m = inf_norm_vec(v);
    if !(m > 0.0) || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(
            "inverse iteration produced a zero or non-finite vector".into(),
        ));
    }
    for x in v.iter_mut() {
        *x /= m;
    }
    Ok(())
}

fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// `|| M v - z D v ||_inf`.
fn pencil_residual(m: &Tridiagonal, drift: &[f64], z: f64, v: &[f64]) -> f64 {
    let mv = m.mul(v);
    mv.iter()
        .zip(v)
        .zip(drift)
        .map(|((mi, vi), di)| (mi - z * di * vi).abs())
        .fold(0.0, f64::max)
}

/// LU factorization of a tridiagonal matrix with partial pivoting, the
/// row-swap variant that produces a second superdiagonal of fill-in. Pivots
/// smaller than `eps * ||T||_inf` are floored in magnitude, which is what
/// lets the factorization back a solve against a (near-)singular shift, as
/// inverse iteration requires.
struct TriLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swap: Vec<bool>,
}

impl TriLu {
    fn factor(sub: &[f64], diag: Vec<f64>, sup: &[f64]) -> TriLu {
        let n = diag.len();
        let mut dl = sub.to_vec();
        let mut d = diag;
        let mut du = sup.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];

        let t_norm = (0..n)
            .map(|i| {
                let mut s = d[i].abs();
                if i > 0 {
                    s += dl[i - 1].abs();
                }
                if i + 1 < n {
                    s += du[i].abs();
                }
                s
            })
            .fold(0.0, f64::max);
        let floor = f64::EPSILON * t_norm.max(f64::MIN_POSITIVE);
        let guard = |x: f64| {
            if x.abs() < floor {
                if x < 0.0 {
                    -floor
                } else {
                    floor
                }
            } else {
                x
            }
        };

        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                d[i] = guard(d[i]);
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                swap[i] = true;
                let fact = d[i] / dl[i];
                d[i] = guard(dl[i]);
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
            }
        }
        d[n - 1] = guard(d[n - 1]);
        TriLu { dl, d, du, du2, swap }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut x = b.to_vec();
        for i in 0..n - 1 {
            if self.swap[i] {
                let temp = x[i];
                x[i] = x[i + 1];
                x[i + 1] = temp - self.dl[i] * x[i];
            } else {
                x[i + 1] -= self.dl[i] * x[i];
            }
        }
        x[n - 1] /= self.d[n - 1];
        if n >= 2 {
            x[n - 2] = (x[n - 2] - self.du[n - 2] * x[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            x[i] = (x[i] - self.du[i] * x[i + 1] - self.du2[i] * x[i + 2]) / self.d[i];
        }
        x
    }
}

/// Sharpens one nonzero eigenvalue and computes its eigenvector via inverse
/// iteration on `(M - mu D) w = D v`, with up to three pencil Rayleigh
/// updates of the shift.
fn inverse_iterate(
    m: &Tridiagonal,
    drift: &[f64],
    z0: f64,
    gate: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = m.size();
    let target = 0.5 * gate;
    let mut mu = z0;
    // Deterministic, irregular start vector so it is not orthogonal to the
    // target direction for structured spectra.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i.wrapping_mul(2_654_435_761)) % 97) as f64 / 97.0)
        .collect();
    normalize_sup(&mut v)?;

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    'outer: for _ in 0..3 {
        let shifted: Vec<f64> = m
            .diag
            .iter()
            .zip(drift)
            .map(|(mi, di)| mi - mu * di)
            .collect();
        let lu = TriLu::factor(&m.sub, shifted, &m.sup);
        for _ in 0..4 {
            let rhs: Vec<f64> = v.iter().zip(drift).map(|(vi, di)| vi * di).collect();
            let mut w = lu.solve(&rhs);
            normalize_sup(&mut w)?;
            v = w;
            let res = pencil_residual(m, drift, mu, &v);
            if best.as_ref().map_or(true, |(r, ..)| res < *r) {
                best = Some((res, mu, v.clone()));
            }
            if res <= target {
                break 'outer;
            }
        }
        // Pencil Rayleigh quotient v'Mv / v'Dv.
        let mv = m.mul(&v);
        let num: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let den: f64 = v.iter().zip(drift).map(|(a, d)| a * a * d).sum();
        let scale: f64 = v.iter().map(|a| a * a).sum::<f64>()
            * drift.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
        if den.abs() > 1e-14 * scale.max(f64::MIN_POSITIVE) {
            mu = num / den;
        }
    }

    let (res, mu, mut v) = best.expect("at least one iteration ran");
    if !(res <= gate) {
        return Err(Error::Numeric(format!(
            "eigenvector residual {res:.3e} exceeds the gate {gate:.3e} at eigenvalue {mu}"
        )));
    }
    fix_sign(&mut v);
    Ok((mu, v))
}

/// All eigenpairs of `z D v = M v`, sorted by eigenvalue ascending.
///
/// `pmf` is the stationary vector of the chain: `M pmf = 0` identically, so
/// `z = 0` is always in the spectrum with `pmf` as its eigendirection, and
/// it is taken in that closed form rather than iterated. Exactly one zero
/// eigenvalue is required; a second (near-)zero or any collision between
/// eigenvalues means the exponential expansion cannot separate modes at
/// this parameter point and is reported as a degenerate model.
pub(crate) fn pencil_eigenpairs(
    m: &Tridiagonal,
    drift: &[f64],
    pmf: &[f64],
) -> Result<Vec<EigenPair>> {
    let n = m.size();
    let m_norm = m.inf_norm();

    // Dense D^{-1} M for the eigenvalue sweep.
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        b[(i, i)] = m.diag[i] / drift[i];
        if i > 0 {
            b[(i, i - 1)] = m.sub[i - 1] / drift[i];
        }
        if i + 1 < n {
            b[(i, i + 1)] = m.sup[i] / drift[i];
        }
    }
    let b_norm = (0..n)
        .map(|i| (0..n).map(|j| b[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let eig = b.complex_eigenvalues();

    let im_tol = 1e-8 * b_norm.max(1.0);
    let mut zs: Vec<f64> = Vec::with_capacity(n);
    for e in eig.iter() {
        if e.im.abs() > im_tol {
            return Err(Error::Numeric(format!(
                "eigenvalue {}{:+}i has a non-negligible imaginary part in a pencil that must be real",
                e.re, e.im
            )));
        }
        zs.push(e.re);
    }
    zs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));

    let zero_tol = 1e-10 * b_norm.max(1.0);
    let mut zero_count = 0;
    for z in zs.iter_mut() {
        if z.abs() <= zero_tol {
            *z = 0.0;
            zero_count += 1;
        }
    }
    if zero_count != 1 {
        return Err(Error::Degenerate(format!(
            "expected exactly one zero eigenvalue in the pencil, found {zero_count}; \
             the offered load sits at or numerically near a service rate"
        )));
    }
    let cluster_tol = 1e-8 * b_norm.max(1.0);
    for w in zs.windows(2) {
        if (w[1] - w[0]).abs() <= cluster_tol {
            return Err(Error::Degenerate(format!(
                "eigenvalues {} and {} collide; the exponential expansion is rank-deficient here",
                w[0], w[1]
            )));
        }
    }

    let gate = 1e-8 * m_norm;
    let mut pairs = Vec::with_capacity(n);
    for &z in &zs {
        if z == 0.0 {
            let mut v = pmf.to_vec();
            normalize_sup(&mut v)?;
            fix_sign(&mut v);
            let res = pencil_residual(m, drift, 0.0, &v);
            if !(res <= gate) {
                return Err(Error::Numeric(format!(
                    "stationary vector residual {res:.3e} exceeds the gate {gate:.3e}"
                )));
            }
            pairs.push(EigenPair { z: 0.0, v });
        } else {
            let (zr, v) = inverse_iterate(m, drift, z, gate)?;
            pairs.push(EigenPair { z: zr, v });
        }
    }
    pairs.sort_by(|a, b| a.z.partial_cmp(&b.z).expect("finite eigenvalues"));
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-state birth-death generator.
    fn m2(rho: f64, beta: f64) -> Tridiagonal {
        Tridiagonal {
            sub: vec![rho],
            diag: vec![-rho, -beta],
            sup: vec![beta],
        }
    }

    #[test]
    fn two_state_pencil_matches_hand_roots() {
        // det(zD - M) factors as -c(lam-c) z (z - z1) with
        // z1 = rho/c - beta/(lam-c); here rho=1, beta=2, lam=2, c=1 gives
        // z1 = -1.
        let (rho, beta, lam, c) = (1.0, 2.0, 2.0, 1.0);
        let m = m2(rho, beta);
        let drift = vec![-c, lam - c];
        let pmf = vec![beta / (rho + beta), rho / (rho + beta)];
        let pairs = pencil_eigenpairs(&m, &drift, &pmf).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!((pairs[0].z - (-1.0)).abs() < 1e-9, "z={}", pairs[0].z);
        assert_eq!(pairs[1].z, 0.0);
        // Zero eigenvector is the pmf direction, sup-normalized.
        let p = &pairs[1].v;
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
        // Nonzero eigenvector is proportional to (lam - c, c).
        let v = &pairs[0].v;
        assert!((v[0] / v[1] - (lam - c) / c).abs() < 1e-8, "v={v:?}");
    }

    #[test]
    fn residuals_meet_gate_on_larger_chain() {
        // 9-state chain with asymmetric rates and mixed drift signs.
        let n = 8usize;
        let (rho, beta, lam, c) = (1.3, 0.7, 1.0, 3.1);
        let mut sub = Vec::new();
        let mut diag = Vec::new();
        let mut sup = Vec::new();
        for i in 0..=n {
            diag.push(-(((n - i) as f64) * rho + i as f64 * beta));
            if i > 0 {
                sub.push((n - i + 1) as f64 * rho);
            }
            if i < n {
                sup.push((i + 1) as f64 * beta);
            }
        }
        let m = Tridiagonal { sub, diag, sup };
        let drift: Vec<f64> = (0..=n).map(|i| i as f64 * lam - c).collect();
        let p_on = rho / (rho + beta);
        // Mode-anchored binomial pmf.
        let mut pmf = vec![0.0; n + 1];
        pmf[0] = 1.0;
        for i in 0..n {
            pmf[i + 1] = pmf[i] * ((n - i) as f64 / (i + 1) as f64) * (p_on / (1.0 - p_on));
        }
        let s: f64 = pmf.iter().sum();
        for p in pmf.iter_mut() {
            *p /= s;
        }

        let pairs = pencil_eigenpairs(&m, &drift, &pmf).unwrap();
        assert_eq!(pairs.len(), n + 1);
        let gate = 1e-8 * m.inf_norm();
        for p in &pairs {
            let res = pencil_residual(&m, &drift, p.z, &p.v);
            assert!(res <= gate, "z={} residual={res:.3e} gate={gate:.3e}", p.z);
            assert!((inf_norm_vec(&p.v) - 1.0).abs() < 1e-12);
        }
        for w in pairs.windows(2) {
            assert!(w[0].z < w[1].z);
        }
    }

    #[test]
    fn tridiagonal_lu_solves_against_dense() {
        let m = Tridiagonal {
            sub: vec![2.0, -1.0, 0.5],
            diag: vec![3.0, -4.0, 2.5, 1.0],
            sup: vec![-1.5, 2.0, 0.25],
        };
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let lu = TriLu::factor(&m.sub, m.diag.clone(), &m.sup);
        let x = lu.solve(&b);
        let back = m.mul(&x);
        for (bi, yi) in b.iter().zip(&back) {
            assert!((bi - yi).abs() < 1e-10, "{back:?}");
        }
    }

    #[test]
    fn lu_pivoting_handles_dominant_subdiagonal() {
        // Tiny diagonal forces row interchanges everywhere.
        let m = Tridiagonal {
            sub: vec![10.0, 10.0, 10.0],
            diag: vec![1e-3, 1e-3, 1e-3, 1e-3],
            sup: vec![10.0, 10.0, 10.0],
        };
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let lu = TriLu::factor(&m.sub, m.diag.clone(), &m.sup);
        let x = lu.solve(&b);
        let back = m.mul(&x);
        for (bi, yi) in b.iter().zip(&back) {
            assert!((bi - yi).abs() < 1e-9, "{back:?}");
        }
    }
}
