//! Accumulation and convergence bounds, including the negative-order
//! polylogarithm they depend on.
//!
//! `Li_{-v}(z) = sum_{k>=1} k^v z^k` is evaluated in closed rational form
//! `N_v(z) / (1-z)^{v+1}`, where the numerator polynomials follow the
//! recurrence induced by applying `z d/dz` (each application raises the
//! order by one, starting from the geometric series `z/(1-z)`).
//!
//! The rate bound combines two terms: a descent term that decays as
//! `1/sqrt(KT)` and is inflated by `1/((1-P)(1-3P))`, and a drift term
//! proportional to `(1-P)/P * psi(P) * (sigma^2 + 2 kappa^2)` with
//! `psi(P) = Li_{-2}(P) + 3/(T_s2+1) (Li_{-4}(P) - Li_{-2}(P))` and
//! `T_s2 = T (1-P)(1-3P)`. The `(1-P)/P * psi(P)` product is evaluated with
//! the leading `z` cancelled algebraically, so the drift term is exact and
//! finite down to `P = 0`. Values of `P >= 1/3` flip the sign of `1 - 3P`
//! and leave the bound's domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::TrainingTrace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvergenceError {
    #[error("polylogarithm argument {z} outside (0, 1)")]
    DomainError { z: f64 },
    #[error("outage probability {p_o} is at or beyond 1/3; the bound does not apply")]
    DomainWarning { p_o: f64 },
    #[error("step too large: 2 eta^2 G^2 R^2 |a|_1^2 = {value} >= 1")]
    StepTooLarge { value: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

// ---------------------------------------------------------------------------
// Polylogarithm
// ---------------------------------------------------------------------------

/// Numerator coefficients of `Li_{-v}(z) = N_v(z) / (1-z)^{v+1}`:
/// `N_0 = z`, and `N_{v+1} = z [ N_v'(z) (1-z) + (v+1) N_v(z) ]`.
fn polylog_numerator(v: u32) -> Vec<f64> {
    let mut coeffs = vec![0.0, 1.0]; // z
    for order in 0..v {
        let deriv: Vec<f64> = coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| i as f64 * c)
            .collect();
        // deriv * (1 - z) + (order + 1) * coeffs, then shift by one power.
        let mut next = vec![0.0; coeffs.len() + 2];
        for (i, &d) in deriv.iter().enumerate() {
            next[i + 1] += d;
            next[i + 2] -= d;
        }
        for (i, &c) in coeffs.iter().enumerate() {
            next[i + 1] += (order + 1) as f64 * c;
        }
        while next.last() == Some(&0.0) {
            next.pop();
        }
        coeffs = next;
    }
    coeffs
}

fn eval_poly(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

/// `Li_{-v}(z)` for nonnegative integer order and `0 < z < 1`, in closed
/// rational form.
pub fn polylog_neg(v: u32, z: f64) -> Result<f64, ConvergenceError> {
    if !(0.0 < z && z < 1.0) {
        return Err(ConvergenceError::DomainError { z });
    }
    let num = eval_poly(&polylog_numerator(v), z);
    Ok(num / (1.0 - z).powi(v as i32 + 1))
}

// ---------------------------------------------------------------------------
// psi and the rate bound
// ---------------------------------------------------------------------------

/// `T_s2 = T (1 - P)(1 - 3P)`.
pub fn t_s2(p_o: f64, t: u64) -> f64 {
    t as f64 * (1.0 - p_o) * (1.0 - 3.0 * p_o)
}

/// `psi(P) = Li_{-2}(P) + 3/(T_s2 + 1) (Li_{-4}(P) - Li_{-2}(P))`.
/// Requires `0 < P < 1/3`.
pub fn psi(p_o: f64, t: u64) -> Result<f64, ConvergenceError> {
    if p_o >= 1.0 / 3.0 {
        return Err(ConvergenceError::DomainWarning { p_o });
    }
    let li2 = polylog_neg(2, p_o)?;
    let li4 = polylog_neg(4, p_o)?;
    Ok(li2 + 3.0 / (t_s2(p_o, t) + 1.0) * (li4 - li2))
}

/// `(1 - P)/P * psi(P)` with the `1/P` pole cancelled against the
/// polylogarithms' leading zero:
/// `(1-P)/P Li_{-2}(P) = (1+P)/(1-P)^2` and
/// `(1-P)/P Li_{-4}(P) = (1 + 11P + 11P^2 + P^3)/(1-P)^4`.
/// Defined on `0 <= P < 1/3`, with value 1 at `P = 0`.
pub fn psi_ratio(p_o: f64, t: u64) -> Result<f64, ConvergenceError> {
    if !(0.0..1.0 / 3.0).contains(&p_o) {
        return Err(ConvergenceError::DomainWarning { p_o });
    }
    let z = p_o;
    let one_minus = 1.0 - z;
    let r2 = (1.0 + z) / (one_minus * one_minus);
    let r4 = (1.0 + 11.0 * z + 11.0 * z * z + z * z * z) / one_minus.powi(4);
    Ok(r2 + 3.0 / (t_s2(z, t) + 1.0) * (r4 - r2))
}

/// Inputs for the rate bound. `m_clients` plays the role of both the client
/// count under the square root and the `M` in the step-size rule
/// `eta = (1/G) sqrt(M/T)` (the two symbols are used interchangeably).
/// `beta2` does not enter the stated bound; it is kept because the
/// underlying dissimilarity assumption also constrains how large `T` must
/// be for the bound to apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    pub t_rounds: u64,
    pub k_clients: usize,
    pub g_smooth: f64,
    pub a: Vec<f64>,
    pub sigma2: f64,
    pub kappa2: f64,
    pub beta2: f64,
    pub p_outage: f64,
    /// Initial optimality gap of the global objective.
    pub l0_gap: f64,
    pub eta: f64,
}

impl ConvergenceParams {
    pub fn a_l1(&self) -> f64 {
        self.a.iter().map(|v| v.abs()).sum()
    }

    /// The step size the bound assumes.
    pub fn nominal_eta(&self) -> f64 {
        (self.k_clients as f64 / self.t_rounds as f64).sqrt() / self.g_smooth
    }
}

/// Upper bound on the averaged squared global gradient norm over the
/// successful updates (holds with probability 99.73% per run).
pub fn bound_rhs(p: &ConvergenceParams) -> Result<f64, ConvergenceError> {
    if p.t_rounds == 0 || p.k_clients == 0 {
        return Err(ConvergenceError::InvalidParams(
            "need positive T and K".into(),
        ));
    }
    let a_l1 = p.a_l1();
    if a_l1 <= 0.0 {
        return Err(ConvergenceError::InvalidParams(
            "solver weights must have positive l1 norm".into(),
        ));
    }
    if !(0.0..1.0 / 3.0).contains(&p.p_outage) {
        return Err(ConvergenceError::DomainWarning { p_o: p.p_outage });
    }
    let kt = (p.k_clients as f64 * p.t_rounds as f64).sqrt();
    let descent = 2.0 * p.g_smooth * p.l0_gap
        / (a_l1 * (1.0 - p.p_outage) * (1.0 - 3.0 * p.p_outage) * kt);
    let drift = 2.0 * (p.k_clients as f64 / p.t_rounds as f64).sqrt()
        * a_l1
        * psi_ratio(p.p_outage, p.t_rounds)?
        * (p.sigma2 + 2.0 * p.kappa2);
    Ok(descent + drift)
}

/// Bound on the accumulated local variance after `r_t` failed-round blocks:
/// `2 eta^2 R^3 |a|_1^3 / (1 - 2 eta^2 G^2 R^2 |a|_1^2) * grad_norm2`.
pub fn accumulation_variance_bound(
    r_t: u32,
    eta: f64,
    g_smooth: f64,
    a: &[f64],
    grad_norm2: f64,
) -> Result<f64, ConvergenceError> {
    let a_l1: f64 = a.iter().map(|v| v.abs()).sum();
    let r = r_t as f64;
    let contraction = 2.0 * eta * eta * g_smooth * g_smooth * r * r * a_l1 * a_l1;
    if contraction >= 1.0 {
        return Err(ConvergenceError::StepTooLarge { value: contraction });
    }
    Ok(2.0 * eta * eta * r.powi(3) * a_l1.powi(3) / (1.0 - contraction) * grad_norm2)
}

// ---------------------------------------------------------------------------
// Empirical comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundComparison {
    /// `(1/T_c) sum over successful rounds of |grad L(theta before)|^2`.
    pub empirical: f64,
    pub bound: f64,
    pub violated: bool,
    pub t_c: usize,
    pub rounds_executed: u64,
}

/// Compare a finished run against the rate bound. The trace's per-round
/// gradient norms are taken at the model entering each round, so the rows
/// of successful rounds average to exactly the bound's left-hand side.
pub fn empirical_vs_bound(
    trace: &TrainingTrace,
    params: &ConvergenceParams,
) -> Result<BoundComparison, ConvergenceError> {
    let bound = bound_rhs(params)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for row in &trace.rows {
        if row.success {
            sum += row.grad_norm * row.grad_norm;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ConvergenceError::InvalidParams(
            "trace contains no successful rounds".into(),
        ));
    }
    let empirical = sum / n as f64;
    Ok(BoundComparison {
        empirical,
        bound,
        violated: empirical > bound,
        t_c: n,
        rounds_executed: trace.rounds_executed,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    /// Series oracle: partial sums of `k^v z^k` to convergence.
    fn polylog_series(v: u32, z: f64) -> f64 {
        let mut sum = 0.0;
        let mut term;
        for k in 1..10_000u64 {
            term = (k as f64).powi(v as i32) * z.powi(k as i32);
            sum += term;
            if term < 1e-16 * sum.max(1.0) {
                break;
            }
        }
        sum
    }

    #[test]
    fn geometric_case() {
        // Li_0(0.5) = 0.5 / 0.5 = 1.
        assert!((polylog_neg(0, 0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reference_values_match_series() {
        let li2 = polylog_neg(2, 0.5).unwrap();
        assert!((li2 - 6.0).abs() < 6.0 * 1e-12, "{li2}");
        let li4 = polylog_neg(4, 0.5).unwrap();
        assert!((li4 - 150.0).abs() < 150.0 * 1e-12, "{li4}");
        for v in [0u32, 1, 2, 3, 4, 5] {
            for z in [0.05, 0.1, 0.2, 0.3, 0.7] {
                let closed = polylog_neg(v, z).unwrap();
                let series = polylog_series(v, z);
                assert!(
                    (closed - series).abs() <= 1e-10 * series.abs(),
                    "v={v} z={z}: {closed} vs {series}"
                );
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            polylog_neg(2, 0.0),
            Err(ConvergenceError::DomainError { .. })
        ));
        assert!(matches!(
            polylog_neg(2, 1.0),
            Err(ConvergenceError::DomainError { .. })
        ));
        assert!(matches!(
            psi(0.4, 100),
            Err(ConvergenceError::DomainWarning { .. })
        ));
    }

    #[test]
    fn psi_small_argument_vanishes() {
        // psi -> 0 as P -> 0+ (both polylogarithms vanish linearly).
        let v = psi(1e-9, 10_000).unwrap();
        assert!(v.abs() < 1e-8, "{v}");
    }

    #[test]
    fn psi_reference_composition() {
        let (p, t) = (0.1, 10_000u64);
        let li2 = polylog_series(2, p);
        let li4 = polylog_series(4, p);
        let ts2 = t as f64 * 0.9 * 0.7;
        let expect = li2 + 3.0 / (ts2 + 1.0) * (li4 - li2);
        let got = psi(p, t).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn psi_ratio_limits_and_consistency() {
        // At P = 0 the cancelled form gives exactly 1.
        assert_eq!(psi_ratio(0.0, 100).unwrap(), 1.0);
        // Elsewhere it equals (1-P)/P * psi(P).
        for p in [1e-8, 1e-4, 0.05, 0.2, 0.3] {
            let direct = (1.0 - p) / p * psi(p, 500).unwrap();
            let cancelled = psi_ratio(p, 500).unwrap();
            assert!(
                (direct - cancelled).abs() <= 1e-9 * cancelled.abs(),
                "p={p}: {direct} vs {cancelled}"
            );
        }
    }

    #[test]
    fn bound_limit_without_noise_terms() {
        // sigma2 = kappa2 = 0 and P -> 0: only the descent term remains.
        let p = ConvergenceParams {
            t_rounds: 400,
            k_clients: 4,
            g_smooth: 2.0,
            a: vec![1.0; 5],
            sigma2: 0.0,
            kappa2: 0.0,
            beta2: 1.0,
            p_outage: 0.0,
            l0_gap: 3.0,
            eta: 0.0,
        };
        let b = bound_rhs(&p).unwrap();
        let expect = 2.0 * 2.0 * 3.0 / (5.0 * (4.0f64 * 400.0).sqrt());
        assert!((b - expect).abs() < 1e-12);
    }

    #[test]
    fn bound_reference_value() {
        // Frozen from an independent series-based evaluation of both terms
        // at (T=400, K=4, G=2, |a|_1=5, sigma2=0.3, kappa2=0.7, P=0.1,
        // gap=3).
        let p = ConvergenceParams {
            t_rounds: 400,
            k_clients: 4,
            g_smooth: 2.0,
            a: vec![5.0],
            sigma2: 0.3,
            kappa2: 0.7,
            beta2: 1.0,
            p_outage: 0.1,
            l0_gap: 3.0,
            eta: 0.0,
        };
        let b = bound_rhs(&p).unwrap();
        assert!((b - 2.4444359243070997).abs() < 1e-10, "{b}");
    }

    #[test]
    fn bound_shrinks_with_t_at_root_rate() {
        let make = |t| ConvergenceParams {
            t_rounds: t,
            k_clients: 4,
            g_smooth: 2.0,
            a: vec![1.0; 5],
            sigma2: 0.0,
            kappa2: 0.0,
            beta2: 1.0,
            p_outage: 0.05,
            l0_gap: 3.0,
            eta: 0.0,
        };
        let b1 = bound_rhs(&make(1_000)).unwrap();
        let b2 = bound_rhs(&make(2_000)).unwrap();
        assert!((b1 / b2 - 2.0f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn bound_depends_on_a_only_through_l1() {
        let base = ConvergenceParams {
            t_rounds: 500,
            k_clients: 4,
            g_smooth: 1.5,
            a: vec![1.0; 5],
            sigma2: 0.3,
            kappa2: 0.7,
            beta2: 1.0,
            p_outage: 0.1,
            l0_gap: 2.0,
            eta: 0.0,
        };
        let mut collapsed = base.clone();
        collapsed.a = vec![5.0];
        assert_eq!(bound_rhs(&base).unwrap(), bound_rhs(&collapsed).unwrap());
    }

    #[test]
    fn bound_monotone_in_noise_and_outage() {
        let make = |sigma2, kappa2, p_o| ConvergenceParams {
            t_rounds: 800,
            k_clients: 5,
            g_smooth: 1.0,
            a: vec![1.0; 3],
            sigma2,
            kappa2,
            beta2: 1.0,
            p_outage: p_o,
            l0_gap: 1.0,
            eta: 0.0,
        };
        assert!(bound_rhs(&make(1.0, 0.0, 0.1)).unwrap() > bound_rhs(&make(0.5, 0.0, 0.1)).unwrap());
        assert!(bound_rhs(&make(0.5, 1.0, 0.1)).unwrap() > bound_rhs(&make(0.5, 0.5, 0.1)).unwrap());
        let mut last = 0.0;
        for i in 1..=30 {
            let p_o = i as f64 * 0.01;
            let b = bound_rhs(&make(0.5, 0.5, p_o)).unwrap();
            assert!(b.is_finite() && b > last, "p_o={p_o}: {b}");
            last = b;
        }
    }

    #[test]
    fn accumulation_bound_reference_points() {
        // eta -> 0 sends the bound to zero.
        let b = accumulation_variance_bound(3, 1e-9, 2.0, &[1.0, 1.0], 5.0).unwrap();
        assert!(b < 1e-14);
        // R = 1 and eta^2 = 1/(4 G^2 |a|^2): denominator is 1/2, so the
        // bound is 4 eta^2 |a|^3 grad2.
        let g = 2.0;
        let a = [1.0, 1.0, 1.0];
        let a_l1 = 3.0;
        let eta2: f64 = 1.0 / (4.0 * g * g * a_l1 * a_l1);
        let grad2 = 7.0;
        let b = accumulation_variance_bound(1, eta2.sqrt(), g, &a, grad2).unwrap();
        let expect = 4.0 * eta2 * a_l1.powi(3) * grad2;
        assert!((b - expect).abs() < 1e-12 * expect);
        // The singular threshold errors out.
        let eta_crit = (1.0 / (2.0 * g * g * a_l1 * a_l1)).sqrt();
        assert!(matches!(
            accumulation_variance_bound(1, eta_crit, g, &a, grad2),
            Err(ConvergenceError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn empirical_average_under_bound_on_perfect_network() {
        use crate::gradient_code::build_code;
        use crate::network::NetworkModel;
        use crate::protocol::{run_training, OnFailure, TrainOptions};
        use crate::secret_keys::construct_fair_cyclic;
        use crate::trainer::{
            dissimilarity_grid, fit_dissimilarity, make_quadratic_suite, LocalSolver,
        };
        let k = 4;
        let obj = make_quadratic_suite(6, k, 0.5, 2.0, 1.0, true, 9);
        let code = build_code(k, 1, 2).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.0, 0.0).unwrap();
        let t_rounds = 50u64;
        let g_smooth = obj.smoothness();
        let eta = (k as f64 / t_rounds as f64).sqrt() / g_smooth;
        let (beta2, kappa2) = fit_dissimilarity(&obj, &dissimilarity_grid(&obj, 16, 3));
        let mut params = ConvergenceParams {
            t_rounds,
            k_clients: k,
            g_smooth,
            a: vec![1.0; 4],
            sigma2: 0.0,
            kappa2,
            beta2,
            p_outage: 0.0,
            l0_gap: obj.global_loss(&[0.0; 6]),
            eta,
        };
        let solver = LocalSolver {
            a: vec![1.0; 4],
            eta,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: t_rounds,
            seed: 4,
            on_failure: OnFailure::Accumulate,
            clip_radius: None,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
        let cmp = empirical_vs_bound(&trace, &params).unwrap();
        assert!(!cmp.violated, "empirical {} > bound {}", cmp.empirical, cmp.bound);
        // Inflating the data-variance parameter only loosens the bound.
        params.sigma2 = 100.0;
        let loose = empirical_vs_bound(&trace, &params).unwrap();
        assert!(loose.bound > cmp.bound);
        assert!(!loose.violated);
    }

    #[test]
    fn accumulation_bound_dominates_simulated_drift() {
        // Quadratic descent drift stays below the bound for small steps.
        use crate::trainer::{local_update, make_quadratic_suite, LocalSolver};
        let obj = make_quadratic_suite(3, 1, 0.5, 1.0, 1.0, true, 5);
        let g_smooth = obj.smoothness();
        let a = vec![1.0, 1.0];
        let eta = 0.02;
        let theta0 = vec![0.5, -0.3, 0.8];
        let grad2: f64 = obj.local_grad(0, &theta0).iter().map(|v| v * v).sum();
        for r_t in 1..=5u32 {
            let solver = LocalSolver {
                a: a.repeat(r_t as usize),
                eta,
                batch: None,
            };
            let delta = local_update(&theta0, &obj, 0, &solver, 0);
            let drift: f64 = delta.iter().map(|v| v * v).sum();
            let bound =
                accumulation_variance_bound(r_t, eta, g_smooth, &a, grad2).unwrap();
            assert!(
                drift <= bound,
                "r_t={r_t}: drift {drift} exceeds bound {bound}"
            );
        }
    }
}
