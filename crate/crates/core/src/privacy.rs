//! Privacy accountants for every protocol layer: mutual-information leakage
//! (peer, relay, server) and Gaussian-mechanism differential privacy for the
//! masked transmissions, the relayed partial sums, failed server
//! combinations, and successful aggregation.
//!
//! Conventions:
//!
//! - Mutual-information values default to bits (base-2 logs); the
//!   differential-privacy expressions use natural logs inside
//!   `sqrt(2 log(1.25/delta))`, the usual Gaussian-mechanism convention.
//!   Both are switchable through `LogBase`.
//! - The relay leakage is evaluated per its derivation: the connectivity
//!   factor `1 - p` scales the entropy term only, and the noise-ratio term
//!   is per-realization. The published statement scales both terms; the
//!   expected-form report carries both readings.
//! - The closed-form expected aggregated-noise variance overcounts the
//!   diagonal second moment of the Bernoulli coefficients (a mean-based
//!   quadratic form does not commute with the expectation), so the exact
//!   link enumeration is authoritative and the closed form is only reported
//!   alongside it with a discrepancy flag.
//! - The failure layer keeps its stated quarter exponent on the log factor,
//!   in contrast to the square root used by every other layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_code::GcCode;
use crate::network::{self, NetworkModel};
use crate::secret_keys::GeneratorMatrix;

/// An aggregated-noise variance at or below this is degenerate: the
/// observation would expose a contribution with no residual masking.
const NU_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrivacyError {
    #[error("zero key power: the mechanism adds no noise")]
    ZeroNoise,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(
        "degenerate aggregated noise: residual variance {nu:.3e} after removing client {client}"
    )]
    DegenerateNoise { client: usize, nu: f64 },
    #[error("need at least two clients with positive weight")]
    SingleClient,
    #[error("Bernstein radius {r:.3e} is not below the expected variance {nu_bar:.3e}")]
    BernsteinTooLarge { r: f64, nu_bar: f64 },
    #[error("need at least {min} variance samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
}

/// Logarithm base for reported values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    /// Base-2 logs; values in bits.
    #[default]
    Bits,
    /// Natural logs; values in nats.
    Nats,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Bits => x.log2(),
            LogBase::Nats => x.ln(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Per-layer failure probabilities for the differential-privacy pairs,
/// plus the Bernstein confidence `delta_prime`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub delta4: f64,
    pub delta5: f64,
    pub delta6: f64,
    pub delta7: f64,
    pub delta_prime: f64,
}

impl Default for Deltas {
    fn default() -> Self {
        Deltas {
            delta1: 0.05,
            delta2: 0.05,
            delta3: 0.05,
            delta4: 0.05,
            delta5: 0.05,
            delta6: 0.05,
            delta7: 0.05,
            delta_prime: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Model dimension.
    pub d: usize,
    /// Per-coordinate update power.
    pub zeta2: f64,
    /// Per-key power.
    pub lambda2: f64,
    /// l2 radius bounding transmitted updates.
    pub radius: f64,
    /// Aggregation weights, summing to 1.
    pub weights: Vec<f64>,
    pub deltas: Deltas,
    /// Bernstein radii for the relay and failure layers.
    pub r1: f64,
    pub r2: f64,
    /// Update-norm radius for the success layer.
    pub r3: f64,
    pub lmip_base: LogBase,
    pub ldp_base: LogBase,
}

impl PrivacyParams {
    pub fn uniform(k: usize, d: usize, zeta2: f64, lambda2: f64, radius: f64) -> Self {
        PrivacyParams {
            d,
            zeta2,
            lambda2,
            radius,
            weights: vec![1.0 / k as f64; k],
            deltas: Deltas::default(),
            r1: 0.0,
            r2: 0.0,
            r3: radius,
            lmip_base: LogBase::Bits,
            ldp_base: LogBase::Nats,
        }
    }
}

// ---------------------------------------------------------------------------
// Mutual-information accountants
// ---------------------------------------------------------------------------

/// Peer-to-peer leakage of one masked transmission over a link with outage
/// probability `p_mk`:
/// `mu1 = (1 - p) * (D/2) * log(1 + zeta^2 / lambda^2)`.
pub fn lmip_peer(
    p_mk: f64,
    d: usize,
    zeta2: f64,
    lambda2: f64,
    base: LogBase,
) -> Result<f64, PrivacyError> {
    if lambda2 <= 0.0 {
        return Err(PrivacyError::ZeroNoise);
    }
    Ok((1.0 - p_mk) * d as f64 / 2.0 * base.log(1.0 + zeta2 / lambda2))
}

/// Variance of the aggregated correlated key noise for an effective
/// coefficient row: `nu = |lam * A|^2`.
pub fn aggregated_noise_variance(lam: &[f64], a: &GeneratorMatrix) -> Result<f64, PrivacyError> {
    if lam.len() != a.k {
        return Err(PrivacyError::DimMismatch(format!(
            "coefficient row has {} entries, generator has {} rows",
            lam.len(),
            a.k
        )));
    }
    let mixed = a.a.left_mul_vec(lam);
    Ok(mixed.iter().map(|v| v * v).sum())
}

/// Per-realization relay leakage about client `k1` in relay `k`'s partial
/// sum, for the realized coefficient row `lam` (entry `m` is
/// `tau_{k,m} * g_{k,m}`):
/// `(D/2) [ 1{tau=1} log(2 pi e g^2 zeta^2) + log(nu / nu_without_k1) ]`.
/// Exactly zero when client `k1` was not decoded.
pub fn lmip_relay(
    k: usize,
    k1: usize,
    lam: &[f64],
    code: &GcCode,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<f64, PrivacyError> {
    let g = code.g.get(k, k1);
    if g == 0.0 || lam[k1] == 0.0 {
        return Ok(0.0);
    }
    let base = params.lmip_base;
    let nu = aggregated_noise_variance(lam, a)?;
    let mut lam_minus = lam.to_vec();
    lam_minus[k1] = 0.0;
    let nu_minus = aggregated_noise_variance(&lam_minus, a)?;
    if nu_minus <= NU_FLOOR || nu <= NU_FLOOR {
        return Err(PrivacyError::DegenerateNoise {
            client: k1,
            nu: nu_minus,
        });
    }
    let entropy = base.log(2.0 * std::f64::consts::PI * std::f64::consts::E * g * g * params.zeta2);
    let ratio = base.log(nu / nu_minus);
    Ok(params.d as f64 / 2.0 * (entropy + ratio))
}

/// Expected relay leakage, with the noise-ratio term averaged over the
/// enumerated realizations of relay `k`'s inbound links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelayLmip {
    /// Connectivity factor on the entropy term only (the derivation).
    pub derivation_form: f64,
    /// Connectivity factor on both terms (the published statement).
    pub statement_form: f64,
}

pub fn lmip_relay_expected(
    k: usize,
    k1: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<RelayLmip, PrivacyError> {
    let g = code.g.get(k, k1);
    if g == 0.0 {
        return Ok(RelayLmip {
            derivation_form: 0.0,
            statement_form: 0.0,
        });
    }
    let base = params.lmip_base;
    let mut mean_ratio = 0.0;
    for (lam, prob) in relay_realizations(k, code, net) {
        if lam[k1] == 0.0 {
            continue; // ratio is exactly zero without k1's contribution
        }
        let nu = aggregated_noise_variance(&lam, a)?;
        let mut lam_minus = lam.clone();
        lam_minus[k1] = 0.0;
        let nu_minus = aggregated_noise_variance(&lam_minus, a)?;
        if nu_minus <= NU_FLOOR {
            return Err(PrivacyError::DegenerateNoise {
                client: k1,
                nu: nu_minus,
            });
        }
        mean_ratio += prob * base.log(nu / nu_minus);
    }
    let connect = 1.0 - net.p_inter.get(k, k1);
    let entropy = base.log(2.0 * std::f64::consts::PI * std::f64::consts::E * g * g * params.zeta2);
    let half_d = params.d as f64 / 2.0;
    Ok(RelayLmip {
        derivation_form: half_d * (connect * entropy + mean_ratio),
        statement_form: connect * half_d * (entropy + mean_ratio),
    })
}

/// All realizations of relay `k`'s effective coefficient row with their
/// probabilities (the self-link is always on).
fn relay_realizations(k: usize, code: &GcCode, net: &NetworkModel) -> Vec<(Vec<f64>, f64)> {
    let neighbors: Vec<usize> = code.support_g[k]
        .iter()
        .copied()
        .filter(|&m| m != k)
        .collect();
    let mut out = Vec::with_capacity(1 << neighbors.len());
    for bits in 0u32..(1 << neighbors.len()) {
        let mut lam = vec![0.0; code.k];
        lam[k] = code.g.get(k, k);
        let mut prob = 1.0;
        for (i, &m) in neighbors.iter().enumerate() {
            let p = net.p_inter.get(k, m);
            if bits >> i & 1 == 1 {
                lam[m] = code.g.get(k, m);
                prob *= 1.0 - p;
            } else {
                prob *= p;
            }
        }
        if prob > 0.0 {
            out.push((lam, prob));
        }
    }
    out
}

/// Server-side leakage of one contribution in the exactly recovered global
/// model: `mu3 = (D/2) log(1 + w_k^2 / sum_{m != k} w_m^2)`.
pub fn lmip_server(
    weights: &[f64],
    k: usize,
    d: usize,
    base: LogBase,
) -> Result<f64, PrivacyError> {
    if weights.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Err(PrivacyError::SingleClient);
    }
    let rest: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != k)
        .map(|(_, &w)| w * w)
        .sum();
    if rest <= 0.0 {
        return Err(PrivacyError::SingleClient);
    }
    Ok(d as f64 / 2.0 * base.log(1.0 + weights[k] * weights[k] / rest))
}

// ---------------------------------------------------------------------------
// Differential-privacy accountants
// ---------------------------------------------------------------------------

/// One (epsilon, delta) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdpPair {
    pub epsilon: f64,
    pub delta: f64,
}

fn gauss_factor(delta: f64, base: LogBase) -> f64 {
    (2.0 * base.log(1.25 / delta)).sqrt()
}

/// Peer-to-peer privacy of a masked transmission:
/// `eps1 = (2R / lambda) sqrt(2 log(1.25 / delta1))`, effective failure
/// probability `(1 - p) delta1`.
pub fn ldp_peer(params: &PrivacyParams, p_mk: f64, delta1: f64) -> Result<LdpPair, PrivacyError> {
    if params.lambda2 <= 0.0 {
        return Err(PrivacyError::ZeroNoise);
    }
    let lambda = params.lambda2.sqrt();
    Ok(LdpPair {
        epsilon: 2.0 * params.radius / lambda * gauss_factor(delta1, params.ldp_base),
        delta: (1.0 - p_mk) * delta1,
    })
}

/// Expected aggregated-noise variance at relay `k`. The exact value comes
/// from enumerating the inbound-link realizations; the closed form
/// `lambda^2 sum_m (1 - p_{k,m}) g_{k,m}^2 + lamE A A^T lamE^T` is reported
/// for comparison and flagged when it disagrees (it double counts the
/// diagonal second moment whenever some inbound link has 0 < p < 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedNoiseVariance {
    /// Enumeration value; authoritative.
    pub exact: f64,
    /// Closed-form display value.
    pub formula: f64,
    pub discrepancy: f64,
    pub flagged: bool,
}

pub fn expected_noise_variance(
    k: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    lambda2: f64,
) -> Result<ExpectedNoiseVariance, PrivacyError> {
    let mut exact = 0.0;
    for (lam, prob) in relay_realizations(k, code, net) {
        exact += prob * aggregated_noise_variance(&lam, a)?;
    }
    let lam_e = expected_coefficients(k, code, net);
    let first: f64 = (0..code.k)
        .map(|m| {
            let g = code.g.get(k, m);
            lambda2 * (1.0 - net.p_inter.get(k, m)) * g * g
        })
        .sum();
    let formula = first + aggregated_noise_variance(&lam_e, a)?;
    let discrepancy = (formula - exact).abs();
    Ok(ExpectedNoiseVariance {
        exact,
        formula,
        discrepancy,
        flagged: discrepancy > 1e-9,
    })
}

/// Expected effective coefficient row of relay `k`:
/// entry `m` is `(1 - p_{k,m}) g_{k,m}`.
pub fn expected_coefficients(k: usize, code: &GcCode, net: &NetworkModel) -> Vec<f64> {
    (0..code.k)
        .map(|m| (1.0 - net.p_inter.get(k, m)) * code.g.get(k, m))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn relay_ldp_epsilon(
    k: usize,
    j: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
    delta: f64,
    sensitivity_factor: f64,
) -> Result<LdpPair, PrivacyError> {
    let p_kj = if k == j { 0.0 } else { net.p_inter.get(k, j) };
    let delta_eff = (1.0 - p_kj) * (params.deltas.delta_prime + delta);
    if p_kj == 0.0 {
        // Stated case split: a never-failing link contributes no epsilon.
        return Ok(LdpPair {
            epsilon: 0.0,
            delta: delta_eff,
        });
    }
    let nu_bar = expected_noise_variance(k, code, net, a, params.lambda2)?.exact;
    if params.r1 >= nu_bar {
        return Err(PrivacyError::BernsteinTooLarge {
            r: params.r1,
            nu_bar,
        });
    }
    let g = code.g.get(k, j).abs();
    let epsilon = sensitivity_factor * gauss_factor(delta, params.ldp_base) * g * params.radius
        / (nu_bar - params.r1).sqrt();
    Ok(LdpPair {
        epsilon,
        delta: delta_eff,
    })
}

/// Privacy of client `j`'s participation identity in relay `k`'s partial
/// sum: `eps2 = sqrt(2 log(1.25/delta2)) |g_{k,j}| R / sqrt(nu_bar - r1)`,
/// zero when `p_{k,j} = 0`.
pub fn ldp_relay_identity(
    k: usize,
    j: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<LdpPair, PrivacyError> {
    relay_ldp_epsilon(k, j, code, net, a, params, params.deltas.delta2, 1.0)
}

/// Privacy of client `j`'s update value against perturbation, with doubled
/// sensitivity: `eps3 = 2 * eps2` at equal deltas.
pub fn ldp_relay_perturbation(
    k: usize,
    j: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<LdpPair, PrivacyError> {
    relay_ldp_epsilon(k, j, code, net, a, params, params.deltas.delta3, 2.0)
}

// ---------------------------------------------------------------------------
// Failure-layer accountant
// ---------------------------------------------------------------------------

/// Privacy of a failed-round combination under one combinator row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdpFailure {
    pub eps4: f64,
    pub eps5: f64,
    /// Expected variance of the server-side aggregated noise.
    pub nu_bar: f64,
    /// `p_tilde[k]`: probability that partial sums containing client `j`'s
    /// contribution reach the server through relay `k` (zero off the
    /// listening set).
    pub p_tilde: Vec<f64>,
    pub delta4: Vec<f64>,
    pub delta5: Vec<f64>,
}

/// Relays that listen to client `j`, i.e. `{m : g_{m,j} != 0}`.
pub fn listeners(j: usize, code: &GcCode) -> Vec<usize> {
    (0..code.k)
        .filter(|&m| code.support_g[m].contains(&j))
        .collect()
}

/// Probability that a partial sum containing client `j`'s contribution
/// arrives at the server through relay `k`: the sum over nonempty uplink
/// patterns of `j`'s listeners containing `k`, each weighted by the chance
/// that at least one pattern member decoded `j`.
pub fn p_tilde(k: usize, j: usize, code: &GcCode, net: &NetworkModel) -> f64 {
    let v_j = listeners(j, code);
    let Some(k_pos) = v_j.iter().position(|&m| m == k) else {
        return 0.0;
    };
    let n = v_j.len();
    let mut total = 0.0;
    for bits in 1u32..(1 << n) {
        if bits >> k_pos & 1 == 0 {
            continue;
        }
        let mut prob = 1.0;
        let mut all_drop = 1.0;
        for (i, &m) in v_j.iter().enumerate() {
            if bits >> i & 1 == 1 {
                prob *= 1.0 - net.p_up[m];
                all_drop *= if m == j { 0.0 } else { net.p_inter.get(m, j) };
            } else {
                prob *= net.p_up[m];
            }
        }
        total += prob * (1.0 - all_drop);
    }
    total
}

/// Failure-layer accountant for client `j` under combinator row `f_prime`.
/// Note the quarter exponent on the log factor, as stated for this layer
/// (the other layers use the square root).
pub fn ldp_failure(
    j: usize,
    f_prime: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<LdpFailure, PrivacyError> {
    let nu_bar = expected_server_noise_variance(f_prime, code, net, a)?;
    if params.r2 >= nu_bar {
        return Err(PrivacyError::BernsteinTooLarge {
            r: params.r2,
            nu_bar,
        });
    }
    let sensitivity: f64 = (0..code.k)
        .map(|k| (code.c.get(f_prime, k) * code.g.get(k, j)).abs())
        .sum::<f64>()
        * params.radius;
    let denom = (nu_bar - params.r2).sqrt();
    let quarter4 = (2.0 * params.ldp_base.log(1.25 / params.deltas.delta4)).powf(0.25);
    let quarter5 = (2.0 * params.ldp_base.log(1.25 / params.deltas.delta5)).powf(0.25);
    let eps4 = quarter4 * sensitivity / denom;
    let eps5 = 2.0 * quarter5 * sensitivity / denom;
    let p_tilde_all: Vec<f64> = (0..code.k).map(|k| p_tilde(k, j, code, net)).collect();
    let delta4 = p_tilde_all
        .iter()
        .map(|&p| p * (params.deltas.delta_prime + params.deltas.delta4))
        .collect();
    let delta5 = p_tilde_all
        .iter()
        .map(|&p| (1.0 - p) * (params.deltas.delta_prime + params.deltas.delta5))
        .collect();
    Ok(LdpFailure {
        eps4,
        eps5,
        nu_bar,
        p_tilde: p_tilde_all,
        delta4,
        delta5,
    })
}

/// Expected variance of the server-side aggregated noise under combinator
/// `f_prime`: the double sum over relay pairs of
/// `c_{k1} c_{k2} (1-p_{k1}) (1-p_{k2}) <lamE_{k1} A, lamE_{k2} A>`.
pub fn expected_server_noise_variance(
    f_prime: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
) -> Result<f64, PrivacyError> {
    if net.k != code.k || a.k != code.k {
        return Err(PrivacyError::DimMismatch(
            "code, network, and generator sizes differ".into(),
        ));
    }
    let mixed: Vec<Vec<f64>> = (0..code.k)
        .map(|k| a.a.left_mul_vec(&expected_coefficients(k, code, net)))
        .collect();
    let mut total = 0.0;
    for k1 in 0..code.k {
        let w1 = code.c.get(f_prime, k1) * (1.0 - net.p_up[k1]);
        if w1 == 0.0 {
            continue;
        }
        for k2 in 0..code.k {
            let w2 = code.c.get(f_prime, k2) * (1.0 - net.p_up[k2]);
            if w2 == 0.0 {
                continue;
            }
            let dot: f64 = mixed[k1].iter().zip(&mixed[k2]).map(|(x, y)| x * y).sum();
            total += w1 * w2 * dot;
        }
    }
    Ok(total)
}

/// Realized server-side aggregated-noise variance under combinator
/// `f_prime` for one link realization.
pub fn server_noise_variance(
    f_prime: usize,
    code: &GcCode,
    links: &network::LinkRealization,
    a: &GeneratorMatrix,
) -> Result<f64, PrivacyError> {
    let mut lam_total = vec![0.0; code.k];
    for k in 0..code.k {
        let c = code.c.get(f_prime, k);
        if c == 0.0 || !links.tau_up[k] {
            continue;
        }
        for &m in &code.support_g[k] {
            if links.tau_inter[k][m] {
                lam_total[m] += c * code.g.get(k, m);
            }
        }
    }
    aggregated_noise_variance(&lam_total, a)
}

// ---------------------------------------------------------------------------
// Success-layer accountant
// ---------------------------------------------------------------------------

/// Privacy of the successfully recovered global model. The masking noise is
/// the other clients' randomness, with per-coordinate deviation
/// `(sqrt(K-1)/K) zeta`; the sensitivity of the K-client mean to one update
/// in a ball of radius `r3` is `r3 / K`, which keeps `eps6 -> 0` as K grows:
/// `eps6 = (r3/K) / ((sqrt(K-1)/K) zeta) * sqrt(2 log(1.25/delta6))`,
/// and `eps7` with doubled sensitivity.
pub fn ldp_success(
    params: &PrivacyParams,
    k_clients: usize,
    r3: f64,
) -> Result<(f64, f64), PrivacyError> {
    if k_clients < 2 {
        return Err(PrivacyError::SingleClient);
    }
    if params.zeta2 <= 0.0 {
        return Err(PrivacyError::ZeroNoise);
    }
    let zeta = params.zeta2.sqrt();
    let k = k_clients as f64;
    let scale = (k - 1.0).sqrt() / k * zeta;
    let sensitivity = r3 / k;
    let eps6 = sensitivity / scale * gauss_factor(params.deltas.delta6, params.ldp_base);
    let eps7 = 2.0 * sensitivity / scale * gauss_factor(params.deltas.delta7, params.ldp_base);
    Ok((eps6, eps7))
}

// ---------------------------------------------------------------------------
// Bernstein radius estimation
// ---------------------------------------------------------------------------

pub const MIN_BERNSTEIN_SAMPLES: usize = 1_000;

/// Smallest radius `r` such that at most a `delta_prime` fraction of the
/// samples deviates from their mean by more than `r` (empirical quantile of
/// the absolute deviations; deviations equal to `r` count as within).
pub fn estimate_bernstein_radius(samples: &[f64], delta_prime: f64) -> Result<f64, PrivacyError> {
    if samples.len() < MIN_BERNSTEIN_SAMPLES {
        return Err(PrivacyError::TooFewSamples {
            n: samples.len(),
            min: MIN_BERNSTEIN_SAMPLES,
        });
    }
    let n = samples.len();
    let mean: f64 = samples.iter().sum::<f64>() / n as f64;
    let mut devs: Vec<f64> = samples.iter().map(|v| (v - mean).abs()).collect();
    devs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let allowed = (delta_prime * n as f64).floor() as usize;
    if allowed >= n {
        return Ok(0.0);
    }
    Ok(devs[allowed])
}

/// Monte Carlo samples of the relay-`k` aggregated-noise variance over link
/// draws, for radius estimation.
pub fn sample_relay_variance(
    k: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    trials: u64,
    seed: u64,
) -> Result<Vec<f64>, PrivacyError> {
    (0..trials)
        .map(|t| {
            let links = network::sample_links(net, seed, t);
            let lam: Vec<f64> = (0..code.k)
                .map(|m| {
                    if links.tau_inter[k][m] {
                        code.g.get(k, m)
                    } else {
                        0.0
                    }
                })
                .collect();
            aggregated_noise_variance(&lam, a)
        })
        .collect()
}

/// Monte Carlo samples of the server-side aggregated-noise variance under
/// combinator `f_prime`.
pub fn sample_server_variance(
    f_prime: usize,
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    trials: u64,
    seed: u64,
) -> Result<Vec<f64>, PrivacyError> {
    (0..trials)
        .map(|t| {
            let links = network::sample_links(net, seed, t);
            server_noise_variance(f_prime, code, &links, a)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

/// Expected relay-layer leakage entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelayLmipEntry {
    pub relay: usize,
    pub target: usize,
    pub derivation_form: f64,
    pub statement_form: f64,
}

/// Relay-layer pair; `error` is set (and the values absent) when the
/// Bernstein radius is incompatible with the expected variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayLdpEntry {
    pub relay: usize,
    pub target: usize,
    pub eps2: Option<f64>,
    pub delta2: Option<f64>,
    pub eps3: Option<f64>,
    pub delta3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Failure-layer entry; `error` as above. The expected server-side noise
/// variance can sit far below the realized variances (the combinator
/// cancellation acts on mean coefficients), in which case no valid radius
/// exists and the entry reports the error instead of a value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureEntry {
    pub target: usize,
    pub combinator: usize,
    pub eps4: Option<f64>,
    pub eps5: Option<f64>,
    pub nu_bar: Option<f64>,
    pub p_tilde: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Every accountant evaluated for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyReport {
    /// `mu1[m][k]`: leakage of client `k`'s transmission to client `m`.
    pub mu1: Vec<Vec<f64>>,
    pub mu2: Vec<RelayLmipEntry>,
    pub mu3: Vec<f64>,
    /// Peer epsilon (identical for every pair) and per-pair deltas.
    pub eps1: f64,
    pub delta1: Vec<Vec<f64>>,
    pub relay_ldp: Vec<RelayLdpEntry>,
    pub failure: Vec<FailureEntry>,
    pub eps6: f64,
    pub eps7: f64,
    /// Expected relay noise variances (exact and closed form).
    pub nu_bar: Vec<ExpectedNoiseVariance>,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

/// Assemble the per-layer report for a configuration. The failure layer is
/// evaluated under the first combinator row.
pub fn privacy_report(
    code: &GcCode,
    net: &NetworkModel,
    a: &GeneratorMatrix,
    params: &PrivacyParams,
) -> Result<PrivacyReport, PrivacyError> {
    let k_n = code.k;
    let base = params.lmip_base;
    let mut mu1 = vec![vec![0.0; k_n]; k_n];
    let mut delta1 = vec![vec![0.0; k_n]; k_n];
    for m in 0..k_n {
        for k in 0..k_n {
            if m == k {
                continue;
            }
            let p = net.p_inter.get(m, k);
            mu1[m][k] = lmip_peer(p, params.d, params.zeta2, params.lambda2, base)?;
            delta1[m][k] = (1.0 - p) * params.deltas.delta1;
        }
    }
    let eps1 = ldp_peer(params, 0.0, params.deltas.delta1)?.epsilon;

    let mut mu2 = Vec::new();
    let mut relay_ldp = Vec::new();
    for k in 0..k_n {
        for &k1 in &code.support_g[k] {
            // Self-pairs are excluded from the relay-leakage table: with
            // positive probability the relay hears nobody else, leaving its
            // own contribution with no residual masking at all.
            if k1 != k {
                let r = lmip_relay_expected(k, k1, code, net, a, params)?;
                mu2.push(RelayLmipEntry {
                    relay: k,
                    target: k1,
                    derivation_form: r.derivation_form,
                    statement_form: r.statement_form,
                });
            }
            let id = ldp_relay_identity(k, k1, code, net, a, params);
            let pert = ldp_relay_perturbation(k, k1, code, net, a, params);
            relay_ldp.push(match (id, pert) {
                (Ok(id), Ok(pert)) => RelayLdpEntry {
                    relay: k,
                    target: k1,
                    eps2: Some(id.epsilon),
                    delta2: Some(id.delta),
                    eps3: Some(pert.epsilon),
                    delta3: Some(pert.delta),
                    error: None,
                },
                (id, pert) => RelayLdpEntry {
                    relay: k,
                    target: k1,
                    eps2: None,
                    delta2: None,
                    eps3: None,
                    delta3: None,
                    error: Some(id.err().or(pert.err()).expect("one side failed").to_string()),
                },
            });
        }
    }

    let mu3 = (0..k_n)
        .map(|k| lmip_server(&params.weights, k, params.d, base))
        .collect::<Result<Vec<_>, _>>()?;

    let nu_bar = (0..k_n)
        .map(|k| expected_noise_variance(k, code, net, a, params.lambda2))
        .collect::<Result<Vec<_>, _>>()?;

    let failure = (0..k_n)
        .map(|j| match ldp_failure(j, 0, code, net, a, params) {
            Ok(f) => FailureEntry {
                target: j,
                combinator: 0,
                eps4: Some(f.eps4),
                eps5: Some(f.eps5),
                nu_bar: Some(f.nu_bar),
                p_tilde: f.p_tilde,
                error: None,
            },
            Err(e) => FailureEntry {
                target: j,
                combinator: 0,
                eps4: None,
                eps5: None,
                nu_bar: None,
                p_tilde: (0..k_n).map(|k| p_tilde(k, j, code, net)).collect(),
                error: Some(e.to_string()),
            },
        })
        .collect();

    let (eps6, eps7) = ldp_success(params, k_n, params.r3)?;

    Ok(PrivacyReport {
        mu1,
        mu2,
        mu3,
        eps1,
        delta1,
        relay_ldp,
        failure,
        eps6,
        eps7,
        nu_bar,
        r1: params.r1,
        r2: params.r2,
        r3: params.r3,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
