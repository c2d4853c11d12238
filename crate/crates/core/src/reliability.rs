//! Outage probability of a round: exact enumeration over the relevant links
//! and Monte Carlo estimation, with the failure mass split into three
//! disjoint events.
//!
//! A round succeeds when at least `K - s` complete partial sums reach the
//! server. Failures are classified by `v`, the number of relays that missed
//! at least one neighbor:
//!
//! - sharing failure: `v >= s` (with `s >= 1`), so too few complete partial
//!   sums can even exist;
//! - uplink failure: `v = 0`; sharing was perfect, more than `s` uplinks
//!   dropped;
//! - mixed failure: `0 < v < s`; a few incomplete relays combined with too
//!   many uplink losses among the complete ones.
//!
//! With `s = 0` every relay is trivially complete, so all failures are
//! uplink failures.

use serde::{Deserialize, Serialize};

use crate::gradient_code::GcCode;
use crate::network::{self, LinkRealization, NetworkModel, NetworkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageEvent {
    Success,
    SharingFailure,
    UplinkFailure,
    MixedFailure,
}

impl OutageEvent {
    pub fn label(self) -> &'static str {
        match self {
            OutageEvent::Success => "success",
            OutageEvent::SharingFailure => "sharing_failure",
            OutageEvent::UplinkFailure => "uplink_failure",
            OutageEvent::MixedFailure => "mixed_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enumeration,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p_outage: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    /// 3-sigma normal-approximation half-width on `p_outage` (Monte Carlo).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_half_width: Option<f64>,
}

/// Classify one link realization.
pub fn classify_outcome(code: &GcCode, links: &LinkRealization) -> OutageEvent {
    let complete: Vec<bool> = (0..code.k)
        .map(|k| code.support_g[k].iter().all(|&m| links.tau_inter[k][m]))
        .collect();
    let arrived = complete
        .iter()
        .zip(&links.tau_up)
        .filter(|(&c, &up)| c && up)
        .count();
    if arrived >= code.k - code.s {
        return OutageEvent::Success;
    }
    let v = complete.iter().filter(|&&c| !c).count();
    if v == 0 {
        OutageEvent::UplinkFailure
    } else if v >= code.s {
        OutageEvent::SharingFailure
    } else {
        OutageEvent::MixedFailure
    }
}

/// Exact outage decomposition by enumerating every relevant realization.
pub fn outage_exact(code: &GcCode, net: &NetworkModel) -> Result<ReliabilityReport, NetworkError> {
    let mut p = [0.0f64; 3];
    for (real, prob) in network::enumerate_relevant(net, code)? {
        match classify_outcome(code, &real) {
            OutageEvent::Success => {}
            OutageEvent::SharingFailure => p[0] += prob,
            OutageEvent::UplinkFailure => p[1] += prob,
            OutageEvent::MixedFailure => p[2] += prob,
        }
    }
    Ok(ReliabilityReport {
        p1: p[0],
        p2: p[1],
        p3: p[2],
        p_outage: p[0] + p[1] + p[2],
        method: Method::Enumeration,
        trials: None,
        ci_half_width: None,
    })
}

/// Monte Carlo outage decomposition over seeded independent trials.
pub fn outage_monte_carlo(
    code: &GcCode,
    net: &NetworkModel,
    trials: u64,
    seed: u64,
) -> ReliabilityReport {
    assert!(trials >= 1_000, "need at least 1000 trials");
    let mut counts = [0u64; 3];
    for t in 0..trials {
        match classify_outcome(code, &network::sample_links(net, seed, t)) {
            OutageEvent::Success => {}
            OutageEvent::SharingFailure => counts[0] += 1,
            OutageEvent::UplinkFailure => counts[1] += 1,
            OutageEvent::MixedFailure => counts[2] += 1,
        }
    }
    let n = trials as f64;
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let p_outage = p.iter().sum::<f64>();
    let ci = 3.0 * (p_outage * (1.0 - p_outage) / n).sqrt();
    ReliabilityReport {
        p1: p[0],
        p2: p[1],
        p3: p[2],
        p_outage,
        method: Method::MonteCarlo,
        trials: Some(trials),
        ci_half_width: Some(ci),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient_code::build_code;
    use crate::network::sample_links;

    #[test]
    fn all_links_up_is_success() {
        let code = build_code(4, 2, 1).unwrap();
        let links = LinkRealization::perfect(4, 0);
        assert_eq!(classify_outcome(&code, &links), OutageEvent::Success);
    }

    #[test]
    fn all_sharing_down_is_sharing_failure() {
        let code = build_code(4, 2, 1).unwrap();
        let mut links = LinkRealization::perfect(4, 0);
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    links.tau_inter[r][c] = false;
                }
            }
        }
        assert_eq!(classify_outcome(&code, &links), OutageEvent::SharingFailure);
    }

    #[test]
    fn perfect_sharing_with_s_plus_one_uplinks_down() {
        let code = build_code(5, 2, 1).unwrap();
        let mut links = LinkRealization::perfect(5, 0);
        for k in 0..3 {
            links.tau_up[k] = false;
        }
        assert_eq!(classify_outcome(&code, &links), OutageEvent::UplinkFailure);
        // Exactly s uplinks down still succeeds: K - s = 3 arrivals remain.
        links.tau_up[0] = true;
        assert_eq!(classify_outcome(&code, &links), OutageEvent::Success);
    }

    #[test]
    fn mixed_event_when_few_relays_incomplete() {
        let code = build_code(5, 3, 1).unwrap();
        let mut links = LinkRealization::perfect(5, 0);
        // One incomplete relay (v = 1 < s = 3)...
        links.tau_inter[0][code.support_g[0][1]] = false;
        // ...and more than s - v = 2 uplink failures among complete relays.
        links.tau_up[1] = false;
        links.tau_up[2] = false;
        links.tau_up[3] = false;
        assert_eq!(classify_outcome(&code, &links), OutageEvent::MixedFailure);
    }

    #[test]
    fn degenerate_probabilities() {
        let code = build_code(3, 1, 2).unwrap();
        let perfect = NetworkModel::uniform(3, 0.0, 0.0).unwrap();
        let report = outage_exact(&code, &perfect).unwrap();
        assert_eq!(report.p_outage, 0.0);

        let dead = NetworkModel::uniform(3, 1.0, 0.0).unwrap();
        let report = outage_exact(&code, &dead).unwrap();
        assert_eq!(report.p_outage, 1.0);
    }

    #[test]
    fn exact_matches_independent_success_count() {
        // Second, direct implementation: count success probability without
        // the event decomposition.
        let code = build_code(3, 1, 5).unwrap();
        let net = NetworkModel::uniform(3, 0.7, 0.9).unwrap();
        let report = outage_exact(&code, &net).unwrap();

        let mut success = 0.0;
        for (real, prob) in network::enumerate_relevant(&net, &code).unwrap() {
            let arrived: Vec<bool> = (0..3)
                .map(|k| {
                    real.tau_up[k]
                        && code.support_g[k].iter().all(|&m| real.tau_inter[k][m])
                })
                .collect();
            if code.select_combinator(&arrived).is_some() {
                success += prob;
            }
        }
        assert!(
            (report.p_outage - (1.0 - success)).abs() < 1e-12,
            "{} vs {}",
            report.p_outage,
            1.0 - success
        );
        assert!((report.p1 + report.p2 + report.p3 - report.p_outage).abs() < 1e-15);
    }

    #[test]
    fn success_iff_combinator_exists() {
        let code = build_code(5, 2, 3).unwrap();
        let net = NetworkModel::uniform(5, 0.5, 0.5).unwrap();
        for trial in 0..500 {
            let links = sample_links(&net, 99, trial);
            let arrived: Vec<bool> = (0..5)
                .map(|k| {
                    links.tau_up[k]
                        && code.support_g[k].iter().all(|&m| links.tau_inter[k][m])
                })
                .collect();
            let event = classify_outcome(&code, &links);
            assert_eq!(
                event == OutageEvent::Success,
                code.select_combinator(&arrived).is_some(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn monte_carlo_within_ci_of_exact() {
        let code = build_code(4, 2, 7).unwrap();
        let net = NetworkModel::uniform(4, 0.5, 0.3).unwrap();
        let exact = outage_exact(&code, &net).unwrap();
        let mc = outage_monte_carlo(&code, &net, 50_000, 11);
        assert!(
            (mc.p_outage - exact.p_outage).abs() <= mc.ci_half_width.unwrap(),
            "mc {} exact {}",
            mc.p_outage,
            exact.p_outage
        );
    }

    #[test]
    fn monte_carlo_matches_enumeration_when_degenerate() {
        let code = build_code(3, 1, 0).unwrap();
        let net = NetworkModel::uniform(3, 1.0, 0.0).unwrap();
        let mc = outage_monte_carlo(&code, &net, 1_000, 5);
        assert_eq!(mc.p_outage, 1.0);
        assert_eq!(mc.p2, 1.0);
    }

    #[test]
    fn outage_monotone_in_probabilities() {
        let code = build_code(4, 1, 3).unwrap();
        let mut last = 0.0;
        for i in 0..6 {
            let p = i as f64 * 0.15;
            let net = NetworkModel::uniform(4, p, p).unwrap();
            let report = outage_exact(&code, &net).unwrap();
            assert!(report.p_outage >= last - 1e-12);
            last = report.p_outage;
        }
    }
}
