//! Bernoulli link model: per-round outage draws and exact enumeration of the
//! link realizations that matter for a given code.
//!
//! Every link is an independent Bernoulli variable; `tau = 1` means the
//! transfer succeeded. Uplink `k` fails with probability `p_up[k]`, the link
//! carrying client `m`'s message to client `k` fails with probability
//! `p_inter[k][m]`, and self-links never fail (`p_inter[k][k] = 0`).
//!
//! Draws are counter-keyed by `(seed, round, link)` so a realization never
//! depends on the order links are sampled in, and parallel trials reproduce
//! the sequential results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_code::GcCode;
use crate::linalg::Mat;
use crate::rng;

/// Exact enumeration refuses more relevant links than this.
pub const MAX_ENUM_LINKS: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("probability out of range at {what}: {value}")]
    InvalidProbability { what: String, value: f64 },
    #[error("self-link probability must be zero at client {k}")]
    NonzeroDiagonal { k: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("{count} relevant links exceed the enumeration limit of {max}")]
    TooManyLinks { count: usize, max: usize },
}

// ---------------------------------------------------------------------------
// Model and realization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub k: usize,
    /// Uplink outage probabilities, length K.
    pub p_up: Vec<f64>,
    /// Inter-client outage probabilities, K x K with zero diagonal;
    /// entry (k, m) governs the link carrying m's message to k.
    pub p_inter: Mat,
}

impl NetworkModel {
    pub fn new(p_up: Vec<f64>, p_inter: Mat) -> Result<Self, NetworkError> {
        let k = p_up.len();
        if p_inter.rows() != k || p_inter.cols() != k {
            return Err(NetworkError::DimMismatch(format!(
                "p_inter is {}x{}, expected {k}x{k}",
                p_inter.rows(),
                p_inter.cols()
            )));
        }
        for (i, &p) in p_up.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(NetworkError::InvalidProbability {
                    what: format!("p_up[{i}]"),
                    value: p,
                });
            }
        }
        for r in 0..k {
            for c in 0..k {
                let p = p_inter.get(r, c);
                if r == c {
                    if p != 0.0 {
                        return Err(NetworkError::NonzeroDiagonal { k: r });
                    }
                } else if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                    return Err(NetworkError::InvalidProbability {
                        what: format!("p_inter[{r}][{c}]"),
                        value: p,
                    });
                }
            }
        }
        Ok(NetworkModel { k, p_up, p_inter })
    }

    /// Uniform network: one uplink outage probability, one inter-client
    /// outage probability for every ordered pair.
    pub fn uniform(k: usize, p_up: f64, p_inter: f64) -> Result<Self, NetworkError> {
        let mut m = Mat::zeros(k, k);
        for r in 0..k {
            for c in 0..k {
                if r != c {
                    m.set(r, c, p_inter);
                }
            }
        }
        NetworkModel::new(vec![p_up; k], m)
    }
}

/// One Bernoulli draw of every link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRealization {
    pub tau_up: Vec<bool>,
    /// `tau_inter[k][m]`: client k received client m's message.
    pub tau_inter: Vec<Vec<bool>>,
    pub round: u64,
}

impl LinkRealization {
    /// All links up (diagonal included).
    pub fn perfect(k: usize, round: u64) -> Self {
        LinkRealization {
            tau_up: vec![true; k],
            tau_inter: vec![vec![true; k]; k],
            round,
        }
    }
}

/// Draw every link independently; deterministic in `(seed, round)`.
pub fn sample_links(net: &NetworkModel, seed: u64, round: u64) -> LinkRealization {
    let k = net.k;
    let tau_up = (0..k)
        .map(|i| {
            let u = rng::counter_uniform(seed, &[rng::DOMAIN_LINKS, round, rng::LINK_UP, i as u64]);
            u >= net.p_up[i]
        })
        .collect();
    let tau_inter = (0..k)
        .map(|r| {
            (0..k)
                .map(|c| {
                    if r == c {
                        return true;
                    }
                    let u = rng::counter_uniform(
                        seed,
                        &[rng::DOMAIN_LINKS, round, rng::LINK_INTER, (r * k + c) as u64],
                    );
                    u >= net.p_inter.get(r, c)
                })
                .collect()
        })
        .collect();
    LinkRealization {
        tau_up,
        tau_inter,
        round,
    }
}

// ---------------------------------------------------------------------------
// Exact enumeration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Link {
    Up(usize),
    Inter(usize, usize),
}

/// Iterator over every assignment of the links relevant to `code`, with the
/// realization's product probability. Links with degenerate probability
/// (0 or 1) are fixed rather than branched, and links off the code support
/// are pinned to 0.
pub struct LinkEnumeration {
    k: usize,
    /// Links with 0 < p < 1, branched over.
    branch: Vec<(Link, f64)>,
    /// Links with a forced outcome.
    fixed: Vec<(Link, bool)>,
    next_index: u64,
    total: u64,
}

impl LinkEnumeration {
    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

impl Iterator for LinkEnumeration {
    type Item = (LinkRealization, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_index >= self.total {
            return None;
        }
        let bits = self.next_index;
        self.next_index += 1;

        // Start all-down except self-links; only relevant links get set.
        let mut real = LinkRealization {
            tau_up: vec![false; self.k],
            tau_inter: (0..self.k)
                .map(|r| (0..self.k).map(|c| r == c).collect())
                .collect(),
            round: 0,
        };
        for &(link, up) in &self.fixed {
            apply(&mut real, link, up);
        }
        let mut prob = 1.0;
        for (i, &(link, p_fail)) in self.branch.iter().enumerate() {
            let up = bits >> i & 1 == 1;
            prob *= if up { 1.0 - p_fail } else { p_fail };
            apply(&mut real, link, up);
        }
        Some((real, prob))
    }
}

fn apply(real: &mut LinkRealization, link: Link, up: bool) {
    match link {
        Link::Up(k) => real.tau_up[k] = up,
        Link::Inter(k, m) => real.tau_inter[k][m] = up,
    }
}

/// Enumerate the K uplinks plus the inter-client links on the code support.
pub fn enumerate_relevant(
    net: &NetworkModel,
    code: &GcCode,
) -> Result<LinkEnumeration, NetworkError> {
    if net.k != code.k {
        return Err(NetworkError::DimMismatch(format!(
            "network has {} clients, code has {}",
            net.k, code.k
        )));
    }
    let mut links: Vec<(Link, f64)> = Vec::new();
    for i in 0..net.k {
        links.push((Link::Up(i), net.p_up[i]));
    }
    for (k, support) in code.support_g.iter().enumerate() {
        for &m in support {
            if m != k {
                links.push((Link::Inter(k, m), net.p_inter.get(k, m)));
            }
        }
    }
    if links.len() > MAX_ENUM_LINKS {
        return Err(NetworkError::TooManyLinks {
            count: links.len(),
            max: MAX_ENUM_LINKS,
        });
    }
    let mut branch = Vec::new();
    let mut fixed = Vec::new();
    for (link, p) in links {
        if p == 0.0 {
            fixed.push((link, true));
        } else if p == 1.0 {
            fixed.push((link, false));
        } else {
            branch.push((link, p));
        }
    }
    let total = 1u64 << branch.len();
    Ok(LinkEnumeration {
        k: net.k,
        branch,
        fixed,
        next_index: 0,
        total,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
