//! Secret-key generator matrices and correlated Gaussian key sampling.
//!
//! A generator matrix `A` (K x L) mixes L i.i.d. standard-normal noise
//! components into K per-client keys, `N = A * Z`. Correctness requires
//! every column of `A` to sum to zero so the keys cancel in the server's
//! combinator sum; security requires rank `K - 1` so no subset of fewer
//! than K keys combines to zero. Fair variants additionally force every
//! row to the same squared norm `lambda^2`, giving all clients identical
//! key power.
//!
//! Three constructions are provided:
//!
//! - `construct_general`: random rows, last row balances the column sums.
//!   Simple, but row powers can differ wildly between clients.
//! - `construct_fair_general`: alternating projection between the zero
//!   column-sum subspace and the equal-row-power manifold.
//! - `construct_fair_cyclic`: closed-form cyclic matrix with `gamma`
//!   off-diagonal entries per row; no equation solving at all.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::rng;

/// Singular values below this fraction of the largest count as zero when
/// establishing the security rank.
pub const RANK_REL_TOL: f64 = 1e-8;
/// Rows with no entry above this magnitude would produce a degenerate key.
pub const ROW_NONZERO_MIN: f64 = 1e-12;
/// Default alternating-projection settings.
pub const DEFAULT_FAIR_TOL: f64 = 1e-9;
pub const DEFAULT_FAIR_MAX_ITER: usize = 10_000;

const GENERAL_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyError {
    #[error("invalid generator dimensions: {0}")]
    InvalidDims(String),
    #[error(
        "no convergence after {iters} iterations (correctness residual {corr_res:.3e}, \
         fairness residual {fair_res:.3e}); reseeding may help"
    )]
    NoConvergence {
        iters: usize,
        corr_res: f64,
        fair_res: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionTag {
    General,
    FairGeneral,
    FairCyclic,
}

// ---------------------------------------------------------------------------
// GeneratorMatrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorJson", into = "GeneratorJson")]
pub struct GeneratorMatrix {
    pub k: usize,
    pub l: usize,
    pub a: Mat,
    /// Nominal per-key power; present for fair constructions.
    pub lambda2: Option<f64>,
    pub tag: ConstructionTag,
}

/// Condition check for a generator matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    /// Largest absolute column sum.
    pub correctness_residual: f64,
    pub numerical_rank: usize,
    pub rank_required: usize,
    /// Max minus min squared row norm.
    pub fairness_spread: f64,
    pub rows_nonzero: bool,
    pub pass_correctness: bool,
    pub pass_security: bool,
    pub pass_fairness: bool,
}

impl GeneratorMatrix {
    pub fn row_powers(&self) -> Vec<f64> {
        (0..self.k)
            .map(|r| self.a.row(r).iter().map(|v| v * v).sum())
            .collect()
    }
}

/// Check correctness (zero column sums), security (rank K-1) and fairness
/// (equal row powers) at the given tolerance.
///
/// The rank threshold is `max(tol, RANK_REL_TOL)` relative to the largest
/// singular value, so matrices only known to printed precision can be
/// checked with a matching `tol` while constructed matrices still face the
/// strict default. Fairness compares the row-power spread against the mean
/// row power.
pub fn verify_conditions(gm: &GeneratorMatrix, tol: f64) -> ConditionReport {
    let correctness_residual = gm
        .a
        .col_sums()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let numerical_rank = linalg::numerical_rank(&gm.a, tol.max(RANK_REL_TOL));
    let rank_required = gm.k.saturating_sub(1);
    let powers = gm.row_powers();
    let max_p = powers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_p = powers.iter().cloned().fold(f64::INFINITY, f64::min);
    let fairness_spread = max_p - min_p;
    let mean_p = powers.iter().sum::<f64>() / gm.k as f64;
    let rows_nonzero = (0..gm.k)
        .all(|r| gm.a.row(r).iter().any(|v| v.abs() > ROW_NONZERO_MIN));
    ConditionReport {
        correctness_residual,
        numerical_rank,
        rank_required,
        fairness_spread,
        rows_nonzero,
        pass_correctness: correctness_residual <= tol,
        pass_security: numerical_rank == rank_required && rows_nonzero,
        pass_fairness: fairness_spread <= tol * mean_p.max(1.0),
    }
}

// ---------------------------------------------------------------------------
// Constructions
// ---------------------------------------------------------------------------

/// Complete a generator matrix from its first K-1 rows: the last row is the
/// negated column sum, which enforces correctness exactly as computed.
pub fn general_from_rows(free_rows: &Mat) -> Result<GeneratorMatrix, KeyError> {
    let k = free_rows.rows() + 1;
    let l = free_rows.cols();
    if k < 2 {
        return Err(KeyError::InvalidDims("need at least one free row".into()));
    }
    if l + 1 < k {
        return Err(KeyError::InvalidDims(format!(
            "L={l} noise components cannot secure K={k} clients (need L >= K-1)"
        )));
    }
    let mut a = Mat::zeros(k, l);
    for r in 0..k - 1 {
        for c in 0..l {
            a.set(r, c, free_rows.get(r, c));
        }
    }
    for c in 0..l {
        let sum: f64 = (0..k - 1).map(|r| a.get(r, c)).sum();
        a.set(k - 1, c, -sum);
    }
    Ok(GeneratorMatrix {
        k,
        l,
        a,
        lambda2: None,
        tag: ConstructionTag::General,
    })
}

/// Random generator matrix: first K-1 rows standard normal, last row the
/// balancing row. Redraws on the (measure-zero) event of a rank defect.
pub fn construct_general(k: usize, l: usize, seed: u64) -> Result<GeneratorMatrix, KeyError> {
    if k < 2 {
        return Err(KeyError::InvalidDims("K must be at least 2".into()));
    }
    if l + 1 < k {
        return Err(KeyError::InvalidDims(format!(
            "L={l} noise components cannot secure K={k} clients (need L >= K-1)"
        )));
    }
    let mut stream = rng::stream(seed, &[rng::DOMAIN_KEYS, k as u64, l as u64]);
    for attempt in 0..GENERAL_RETRIES {
        let mut free = Mat::zeros(k - 1, l);
        for r in 0..k - 1 {
            for c in 0..l {
                free.set(r, c, rng::normal(&mut stream));
            }
        }
        let gm = general_from_rows(&free)?;
        let report = verify_conditions(&gm, 1e-9);
        if report.pass_security {
            return Ok(gm);
        }
        let _ = attempt;
    }
    Err(KeyError::NoConvergence {
        iters: GENERAL_RETRIES,
        corr_res: 0.0,
        fair_res: f64::NAN,
    })
}

/// Fair generator matrix by alternating projection with `L = K`: project
/// columns onto the zero-sum hyperplane, rescale rows to power `lambda2`,
/// repeat until the correctness residual drops below `tol` (row powers are
/// exact right after a rescale step).
pub fn construct_fair_general(
    k: usize,
    lambda2: f64,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<GeneratorMatrix, KeyError> {
    if k < 2 {
        return Err(KeyError::InvalidDims("K must be at least 2".into()));
    }
    if lambda2 <= 0.0 {
        return Err(KeyError::InvalidDims("lambda2 must be positive".into()));
    }
    let l = k;
    let lambda = lambda2.sqrt();
    let mut stream = rng::stream(seed, &[rng::DOMAIN_KEYS, k as u64, 0xfa12]);
    let mut a = Mat::zeros(k, l);
    for r in 0..k {
        for c in 0..l {
            a.set(r, c, rng::normal(&mut stream));
        }
    }

    let mut corr_res = f64::INFINITY;
    for _iter in 0..max_iter {
        // Columns onto the zero-sum hyperplane.
        for c in 0..l {
            let mean: f64 = (0..k).map(|r| a.get(r, c)).sum::<f64>() / k as f64;
            for r in 0..k {
                let v = a.get(r, c) - mean;
                a.set(r, c, v);
            }
        }
        // Rows onto the power sphere.
        for r in 0..k {
            let norm: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(KeyError::NoConvergence {
                    iters: max_iter,
                    corr_res,
                    fair_res: f64::INFINITY,
                });
            }
            let scale = lambda / norm;
            for v in a.row_mut(r) {
                *v *= scale;
            }
        }
        corr_res = a.col_sums().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if corr_res <= tol {
            let gm = GeneratorMatrix {
                k,
                l,
                a,
                lambda2: Some(lambda2),
                tag: ConstructionTag::FairGeneral,
            };
            if verify_conditions(&gm, tol.max(1e-9)).pass_security {
                return Ok(gm);
            }
            return Err(KeyError::NoConvergence {
                iters: max_iter,
                corr_res,
                fair_res: 0.0,
            });
        }
    }
    Err(KeyError::NoConvergence {
        iters: max_iter,
        corr_res,
        fair_res: 0.0,
    })
}

/// Deterministic cyclic fair construction: row `k` carries `gamma`
/// off-diagonal entries `lambda / sqrt(gamma^2 + gamma)` on the columns
/// `k+1 .. k+gamma (mod K)` and the balancing diagonal
/// `-gamma * lambda / sqrt(gamma^2 + gamma)`.
pub fn construct_fair_cyclic(
    k: usize,
    gamma: usize,
    lambda2: f64,
) -> Result<GeneratorMatrix, KeyError> {
    if k < 2 {
        return Err(KeyError::InvalidDims("K must be at least 2".into()));
    }
    if gamma < 1 || gamma > k - 1 {
        return Err(KeyError::InvalidDims(format!(
            "gamma={gamma} must satisfy 1 <= gamma <= K-1 (rows need at least two nonzeros)"
        )));
    }
    if lambda2 <= 0.0 {
        return Err(KeyError::InvalidDims("lambda2 must be positive".into()));
    }
    let lambda = lambda2.sqrt();
    let g = gamma as f64;
    let off = lambda / (g * g + g).sqrt();
    let diag = -g * off;
    let mut a = Mat::zeros(k, k);
    for row in 0..k {
        a.set(row, row, diag);
        for j in 1..=gamma {
            a.set(row, (row + j) % k, off);
        }
    }
    Ok(GeneratorMatrix {
        k,
        l: k,
        a,
        lambda2: Some(lambda2),
        tag: ConstructionTag::FairCyclic,
    })
}

// ---------------------------------------------------------------------------
// Key sampling
// ---------------------------------------------------------------------------

/// One round's worth of keys: the raw noise components and the mixed
/// per-client keys `N = A * Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretKeySet {
    pub d: usize,
    /// K vectors of length D.
    pub keys: Vec<Vec<f64>>,
    /// L vectors of length D.
    pub components: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Draw `Z_l ~ N(0, I_D)` from the seeded stream and mix with `A`.
pub fn sample_keys(gm: &GeneratorMatrix, d: usize, seed: u64) -> SecretKeySet {
    assert!(d >= 1, "model dimension must be positive");
    let mut stream = rng::stream(seed, &[rng::DOMAIN_KEYS, d as u64]);
    let components: Vec<Vec<f64>> = (0..gm.l).map(|_| rng::normal_vec(&mut stream, d)).collect();
    let keys = (0..gm.k)
        .map(|k| {
            let mut key = vec![0.0; d];
            for l in 0..gm.l {
                let alpha = gm.a.get(k, l);
                if alpha == 0.0 {
                    continue;
                }
                for (out, z) in key.iter_mut().zip(&components[l]) {
                    *out += alpha * z;
                }
            }
            key
        })
        .collect();
    SecretKeySet {
        d,
        keys,
        components,
        seed,
    }
}

// ---------------------------------------------------------------------------
// JSON form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorJson {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda2: Option<f64>,
    tag: ConstructionTag,
}

impl From<GeneratorMatrix> for GeneratorJson {
    fn from(gm: GeneratorMatrix) -> Self {
        GeneratorJson {
            k: gm.k,
            l: gm.l,
            a: gm.a.as_flat().to_vec(),
            lambda2: gm.lambda2,
            tag: gm.tag,
        }
    }
}

impl TryFrom<GeneratorJson> for GeneratorMatrix {
    type Error = String;

    fn try_from(j: GeneratorJson) -> Result<Self, String> {
        if j.a.len() != j.k * j.l {
            return Err(format!(
                "A has {} entries, expected {} x {}",
                j.a.len(),
                j.k,
                j.l
            ));
        }
        Ok(GeneratorMatrix {
            k: j.k,
            l: j.l,
            a: Mat::from_flat(j.k, j.l, j.a),
            lambda2: j.lambda2,
            tag: j.tag,
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
