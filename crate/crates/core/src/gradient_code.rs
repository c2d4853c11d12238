//! Cyclic gradient-code construction: the allocation/combination pair (G, C)
//! with `C * G = 1` and server-side combinator selection.
//!
//! Row `k` of `G` is supported on the cyclic window `{k, k+1, ..., k+s}`
//! (self plus `s` neighbors). Each row of `C` zeroes out one of the
//! `binomial(K, s)` straggler patterns, and any `K - s` surviving rows of
//! `G` span the all-ones vector, so a qualifying combinator always exists
//! once at least `K - s` complete partial sums arrive.
//!
//! Coefficients come from a seeded standard-normal stream. The rows of `G`
//! are anchored to the nullspace of a random zero-row-sum matrix, which
//! keeps the all-ones vector inside the span of every surviving-row subset;
//! per-pattern combinators are then obtained by linear solves, with bounded
//! redraws if a draw happens to be degenerate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::rng;

/// Default cap on the combinator count `f = binomial(K, s)`.
pub const DEFAULT_COMBINATOR_CAP: u128 = 100_000;
/// Default number of coefficient redraws before giving up.
pub const DEFAULT_RETRIES: usize = 16;
/// Entries smaller than this are not accepted as support coefficients.
const SUPPORT_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodeError {
    #[error("invalid code parameters: {0}")]
    InvalidParams(String),
    #[error("combinator count {f} exceeds cap {cap}")]
    CapExceeded { f: u128, cap: u128 },
    #[error("no valid code after {retries} coefficient redraws")]
    UnsolvableCode { retries: usize },
}

/// `n choose k` without overflow, or `None` if it exceeds `u128`.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

// ---------------------------------------------------------------------------
// GcCode
// ---------------------------------------------------------------------------

/// A gradient-code pair: `g` is the K x K allocation matrix, `c` the
/// f x K combination matrix with `c * g = 1` up to solver tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodeJson", into = "CodeJson")]
pub struct GcCode {
    pub k: usize,
    pub s: usize,
    pub f: usize,
    pub g: Mat,
    pub c: Mat,
    /// Nonzero column indices of each row of `g`, in cyclic order.
    pub support_g: Vec<Vec<usize>>,
    /// Zero pattern (straggler set) of each row of `c`, sorted ascending.
    pub zero_patterns: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Result of checking `C * G = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeCheck {
    pub ok: bool,
    pub max_error: f64,
    pub worst_row: usize,
    pub worst_col: usize,
}

impl GcCode {
    /// Smallest combinator row whose nonzero support is contained in
    /// `arrived` (a length-K membership mask), or `None`.
    pub fn select_combinator(&self, arrived: &[bool]) -> Option<usize> {
        assert_eq!(arrived.len(), self.k, "arrived mask length mismatch");
        'rows: for (row, pattern) in self.zero_patterns.iter().enumerate() {
            let mut p = pattern.iter().peekable();
            for k in 0..self.k {
                if p.peek() == Some(&&k) {
                    p.next();
                    continue; // zeroed in this row, arrival irrelevant
                }
                if !arrived[k] {
                    continue 'rows;
                }
            }
            return Some(row);
        }
        None
    }

    /// Max-abs deviation of `C * G` from the all-ones matrix.
    pub fn verify(&self, tol: f64) -> CodeCheck {
        let prod = self.c.matmul(&self.g);
        let mut max_error = 0.0;
        let (mut worst_row, mut worst_col) = (0, 0);
        for r in 0..prod.rows() {
            for c in 0..prod.cols() {
                let e = (prod.get(r, c) - 1.0).abs();
                if e > max_error {
                    max_error = e;
                    worst_row = r;
                    worst_col = c;
                }
            }
        }
        CodeCheck {
            ok: max_error <= tol,
            max_error,
            worst_row,
            worst_col,
        }
    }
}

fn cyclic_support(k: usize, s: usize, row: usize) -> Vec<usize> {
    (0..=s).map(|j| (row + j) % k).collect()
}

/// All size-`s` subsets of `0..k` in lexicographic order.
fn zero_patterns(k: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(s);
    fn rec(start: usize, k: usize, s: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == s {
            out.push(current.clone());
            return;
        }
        let remaining = s - current.len();
        for i in start..=k - remaining {
            current.push(i);
            rec(i + 1, k, s, current, out);
            current.pop();
        }
    }
    rec(0, k, s, &mut current, &mut out);
    out
}

/// Solve the combinator row for every zero pattern against a given `g`.
///
/// For pattern `P` the surviving rows `S = [K] \ P` must yield coefficients
/// with `sum_{i in S} c_i * g_i = 1` on all K columns; the system is
/// overdetermined but consistent when `g` is valid.
pub fn combinator_rows(g: &Mat, s: usize) -> Result<Mat, CodeError> {
    let k = g.rows();
    let patterns = zero_patterns(k, s);
    let mut c = Mat::zeros(patterns.len(), k);
    for (row, pattern) in patterns.iter().enumerate() {
        let survivors: Vec<usize> = (0..k).filter(|i| !pattern.contains(i)).collect();
        // a[col][j] = g[survivors[j]][col], rhs = ones
        let mut a = Mat::zeros(k, survivors.len());
        for (j, &srow) in survivors.iter().enumerate() {
            for col in 0..k {
                a.set(col, j, g.get(srow, col));
            }
        }
        let coeffs = linalg::solve_overdetermined(&a, &vec![1.0; k])
            .map_err(|e| CodeError::InvalidParams(format!("pattern {pattern:?}: {e}")))?;
        for (j, &srow) in survivors.iter().enumerate() {
            c.set(row, srow, coeffs[j]);
        }
    }
    Ok(c)
}

/// Build a code with default cap and retry budget.
pub fn build_code(k: usize, s: usize, seed: u64) -> Result<GcCode, CodeError> {
    build_code_with(k, s, seed, DEFAULT_COMBINATOR_CAP, DEFAULT_RETRIES)
}

/// Build a code with explicit combinator cap and redraw budget.
pub fn build_code_with(
    k: usize,
    s: usize,
    seed: u64,
    cap: u128,
    retries: usize,
) -> Result<GcCode, CodeError> {
    if k < 1 {
        return Err(CodeError::InvalidParams("K must be at least 1".into()));
    }
    if s >= k {
        return Err(CodeError::InvalidParams(format!(
            "straggler tolerance s={s} must satisfy 0 <= s < K={k}"
        )));
    }
    let f128 = binomial(k, s).ok_or(CodeError::CapExceeded {
        f: u128::MAX,
        cap,
    })?;
    if f128 > cap {
        return Err(CodeError::CapExceeded { f: f128, cap });
    }
    let f = f128 as usize;

    let mut rng = rng::stream(seed, &[rng::DOMAIN_CODE, k as u64, s as u64]);
    let patterns = zero_patterns(k, s);

    'attempt: for _attempt in 0..retries.max(1) {
        // Random s x K matrix with zero row sums; its nullspace has
        // dimension K - s and contains the all-ones vector.
        let mut h = Mat::zeros(s, k);
        for r in 0..s {
            let mut sum = 0.0;
            for c in 0..k - 1 {
                let v = rng::normal(&mut rng);
                h.set(r, c, v);
                sum += v;
            }
            h.set(r, k - 1, -sum);
        }

        let mut g = Mat::zeros(k, k);
        for row in 0..k {
            let support = cyclic_support(k, s, row);
            // Null vector of the s x (s+1) submatrix, anchored at 1 on the
            // first support column.
            let coeffs = if s == 0 {
                vec![1.0]
            } else {
                let mut sub = Mat::zeros(s, s);
                let mut rhs = vec![0.0; s];
                for r in 0..s {
                    rhs[r] = -h.get(r, support[0]);
                    for (j, &col) in support[1..].iter().enumerate() {
                        sub.set(r, j, h.get(r, col));
                    }
                }
                match linalg::solve_square(&sub, &rhs) {
                    Ok(x) => {
                        let mut v = Vec::with_capacity(s + 1);
                        v.push(1.0);
                        v.extend(x);
                        v
                    }
                    Err(_) => continue 'attempt,
                }
            };
            // Random row scale; rejected near zero so support stays visible.
            let mut scale = rng::normal(&mut rng);
            while scale.abs() < 1e-3 {
                scale = rng::normal(&mut rng);
            }
            if coeffs.iter().any(|v| (v * scale).abs() <= SUPPORT_MIN) {
                continue 'attempt;
            }
            for (j, &col) in support.iter().enumerate() {
                g.set(row, col, coeffs[j] * scale);
            }
        }

        let c = match combinator_rows(&g, s) {
            Ok(c) => c,
            Err(_) => continue 'attempt,
        };
        let code = GcCode {
            k,
            s,
            f,
            g,
            c,
            support_g: (0..k).map(|row| cyclic_support(k, s, row)).collect(),
            zero_patterns: patterns.clone(),
            seed,
        };
        if code.verify(1e-9).ok {
            return Ok(code);
        }
    }
    Err(CodeError::UnsolvableCode { retries })
}

// ---------------------------------------------------------------------------
// JSON form
// ---------------------------------------------------------------------------

/// Wire schema: matrices flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodeJson {
    #[serde(rename = "K")]
    k: usize,
    s: usize,
    #[serde(rename = "G")]
    g: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<f64>,
    seed: u64,
}

impl From<GcCode> for CodeJson {
    fn from(code: GcCode) -> Self {
        CodeJson {
            k: code.k,
            s: code.s,
            g: code.g.as_flat().to_vec(),
            c: code.c.as_flat().to_vec(),
            seed: code.seed,
        }
    }
}

impl TryFrom<CodeJson> for GcCode {
    type Error = String;

    fn try_from(j: CodeJson) -> Result<Self, String> {
        if j.k == 0 {
            return Err("K must be positive".into());
        }
        if j.g.len() != j.k * j.k {
            return Err(format!("G has {} entries, expected {}", j.g.len(), j.k * j.k));
        }
        if j.c.is_empty() || j.c.len() % j.k != 0 {
            return Err(format!("C has {} entries, not a multiple of K={}", j.c.len(), j.k));
        }
        let f = j.c.len() / j.k;
        let expected_f = binomial(j.k, j.s).ok_or("binomial overflow")?;
        if f as u128 != expected_f {
            return Err(format!("C has {f} rows, expected binomial(K, s) = {expected_f}"));
        }
        Ok(GcCode {
            k: j.k,
            s: j.s,
            f,
            g: Mat::from_flat(j.k, j.k, j.g),
            c: Mat::from_flat(f, j.k, j.c),
            support_g: (0..j.k).map(|row| cyclic_support(j.k, j.s, row)).collect(),
            zero_patterns: zero_patterns(j.k, j.s),
            seed: j.seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(k: usize, arrived: &[usize]) -> Vec<bool> {
        let mut m = vec![false; k];
        for &i in arrived {
            m[i] = true;
        }
        m
    }

    #[test]
    fn s_zero_gives_diagonal_code() {
        let code = build_code(3, 0, 11).unwrap();
        assert_eq!(code.f, 1);
        for r in 0..3 {
            for c in 0..3 {
                if r == c {
                    assert!(code.g.get(r, c).abs() > 1e-6);
                    // single combinator row holds the reciprocals
                    assert!((code.c.get(0, c) - 1.0 / code.g.get(c, c)).abs() < 1e-12);
                } else {
                    assert_eq!(code.g.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn combinators_for_reference_allocation() {
        // Hand-checkable K=3, s=1 allocation; each pattern's solve has a
        // unique solution, so rows are pinned exactly.
        let g = Mat::from_rows(&[
            vec![0.5, 1.0, 0.0],
            vec![0.0, 1.0, -1.0],
            vec![0.5, 0.0, 1.0],
        ]);
        let c = combinator_rows(&g, 1).unwrap();
        let expect = [
            (vec![0], [0.0, 1.0, 2.0]),
            (vec![1], [1.0, 0.0, 1.0]),
            (vec![2], [2.0, -1.0, 0.0]),
        ];
        for (pattern, row) in &expect {
            let idx = zero_patterns(3, 1)
                .iter()
                .position(|p| p == pattern)
                .unwrap();
            for col in 0..3 {
                assert!(
                    (c.get(idx, col) - row[col]).abs() < 1e-9,
                    "pattern {pattern:?} col {col}"
                );
            }
        }
        // Brute-force the product.
        let prod = c.matmul(&g);
        for r in 0..3 {
            for col in 0..3 {
                assert!((prod.get(r, col) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn k5_s2_code_is_valid() {
        let code = build_code(5, 2, 3).unwrap();
        assert_eq!(code.f, 10);
        assert!(code.verify(1e-9).ok);
        for row in 0..code.f {
            let zeros = (0..5).filter(|&c| code.c.get(row, c) == 0.0).count();
            assert_eq!(zeros, 2, "row {row} zero count");
        }
        // All ten zero patterns distinct.
        let mut patterns = code.zero_patterns.clone();
        patterns.dedup();
        assert_eq!(patterns.len(), 10);
    }

    #[test]
    fn select_combinator_smallest_row_wins() {
        let code = build_code(4, 2, 5).unwrap();
        assert_eq!(code.select_combinator(&[true; 4]), Some(0));
    }

    #[test]
    fn select_combinator_matches_pattern() {
        let code = build_code(3, 1, 2).unwrap();
        // arrived = {0, 2}: only the row zeroing client 1 qualifies.
        let row = code.select_combinator(&mask(3, &[0, 2])).unwrap();
        assert_eq!(code.zero_patterns[row], vec![1]);
        // Too few arrivals: |arrived| < K - s = 2.
        assert_eq!(code.select_combinator(&mask(3, &[1])), None);
    }

    #[test]
    fn select_combinator_support_in_arrived() {
        let code = build_code(6, 3, 9).unwrap();
        for bits in 0..(1u32 << 6) {
            let arrived: Vec<bool> = (0..6).map(|i| bits >> i & 1 == 1).collect();
            let n = arrived.iter().filter(|&&b| b).count();
            match code.select_combinator(&arrived) {
                Some(row) => {
                    for col in 0..6 {
                        if code.c.get(row, col) != 0.0 {
                            assert!(arrived[col], "support outside arrived set");
                        }
                    }
                }
                None => assert!(n < 3, "combinator must exist once K-s arrive"),
            }
        }
    }

    #[test]
    fn verify_flags_perturbation() {
        let mut code = build_code(4, 1, 1).unwrap();
        assert!(code.verify(1e-9).ok);
        let v = code.g.get(1, 1);
        code.g.set(1, 1, v + 0.1);
        let check = code.verify(1e-9);
        assert!(!check.ok);
        assert!(check.max_error > 1e-3);
    }

    #[test]
    fn identity_case_single_client() {
        let code = build_code(1, 0, 42).unwrap();
        assert!(code.verify(1e-9).ok);
        assert!((code.c.get(0, 0) - 1.0 / code.g.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = build_code(7, 3, 31).unwrap();
        let b = build_code(7, 3, 31).unwrap();
        assert_eq!(a.g.as_flat(), b.g.as_flat());
        assert_eq!(a.c.as_flat(), b.c.as_flat());
        let c = build_code(7, 3, 32).unwrap();
        assert_ne!(a.g.as_flat(), c.g.as_flat());
    }

    #[test]
    fn cap_and_param_errors() {
        assert!(matches!(
            build_code_with(20, 10, 0, 1000, 4),
            Err(CodeError::CapExceeded { .. })
        ));
        assert!(matches!(build_code(3, 3, 0), Err(CodeError::InvalidParams(_))));
        assert!(matches!(build_code(0, 0, 0), Err(CodeError::InvalidParams(_))));
    }

    #[test]
    fn json_roundtrip() {
        let code = build_code(5, 2, 17).unwrap();
        let text = serde_json::to_string(&code).unwrap();
        assert!(text.contains("\"K\":5"));
        let back: GcCode = serde_json::from_str(&text).unwrap();
        assert_eq!(code, back);
    }
}
