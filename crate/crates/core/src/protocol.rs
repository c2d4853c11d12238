//! One secure round and full training runs.
//!
//! Per round, every client masks its accumulated update with a fresh secret
//! key, shares the masked vector with the neighbors that listen to it, and
//! relays a weighted partial sum of whatever it decoded to the server. The
//! server picks the first combinator row supported by the complete partial
//! sums that arrived and recovers the exact global update (the keys cancel
//! by the zero-column-sum property), or recovers nothing at all. There is no
//! partially averaged state: a round either updates every client to the same
//! global model or leaves all local models in place.
//!
//! On failure, the default policy lets clients keep training from their own
//! latest local models, growing the accumulation counter `R_t`; a retry
//! policy retransmits the same updates with fresh keys and links instead.
//!
//! The server combines partial sums with compensated summation: key
//! magnitudes can exceed update magnitudes by orders of magnitude, and the
//! cancellation error has to stay far below the recovery tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_code::GcCode;
use crate::linalg::kahan_weighted_sum;
use crate::network::{sample_links, LinkRealization, NetworkModel};
use crate::reliability::{classify_outcome, OutageEvent};
use crate::rng;
use crate::secret_keys::{sample_keys, GeneratorMatrix};
use crate::trainer::{clip_to_ball, local_update, LocalSolver, Objective};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("no successful round at or beyond the threshold within {executed} rounds (cap {cap})")]
    NoSuccessBeforeCap { executed: u64, cap: u64 },
}

/// What to do when the server cannot reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnFailure {
    /// Clients continue local training from their own latest models; the
    /// next transmitted update accumulates all rounds since the last
    /// reconstruction.
    Accumulate,
    /// Clients retransmit the same updates with fresh keys and links.
    Retry,
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Current local model.
    pub theta: Vec<f64>,
    /// Rounds of local training accumulated since the last reconstruction.
    pub accumulated_rounds: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    /// Last reconstructed global model; updates are sent relative to it.
    pub anchor: Vec<f64>,
    pub clients: Vec<ClientState>,
}

impl SystemState {
    pub fn new(initial: Vec<f64>, k: usize) -> Self {
        SystemState {
            clients: (0..k)
                .map(|id| ClientState {
                    id,
                    theta: initial.clone(),
                    accumulated_rounds: 1,
                })
                .collect(),
            anchor: initial,
        }
    }
}

// ---------------------------------------------------------------------------
// Round trace
// ---------------------------------------------------------------------------

/// One relay's partial sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSum {
    pub relay: usize,
    pub value: Vec<f64>,
    /// True iff every support neighbor was decoded.
    pub complete: bool,
    /// Support neighbors actually decoded this round.
    pub decoded_from: Vec<usize>,
}

/// Everything one protocol round produced. Only masked values and partial
/// sums appear here; raw updates never leave the client-local computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub links: LinkRealization,
    /// Masked updates `Y_k` as put on the wire.
    pub masked: Vec<Vec<f64>>,
    pub partials: Vec<PartialSum>,
    /// Clients whose complete partial sum reached the server.
    pub arrived: Vec<usize>,
    pub combinator: Option<usize>,
    /// `(1/K) sum_k c_k S_k`: the recovered global update, when any.
    pub recovered_update: Option<Vec<f64>>,
}

impl RoundTrace {
    pub fn success(&self) -> bool {
        self.combinator.is_some()
    }
}

// ---------------------------------------------------------------------------
// Round primitives
// ---------------------------------------------------------------------------

/// Additive masking: `Y = delta + key`.
pub fn mask_update(delta: &[f64], key: &[f64]) -> Result<Vec<f64>, ProtocolError> {
    if delta.len() != key.len() {
        return Err(ProtocolError::DimMismatch(format!(
            "update has {} coordinates, key has {}",
            delta.len(),
            key.len()
        )));
    }
    Ok(delta.iter().zip(key).map(|(&d, &n)| d + n).collect())
}

/// Relay `k`'s weighted partial sum over the masked updates it decoded.
/// The self-link always succeeds.
pub fn compute_partial_sum(
    k: usize,
    masked: &[Vec<f64>],
    code: &GcCode,
    links: &LinkRealization,
) -> (Vec<f64>, bool) {
    let d = masked.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; d];
    let mut complete = true;
    for &m in &code.support_g[k] {
        if links.tau_inter[k][m] {
            let g = code.g.get(k, m);
            for (acc, &y) in sum.iter_mut().zip(&masked[m]) {
                *acc += g * y;
            }
        } else {
            complete = false;
        }
    }
    (sum, complete)
}

fn combinator_update(code: &GcCode, row: usize, sums: &[PartialSum], d: usize) -> Vec<f64> {
    let terms = sums
        .iter()
        .filter(|p| code.c.get(row, p.relay) != 0.0)
        .map(|p| (code.c.get(row, p.relay), p.value.as_slice()));
    let mut update = kahan_weighted_sum(terms, d);
    let inv_k = 1.0 / code.k as f64;
    for v in &mut update {
        *v *= inv_k;
    }
    update
}

/// Server aggregation over the complete partial sums that arrived: picks the
/// first qualifying combinator and returns the next model
/// `theta_prev + (1/K) sum_k c_k S_k`, or `None` when no row qualifies.
pub fn server_aggregate(
    code: &GcCode,
    partials: &[PartialSum],
    theta_prev: &[f64],
) -> Option<Vec<f64>> {
    let mut arrived = vec![false; code.k];
    for p in partials {
        arrived[p.relay] = true;
    }
    let row = code.select_combinator(&arrived)?;
    let update = combinator_update(code, row, partials, theta_prev.len());
    Some(
        theta_prev
            .iter()
            .zip(&update)
            .map(|(&t, &u)| t + u)
            .collect(),
    )
}

/// Execute the wire protocol for one round, given each client's raw update
/// and key: masking, sharing, relaying, uplink, combinator selection, and
/// recovery.
pub fn execute_round(
    deltas: &[Vec<f64>],
    keys: &[Vec<f64>],
    code: &GcCode,
    links: &LinkRealization,
) -> Result<RoundTrace, ProtocolError> {
    if deltas.len() != code.k || keys.len() != code.k {
        return Err(ProtocolError::DimMismatch(format!(
            "expected {} updates and keys, got {} and {}",
            code.k,
            deltas.len(),
            keys.len()
        )));
    }
    let d = deltas[0].len();
    let masked: Vec<Vec<f64>> = deltas
        .iter()
        .zip(keys)
        .map(|(delta, key)| mask_update(delta, key))
        .collect::<Result<_, _>>()?;

    let partials: Vec<PartialSum> = (0..code.k)
        .map(|k| {
            let (value, complete) = compute_partial_sum(k, &masked, code, links);
            let decoded_from = code.support_g[k]
                .iter()
                .copied()
                .filter(|&m| links.tau_inter[k][m])
                .collect();
            PartialSum {
                relay: k,
                value,
                complete,
                decoded_from,
            }
        })
        .collect();

    let arrived: Vec<usize> = (0..code.k)
        .filter(|&k| partials[k].complete && links.tau_up[k])
        .collect();
    let mut mask = vec![false; code.k];
    for &k in &arrived {
        mask[k] = true;
    }
    let combinator = code.select_combinator(&mask);
    let recovered_update = combinator.map(|row| {
        let received: Vec<PartialSum> = arrived.iter().map(|&k| partials[k].clone()).collect();
        combinator_update(code, row, &received, d)
    });

    Ok(RoundTrace {
        round: links.round,
        links: links.clone(),
        masked,
        partials,
        arrived,
        combinator,
        recovered_update,
    })
}

// ---------------------------------------------------------------------------
// Training rounds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Round threshold T: training ends at the first success at or past it.
    pub t_threshold: u64,
    pub seed: u64,
    pub on_failure: OnFailure,
    /// Optional l2 clipping radius applied to transmitted updates.
    pub clip_radius: Option<f64>,
    /// Keep the full per-round traces (wire values and links).
    pub record_full: bool,
}

/// Per-round summary; `loss` and `grad_norm` are evaluated at the global
/// model entering the round, so averaging `grad_norm^2` over successful
/// rounds yields the left side of the convergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u64,
    pub success: bool,
    pub event: OutageEvent,
    pub loss: f64,
    pub grad_norm: f64,
    pub r_t: u32,
    pub combinator: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<RoundRow>,
    /// Global model after every successful reconstruction.
    pub anchors: Vec<Vec<f64>>,
    /// Number of successful reconstructions.
    pub t_c: usize,
    pub rounds_executed: u64,
    pub final_loss: f64,
    pub final_anchor: Vec<f64>,
    /// Full wire traces when requested.
    pub full: Option<Vec<RoundTrace>>,
}

/// Advance the system by one round: local training, key sampling, masking,
/// sharing, relaying, uplink, and either adoption of the recovered global
/// model or local continuation.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    state: &mut SystemState,
    code: &GcCode,
    genmatrix: &GeneratorMatrix,
    net: &NetworkModel,
    obj: &Objective,
    solver: &LocalSolver,
    seed: u64,
    t: u64,
    clip_radius: Option<f64>,
) -> Result<RoundTrace, ProtocolError> {
    let theta_new: Vec<Vec<f64>> = state
        .clients
        .iter()
        .map(|c| {
            let delta = local_update(
                &c.theta,
                obj,
                c.id,
                solver,
                rng::mix(seed, &[rng::DOMAIN_TRAIN, t]),
            );
            c.theta.iter().zip(&delta).map(|(&x, &d)| x + d).collect()
        })
        .collect();
    let trace = transmit_round(state, &theta_new, code, genmatrix, net, seed, t, clip_radius)?;
    commit_round(state, &trace, &theta_new, OnFailure::Accumulate);
    Ok(trace)
}

/// Mask and transmit the produced local models without mutating state.
#[allow(clippy::too_many_arguments)]
fn transmit_round(
    state: &SystemState,
    theta_new: &[Vec<f64>],
    code: &GcCode,
    genmatrix: &GeneratorMatrix,
    net: &NetworkModel,
    seed: u64,
    t: u64,
    clip_radius: Option<f64>,
) -> Result<RoundTrace, ProtocolError> {
    let d = state.anchor.len();
    let deltas: Vec<Vec<f64>> = theta_new
        .iter()
        .map(|theta| {
            let mut delta: Vec<f64> = theta
                .iter()
                .zip(&state.anchor)
                .map(|(&x, &a)| x - a)
                .collect();
            if let Some(radius) = clip_radius {
                clip_to_ball(&mut delta, radius);
            }
            delta
        })
        .collect();
    let keys = sample_keys(genmatrix, d, rng::mix(seed, &[rng::DOMAIN_KEYS, t]));
    let links = sample_links(net, seed, t);
    execute_round(&deltas, &keys.keys, code, &links)
}

fn commit_round(
    state: &mut SystemState,
    trace: &RoundTrace,
    theta_new: &[Vec<f64>],
    on_failure: OnFailure,
) {
    if let Some(update) = &trace.recovered_update {
        let global: Vec<f64> = state
            .anchor
            .iter()
            .zip(update)
            .map(|(&a, &u)| a + u)
            .collect();
        for c in &mut state.clients {
            c.theta = global.clone();
            c.accumulated_rounds = 1;
        }
        state.anchor = global;
    } else if on_failure == OnFailure::Accumulate {
        for (c, theta) in state.clients.iter_mut().zip(theta_new) {
            c.theta = theta.clone();
            c.accumulated_rounds += 1;
        }
    }
    // Retry keeps the state untouched; the caller resends the same models.
}

/// Run rounds until the round index reaches the threshold and the last
/// executed round reconstructed successfully. A hard cap of ten times the
/// threshold guarantees termination on hopeless networks.
pub fn run_training(
    code: &GcCode,
    genmatrix: &GeneratorMatrix,
    net: &NetworkModel,
    obj: &Objective,
    solver: &LocalSolver,
    opts: &TrainOptions,
) -> Result<TrainingTrace, ProtocolError> {
    let k = code.k;
    let d = obj.dim();
    let cap = opts.t_threshold.saturating_mul(10).max(1);
    let mut state = SystemState::new(vec![0.0; d], k);
    let mut rows = Vec::new();
    let mut anchors = Vec::new();
    let mut full = opts.record_full.then(Vec::new);
    let mut pending: Option<Vec<Vec<f64>>> = None;
    let mut t_c = 0usize;

    for t in 1..=cap {
        let theta_new: Vec<Vec<f64>> = match pending.take() {
            Some(thetas) => thetas,
            None => state
                .clients
                .iter()
                .map(|c| {
                    let delta = local_update(
                        &c.theta,
                        obj,
                        c.id,
                        solver,
                        rng::mix(opts.seed, &[rng::DOMAIN_TRAIN, t]),
                    );
                    c.theta.iter().zip(&delta).map(|(&x, &dl)| x + dl).collect()
                })
                .collect(),
        };

        let loss = obj.global_loss(&state.anchor);
        let grad_norm = obj.global_grad_norm(&state.anchor);
        let r_t = state.clients[0].accumulated_rounds;

        let trace = transmit_round(
            &state,
            &theta_new,
            code,
            genmatrix,
            net,
            opts.seed,
            t,
            opts.clip_radius,
        )?;
        let event = classify_outcome(code, &trace.links);
        let success = trace.success();
        debug_assert_eq!(success, event == OutageEvent::Success);

        rows.push(RoundRow {
            round: t,
            success,
            event,
            loss,
            grad_norm,
            r_t,
            combinator: trace.combinator,
        });

        commit_round(&mut state, &trace, &theta_new, opts.on_failure);
        if success {
            t_c += 1;
            anchors.push(state.anchor.clone());
        } else if opts.on_failure == OnFailure::Retry {
            pending = Some(theta_new);
        }

        if let Some(fulls) = &mut full {
            fulls.push(trace);
        }

        if t >= opts.t_threshold && success {
            let final_loss = obj.global_loss(&state.anchor);
            return Ok(TrainingTrace {
                rows,
                anchors,
                t_c,
                rounds_executed: t,
                final_loss,
                final_anchor: state.anchor,
                full,
            });
        }
    }
    Err(ProtocolError::NoSuccessBeforeCap {
        executed: cap,
        cap,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient_code::build_code;
    use crate::secret_keys::construct_fair_cyclic;
    use crate::trainer::make_quadratic_suite;

    fn zero_keys(k: usize, d: usize) -> Vec<Vec<f64>> {
        vec![vec![0.0; d]; k]
    }

    fn random_deltas(k: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| rng::normal_vec(&mut rng::stream(seed, &[i as u64]), d))
            .collect()
    }

    fn noise_free_mean(deltas: &[Vec<f64>]) -> Vec<f64> {
        let k = deltas.len() as f64;
        let d = deltas[0].len();
        let mut mean = vec![0.0; d];
        for delta in deltas {
            for (m, &v) in mean.iter_mut().zip(delta) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= k;
        }
        mean
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f64, f64::max)
            / scale
    }

    #[test]
    fn execute_round_rejects_wrong_counts() {
        let code = build_code(3, 1, 4).unwrap();
        let links = LinkRealization::perfect(3, 0);
        let err = execute_round(&random_deltas(2, 4, 1), &zero_keys(3, 4), &code, &links);
        assert!(matches!(err, Err(ProtocolError::DimMismatch(_))));
        let err = execute_round(&random_deltas(3, 4, 1), &zero_keys(2, 4), &code, &links);
        assert!(matches!(err, Err(ProtocolError::DimMismatch(_))));
    }

    #[test]
    fn mask_update_arithmetic() {
        assert_eq!(mask_update(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mask_update(&[0.0], &[4.0]).unwrap(), vec![4.0]);
        assert_eq!(
            mask_update(&[1.0, 2.0], &[0.5, -0.5]).unwrap(),
            vec![1.5, 1.5]
        );
        assert!(mask_update(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn partial_sum_follows_support_and_links() {
        let code = build_code(3, 1, 4).unwrap();
        let masked = vec![vec![1.0], vec![10.0], vec![100.0]];
        let all_up = LinkRealization::perfect(3, 0);
        let (sum, complete) = compute_partial_sum(0, &masked, &code, &all_up);
        let expect = code.g.get(0, 0) * 1.0 + code.g.get(0, 1) * 10.0;
        assert!((sum[0] - expect).abs() < 1e-12);
        assert!(complete);

        let mut one_down = all_up.clone();
        one_down.tau_inter[0][1] = false;
        let (sum, complete) = compute_partial_sum(0, &masked, &code, &one_down);
        assert!((sum[0] - code.g.get(0, 0)).abs() < 1e-12);
        assert!(!complete);
    }

    #[test]
    fn s_zero_partial_sums_always_complete() {
        let code = build_code(3, 0, 4).unwrap();
        let masked = vec![vec![2.0], vec![3.0], vec![4.0]];
        let mut links = LinkRealization::perfect(3, 0);
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    links.tau_inter[r][c] = false;
                }
            }
        }
        for k in 0..3 {
            let (sum, complete) = compute_partial_sum(k, &masked, &code, &links);
            assert!(complete);
            assert!((sum[0] - code.g.get(k, k) * masked[k][0]).abs() < 1e-15);
        }
    }

    #[test]
    fn full_participation_zero_keys_averages() {
        let code = build_code(4, 2, 9).unwrap();
        let deltas = random_deltas(4, 6, 3);
        let links = LinkRealization::perfect(4, 0);
        let trace = execute_round(&deltas, &zero_keys(4, 6), &code, &links).unwrap();
        assert_eq!(trace.combinator, Some(0));
        let mean = noise_free_mean(&deltas);
        assert!(rel_err(trace.recovered_update.as_ref().unwrap(), &mean) < 1e-9);
    }

    #[test]
    fn keys_cancel_in_recovery() {
        let code = build_code(5, 2, 9).unwrap();
        let gm = construct_fair_cyclic(5, 2, 6.0).unwrap();
        let deltas = random_deltas(5, 8, 4);
        let keys = sample_keys(&gm, 8, 77);
        let links = LinkRealization::perfect(5, 0);
        let masked_trace = execute_round(&deltas, &keys.keys, &code, &links).unwrap();
        let clean_trace = execute_round(&deltas, &zero_keys(5, 8), &code, &links).unwrap();
        let err = rel_err(
            masked_trace.recovered_update.as_ref().unwrap(),
            clean_trace.recovered_update.as_ref().unwrap(),
        );
        assert!(err < 1e-6, "masking changed the recovery: {err}");
    }

    #[test]
    fn too_few_arrivals_recover_nothing() {
        let code = build_code(4, 1, 2).unwrap();
        let deltas = random_deltas(4, 3, 5);
        let mut links = LinkRealization::perfect(4, 0);
        // K - s - 1 = 2 arrivals only.
        links.tau_up[0] = false;
        links.tau_up[1] = false;
        let trace = execute_round(&deltas, &zero_keys(4, 3), &code, &links).unwrap();
        assert_eq!(trace.arrived.len(), 2);
        assert!(trace.combinator.is_none());
        assert!(trace.recovered_update.is_none());
    }

    #[test]
    fn server_aggregate_adds_to_previous_model() {
        let code = build_code(3, 1, 8).unwrap();
        let deltas = random_deltas(3, 4, 6);
        let links = LinkRealization::perfect(3, 0);
        let trace = execute_round(&deltas, &zero_keys(3, 4), &code, &links).unwrap();
        let received: Vec<PartialSum> = trace
            .arrived
            .iter()
            .map(|&k| trace.partials[k].clone())
            .collect();
        let theta_prev = vec![1.0, -1.0, 0.5, 2.0];
        let next = server_aggregate(&code, &received, &theta_prev).unwrap();
        let update = trace.recovered_update.unwrap();
        for i in 0..4 {
            assert!((next[i] - (theta_prev[i] + update[i])).abs() < 1e-12);
        }
        assert!(server_aggregate(&code, &received[..1], &theta_prev).is_none());
    }

    #[test]
    fn perfect_network_matches_centralized_recursion() {
        let k = 4;
        let obj = make_quadratic_suite(5, k, 0.5, 1.5, 1.0, true, 2);
        let code = build_code(k, 2, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.0, 0.0).unwrap();
        let solver = LocalSolver {
            a: vec![1.0; 3],
            eta: 0.05,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: 10,
            seed: 42,
            on_failure: OnFailure::Accumulate,
            clip_radius: None,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
        assert_eq!(trace.rounds_executed, 10);
        assert_eq!(trace.t_c, 10);

        // Centralized reference: everyone averages every round.
        let mut theta = vec![0.0; 5];
        for t in 1..=10u64 {
            let deltas: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    local_update(&theta, &obj, c, &solver, rng::mix(42, &[rng::DOMAIN_TRAIN, t]))
                })
                .collect();
            let mean = noise_free_mean(&deltas);
            for (x, m) in theta.iter_mut().zip(&mean) {
                *x += m;
            }
        }
        assert!(rel_err(&trace.final_anchor, &theta) < 1e-6);
    }

    #[test]
    fn dead_uplinks_mean_pure_local_training() {
        let k = 3;
        let obj = make_quadratic_suite(2, k, 1.0, 1.0, 1.0, true, 7);
        let code = build_code(k, 1, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 1.0, 0.0).unwrap();
        let solver = LocalSolver {
            a: vec![1.0],
            eta: 0.1,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: 3,
            seed: 1,
            on_failure: OnFailure::Accumulate,
            clip_radius: None,
            record_full: false,
        };
        let err = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap_err();
        assert!(matches!(err, ProtocolError::NoSuccessBeforeCap { .. }));
    }

    #[test]
    fn failure_increments_accumulation_and_success_resets() {
        let k = 3;
        let obj = make_quadratic_suite(2, k, 1.0, 1.0, 1.0, true, 7);
        let code = build_code(k, 1, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.5, 0.2).unwrap();
        let solver = LocalSolver {
            a: vec![1.0, 1.0],
            eta: 0.05,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: 40,
            seed: 3,
            on_failure: OnFailure::Accumulate,
            clip_radius: None,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
        let mut expected_r = 1;
        for row in &trace.rows {
            assert_eq!(row.r_t, expected_r);
            expected_r = if row.success { 1 } else { expected_r + 1 };
        }
        assert!(trace.rows.iter().any(|r| !r.success), "want some failures");
        assert!(trace.rows.iter().any(|r| r.success), "want some successes");
    }

    #[test]
    fn retry_mode_keeps_r_at_one() {
        let k = 3;
        let obj = make_quadratic_suite(2, k, 1.0, 1.0, 1.0, true, 7);
        let code = build_code(k, 1, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.5, 0.2).unwrap();
        let solver = LocalSolver {
            a: vec![1.0],
            eta: 0.05,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: 30,
            seed: 3,
            on_failure: OnFailure::Retry,
            clip_radius: None,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
        assert!(trace.rows.iter().all(|r| r.r_t == 1));
        assert!(trace.rows.iter().any(|r| !r.success));
    }

    #[test]
    fn trajectory_independent_of_key_power() {
        let k = 5;
        let obj = make_quadratic_suite(4, k, 0.5, 2.0, 1.0, true, 10);
        let code = build_code(k, 2, 6).unwrap();
        let net = NetworkModel::uniform(k, 0.4, 0.1).unwrap();
        let solver = LocalSolver {
            a: vec![1.0, 1.0],
            eta: 0.05,
            batch: None,
        };
        let mut anchors = Vec::new();
        for lambda2 in [0.01, 1.0, 100.0] {
            let gm = construct_fair_cyclic(k, 2, lambda2).unwrap();
            let opts = TrainOptions {
                t_threshold: 20,
                seed: 5,
                on_failure: OnFailure::Accumulate,
                clip_radius: None,
                record_full: false,
            };
            let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
            anchors.push(trace.anchors);
        }
        for other in &anchors[1..] {
            assert_eq!(other.len(), anchors[0].len());
            for (a, b) in anchors[0].iter().zip(other) {
                assert!(rel_err(b, a) <= 1e-5, "trajectories diverged");
            }
        }
    }

    #[test]
    fn quadratic_run_approaches_known_optimum() {
        let k = 4;
        let obj = make_quadratic_suite(3, k, 0.8, 1.2, 1.0, true, 20);
        let code = build_code(k, 1, 2).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.0, 0.0).unwrap();
        let solver = LocalSolver {
            a: vec![1.0; 4],
            eta: 0.08,
            batch: None,
        };
        let opts = TrainOptions {
            t_threshold: 60,
            seed: 8,
            on_failure: OnFailure::Accumulate,
            clip_radius: None,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
        let opt = obj.known_optimum().unwrap();
        let err: f64 = trace
            .final_anchor
            .iter()
            .zip(opt)
            .map(|(&a, &o)| (a - o).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "distance to optimum {err}");
    }

    #[test]
    fn termination_follows_the_geometric_tail() {
        // With outage probability near one half, the expected number of
        // executed rounds is T + P/(1-P); successes coincide with rows that
        // carry a combinator index.
        use crate::reliability::outage_exact;
        let k = 3;
        let obj = make_quadratic_suite(2, k, 1.0, 1.0, 0.5, true, 7);
        let code = build_code(k, 1, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.35, 0.25).unwrap();
        let p_o = outage_exact(&code, &net).unwrap().p_outage;
        assert!((0.3..0.7).contains(&p_o), "p_o = {p_o}");
        let solver = LocalSolver {
            a: vec![1.0],
            eta: 0.05,
            batch: None,
        };
        let runs = 60u64;
        let mut total_rounds = 0u64;
        for seed in 0..runs {
            let opts = TrainOptions {
                t_threshold: 10,
                seed,
                on_failure: OnFailure::Accumulate,
                clip_radius: None,
                record_full: false,
            };
            let trace = run_training(&code, &gm, &net, &obj, &solver, &opts).unwrap();
            total_rounds += trace.rounds_executed;
            let hits = trace.rows.iter().filter(|r| r.combinator.is_some()).count();
            assert_eq!(hits, trace.t_c);
            assert_eq!(
                trace.rows.iter().filter(|r| r.success).count(),
                trace.t_c
            );
        }
        let mean = total_rounds as f64 / runs as f64;
        let expect = 10.0 + p_o / (1.0 - p_o);
        assert!(
            (mean - expect).abs() < 1.0,
            "mean rounds {mean} vs expected {expect}"
        );
    }

    #[test]
    fn run_round_mutates_state_consistently() {
        let k = 3;
        let obj = make_quadratic_suite(2, k, 1.0, 1.0, 1.0, true, 7);
        let code = build_code(k, 1, 1).unwrap();
        let gm = construct_fair_cyclic(k, 1, 1.0).unwrap();
        let net = NetworkModel::uniform(k, 0.0, 0.0).unwrap();
        let solver = LocalSolver {
            a: vec![1.0],
            eta: 0.1,
            batch: None,
        };
        let mut state = SystemState::new(vec![0.0; 2], k);
        let trace = run_round(&mut state, &code, &gm, &net, &obj, &solver, 7, 1, None).unwrap();
        assert!(trace.success());
        for c in &state.clients {
            assert_eq!(c.theta, state.anchor);
            assert_eq!(c.accumulated_rounds, 1);
        }
    }
}
