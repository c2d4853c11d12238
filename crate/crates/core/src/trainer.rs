//! Local objectives and solvers: per-client quadratics or synthetic logistic
//! tasks, gradient accumulation with an arbitrary weight vector, and
//! Dirichlet-partitioned heterogeneous data synthesis.
//!
//! The global objective is the uniform average of the K local objectives.
//! Quadratic suites use diagonal positive-definite curvatures, so the global
//! optimum is available in closed form and full-batch gradients are exact;
//! logistic suites draw class-conditional Gaussian features with per-client
//! class proportions from a Dirichlet distribution, and support minibatches.

use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Concentration parameters above this are clamped; the proportions are
/// indistinguishable from uniform well before it.
pub const MAX_CONCENTRATION: f64 = 1e6;

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// One client's quadratic: `L_k(theta) = 0.5 * sum_i q_i (theta_i - t_i)^2`
/// with `q` diagonal positive definite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticClient {
    pub curvature: Vec<f64>,
    pub target: Vec<f64>,
}

/// One client's binary logistic task on a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticClient {
    /// n x d feature rows.
    pub features: Vec<Vec<f64>>,
    /// Labels in {0, 1}.
    pub labels: Vec<u8>,
    /// Class proportions this client was assigned.
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Quadratic {
        d: usize,
        clients: Vec<QuadraticClient>,
        known_optimum: Vec<f64>,
    },
    Logistic {
        d: usize,
        clients: Vec<LogisticClient>,
    },
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic { d, .. } | Objective::Logistic { d, .. } => *d,
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            Objective::Quadratic { clients, .. } => clients.len(),
            Objective::Logistic { clients, .. } => clients.len(),
        }
    }

    pub fn known_optimum(&self) -> Option<&[f64]> {
        match self {
            Objective::Quadratic { known_optimum, .. } => Some(known_optimum),
            Objective::Logistic { .. } => None,
        }
    }

    pub fn local_loss(&self, k: usize, theta: &[f64]) -> f64 {
        match self {
            Objective::Quadratic { clients, .. } => {
                let c = &clients[k];
                0.5 * theta
                    .iter()
                    .zip(&c.curvature)
                    .zip(&c.target)
                    .map(|((&x, &q), &t)| q * (x - t) * (x - t))
                    .sum::<f64>()
            }
            Objective::Logistic { clients, .. } => {
                let c = &clients[k];
                let n = c.features.len() as f64;
                c.features
                    .iter()
                    .zip(&c.labels)
                    .map(|(x, &y)| logistic_sample_loss(theta, x, y))
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Full-batch local gradient.
    pub fn local_grad(&self, k: usize, theta: &[f64]) -> Vec<f64> {
        match self {
            Objective::Quadratic { clients, .. } => {
                let c = &clients[k];
                theta
                    .iter()
                    .zip(&c.curvature)
                    .zip(&c.target)
                    .map(|((&x, &q), &t)| q * (x - t))
                    .collect()
            }
            Objective::Logistic { clients, .. } => {
                let c = &clients[k];
                let idx: Vec<usize> = (0..c.features.len()).collect();
                logistic_grad(theta, c, &idx)
            }
        }
    }

    /// Stochastic local gradient on a batch of `n_p` samples. Quadratics
    /// have no data, so the gradient is always exact; logistic tasks draw
    /// the batch indices from the supplied stream. `n_p = 0` or a batch at
    /// least the dataset size means full batch.
    pub fn local_grad_batch(
        &self,
        k: usize,
        theta: &[f64],
        n_p: usize,
        stream: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        match self {
            Objective::Quadratic { .. } => self.local_grad(k, theta),
            Objective::Logistic { clients, .. } => {
                let c = &clients[k];
                let n = c.features.len();
                if n_p == 0 || n_p >= n {
                    return self.local_grad(k, theta);
                }
                let idx: Vec<usize> = (0..n_p).map(|_| stream.random_range(0..n)).collect();
                logistic_grad(theta, c, &idx)
            }
        }
    }

    /// `(1/K) sum_k L_k(theta)`.
    pub fn global_loss(&self, theta: &[f64]) -> f64 {
        let k = self.num_clients() as f64;
        (0..self.num_clients())
            .map(|i| self.local_loss(i, theta))
            .sum::<f64>()
            / k
    }

    /// `(1/K) sum_k grad L_k(theta)`.
    pub fn global_grad(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.num_clients() as f64;
        let mut g = vec![0.0; self.dim()];
        for i in 0..self.num_clients() {
            for (acc, v) in g.iter_mut().zip(self.local_grad(i, theta)) {
                *acc += v;
            }
        }
        for v in &mut g {
            *v /= k;
        }
        g
    }

    pub fn global_grad_norm(&self, theta: &[f64]) -> f64 {
        self.global_grad(theta).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Smoothness constant of the local objectives. Exact for diagonal
    /// quadratics (largest curvature); for logistic tasks an upper bound via
    /// the Frobenius norm of the feature matrix.
    pub fn smoothness(&self) -> f64 {
        match self {
            Objective::Quadratic { clients, .. } => clients
                .iter()
                .flat_map(|c| c.curvature.iter())
                .fold(0.0f64, |m, &q| m.max(q)),
            Objective::Logistic { clients, .. } => clients
                .iter()
                .map(|c| {
                    let frob: f64 = c.features.iter().flatten().map(|v| v * v).sum();
                    0.25 * frob / c.features.len().max(1) as f64
                })
                .fold(0.0f64, f64::max),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_sample_loss(theta: &[f64], x: &[f64], y: u8) -> f64 {
    let z: f64 = theta.iter().zip(x).map(|(&t, &v)| t * v).sum();
    // Numerically stable cross-entropy: log(1 + e^{-|z|}) + max(z, 0) - y z.
    let soft = (-z.abs()).exp().ln_1p() + z.max(0.0);
    soft - f64::from(y) * z
}

fn logistic_grad(theta: &[f64], c: &LogisticClient, idx: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for &i in idx {
        let x = &c.features[i];
        let z: f64 = theta.iter().zip(x).map(|(&t, &v)| t * v).sum();
        let err = sigmoid(z) - f64::from(c.labels[i]);
        for (acc, &v) in g.iter_mut().zip(x) {
            *acc += err * v;
        }
    }
    let n = idx.len().max(1) as f64;
    for v in &mut g {
        *v /= n;
    }
    g
}

// ---------------------------------------------------------------------------
// Local solver
// ---------------------------------------------------------------------------

/// Iteration weights, learning rate, and batch size for the local solver.
/// `a.len()` is the number of local iterations per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSolver {
    pub a: Vec<f64>,
    pub eta: f64,
    /// Samples per stochastic batch; `None` means full batch.
    pub batch: Option<usize>,
}

impl LocalSolver {
    pub fn iterations(&self) -> usize {
        self.a.len()
    }

    pub fn a_l1(&self) -> f64 {
        self.a.iter().map(|v| v.abs()).sum()
    }
}

/// Run the weighted local recursion
/// `theta_i = theta_{i-1} - eta * a_i * grad(theta_{i-1})`
/// and return the accumulated update `theta_I - theta_0`.
pub fn local_update(
    theta0: &[f64],
    obj: &Objective,
    client: usize,
    solver: &LocalSolver,
    seed: u64,
) -> Vec<f64> {
    let mut theta = theta0.to_vec();
    let mut stream = rng::stream(seed, &[rng::DOMAIN_TRAIN, client as u64]);
    let n_p = solver.batch.unwrap_or(0);
    for &a_i in &solver.a {
        let grad = obj.local_grad_batch(client, &theta, n_p, &mut stream);
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= solver.eta * a_i * g;
        }
    }
    theta.iter().zip(theta0).map(|(&t, &t0)| t - t0).collect()
}

/// Scale `v` into the l2 ball of the given radius (no-op when inside).
pub fn clip_to_ball(v: &mut [f64], radius: f64) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius && norm > 0.0 {
        let scale = radius / norm;
        for x in v {
            *x *= scale;
        }
    }
}

// ---------------------------------------------------------------------------
// Heterogeneous data synthesis
// ---------------------------------------------------------------------------

/// Per-client class proportions drawn from a symmetric Dirichlet with
/// concentration `gamma` (clamped to `MAX_CONCENTRATION`). Each client's
/// proportions sum to exactly 1.
pub fn dirichlet_proportions(
    n_classes: usize,
    k_clients: usize,
    gamma: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    assert!(gamma > 0.0, "concentration must be positive");
    assert!(n_classes >= 1 && k_clients >= 1);
    let gamma = gamma.min(MAX_CONCENTRATION);
    let dist = Gamma::new(gamma, 1.0).expect("valid gamma shape");
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, n_classes as u64, k_clients as u64]);
    (0..k_clients)
        .map(|_| {
            let mut draws: Vec<f64> = (0..n_classes)
                .map(|_| {
                    // A zero draw (possible at tiny gamma from underflow)
                    // would break normalization.
                    loop {
                        let g: f64 = dist.sample(&mut stream);
                        if g > 0.0 && g.is_finite() {
                            return g;
                        }
                    }
                })
                .collect();
            let total: f64 = draws.iter().sum();
            for d in &mut draws {
                *d /= total;
            }
            let head: f64 = draws[..n_classes - 1].iter().sum();
            draws[n_classes - 1] = 1.0 - head;
            draws
        })
        .collect()
}

/// Integer per-class sample counts for each client: proportions scaled to
/// `n_per_client` and rounded by largest remainder, so every client holds
/// exactly the same number of samples.
pub fn dirichlet_partition(
    n_classes: usize,
    k_clients: usize,
    gamma: f64,
    n_per_client: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let proportions = dirichlet_proportions(n_classes, k_clients, gamma, seed);
    let counts = proportions
        .iter()
        .map(|props| {
            let raw: Vec<f64> = props.iter().map(|p| p * n_per_client as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
            let mut short = n_per_client - counts.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..n_classes).collect();
            order.sort_by(|&a, &b| {
                let ra = raw[a] - raw[a].floor();
                let rb = raw[b] - raw[b].floor();
                rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
            });
            for &c in &order {
                if short == 0 {
                    break;
                }
                counts[c] += 1;
                short -= 1;
            }
            counts
        })
        .collect();
    (proportions, counts)
}

/// Synthetic two-class logistic suite: labels follow each client's Dirichlet
/// proportions, features are class-conditional Gaussians at `-mu` / `+mu`.
pub fn synthesize_logistic(
    d: usize,
    k_clients: usize,
    gamma: f64,
    n_per_client: usize,
    feature_spread: f64,
    seed: u64,
) -> Objective {
    let (proportions, counts) = dirichlet_partition(2, k_clients, gamma, n_per_client, seed);
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, d as u64, 2]);
    let mu: Vec<f64> = rng::normal_vec(&mut stream, d)
        .into_iter()
        .map(|v| v * feature_spread / (d as f64).sqrt())
        .collect();
    let clients = (0..k_clients)
        .map(|k| {
            let mut features = Vec::with_capacity(n_per_client);
            let mut labels = Vec::with_capacity(n_per_client);
            for (class, &count) in counts[k].iter().enumerate() {
                let sign = if class == 0 { -1.0 } else { 1.0 };
                for _ in 0..count {
                    let x: Vec<f64> = rng::normal_vec(&mut stream, d)
                        .iter()
                        .zip(&mu)
                        .map(|(&n, &m)| sign * m + n)
                        .collect();
                    features.push(x);
                    labels.push(class as u8);
                }
            }
            LogisticClient {
                features,
                labels,
                proportions: proportions[k].clone(),
            }
        })
        .collect();
    Objective::Logistic { d, clients }
}

/// Quadratic suite with heterogeneous targets. With `shared_curvature` the
/// same diagonal is used for every client, which makes the dissimilarity
/// between local and global gradients exactly constant in theta.
pub fn make_quadratic_suite(
    d: usize,
    k_clients: usize,
    curvature_min: f64,
    curvature_max: f64,
    target_spread: f64,
    shared_curvature: bool,
    seed: u64,
) -> Objective {
    assert!(curvature_min > 0.0 && curvature_max >= curvature_min);
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, d as u64, k_clients as u64]);
    let draw_curv = |stream: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|_| stream.random_range(curvature_min..=curvature_max))
            .collect()
    };
    let shared = draw_curv(&mut stream);
    let clients: Vec<QuadraticClient> = (0..k_clients)
        .map(|_| {
            let curvature = if shared_curvature {
                shared.clone()
            } else {
                draw_curv(&mut stream)
            };
            let target = rng::normal_vec(&mut stream, d)
                .into_iter()
                .map(|v| v * target_spread)
                .collect();
            QuadraticClient { curvature, target }
        })
        .collect();
    // Optimum of the average: curvature-weighted mean of targets.
    let known_optimum = (0..d)
        .map(|i| {
            let num: f64 = clients.iter().map(|c| c.curvature[i] * c.target[i]).sum();
            let den: f64 = clients.iter().map(|c| c.curvature[i]).sum();
            num / den
        })
        .collect();
    Objective::Quadratic {
        d,
        clients,
        known_optimum,
    }
}

/// Fit the bounded-dissimilarity constants over a theta grid with `beta^2`
/// pinned at 1: returns `(1.0, kappa2)` with
/// `kappa2 = max_theta [ (1/K) sum_k |grad L_k|^2 - |grad L|^2 ]`.
/// For shared-curvature quadratic suites the bracket is constant in theta,
/// so the fit is exact everywhere.
pub fn fit_dissimilarity(obj: &Objective, grid: &[Vec<f64>]) -> (f64, f64) {
    let k = obj.num_clients() as f64;
    let mut kappa2 = 0.0f64;
    for theta in grid {
        let local: f64 = (0..obj.num_clients())
            .map(|i| {
                obj.local_grad(i, theta)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / k;
        let global: f64 = obj.global_grad(theta).iter().map(|v| v * v).sum();
        kappa2 = kappa2.max(local - global);
    }
    (1.0, kappa2.max(0.0))
}

/// Default evaluation grid around the origin and the optimum.
pub fn dissimilarity_grid(obj: &Objective, points: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = obj.dim();
    let mut stream = rng::stream(seed, &[rng::DOMAIN_DATA, 0x6772_6964]);
    let mut grid: Vec<Vec<f64>> = (0..points)
        .map(|_| rng::normal_vec(&mut stream, d))
        .collect();
    grid.push(vec![0.0; d]);
    if let Some(opt) = obj.known_optimum() {
        grid.push(opt.to_vec());
    }
    grid
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
