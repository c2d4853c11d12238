//! Experiment configuration: one JSON document describing the code, keys,
//! network, training, and privacy settings, with validation that reports
//! every violation at once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_code::{self, GcCode};
use crate::linalg::Mat;
use crate::network::NetworkModel;
use crate::privacy::{Deltas, LogBase, PrivacyParams};
use crate::protocol::OnFailure;
use crate::secret_keys::{
    construct_fair_cyclic, construct_fair_general, construct_general, GeneratorMatrix,
    DEFAULT_FAIR_MAX_ITER, DEFAULT_FAIR_TOL,
};
use crate::trainer::{make_quadratic_suite, synthesize_logistic, LocalSolver, Objective};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n{}", violations.join("\n"))]
    Invalid { violations: Vec<String> },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("construction failed: {0}")]
    Construction(String),
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Scalar-or-vector shorthand for per-client values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, k: usize) -> Vec<f64> {
        match self {
            ScalarOrVec::Scalar(v) => vec![*v; k],
            ScalarOrVec::Vec(v) => v.clone(),
        }
    }
}

/// Scalar-or-matrix shorthand for pairwise values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrMatrix {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCfg {
    #[serde(rename = "K")]
    pub k: usize,
    pub s: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionKind {
    General,
    FairGeneral,
    FairCyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeysCfg {
    pub construction: ConstructionKind,
    #[serde(default, rename = "L")]
    pub l: Option<usize>,
    #[serde(default)]
    pub gamma: Option<usize>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCfg {
    pub p_up: ScalarOrVec,
    pub p_inter: ScalarOrMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveCfg {
    Quadratic {
        d: usize,
        #[serde(default = "default_curv_min")]
        curvature_min: f64,
        #[serde(default = "default_curv_max")]
        curvature_max: f64,
        #[serde(default = "default_spread")]
        target_spread: f64,
        #[serde(default = "default_true")]
        shared_curvature: bool,
        #[serde(default)]
        seed: u64,
    },
    Logistic {
        d: usize,
        #[serde(default = "default_n_per_client")]
        n_per_client: usize,
        #[serde(default = "default_spread")]
        feature_spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_curv_min() -> f64 {
    0.5
}
fn default_curv_max() -> f64 {
    2.0
}
fn default_spread() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_n_per_client() -> usize {
    100
}
fn default_gamma_conc() -> f64 {
    1.0
}
fn default_on_failure() -> OnFailure {
    OnFailure::Accumulate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCfg {
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "I")]
    pub iterations: usize,
    pub eta: f64,
    pub a: Vec<f64>,
    pub objective: ObjectiveCfg,
    /// Dirichlet concentration for heterogeneous data synthesis.
    #[serde(default = "default_gamma_conc")]
    pub gamma: f64,
    #[serde(default = "default_on_failure")]
    pub on_failure: OnFailure,
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default)]
    pub clip_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BernsteinCfg {
    #[serde(default)]
    pub r1: Option<f64>,
    #[serde(default)]
    pub r2: Option<f64>,
    #[serde(default)]
    pub r3: Option<f64>,
    /// Monte Carlo sample count used when a radius must be estimated.
    #[serde(default)]
    pub estimate_trials: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyCfg {
    #[serde(rename = "D")]
    pub d: usize,
    pub zeta2: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub deltas: Option<Deltas>,
    #[serde(default)]
    pub bernstein: BernsteinCfg,
    #[serde(default)]
    pub lmip_base: LogBase,
    #[serde(default = "default_nats")]
    pub ldp_base: LogBase,
}

fn default_nats() -> LogBase {
    LogBase::Nats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputCfg {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub trace: Option<String>,
}

/// Bound-comparison settings: how many seeded runs, and optional overrides
/// for the derived parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoundCfg {
    #[serde(default)]
    pub runs: Option<u32>,
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub kappa2: Option<f64>,
    #[serde(default)]
    pub g_smooth: Option<f64>,
    #[serde(default)]
    pub p_outage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub code: Option<CodeCfg>,
    pub keys: Option<KeysCfg>,
    pub network: Option<NetworkCfg>,
    pub training: Option<TrainingCfg>,
    pub privacy: Option<PrivacyCfg>,
    #[serde(default)]
    pub output: Option<OutputCfg>,
    #[serde(default)]
    pub bound: Option<BoundCfg>,
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

/// Sections a subcommand needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requires {
    pub code: bool,
    pub keys: bool,
    pub network: bool,
    pub training: bool,
    pub privacy: bool,
}

impl Requires {
    pub const CODE: Requires = Requires {
        code: true,
        keys: false,
        network: false,
        training: false,
        privacy: false,
    };
    pub const KEYS: Requires = Requires {
        code: true,
        keys: true,
        network: false,
        training: false,
        privacy: false,
    };
    pub const RELIABILITY: Requires = Requires {
        code: true,
        keys: false,
        network: true,
        training: false,
        privacy: false,
    };
    pub const SIMULATE: Requires = Requires {
        code: true,
        keys: true,
        network: true,
        training: true,
        privacy: false,
    };
    pub const PRIVACY: Requires = Requires {
        code: true,
        keys: true,
        network: true,
        training: false,
        privacy: true,
    };
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Check the sections a subcommand needs, collecting every violation.
    pub fn validate(&self, req: Requires) -> Result<(), ConfigError> {
        let mut v = Vec::new();

        if req.code && self.code.is_none() {
            v.push("code: missing required section".to_string());
        }
        if req.keys && self.keys.is_none() {
            v.push("keys: missing required section".to_string());
        }
        if req.network && self.network.is_none() {
            v.push("network: missing required section".to_string());
        }
        if req.training && self.training.is_none() {
            v.push("training: missing required section".to_string());
        }
        if req.privacy && self.privacy.is_none() {
            v.push("privacy: missing required section".to_string());
        }

        let k = self.code.as_ref().map(|c| c.k);
        if let Some(code) = &self.code {
            if code.k < 1 {
                v.push("code.K: must be at least 1".to_string());
            }
            if code.k >= 1 && code.s >= code.k {
                v.push(format!("code.s: must satisfy 0 <= s < K, got s={}", code.s));
            }
            if let Some(f) = gradient_code::binomial(code.k, code.s) {
                if f > gradient_code::DEFAULT_COMBINATOR_CAP {
                    v.push(format!(
                        "code: binomial(K, s) = {f} exceeds the combinator cap {}",
                        gradient_code::DEFAULT_COMBINATOR_CAP
                    ));
                }
            }
        }

        if let (Some(keys), Some(k)) = (&self.keys, k) {
            match keys.construction {
                ConstructionKind::General => {
                    let l = keys.l.unwrap_or(k);
                    if l + 1 < k {
                        v.push(format!("keys.L: need L >= K-1, got L={l} for K={k}"));
                    }
                }
                ConstructionKind::FairGeneral => {
                    match keys.lambda2 {
                        Some(l2) if l2 > 0.0 => {}
                        _ => v.push("keys.lambda2: fair constructions need lambda2 > 0".into()),
                    }
                    if k < 2 {
                        v.push("keys: fair constructions need K >= 2".into());
                    }
                }
                ConstructionKind::FairCyclic => {
                    match keys.lambda2 {
                        Some(l2) if l2 > 0.0 => {}
                        _ => v.push("keys.lambda2: fair constructions need lambda2 > 0".into()),
                    }
                    match keys.gamma {
                        Some(g) if g >= 1 && g < k => {}
                        Some(g) => v.push(format!(
                            "keys.gamma: must satisfy 1 <= gamma <= K-1, got {g}"
                        )),
                        None => v.push("keys.gamma: required for the cyclic construction".into()),
                    }
                }
            }
        }

        if let (Some(net), Some(k)) = (&self.network, k) {
            match &net.p_up {
                ScalarOrVec::Scalar(p) => {
                    if !(0.0..=1.0).contains(p) {
                        v.push(format!("network.p_up: probability {p} outside [0, 1]"));
                    }
                }
                ScalarOrVec::Vec(ps) => {
                    if ps.len() != k {
                        v.push(format!(
                            "network.p_up: expected {k} entries, got {}",
                            ps.len()
                        ));
                    }
                    for (i, p) in ps.iter().enumerate() {
                        if !(0.0..=1.0).contains(p) {
                            v.push(format!("network.p_up[{i}]: probability {p} outside [0, 1]"));
                        }
                    }
                }
            }
            match &net.p_inter {
                ScalarOrMatrix::Scalar(p) => {
                    if !(0.0..=1.0).contains(p) {
                        v.push(format!("network.p_inter: probability {p} outside [0, 1]"));
                    }
                }
                ScalarOrMatrix::Matrix(m) => {
                    if m.len() != k || m.iter().any(|row| row.len() != k) {
                        v.push(format!("network.p_inter: expected a {k}x{k} matrix"));
                    } else {
                        for (r, row) in m.iter().enumerate() {
                            for (c, p) in row.iter().enumerate() {
                                if r == c && *p != 0.0 {
                                    v.push(format!(
                                        "network.p_inter[{r}][{c}]: self-links must have p = 0"
                                    ));
                                } else if !(0.0..=1.0).contains(p) {
                                    v.push(format!(
                                        "network.p_inter[{r}][{c}]: probability {p} outside [0, 1]"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }

        if let Some(tr) = &self.training {
            if tr.t == 0 {
                v.push("training.T: must be positive".to_string());
            }
            if tr.a.len() != tr.iterations {
                v.push(format!(
                    "training.a: {} weights but I = {}",
                    tr.a.len(),
                    tr.iterations
                ));
            }
            if !tr.eta.is_finite() || tr.eta <= 0.0 {
                v.push(format!("training.eta: must be positive, got {}", tr.eta));
            }
            if tr.gamma <= 0.0 {
                v.push(format!(
                    "training.gamma: concentration must be positive, got {}",
                    tr.gamma
                ));
            }
            match &tr.objective {
                ObjectiveCfg::Quadratic {
                    d,
                    curvature_min,
                    curvature_max,
                    ..
                } => {
                    if *d == 0 {
                        v.push("training.objective.d: must be positive".to_string());
                    }
                    if *curvature_min <= 0.0 || curvature_max < curvature_min {
                        v.push("training.objective: need 0 < curvature_min <= curvature_max".into());
                    }
                }
                ObjectiveCfg::Logistic { d, n_per_client, .. } => {
                    if *d == 0 {
                        v.push("training.objective.d: must be positive".to_string());
                    }
                    if *n_per_client == 0 {
                        v.push("training.objective.n_per_client: must be positive".into());
                    }
                }
            }
        }

        if let Some(p) = &self.privacy {
            if p.d == 0 {
                v.push("privacy.D: must be positive".to_string());
            }
            if p.zeta2 < 0.0 {
                v.push(format!("privacy.zeta2: must be nonnegative, got {}", p.zeta2));
            }
            if p.radius < 0.0 {
                v.push(format!("privacy.R: must be nonnegative, got {}", p.radius));
            }
            if let Some(w) = &p.weights {
                if let Some(k) = k {
                    if w.len() != k {
                        v.push(format!("privacy.weights: expected {k} entries, got {}", w.len()));
                    }
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    v.push(format!("privacy.weights: must sum to 1, got {total}"));
                }
            }
            if let Some(d) = &p.deltas {
                for (name, val) in [
                    ("delta1", d.delta1),
                    ("delta2", d.delta2),
                    ("delta3", d.delta3),
                    ("delta4", d.delta4),
                    ("delta5", d.delta5),
                    ("delta6", d.delta6),
                    ("delta7", d.delta7),
                    ("delta_prime", d.delta_prime),
                ] {
                    if !(0.0 < val && val <= 1.0) {
                        v.push(format!("privacy.deltas.{name}: must lie in (0, 1], got {val}"));
                    }
                }
            }
            if req.privacy {
                let fair = self
                    .keys
                    .as_ref()
                    .map(|kc| kc.lambda2.is_some())
                    .unwrap_or(false);
                if !fair {
                    v.push(
                        "privacy: accountants need a key power; use a fair construction \
                         with keys.lambda2 set"
                            .to_string(),
                    );
                }
            }
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { violations: v })
        }
    }

    // -- builders ----------------------------------------------------------

    pub fn build_code(&self) -> Result<GcCode, ConfigError> {
        let c = self.code.as_ref().expect("validated");
        gradient_code::build_code(c.k, c.s, c.seed)
            .map_err(|e| ConfigError::Construction(e.to_string()))
    }

    pub fn build_keys(&self) -> Result<GeneratorMatrix, ConfigError> {
        let k = self.code.as_ref().expect("validated").k;
        let kc = self.keys.as_ref().expect("validated");
        let gm = match kc.construction {
            ConstructionKind::General => construct_general(k, kc.l.unwrap_or(k), kc.seed),
            ConstructionKind::FairGeneral => construct_fair_general(
                k,
                kc.lambda2.expect("validated"),
                kc.seed,
                DEFAULT_FAIR_TOL,
                DEFAULT_FAIR_MAX_ITER,
            ),
            ConstructionKind::FairCyclic => construct_fair_cyclic(
                k,
                kc.gamma.expect("validated"),
                kc.lambda2.expect("validated"),
            ),
        };
        gm.map_err(|e| ConfigError::Construction(e.to_string()))
    }

    pub fn build_network(&self) -> Result<NetworkModel, ConfigError> {
        let k = self.code.as_ref().expect("validated").k;
        let nc = self.network.as_ref().expect("validated");
        let p_up = nc.p_up.expand(k);
        let p_inter = match &nc.p_inter {
            ScalarOrMatrix::Scalar(p) => {
                let mut m = Mat::zeros(k, k);
                for r in 0..k {
                    for c in 0..k {
                        if r != c {
                            m.set(r, c, *p);
                        }
                    }
                }
                m
            }
            ScalarOrMatrix::Matrix(rows) => Mat::from_rows(rows),
        };
        NetworkModel::new(p_up, p_inter).map_err(|e| ConfigError::Construction(e.to_string()))
    }

    pub fn build_objective(&self) -> Result<Objective, ConfigError> {
        let k = self.code.as_ref().expect("validated").k;
        let tr = self.training.as_ref().expect("validated");
        Ok(match &tr.objective {
            ObjectiveCfg::Quadratic {
                d,
                curvature_min,
                curvature_max,
                target_spread,
                shared_curvature,
                seed,
            } => make_quadratic_suite(
                *d,
                k,
                *curvature_min,
                *curvature_max,
                *target_spread,
                *shared_curvature,
                *seed,
            ),
            ObjectiveCfg::Logistic {
                d,
                n_per_client,
                feature_spread,
                seed,
            } => synthesize_logistic(*d, k, tr.gamma, *n_per_client, *feature_spread, *seed),
        })
    }

    pub fn build_solver(&self) -> LocalSolver {
        let tr = self.training.as_ref().expect("validated");
        LocalSolver {
            a: tr.a.clone(),
            eta: tr.eta,
            batch: tr.batch,
        }
    }

    pub fn build_privacy_params(&self) -> PrivacyParams {
        let k = self.code.as_ref().expect("validated").k;
        let pc = self.privacy.as_ref().expect("validated");
        let lambda2 = self
            .keys
            .as_ref()
            .and_then(|kc| kc.lambda2)
            .unwrap_or(0.0);
        PrivacyParams {
            d: pc.d,
            zeta2: pc.zeta2,
            lambda2,
            radius: pc.radius,
            weights: pc
                .weights
                .clone()
                .unwrap_or_else(|| vec![1.0 / k as f64; k]),
            deltas: pc.deltas.clone().unwrap_or_default(),
            r1: pc.bernstein.r1.unwrap_or(0.0),
            r2: pc.bernstein.r2.unwrap_or(0.0),
            r3: pc.bernstein.r3.unwrap_or(pc.radius),
            lmip_base: pc.lmip_base,
            ldp_base: pc.ldp_base,
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
