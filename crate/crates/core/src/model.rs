//! The controlled-random-walk network model.
//!
//! A network is a slotted-time queueing system with `m` queues and `l`
//! activities. The topology matrix `B` (integer, m x l) holds the mean
//! per-slot effect of each activity on each queue; the binary constituency
//! matrix `C` encodes resource constraints `C u <= 1` on simultaneous
//! activities; `alpha` is the vector of mean arrival rates. Two dynamics
//! variants exist: the truncated law `Q' = [Q + B u]^+ + A` and the
//! region-restricted law `Q' = Q + B u + A` where the control set is cut
//! down at empty queues so the state stays non-negative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on exhaustive control enumeration (2^l vectors).
pub const ENUMERATION_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("constituency matrix entry C[{row}][{col}] = {value} is not 0/1")]
    NonBinaryConstituency { row: usize, col: usize, value: i64 },
    #[error("arrival rate alpha[{queue}] = {rate} is invalid: {reason}")]
    NegativeRate {
        queue: usize,
        rate: f64,
        reason: String,
    },
    #[error("control enumeration over {l} activities exceeds cap {cap}")]
    TooManyControls { l: usize, cap: usize },
    #[error("linear program failed: {0}")]
    LPFailure(String),
}

/// Which queueing law drives the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `Q' = [Q + B u]^+ + A`; excess packets are truncated at zero.
    #[default]
    Truncated,
    /// `Q' = Q + B u + A` with the control region restricted at empty queues.
    MeynRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalDist {
    #[default]
    Bernoulli,
    Poisson,
}

/// Service realization. `Bernoulli(p)` applies each selected activity's
/// column of `B` with probability `p`, independently per activity per slot;
/// the realized mean service is then `p * B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ServiceDist {
    #[default]
    Deterministic,
    Bernoulli(f64),
}

/// Static description of a CRW network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Queue count.
    pub m: usize,
    /// Activity count.
    pub l: usize,
    /// Mean topology/service matrix, m x l, row-major.
    #[serde(rename = "B")]
    pub b: Vec<Vec<i64>>,
    /// Binary constituency matrix, l_m x l, row-major.
    #[serde(rename = "C")]
    pub c: Vec<Vec<i64>>,
    /// Mean arrival rates, length m.
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub arrival_dist: ArrivalDist,
    #[serde(default)]
    pub service_dist: ServiceDist,
}

/// Non-negative integer backlog vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState(pub Vec<i64>);

impl QueueState {
    pub fn zero(m: usize) -> Self {
        QueueState(vec![0; m])
    }

    pub fn new(q: Vec<i64>) -> Result<Self, ModelError> {
        if let Some((i, &v)) = q.iter().enumerate().find(|(_, &v)| v < 0) {
            return Err(ModelError::DimensionMismatch(format!(
                "queue state component {i} = {v} is negative"
            )));
        }
        Ok(QueueState(q))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// Total backlog in packets.
    pub fn total(&self) -> i64 {
        self.0.iter().sum()
    }

    /// State as floating-point coordinates, the domain of scheduling fields.
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

/// Binary activity-selection vector satisfying `C u <= 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Control(pub Vec<u8>);

impl Control {
    pub fn zero(l: usize) -> Self {
        Control(vec![0; l])
    }

    pub fn is_idle(&self) -> bool {
        self.0.iter().all(|&u| u == 0)
    }
}

/// Outcome of the stabilizability audit.
///
/// `margin` is the optimum of `max delta` subject to `u in [0,1]^l`,
/// `C u <= 1`, `B u + alpha <= -delta * 1`; the network is stabilizable
/// iff the margin is strictly positive (the zero vector then lies in the
/// interior of the velocity set along the negative orthant).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilizabilityReport {
    pub stabilizable: bool,
    /// Uniform drain margin in packets per slot.
    pub margin: f64,
    /// Relaxed control in `[0,1]^l` achieving the margin.
    pub witness_u: Vec<f64>,
}

/// A network whose dimensions have been checked and whose feasible binary
/// control set (when `l` is within the enumeration cap) is precomputed.
#[derive(Debug, Clone)]
pub struct ValidatedNetwork {
    spec: NetworkSpec,
    controls: Option<Vec<Control>>,
}

impl ValidatedNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn l(&self) -> usize {
        self.spec.l
    }

    /// `B u` as exact integer arithmetic.
    pub fn b_times(&self, u: &Control) -> Vec<i64> {
        self.spec
            .b
            .iter()
            .map(|row| {
                row.iter()
                    .zip(u.0.iter())
                    .map(|(&bij, &uj)| bij * uj as i64)
                    .sum()
            })
            .collect()
    }

    /// Checks `C u <= 1` for a binary vector.
    pub fn is_feasible(&self, u: &Control) -> bool {
        self.spec.c.iter().all(|row| {
            row.iter()
                .zip(u.0.iter())
                .map(|(&cij, &uj)| cij * uj as i64)
                .sum::<i64>()
                <= 1
        })
    }
}

fn row_major_ok<T>(mat: &[Vec<T>], rows: usize, cols: usize) -> bool {
    mat.len() == rows && mat.iter().all(|r| r.len() == cols)
}

/// Checks dimensions and value ranges, and precomputes the feasible control
/// set when `l` is within the enumeration cap.
pub fn validate_network(spec: NetworkSpec) -> Result<ValidatedNetwork, ModelError> {
    if spec.m == 0 || spec.l == 0 {
        return Err(ModelError::DimensionMismatch(
            "m and l must be positive".into(),
        ));
    }
    if !row_major_ok(&spec.b, spec.m, spec.l) {
        return Err(ModelError::DimensionMismatch(format!(
            "B must be {}x{}, got {}x{}",
            spec.m,
            spec.l,
            spec.b.len(),
            spec.b.first().map_or(0, Vec::len)
        )));
    }
    if spec.c.is_empty() || spec.c.iter().any(|r| r.len() != spec.l) {
        return Err(ModelError::DimensionMismatch(format!(
            "C rows must have length l = {}",
            spec.l
        )));
    }
    for (i, row) in spec.c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0 && v != 1 {
                return Err(ModelError::NonBinaryConstituency {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    if spec.alpha.len() != spec.m {
        return Err(ModelError::DimensionMismatch(format!(
            "alpha must have length m = {}, got {}",
            spec.m,
            spec.alpha.len()
        )));
    }
    for (i, &a) in spec.alpha.iter().enumerate() {
        if !a.is_finite() || a < 0.0 {
            return Err(ModelError::NegativeRate {
                queue: i,
                rate: a,
                reason: "arrival rates must be finite and non-negative".into(),
            });
        }
        if spec.arrival_dist == ArrivalDist::Bernoulli && a > 1.0 {
            return Err(ModelError::NegativeRate {
                queue: i,
                rate: a,
                reason: "Bernoulli arrivals require alpha <= 1".into(),
            });
        }
    }
    if let ServiceDist::Bernoulli(p) = spec.service_dist {
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::NegativeRate {
                queue: 0,
                rate: p,
                reason: "Bernoulli service probability must be in [0,1]".into(),
            });
        }
    }

    let controls = if spec.l <= ENUMERATION_CAP {
        Some(enumerate_controls(&spec))
    } else {
        None
    };
    Ok(ValidatedNetwork { spec, controls })
}

fn enumerate_controls(spec: &NetworkSpec) -> Vec<Control> {
    let l = spec.l;
    let mut out = Vec::new();
    // Counter order with u_1 as the most significant bit gives lexicographic
    // order on the vectors, which downstream tie-breaking relies on.
    for k in 0u64..(1u64 << l) {
        let u: Vec<u8> = (0..l).map(|j| ((k >> (l - 1 - j)) & 1) as u8).collect();
        let feasible = spec.c.iter().all(|row| {
            row.iter()
                .zip(u.iter())
                .map(|(&cij, &uj)| cij * uj as i64)
                .sum::<i64>()
                <= 1
        });
        if feasible {
            out.push(Control(u));
        }
    }
    out
}

/// Every binary `u` with `C u <= 1`, in lexicographic order.
pub fn feasible_controls(net: &ValidatedNetwork) -> Result<&[Control], ModelError> {
    net.controls
        .as_deref()
        .ok_or(ModelError::TooManyControls {
            l: net.spec.l,
            cap: ENUMERATION_CAP,
        })
}

/// Solves `max delta` over the relaxed control polytope and reports whether
/// a uniform negative drift direction exists.
pub fn check_stabilizable(net: &ValidatedNetwork) -> Result<StabilizabilityReport, ModelError> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};

    let spec = &net.spec;
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let u_vars: Vec<_> = (0..spec.l).map(|_| problem.add_var(0.0, (0.0, 1.0))).collect();
    let delta = problem.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));

    for row in &spec.c {
        let terms: Vec<_> = row
            .iter()
            .zip(u_vars.iter())
            .filter(|(&cij, _)| cij != 0)
            .map(|(&cij, &v)| (v, cij as f64))
            .collect();
        if !terms.is_empty() {
            problem.add_constraint(&terms, ComparisonOp::Le, 1.0);
        }
    }
    // B u + delta * 1 <= -alpha, componentwise.
    for i in 0..spec.m {
        let mut terms: Vec<_> = spec.b[i]
            .iter()
            .zip(u_vars.iter())
            .filter(|(&bij, _)| bij != 0)
            .map(|(&bij, &v)| (v, bij as f64))
            .collect();
        terms.push((delta, 1.0));
        problem.add_constraint(&terms, ComparisonOp::Le, -spec.alpha[i]);
    }

    let solution = problem
        .solve()
        .map_err(|e| ModelError::LPFailure(e.to_string()))?;
    let margin = solution.objective();
    let witness_u: Vec<f64> = u_vars.iter().map(|&v| solution[v].clamp(0.0, 1.0)).collect();
    Ok(StabilizabilityReport {
        stabilizable: margin > 0.0,
        margin,
        witness_u,
    })
}

/// The five-queue example network with a small reverse loop: arrivals enter
/// queue 1, depart after queue 4, and queue 3 routes to either queue 4 or
/// queue 5 (which feeds back into queue 2). All service rates are 1, so the
/// network is stabilizable exactly when `alpha < 1`.
pub fn fig1_loop(alpha: f64) -> NetworkSpec {
    NetworkSpec {
        m: 5,
        l: 6,
        b: vec![
            vec![-1, 0, 0, 0, 0, 0],
            vec![1, -1, 0, 0, 1, 0],
            vec![0, 1, -1, -1, 0, 0],
            vec![0, 0, 1, 0, 0, -1],
            vec![0, 0, 0, 1, -1, 0],
        ],
        c: vec![
            vec![1, 0, 0, 0, 0, 0],
            vec![0, 1, 0, 0, 0, 0],
            vec![0, 0, 1, 1, 0, 0],
            vec![0, 0, 0, 0, 0, 1],
            vec![0, 0, 0, 0, 1, 0],
        ],
        alpha: vec![alpha, 0.0, 0.0, 0.0, 0.0],
        variant: Variant::Truncated,
        arrival_dist: ArrivalDist::Bernoulli,
        service_dist: ServiceDist::Deterministic,
    }
}

/// Two queues in tandem: arrivals enter queue 1, activity 1 moves packets
/// from queue 1 to queue 2, activity 2 drains queue 2.
pub fn tandem2(alpha1: f64) -> NetworkSpec {
    NetworkSpec {
        m: 2,
        l: 2,
        b: vec![vec![-1, 0], vec![1, -1]],
        c: vec![vec![1, 0], vec![0, 1]],
        alpha: vec![alpha1, 0.0],
        variant: Variant::Truncated,
        arrival_dist: ArrivalDist::Bernoulli,
        service_dist: ServiceDist::Deterministic,
    }
}

/// Resolves a built-in network name. `alpha` scales the first queue's
/// arrival rate.
pub fn builtin_network(name: &str, alpha: f64) -> Option<NetworkSpec> {
    match name {
        "fig1-loop" => Some(fig1_loop(alpha)),
        "tandem2" => Some(tandem2(alpha)),
        _ => None,
    }
}

/// Names of the built-in networks.
pub fn builtin_names() -> &'static [&'static str] {
    &["fig1-loop", "tandem2"]
}
