//! Slotted-time trajectory execution with seeded randomness and
//! cost/backlog metrics.
//!
//! One run is strictly sequential. Randomness is addressed per
//! `(seed, slot, domain, lane)` through [`crate::rng`], so sweep cells can be
//! computed in any order, in parallel, and still reproduce bit-identical
//! metrics; sweeps merge rows by a deterministic sort key.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fields::CostFunction;
use crate::model::{ArrivalDist, Control, ModelError, QueueState, ServiceDist, ValidatedNetwork, Variant};
use crate::policy::{select_control, PolicyConfig, PolicyError};
use crate::rng::{Domain, StreamRng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid arrival rate {rate} for queue {queue}: {reason}")]
    InvalidRate {
        queue: usize,
        rate: f64,
        reason: String,
    },
    #[error("queue {queue} driven negative at slot {slot} under the region-restricted law")]
    NegativeStateViolation { queue: usize, slot: u64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of one application of the queueing law.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: QueueState,
    /// Packets the truncation at zero prevented from being removed;
    /// identically zero under the region-restricted law.
    pub excess: Vec<i64>,
    pub arrivals: Vec<i64>,
    /// The realized service matrix applied this slot.
    pub service_matrix_used: Vec<Vec<i64>>,
}

/// Per-run summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub horizon: u64,
    pub avg_cost: f64,
    pub avg_backlog: f64,
    pub max_backlog: i64,
    pub idle_fraction: f64,
    pub total_excess: i64,
    pub seed: u64,
}

/// Everything one simulation run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub horizon: u64,
    pub seed: u64,
    pub cost: CostFunction,
    pub record_trace: bool,
}

/// One recorded slot: state after the transition and the control applied.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: u64,
    pub q: Vec<i64>,
    pub u: Vec<u8>,
    pub cost: f64,
}

/// Independent per-queue arrival draws for one slot.
pub fn sample_arrivals(
    net: &ValidatedNetwork,
    seed: u64,
    slot: u64,
) -> Result<Vec<i64>, SimError> {
    let spec = net.spec();
    let mut out = Vec::with_capacity(spec.m);
    for (i, &rate) in spec.alpha.iter().enumerate() {
        let mut rng = StreamRng::substream(seed, slot, Domain::Arrivals, i as u64);
        let a = match spec.arrival_dist {
            ArrivalDist::Bernoulli => {
                if rate > 1.0 {
                    return Err(SimError::InvalidRate {
                        queue: i,
                        rate,
                        reason: "Bernoulli arrivals require alpha <= 1".into(),
                    });
                }
                i64::from(rng.bernoulli(rate))
            }
            ArrivalDist::Poisson => rng.poisson(rate) as i64,
        };
        out.push(a);
    }
    Ok(out)
}

/// Realized service matrix for one slot. Deterministic service returns `B`
/// itself; Bernoulli(p) service keeps each selected activity's column with
/// probability `p` and zeroes it otherwise.
pub fn sample_service_matrix(
    net: &ValidatedNetwork,
    u: &Control,
    seed: u64,
    slot: u64,
) -> Vec<Vec<i64>> {
    let spec = net.spec();
    match spec.service_dist {
        ServiceDist::Deterministic => spec.b.clone(),
        ServiceDist::Bernoulli(p) => {
            let mut b = spec.b.clone();
            for j in 0..spec.l {
                if u.0[j] == 1 {
                    let mut rng = StreamRng::substream(seed, slot, Domain::Service, j as u64);
                    if !rng.bernoulli(p) {
                        for row in b.iter_mut() {
                            row[j] = 0;
                        }
                    }
                }
            }
            b
        }
    }
}

/// Applies the queueing law once. The caller guarantees `u` came from the
/// variant's control region at `x`.
pub fn step(
    net: &ValidatedNetwork,
    x: &QueueState,
    u: &Control,
    arrivals: &[i64],
    service_matrix: &[Vec<i64>],
    slot: u64,
) -> Result<StepOutcome, SimError> {
    let m = net.m();
    let mut bu = vec![0i64; m];
    for i in 0..m {
        for (j, &uj) in u.0.iter().enumerate() {
            bu[i] += service_matrix[i][j] * uj as i64;
        }
    }
    match net.spec().variant {
        Variant::Truncated => {
            let mut next = vec![0i64; m];
            let mut excess = vec![0i64; m];
            for i in 0..m {
                let drained = x.0[i] + bu[i];
                excess[i] = (-drained).max(0);
                next[i] = drained + excess[i] + arrivals[i];
            }
            Ok(StepOutcome {
                next_state: QueueState(next),
                excess,
                arrivals: arrivals.to_vec(),
                service_matrix_used: service_matrix.to_vec(),
            })
        }
        Variant::MeynRegion => {
            let mut next = vec![0i64; m];
            for i in 0..m {
                next[i] = x.0[i] + bu[i] + arrivals[i];
                if next[i] < 0 {
                    return Err(SimError::NegativeStateViolation { queue: i, slot });
                }
            }
            Ok(StepOutcome {
                next_state: QueueState(next),
                excess: vec![0; m],
                arrivals: arrivals.to_vec(),
                service_matrix_used: service_matrix.to_vec(),
            })
        }
    }
}

/// Runs one trajectory from the empty state and accumulates metrics.
///
/// Backlog statistics use exact integer accumulation; the cost average uses
/// compensated summation.
pub fn simulate(
    net: &ValidatedNetwork,
    policy: &PolicyConfig,
    config: &RunConfig,
) -> Result<(SimMetrics, Option<Vec<TraceRow>>), SimError> {
    let mut x = QueueState::zero(net.m());
    let mut trace = config.record_trace.then(Vec::new);

    let mut cost_sum = 0.0f64;
    let mut cost_comp = 0.0f64;
    let mut backlog_sum: i128 = 0;
    let mut max_backlog: i64 = 0;
    let mut idle_slots: u64 = 0;
    let mut total_excess: i64 = 0;

    for t in 0..config.horizon {
        let u = select_control(policy, net, &x)?;
        if u.is_idle() {
            idle_slots += 1;
        }
        let arrivals = sample_arrivals(net, config.seed, t)?;
        let service = sample_service_matrix(net, &u, config.seed, t);
        let outcome = step(net, &x, &u, &arrivals, &service, t)?;
        x = outcome.next_state;

        let cost = config.cost.eval(&x.as_f64());
        // Kahan update.
        let y = cost - cost_comp;
        let s = cost_sum + y;
        cost_comp = (s - cost_sum) - y;
        cost_sum = s;

        let backlog = x.total();
        backlog_sum += backlog as i128;
        max_backlog = max_backlog.max(backlog);
        total_excess += outcome.excess.iter().sum::<i64>();

        if let Some(rows) = trace.as_mut() {
            rows.push(TraceRow {
                t,
                q: x.0.clone(),
                u: u.0.clone(),
                cost,
            });
        }
    }

    let n = config.horizon as f64;
    Ok((
        SimMetrics {
            horizon: config.horizon,
            avg_cost: cost_sum / n,
            avg_backlog: backlog_sum as f64 / n,
            max_backlog,
            idle_fraction: idle_slots as f64 / n,
            total_excess,
            seed: config.seed,
        },
        trace,
    ))
}

/// One sweep cell: a labelled policy at one arrival scale and one seed.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub alpha: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: SimMetrics,
}

/// A labelled policy for sweeps.
#[derive(Debug, Clone)]
pub struct LabelledPolicy {
    pub label: String,
    pub policy: PolicyConfig,
}

/// Runs every `(policy, alpha, seed)` cell and returns rows sorted by
/// `(policy, alpha, seed)`. `make_network` maps an arrival scale to a
/// validated network. Cells are independent and run on the rayon pool.
pub fn sweep<F>(
    make_network: F,
    policies: &[LabelledPolicy],
    alphas: &[f64],
    seeds: &[u64],
    horizon: u64,
    cost: &CostFunction,
) -> Result<Vec<SweepRow>, SimError>
where
    F: Fn(f64) -> Result<ValidatedNetwork, ModelError> + Sync,
{
    let cells: Vec<(usize, f64, u64)> = policies
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| {
            alphas
                .iter()
                .flat_map(move |&a| seeds.iter().map(move |&s| (pi, a, s)))
        })
        .collect();

    let mut rows = cells
        .par_iter()
        .map(|&(pi, alpha, seed)| {
            let net = make_network(alpha)?;
            let config = RunConfig {
                horizon,
                seed,
                cost: cost.clone(),
                record_trace: false,
            };
            let (metrics, _) = simulate(&net, &policies[pi].policy, &config)?;
            Ok(SweepRow {
                policy: policies[pi].label.clone(),
                alpha,
                seed,
                metrics,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}
