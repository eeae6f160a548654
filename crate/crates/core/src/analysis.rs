//! Numerical audits of the throughput-optimality conditions and an
//! empirical drift estimator.
//!
//! The stability conditions are asymptotic statements about the normalized
//! field on large shells; no finite procedure can prove them. The checkers
//! here sample states on l1-shells of increasing radius (plus the coordinate
//! faces and a band of near-face states, where the interesting violations
//! live), measure the relevant quantity, and report the smallest sampled
//! radius from which every larger shell stays within tolerance. Reports
//! carry witnesses and counterexample states so failures are reproducible.
//!
//! Every checker is deterministic given the sample seed and never mutates
//! its inputs.

use serde::Serialize;
use thiserror::Error;

use crate::fields::{CostFunction, SchedulingField};
use crate::model::{Control, QueueState, ValidatedNetwork};
use crate::policy::{select_control, PolicyConfig, PolicyError};
use crate::rng::{Domain, StreamRng};
use crate::sim::{sample_arrivals, sample_service_matrix, step, SimError};

/// Sentinel measurement for structural violations (zero field away from the
/// origin, vanishing component at an interior state). Finite so reports
/// stay valid JSON.
pub const STRUCTURAL_VIOLATION: f64 = 1e300;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("field evaluation failed: {0}")]
    FieldEvaluationError(String),
    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),
    #[error("linear program failed: {0}")]
    LPFailure(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Shell-sampling plan shared by the checkers.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    /// Strictly increasing l1-shell radii.
    pub shell_radii: Vec<f64>,
    pub points_per_shell: usize,
    /// Perturbation bound `C1` (l-infinity ball).
    pub delta_norm_bound: f64,
    /// Small-coordinate bound `C2`.
    pub small_coord_bound: f64,
    pub rng_seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            shell_radii: vec![1e2, 1e3, 1e4],
            points_per_shell: 512,
            delta_norm_bound: 10.0,
            small_coord_bound: 10.0,
            rng_seed: 0,
        }
    }
}

/// One offending state found by a checker.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub state: Vec<f64>,
    pub perturbation: Option<Vec<f64>>,
    pub measured: f64,
}

/// Outcome of one audit.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    /// Radius from which every larger sampled shell met the tolerance.
    pub witness_threshold: Option<f64>,
    pub worst_violation: f64,
    pub counterexamples: Vec<Counterexample>,
}

const MAX_COUNTEREXAMPLES: usize = 8;

// ---------------------------------------------------------------------------
// Shell sampling
// ---------------------------------------------------------------------------

struct ShellSample {
    radius: f64,
    /// Interior and near-face states (all coordinates > 0).
    states: Vec<Vec<f64>>,
    /// `(face coordinate, state)` with the face coordinate exactly zero.
    face_states: Vec<(usize, Vec<f64>)>,
}

/// Uniform point on the simplex `{x >= 0, sum x = total}`.
fn simplex_point(rng: &mut StreamRng, m: usize, total: f64) -> Vec<f64> {
    if m == 1 {
        return vec![total];
    }
    let gammas: Vec<f64> = (0..m)
        .map(|_| -(1.0 - rng.next_f64()).ln().max(1e-300))
        .collect();
    let sum: f64 = gammas.iter().sum();
    gammas.iter().map(|g| g / sum * total).collect()
}

fn sample_shells(m: usize, sample: &SampleSpec) -> Vec<ShellSample> {
    let per_face = (sample.points_per_shell / 32).max(4);
    sample
        .shell_radii
        .iter()
        .enumerate()
        .map(|(ri, &radius)| {
            let mut rng = StreamRng::substream(sample.rng_seed, ri as u64, Domain::Analysis, 0);
            let mut states = Vec::new();
            for _ in 0..sample.points_per_shell {
                states.push(simplex_point(&mut rng, m, radius));
            }
            // A band of near-face states per coordinate: one coordinate held
            // below C2, the rest filling the shell.
            if m >= 2 {
                for i in 0..m {
                    for _ in 0..per_face {
                        let small = (0.05 + 0.9 * rng.next_f64())
                            * sample.small_coord_bound.min(radius / 2.0);
                        let rest = simplex_point(&mut rng, m - 1, radius - small);
                        let mut x = Vec::with_capacity(m);
                        let mut it = rest.into_iter();
                        for j in 0..m {
                            x.push(if j == i { small } else { it.next().unwrap() });
                        }
                        states.push(x);
                    }
                }
            }
            let mut face_states = Vec::new();
            if m >= 2 {
                for i in 0..m {
                    for _ in 0..per_face {
                        let rest = simplex_point(&mut rng, m - 1, radius);
                        let mut x = Vec::with_capacity(m);
                        let mut it = rest.into_iter();
                        for j in 0..m {
                            x.push(if j == i { 0.0 } else { it.next().unwrap() });
                        }
                        face_states.push((i, x));
                    }
                }
            }
            ShellSample {
                radius,
                states,
                face_states,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pass logic
// ---------------------------------------------------------------------------

struct RadiusResult {
    radius: f64,
    worst: f64,
    violators: Vec<Counterexample>,
}

/// The asymptotic verdict: passed iff some sampled radius starts a suffix of
/// shells that all meet the tolerance.
fn suffix_verdict(check: &str, results: Vec<RadiusResult>, eps: f64) -> CheckReport {
    let first_good = (0..results.len())
        .find(|&k| results[k..].iter().all(|r| r.worst <= eps));
    match first_good {
        Some(k) => {
            let worst = results[k..]
                .iter()
                .map(|r| r.worst)
                .fold(f64::NEG_INFINITY, f64::max);
            // Sub-threshold violations are kept for context.
            let mut counterexamples: Vec<Counterexample> = results[..k]
                .iter()
                .flat_map(|r| r.violators.iter().cloned())
                .collect();
            counterexamples.truncate(MAX_COUNTEREXAMPLES);
            CheckReport {
                check: check.to_string(),
                passed: true,
                witness_threshold: Some(results[k].radius),
                worst_violation: worst,
                counterexamples,
            }
        }
        None => {
            let last = results.last().expect("at least one radius");
            let mut counterexamples = last.violators.clone();
            counterexamples.sort_by(|a, b| b.measured.total_cmp(&a.measured));
            counterexamples.truncate(MAX_COUNTEREXAMPLES);
            CheckReport {
                check: check.to_string(),
                passed: false,
                witness_threshold: None,
                worst_violation: last.worst,
                counterexamples,
            }
        }
    }
}

fn normalized(field: &SchedulingField, x: &[f64]) -> Result<Option<Vec<f64>>, AnalysisError> {
    let mu = field.eval(x);
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::FieldEvaluationError(format!(
            "non-finite weight at {x:?}"
        )));
    }
    let norm: f64 = mu.iter().map(|v| v.abs()).sum();
    if norm == 0.0 {
        return Ok(None);
    }
    Ok(Some(mu.iter().map(|v| v / norm).collect()))
}

/// Deterministic probe directions spanning the l-infinity ball: axis moves,
/// uniform moves, and sum-preserving transfers (the worst case for
/// normalized fields).
fn probe_directions(m: usize) -> Vec<Vec<f64>> {
    let mut probes = Vec::new();
    for i in 0..m {
        let mut up = vec![0.0; m];
        up[i] = 1.0;
        probes.push(up.clone());
        up[i] = -1.0;
        probes.push(up);
    }
    probes.push(vec![1.0; m]);
    probes.push(vec![-1.0; m]);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let mut t = vec![0.0; m];
                t[i] = 1.0;
                t[j] = -1.0;
                probes.push(t);
            }
        }
    }
    probes
}

// ---------------------------------------------------------------------------
// Normalized-field continuity (large-shell insensitivity to bounded moves)
// ---------------------------------------------------------------------------

/// Audits whether bounded state changes stop moving the normalized field on
/// large shells: measures `max_i |mu_bar_i(x + dx) - mu_bar_i(x)|` over
/// perturbations `||dx||_inf < C1` keeping `x + dx >= 0`.
pub fn check_thm41_cond1(
    field: &SchedulingField,
    eps1: f64,
    sample: &SampleSpec,
) -> Result<CheckReport, AnalysisError> {
    let m = field.m();
    let probes = probe_directions(m);
    let random_probes = 8;
    let scale = 0.999 * sample.delta_norm_bound;
    let mut results = Vec::new();
    for (ri, shell) in sample_shells(m, sample).iter().enumerate() {
        let mut rng =
            StreamRng::substream(sample.rng_seed, ri as u64, Domain::Analysis, 1);
        let mut worst = 0.0f64;
        let mut violators = Vec::new();
        let all_states = shell
            .states
            .iter()
            .chain(shell.face_states.iter().map(|(_, x)| x));
        for x in all_states {
            let base = match normalized(field, x)? {
                Some(b) => b,
                None => {
                    worst = STRUCTURAL_VIOLATION;
                    violators.push(Counterexample {
                        state: x.clone(),
                        perturbation: None,
                        measured: STRUCTURAL_VIOLATION,
                    });
                    continue;
                }
            };
            let mut deltas: Vec<Vec<f64>> = probes
                .iter()
                .map(|p| p.iter().map(|v| v * scale).collect())
                .collect();
            for _ in 0..random_probes {
                deltas.push(
                    (0..m)
                        .map(|_| (2.0 * rng.next_f64() - 1.0) * scale)
                        .collect(),
                );
            }
            for mut delta in deltas {
                for (di, xi) in delta.iter_mut().zip(x.iter()) {
                    *di = di.max(-xi);
                }
                let moved: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                let shifted = match normalized(field, &moved)? {
                    Some(s) => s,
                    None => {
                        worst = STRUCTURAL_VIOLATION;
                        violators.push(Counterexample {
                            state: x.clone(),
                            perturbation: Some(delta),
                            measured: STRUCTURAL_VIOLATION,
                        });
                        continue;
                    }
                };
                let measured = base
                    .iter()
                    .zip(shifted.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if measured > worst {
                    worst = measured;
                }
                if measured > eps1 && violators.len() < 4 * MAX_COUNTEREXAMPLES {
                    violators.push(Counterexample {
                        state: x.clone(),
                        perturbation: Some(delta),
                        measured,
                    });
                }
            }
        }
        results.push(RadiusResult {
            radius: shell.radius,
            worst,
            violators,
        });
    }
    Ok(suffix_verdict("thm41-1", results, eps1))
}

/// Audits whether small coordinates lose normalized weight on large shells:
/// measures `mu_bar_i(x)` over states with `x_i < C2`.
pub fn check_thm41_cond2(
    field: &SchedulingField,
    eps2: f64,
    sample: &SampleSpec,
) -> Result<CheckReport, AnalysisError> {
    let m = field.m();
    let c2 = sample.small_coord_bound;
    let mut results = Vec::new();
    for shell in sample_shells(m, sample) {
        let mut worst = 0.0f64;
        let mut violators = Vec::new();
        let all_states = shell
            .states
            .iter()
            .chain(shell.face_states.iter().map(|(_, x)| x));
        for x in all_states {
            if !x.iter().any(|&v| v < c2) {
                continue;
            }
            let bar = match normalized(field, x)? {
                Some(b) => b,
                None => {
                    worst = STRUCTURAL_VIOLATION;
                    violators.push(Counterexample {
                        state: x.clone(),
                        perturbation: None,
                        measured: STRUCTURAL_VIOLATION,
                    });
                    continue;
                }
            };
            let measured = (0..m)
                .filter(|&i| x[i] < c2)
                .map(|i| bar[i])
                .fold(0.0, f64::max);
            if measured > worst {
                worst = measured;
            }
            if measured > eps2 && violators.len() < 4 * MAX_COUNTEREXAMPLES {
                violators.push(Counterexample {
                    state: x.clone(),
                    perturbation: None,
                    measured,
                });
            }
        }
        results.push(RadiusResult {
            radius: shell.radius,
            worst,
            violators,
        });
    }
    Ok(suffix_verdict("thm41-2", results, eps2))
}

// ---------------------------------------------------------------------------
// Gradient-based conditions
// ---------------------------------------------------------------------------

/// Audits the gradient-flatness condition behind differentiable fields.
///
/// Condition 1 is measured in its normalized form
/// `max_i ||grad mu_i(x)||_2 / ||mu(x)||_1`, i.e. the log-gradient
/// `||grad log mu_i||` weighted by the normalized component `mu_bar_i`.
/// That is the quantity bounded-move stability actually consumes: the raw
/// log-gradient of any admissible field blows up like `1/x_i` next to the
/// face `x_i = 0` (components must vanish there), so auditing it unweighted
/// would reject every non-idling field including plain MaxWeight.
///
/// Condition 2 demands `mu_i(x) = 0` exactly on the face `x_i = 0`; it is
/// evaluated bitwise, no tolerance. A vanishing component at an interior
/// sampled state is reported as a strict-positivity violation rather than a
/// crash.
pub fn check_cor42(
    field: &SchedulingField,
    eps: f64,
    sample: &SampleSpec,
) -> Result<CheckReport, AnalysisError> {
    let m = field.m();
    let mut results = Vec::new();
    let mut face_violations = Vec::new();
    for shell in sample_shells(m, sample) {
        let mut worst = 0.0f64;
        let mut violators = Vec::new();
        let interior_states = shell.states.iter().map(|x| (None, x));
        let face_states = shell.face_states.iter().map(|(i, x)| (Some(*i), x));
        for (face, x) in interior_states.chain(face_states) {
            let mu = field.eval(x);
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::FieldEvaluationError(format!(
                    "non-finite weight at {x:?}"
                )));
            }
            // Condition 2 on the face; strict positivity in the interior.
            match face {
                Some(i) => {
                    if mu[i] != 0.0 {
                        face_violations.push(Counterexample {
                            state: x.clone(),
                            perturbation: None,
                            measured: mu[i],
                        });
                    }
                }
                None => {
                    if mu.iter().any(|&v| v == 0.0) {
                        worst = STRUCTURAL_VIOLATION;
                        violators.push(Counterexample {
                            state: x.clone(),
                            perturbation: None,
                            measured: STRUCTURAL_VIOLATION,
                        });
                        continue;
                    }
                }
            }
            let norm1: f64 = mu.iter().map(|v| v.abs()).sum();
            if norm1 == 0.0 {
                worst = STRUCTURAL_VIOLATION;
                violators.push(Counterexample {
                    state: x.clone(),
                    perturbation: None,
                    measured: STRUCTURAL_VIOLATION,
                });
                continue;
            }
            let jac = field.jacobian_or_numeric(x);
            let measured = jac
                .iter()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() / norm1)
                .fold(0.0, f64::max);
            if !measured.is_finite() {
                return Err(AnalysisError::FieldEvaluationError(format!(
                    "non-finite gradient at {x:?}"
                )));
            }
            if measured > worst {
                worst = measured;
            }
            if measured > eps && violators.len() < 4 * MAX_COUNTEREXAMPLES {
                violators.push(Counterexample {
                    state: x.clone(),
                    perturbation: None,
                    measured,
                });
            }
        }
        results.push(RadiusResult {
            radius: shell.radius,
            worst,
            violators,
        });
    }
    let mut report = suffix_verdict("cor42", results, eps);
    if !face_violations.is_empty() {
        report.passed = false;
        report.counterexamples.extend(face_violations);
        report.counterexamples.truncate(MAX_COUNTEREXAMPLES);
    }
    Ok(report)
}

/// Informational variant measuring `max_i ||grad mu_i(x)||_2 / ||mu(x)||_2`;
/// never gates acceptance.
pub fn check_remark3(
    field: &SchedulingField,
    eps: f64,
    sample: &SampleSpec,
) -> Result<CheckReport, AnalysisError> {
    let m = field.m();
    let mut results = Vec::new();
    for shell in sample_shells(m, sample) {
        let mut worst = 0.0f64;
        let mut violators = Vec::new();
        let all_states = shell
            .states
            .iter()
            .chain(shell.face_states.iter().map(|(_, x)| x));
        for x in all_states {
            let mu = field.eval(x);
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::FieldEvaluationError(format!(
                    "non-finite weight at {x:?}"
                )));
            }
            let norm2: f64 = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm2 == 0.0 {
                worst = STRUCTURAL_VIOLATION;
                violators.push(Counterexample {
                    state: x.clone(),
                    perturbation: None,
                    measured: STRUCTURAL_VIOLATION,
                });
                continue;
            }
            let jac = field.jacobian_or_numeric(x);
            let measured = jac
                .iter()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() / norm2)
                .fold(0.0, f64::max);
            if measured > worst {
                worst = measured;
            }
            if measured > eps && violators.len() < 4 * MAX_COUNTEREXAMPLES {
                violators.push(Counterexample {
                    state: x.clone(),
                    perturbation: None,
                    measured,
                });
            }
        }
        results.push(RadiusResult {
            radius: shell.radius,
            worst,
            violators,
        });
    }
    Ok(suffix_verdict("remark3", results, eps))
}

// ---------------------------------------------------------------------------
// Simple-perturbation sufficiency
// ---------------------------------------------------------------------------

/// Which componentwise perturbation a field composes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Exp,
    Log,
}

impl Perturbation {
    fn deriv(self, x: f64, theta: f64) -> f64 {
        match self {
            Perturbation::Exp => crate::fields::exp_perturb_deriv_raw(x, theta),
            Perturbation::Log => crate::fields::log_perturb_deriv_raw(x, theta),
        }
    }

    fn value(self, x: f64, theta: f64) -> f64 {
        match self {
            Perturbation::Exp => crate::fields::exp_perturb_raw(x, theta),
            Perturbation::Log => crate::fields::log_perturb_raw(x, theta),
        }
    }
}

/// Minimum per-decade growth for a derivative audited as "grows without
/// bound". The logarithmic perturbation's derivative grows like `log x`
/// (per-decade ratio 1.2-1.4 at desk scales), so the gate sits well below
/// that but above the float noise of genuinely bounded derivatives.
pub const GROWTH_RATIO_GATE: f64 = 1.05;

/// Audits the simple-perturbation sufficiency conditions on one-dimensional
/// rays per coordinate:
///
/// (a) `d x~/d x` and `d h0/d x_i` are Lipschitz — finite-difference slopes
///     stable across step sizes `h` and `h/10` within 5%;
/// (b) `d x~/d x` grows without bound — strict increase across the sampled
///     radii with per-decade ratio at least [`GROWTH_RATIO_GATE`];
/// (c) `d h0/d x~_i (x~) >= (d x~/d x)^(1+eps)` at the largest sampled
///     coordinates.
pub fn check_cor43(
    h0: &CostFunction,
    perturbation: Perturbation,
    theta: f64,
    eps: f64,
    sample: &SampleSpec,
) -> Result<CheckReport, AnalysisError> {
    let m = h0.dim();
    let radii = &sample.shell_radii;
    let mut worst: f64 = 0.0;
    let mut counterexamples = Vec::new();
    let mut all_pass = true;

    // (a) Lipschitz audit of the perturbation derivative along a scalar ray,
    // plus the h0 partials along coordinate rays.
    let lipschitz_points: Vec<f64> = {
        let mut pts = vec![0.0, 0.5, 1.0, 2.0, 5.0, sample.small_coord_bound];
        pts.extend(radii.iter().copied());
        pts
    };
    let mut slope_bound: f64 = 0.0;
    for &t in &lipschitz_points {
        let h = 1e-3 * t.max(1.0);
        let slope_at = |h: f64| {
            (perturbation.deriv(t + h, theta) - perturbation.deriv(t, theta)) / h
        };
        let s1 = slope_at(h);
        let s2 = slope_at(h / 10.0);
        let scale = s1.abs().max(s2.abs());
        if scale > 1e-9 && (s1 - s2).abs() > 0.05 * scale {
            all_pass = false;
            counterexamples.push(Counterexample {
                state: vec![t],
                perturbation: None,
                measured: (s1 - s2).abs() / scale,
            });
        }
        slope_bound = slope_bound.max(s1.abs());
    }
    // h0 partial along each coordinate ray.
    for i in 0..m {
        for &t in &lipschitz_points {
            let h = 1e-3 * t.max(1.0);
            let partial_at = |v: f64| {
                let mut x = vec![0.0; m];
                x[i] = v;
                h0.gradient(&x)[i]
            };
            let s1 = (partial_at(t + h) - partial_at(t)) / h;
            let s2 = (partial_at(t + h / 10.0) - partial_at(t)) / (h / 10.0);
            let scale = s1.abs().max(s2.abs());
            if scale > 1e-9 && (s1 - s2).abs() > 0.05 * scale {
                all_pass = false;
                counterexamples.push(Counterexample {
                    state: vec![t],
                    perturbation: None,
                    measured: (s1 - s2).abs() / scale,
                });
            }
        }
    }

    // (b) Unbounded-growth audit of the perturbation derivative.
    let derivs: Vec<f64> = radii
        .iter()
        .map(|&r| perturbation.deriv(r, theta))
        .collect();
    for pair in derivs.windows(2) {
        let ratio = pair[1] / pair[0];
        if !(ratio >= GROWTH_RATIO_GATE) {
            all_pass = false;
            let deficit = GROWTH_RATIO_GATE - ratio;
            worst = worst.max(deficit);
            counterexamples.push(Counterexample {
                state: vec![pair[0], pair[1]],
                perturbation: None,
                measured: ratio,
            });
        }
    }

    // (c) Domination of the perturbation derivative by the h0 gradient at
    // the largest sampled coordinate.
    let r = *radii.last().expect("non-empty radii");
    for i in 0..m {
        let mut xt = vec![0.0; m];
        xt[i] = perturbation.value(r, theta);
        let g = h0.gradient(&xt)[i];
        let l = perturbation.deriv(r, theta);
        let needed = l.powf(1.0 + eps);
        let ratio = g / needed;
        if !(ratio >= 1.0) {
            all_pass = false;
            worst = worst.max(1.0 - ratio);
            counterexamples.push(Counterexample {
                state: vec![r],
                perturbation: None,
                measured: ratio,
            });
        }
    }

    counterexamples.truncate(MAX_COUNTEREXAMPLES);
    Ok(CheckReport {
        check: "cor43".to_string(),
        passed: all_pass,
        witness_threshold: None,
        worst_violation: if all_pass { 0.0 } else { worst },
        counterexamples,
    })
}

// ---------------------------------------------------------------------------
// Dynamic programming inequality
// ---------------------------------------------------------------------------

/// Checks `min over the relaxed region of <grad h(x), B u + alpha> <= -c(x)`
/// at the given states, solving each minimization as an LP over
/// `u in [0,1]^l`, `C u <= 1`, `[B u + alpha]_i >= 0` where `x_i = 0`.
pub fn check_dp_inequality(
    grad_h: &SchedulingField,
    cost: &CostFunction,
    net: &ValidatedNetwork,
    states: &[QueueState],
) -> Result<CheckReport, AnalysisError> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};

    let spec = net.spec();
    let mut worst = f64::NEG_INFINITY;
    let mut counterexamples = Vec::new();
    let tol = 1e-9;
    for x in states {
        let xf = x.as_f64();
        let g = grad_h.eval(&xf);
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let u_vars: Vec<_> = (0..spec.l)
            .map(|j| {
                let coeff: f64 = (0..spec.m).map(|i| g[i] * spec.b[i][j] as f64).sum();
                problem.add_var(coeff, (0.0, 1.0))
            })
            .collect();
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
        for i in 0..spec.m {
            if x.0[i] == 0 {
                let terms: Vec<_> = spec.b[i]
                    .iter()
                    .zip(u_vars.iter())
                    .filter(|(&bij, _)| bij != 0)
                    .map(|(&bij, &v)| (v, bij as f64))
                    .collect();
                if !terms.is_empty() {
                    problem.add_constraint(&terms, ComparisonOp::Ge, -spec.alpha[i]);
                }
            }
        }
        let solution = problem
            .solve()
            .map_err(|e| AnalysisError::LPFailure(e.to_string()))?;
        let const_term: f64 = (0..spec.m).map(|i| g[i] * spec.alpha[i]).sum();
        let min_value = solution.objective() + const_term;
        let margin = min_value + cost.eval(&xf);
        if margin > worst {
            worst = margin;
        }
        if margin > tol && counterexamples.len() < MAX_COUNTEREXAMPLES {
            counterexamples.push(Counterexample {
                state: xf,
                perturbation: None,
                measured: margin,
            });
        }
    }
    Ok(CheckReport {
        check: "dp".to_string(),
        passed: worst <= tol,
        witness_threshold: None,
        worst_violation: worst,
        counterexamples,
    })
}

// ---------------------------------------------------------------------------
// Drift estimation
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of `E[V(Q(t+1)) - V(x) | Q(t) = x]` under the
/// policy. Returns `(mean, standard error)`; the standard error is exactly
/// zero when the one-step outcome is deterministic.
pub fn estimate_drift<V>(
    policy: &PolicyConfig,
    net: &ValidatedNetwork,
    x: &QueueState,
    n_samples: u64,
    seed: u64,
    v: V,
) -> Result<(f64, f64), AnalysisError>
where
    V: Fn(&[f64]) -> f64,
{
    assert!(n_samples >= 1);
    let u: Control = select_control(policy, net, x)?;
    let v_here = v(&x.as_f64());
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for k in 0..n_samples {
        let arrivals = sample_arrivals(net, seed, k)?;
        let service = sample_service_matrix(net, &u, seed, k);
        let outcome = step(net, x, &u, &arrivals, &service, k)?;
        let d = v(&outcome.next_state.as_f64()) - v_here;
        // Welford update keeps constant sequences exactly constant.
        let count = (k + 1) as f64;
        let delta = d - mean;
        mean += delta / count;
        m2 += delta * (d - mean);
    }
    let stderr = if n_samples > 1 {
        (m2 / (n_samples as f64 - 1.0) / n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

/// Empirical bound offset: the largest `drift + c(x)/2` over the given
/// states, the constant that closes the one-step drift inequality on that
/// sample.
pub fn estimate_eta_bar<V>(
    policy: &PolicyConfig,
    net: &ValidatedNetwork,
    states: &[QueueState],
    n_samples: u64,
    seed: u64,
    v: V,
    cost: &CostFunction,
) -> Result<f64, AnalysisError>
where
    V: Fn(&[f64]) -> f64 + Copy,
{
    let mut eta: f64 = f64::NEG_INFINITY;
    for x in states {
        let (drift, _) = estimate_drift(policy, net, x, n_samples, seed, v)?;
        eta = eta.max(2.0 * (drift + 0.5 * cost.eval(&x.as_f64())));
    }
    Ok(eta)
}
