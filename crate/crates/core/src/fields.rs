//! Scheduling fields: weight-vector functions `x -> mu(x)` on the
//! non-negative orthant.
//!
//! A field assigns every queue state a non-negative weight per queue; the
//! policy module picks the control minimizing `<mu(x), B u>`. Built-in
//! fields:
//!
//! ```text
//! MaxWeight(D)            mu(x) = D x
//! HMaxWeightExp(h0, th)   mu(x) = grad h0(x~) .* dx~/dx,  x~_i = x_i + th (e^{-x_i/th} - 1)
//! HMaxWeightLog(h0, th)   mu(x) = grad h0(x~) .* dx~/dx,  x~_i = x_i log(1 + x_i/th)
//! MuPTheta(h0, th)        mu(x) = P_th(x) g(x),  P_th = diag(1 - e^{-x_i/(th (1 + sum_{j!=i} x_j))})
//!                         with g = c for a linear cost and g = grad h0(x~) otherwise
//! Custom(exprs)           mu_i(x) = expr_i(x)
//! ```
//!
//! Every built-in satisfies mu(0) = 0 and mu(x) >= 0 componentwise, the
//! non-idling anchor the policy depends on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Expr};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported cost/field combination: {0}")]
    UnsupportedCombination(String),
    #[error("field evaluation failed: {0}")]
    EvaluationError(String),
}

// ---------------------------------------------------------------------------
// Perturbations
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn exp_perturb_raw(x: f64, theta: f64) -> f64 {
    x + theta * ((-x / theta).exp() - 1.0)
}

#[inline]
pub(crate) fn exp_perturb_deriv_raw(x: f64, theta: f64) -> f64 {
    1.0 - (-x / theta).exp()
}

#[inline]
pub(crate) fn log_perturb_raw(x: f64, theta: f64) -> f64 {
    x * (1.0 + x / theta).ln()
}

#[inline]
pub(crate) fn log_perturb_deriv_raw(x: f64, theta: f64) -> f64 {
    (1.0 + x / theta).ln() + x / (theta + x)
}

/// Exponential state perturbation `x + theta (e^{-x/theta} - 1)`.
///
/// Monotone in `x`, squeezed between `max(0, x - theta)` and `x`, with
/// derivative `1 - e^{-x/theta}` vanishing at the origin.
pub fn exp_perturb(x: f64, theta: f64) -> Result<f64, FieldError> {
    if x < 0.0 || !x.is_finite() {
        return Err(FieldError::DomainError(format!("x = {x} must be >= 0")));
    }
    if theta < 1.0 || !theta.is_finite() {
        return Err(FieldError::DomainError(format!(
            "theta = {theta} must be >= 1"
        )));
    }
    Ok(exp_perturb_raw(x, theta))
}

/// Derivative of [`exp_perturb`] with respect to `x`.
pub fn exp_perturb_deriv(x: f64, theta: f64) -> Result<f64, FieldError> {
    exp_perturb(x, theta)?;
    Ok(exp_perturb_deriv_raw(x, theta))
}

/// Logarithmic state perturbation `x log(1 + x/theta)`.
pub fn log_perturb(x: f64, theta: f64) -> Result<f64, FieldError> {
    if x < 0.0 || !x.is_finite() {
        return Err(FieldError::DomainError(format!("x = {x} must be >= 0")));
    }
    if theta <= 0.0 || !theta.is_finite() {
        return Err(FieldError::DomainError(format!(
            "theta = {theta} must be > 0"
        )));
    }
    Ok(log_perturb_raw(x, theta))
}

/// Derivative of [`log_perturb`] with respect to `x`:
/// `log(1 + x/theta) + x/(theta + x)`.
pub fn log_perturb_deriv(x: f64, theta: f64) -> Result<f64, FieldError> {
    log_perturb(x, theta)?;
    Ok(log_perturb_deriv_raw(x, theta))
}

/// Diagonal of the coupling matrix `P_theta(x)`:
/// entry `i` is `1 - exp(-x_i / (theta (1 + sum_{j != i} x_j)))`.
///
/// Entries live in `[0, 1)`, vanish exactly when `x_i = 0`, increase in the
/// own coordinate and decrease in every other coordinate.
pub fn p_theta(x: &[f64], theta: f64) -> Result<Vec<f64>, FieldError> {
    if theta <= 0.0 || !theta.is_finite() {
        return Err(FieldError::DomainError(format!(
            "theta = {theta} must be > 0"
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(FieldError::DomainError(format!(
            "state component {bad} must be >= 0"
        )));
    }
    let total: f64 = x.iter().sum();
    Ok(x.iter()
        .map(|&xi| 1.0 - (-xi / (theta * (1.0 + (total - xi)))).exp())
        .collect())
}

// ---------------------------------------------------------------------------
// Cost functions
// ---------------------------------------------------------------------------

/// Immediate cost `c(x)`, doubling as the surrogate value function `h0` for
/// the perturbed field constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFunction {
    /// `c(x) = <c, x>` with non-negative coefficients.
    Linear { c: Vec<f64> },
    /// `c(x) = 1/2 sum_i d_i x_i^2` with positive diagonal.
    QuadraticDiag { d: Vec<f64> },
    /// Fluid value function of the two-queue tandem,
    /// `h0(x) = 1/2 d1 (x1 + x2)^2 + 1/2 d2 x2^2`
    /// with `d1 = c1/(nu2 - alpha1)` and `d2 = (c2 - c1)/nu2`.
    TandemFluid {
        c1: f64,
        c2: f64,
        alpha1: f64,
        nu2: f64,
    },
}

impl CostFunction {
    pub fn validate(&self) -> Result<(), FieldError> {
        match self {
            CostFunction::Linear { c } => {
                if c.is_empty() || c.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(FieldError::InvalidParams(
                        "linear cost needs non-negative finite coefficients".into(),
                    ));
                }
            }
            CostFunction::QuadraticDiag { d } => {
                if d.is_empty() || d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                    return Err(FieldError::InvalidParams(
                        "quadratic cost needs a positive diagonal".into(),
                    ));
                }
            }
            CostFunction::TandemFluid { c1, c2, alpha1, nu2 } => {
                if !(*c1 > 0.0 && c2 >= c1) {
                    return Err(FieldError::InvalidParams(
                        "tandem fluid cost needs c2 >= c1 > 0".into(),
                    ));
                }
                if !(*alpha1 >= 0.0 && nu2 > alpha1) {
                    return Err(FieldError::InvalidParams(
                        "tandem fluid cost needs nu2 > alpha1 >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            CostFunction::Linear { c } => c.len(),
            CostFunction::QuadraticDiag { d } => d.len(),
            CostFunction::TandemFluid { .. } => 2,
        }
    }

    /// `(d1, d2)` for the tandem fluid value function.
    pub fn tandem_coefficients(&self) -> Option<(f64, f64)> {
        match self {
            CostFunction::TandemFluid { c1, c2, alpha1, nu2 } => {
                Some((c1 / (nu2 - alpha1), (c2 - c1) / nu2))
            }
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CostFunction::Linear { c } => c.iter().zip(x).map(|(ci, xi)| ci * xi).sum(),
            CostFunction::QuadraticDiag { d } => {
                0.5 * d.iter().zip(x).map(|(di, xi)| di * xi * xi).sum::<f64>()
            }
            CostFunction::TandemFluid { .. } => {
                let (d1, d2) = self.tandem_coefficients().unwrap();
                let s = x[0] + x[1];
                0.5 * d1 * s * s + 0.5 * d2 * x[1] * x[1]
            }
        }
    }

    /// Gradient of the function at `y`.
    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        match self {
            CostFunction::Linear { c } => c.clone(),
            CostFunction::QuadraticDiag { d } => {
                d.iter().zip(y).map(|(di, yi)| di * yi).collect()
            }
            CostFunction::TandemFluid { .. } => {
                let (d1, d2) = self.tandem_coefficients().unwrap();
                let s = d1 * (y[0] + y[1]);
                vec![s, s + d2 * y[1]]
            }
        }
    }

    /// Hessian entry `(i, j)`; constant for every supported kind.
    fn hessian(&self, i: usize, j: usize) -> f64 {
        match self {
            CostFunction::Linear { .. } => 0.0,
            CostFunction::QuadraticDiag { d } => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            CostFunction::TandemFluid { .. } => {
                let (d1, d2) = self.tandem_coefficients().unwrap();
                if i == 1 && j == 1 {
                    d1 + d2
                } else {
                    d1
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tandem gradients (two-queue network of the policy-design example)
// ---------------------------------------------------------------------------

/// Which coupling the tandem field uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TandemVariant {
    /// Componentwise exponential perturbation: factors `1 - e^{-x_i/theta}`.
    ExpPerturbed,
    /// Cross-coupled exponents: factors `1 - e^{-x_i/(theta (1 + x_j))}`.
    Modified,
}

/// Gradient-style weight vector for the tandem fluid value function under
/// either coupling.
pub fn tandem_fluid_gradient(
    x: &[f64; 2],
    cost: &CostFunction,
    theta: f64,
    variant: TandemVariant,
) -> Result<[f64; 2], FieldError> {
    let (d1, d2) = cost.tandem_coefficients().ok_or_else(|| {
        FieldError::InvalidParams("tandem gradient requires a tandem fluid cost".into())
    })?;
    cost.validate()?;
    if theta <= 0.0 {
        return Err(FieldError::DomainError(format!(
            "theta = {theta} must be > 0"
        )));
    }
    let xt = [exp_perturb_raw(x[0], theta), exp_perturb_raw(x[1], theta)];
    let g = [
        d1 * (xt[0] + xt[1]),
        d1 * (xt[0] + xt[1]) + d2 * xt[1],
    ];
    let factors = match variant {
        TandemVariant::ExpPerturbed => [
            1.0 - (-x[0] / theta).exp(),
            1.0 - (-x[1] / theta).exp(),
        ],
        TandemVariant::Modified => [
            1.0 - (-x[0] / (theta * (1.0 + x[1]))).exp(),
            1.0 - (-x[1] / (theta * (1.0 + x[0]))).exp(),
        ],
    };
    Ok([g[0] * factors[0], g[1] * factors[1]])
}

// ---------------------------------------------------------------------------
// Field specification and evaluation
// ---------------------------------------------------------------------------

/// Declarative field description, the JSON-facing type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    MaxWeight { d: Vec<f64> },
    HMaxWeightExp { cost: CostFunction, theta: f64 },
    HMaxWeightLog { cost: CostFunction, theta: f64 },
    MuPTheta { cost: CostFunction, theta: f64 },
    Custom { exprs: Vec<String> },
}

#[derive(Debug, Clone)]
enum FieldKind {
    MaxWeight { d: Vec<f64> },
    HExp { cost: CostFunction, theta: f64 },
    HLog { cost: CostFunction, theta: f64 },
    MuPTheta { cost: CostFunction, theta: f64 },
    Custom { exprs: Vec<Expr> },
}

/// An evaluable scheduling field. Immutable, cheap to clone, safe to share
/// across threads.
#[derive(Debug, Clone)]
pub struct SchedulingField {
    kind: FieldKind,
    m: usize,
}

/// Builds an evaluable field from its specification.
pub fn make_field(spec: &FieldSpec) -> Result<SchedulingField, FieldError> {
    match spec {
        FieldSpec::MaxWeight { d } => {
            if d.is_empty() || d.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(FieldError::InvalidParams(
                    "max-weight needs a positive diagonal".into(),
                ));
            }
            Ok(SchedulingField {
                m: d.len(),
                kind: FieldKind::MaxWeight { d: d.clone() },
            })
        }
        FieldSpec::HMaxWeightExp { cost, theta } => {
            cost.validate()?;
            if !(*theta >= 1.0) {
                return Err(FieldError::InvalidParams(format!(
                    "exponential perturbation requires theta >= 1, got {theta}"
                )));
            }
            Ok(SchedulingField {
                m: cost.dim(),
                kind: FieldKind::HExp {
                    cost: cost.clone(),
                    theta: *theta,
                },
            })
        }
        FieldSpec::HMaxWeightLog { cost, theta } => {
            cost.validate()?;
            if !(*theta > 0.0) {
                return Err(FieldError::InvalidParams(format!(
                    "logarithmic perturbation requires theta > 0, got {theta}"
                )));
            }
            Ok(SchedulingField {
                m: cost.dim(),
                kind: FieldKind::HLog {
                    cost: cost.clone(),
                    theta: *theta,
                },
            })
        }
        FieldSpec::MuPTheta { cost, theta } => {
            cost.validate()?;
            if !(*theta > 0.0) {
                return Err(FieldError::InvalidParams(format!(
                    "P_theta coupling requires theta > 0, got {theta}"
                )));
            }
            Ok(SchedulingField {
                m: cost.dim(),
                kind: FieldKind::MuPTheta {
                    cost: cost.clone(),
                    theta: *theta,
                },
            })
        }
        FieldSpec::Custom { exprs } => {
            if exprs.is_empty() {
                return Err(FieldError::InvalidParams(
                    "custom field needs at least one expression".into(),
                ));
            }
            let parsed: Vec<Expr> = exprs
                .iter()
                .map(|s| expr::parse(s))
                .collect::<Result<_, _>>()?;
            let m = exprs.len();
            for e in &parsed {
                if let Some(max) = e.max_coord() {
                    if max >= m {
                        return Err(FieldError::InvalidParams(format!(
                            "expression references x{} but the field has {m} coordinates",
                            max + 1
                        )));
                    }
                }
            }
            Ok(SchedulingField {
                m,
                kind: FieldKind::Custom { exprs: parsed },
            })
        }
    }
}

impl SchedulingField {
    /// State-space dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Weight vector at `x` (componentwise non-negative for `x >= 0` for all
    /// built-in kinds; custom expressions are the caller's responsibility).
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.m);
        match &self.kind {
            FieldKind::MaxWeight { d } => d.iter().zip(x).map(|(di, xi)| di * xi).collect(),
            FieldKind::HExp { cost, theta } => {
                let xt: Vec<f64> = x.iter().map(|&v| exp_perturb_raw(v, *theta)).collect();
                let g = cost.gradient(&xt);
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * exp_perturb_deriv_raw(xi, *theta))
                    .collect()
            }
            FieldKind::HLog { cost, theta } => {
                let xt: Vec<f64> = x.iter().map(|&v| log_perturb_raw(v, *theta)).collect();
                let g = cost.gradient(&xt);
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * log_perturb_deriv_raw(xi, *theta))
                    .collect()
            }
            FieldKind::MuPTheta { cost, theta } => {
                let p = p_theta_unchecked(x, *theta);
                let g = match cost {
                    CostFunction::Linear { c } => c.clone(),
                    _ => {
                        let xt: Vec<f64> =
                            x.iter().map(|&v| exp_perturb_raw(v, *theta)).collect();
                        cost.gradient(&xt)
                    }
                };
                p.iter().zip(g).map(|(pi, gi)| pi * gi).collect()
            }
            FieldKind::Custom { exprs } => exprs.iter().map(|e| e.eval(x)).collect(),
        }
    }

    /// Analytic Jacobian `J[i][j] = d mu_i / d x_j` where one is defined;
    /// custom expression fields fall back to [`jacobian_numeric`].
    ///
    /// [`jacobian_numeric`]: SchedulingField::jacobian_numeric
    pub fn jacobian(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        let m = self.m;
        match &self.kind {
            FieldKind::MaxWeight { d } => {
                let mut jac = vec![vec![0.0; m]; m];
                for i in 0..m {
                    jac[i][i] = d[i];
                }
                Some(jac)
            }
            FieldKind::HExp { cost, theta } => {
                let th = *theta;
                let xt: Vec<f64> = x.iter().map(|&v| exp_perturb_raw(v, th)).collect();
                let g = cost.gradient(&xt);
                let e: Vec<f64> = x.iter().map(|&v| exp_perturb_deriv_raw(v, th)).collect();
                let mut jac = vec![vec![0.0; m]; m];
                for i in 0..m {
                    for j in 0..m {
                        jac[i][j] = cost.hessian(i, j) * e[j] * e[i];
                        if i == j {
                            jac[i][j] += g[i] * (-x[i] / th).exp() / th;
                        }
                    }
                }
                Some(jac)
            }
            FieldKind::HLog { cost, theta } => {
                let th = *theta;
                let xt: Vec<f64> = x.iter().map(|&v| log_perturb_raw(v, th)).collect();
                let g = cost.gradient(&xt);
                let lp: Vec<f64> = x.iter().map(|&v| log_perturb_deriv_raw(v, th)).collect();
                let mut jac = vec![vec![0.0; m]; m];
                for i in 0..m {
                    for j in 0..m {
                        jac[i][j] = cost.hessian(i, j) * lp[j] * lp[i];
                        if i == j {
                            // d/dx of log(1 + x/th) + x/(th + x)
                            let lpp = 1.0 / (th + x[i]) + th / ((th + x[i]) * (th + x[i]));
                            jac[i][j] += g[i] * lpp;
                        }
                    }
                }
                Some(jac)
            }
            FieldKind::MuPTheta { cost, theta } => {
                let th = *theta;
                let total: f64 = x.iter().sum();
                let p: Vec<f64> = p_theta_unchecked(x, th);
                let (g, e): (Vec<f64>, Option<Vec<f64>>) = match cost {
                    CostFunction::Linear { c } => (c.clone(), None),
                    _ => {
                        let xt: Vec<f64> = x.iter().map(|&v| exp_perturb_raw(v, th)).collect();
                        let e: Vec<f64> =
                            x.iter().map(|&v| exp_perturb_deriv_raw(v, th)).collect();
                        (cost.gradient(&xt), Some(e))
                    }
                };
                let mut jac = vec![vec![0.0; m]; m];
                for i in 0..m {
                    let rest = 1.0 + (total - x[i]);
                    let s = x[i] / (th * rest);
                    let es = (-s).exp();
                    for j in 0..m {
                        let dp = if i == j {
                            es / (th * rest)
                        } else {
                            -x[i] * es / (th * rest * rest)
                        };
                        jac[i][j] = dp * g[i];
                        if let Some(e) = &e {
                            jac[i][j] += p[i] * cost.hessian(i, j) * e[j];
                        }
                    }
                }
                Some(jac)
            }
            FieldKind::Custom { .. } => None,
        }
    }

    /// Central-difference Jacobian with adaptive step
    /// `h_j = 1e-5 max(1, |x_j|)`, one-sided at the boundary of the orthant.
    pub fn jacobian_numeric(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let m = self.m;
        let mut jac = vec![vec![0.0; m]; m];
        let mut xp = x.to_vec();
        for j in 0..m {
            let h = 1e-5 * x[j].abs().max(1.0);
            let (fp, fm, denom) = if x[j] >= h {
                xp[j] = x[j] + h;
                let fp = self.eval(&xp);
                xp[j] = x[j] - h;
                let fm = self.eval(&xp);
                (fp, fm, 2.0 * h)
            } else {
                xp[j] = x[j] + h;
                let fp = self.eval(&xp);
                xp[j] = x[j];
                let fm = self.eval(&xp);
                (fp, fm, h)
            };
            xp[j] = x[j];
            for i in 0..m {
                jac[i][j] = (fp[i] - fm[i]) / denom;
            }
        }
        jac
    }

    /// Analytic Jacobian when defined, numeric otherwise.
    pub fn jacobian_or_numeric(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.jacobian(x)
            .unwrap_or_else(|| self.jacobian_numeric(x))
    }
}

#[inline]
fn p_theta_unchecked(x: &[f64], theta: f64) -> Vec<f64> {
    let total: f64 = x.iter().sum();
    x.iter()
        .map(|&xi| 1.0 - (-xi / (theta * (1.0 + (total - xi)))).exp())
        .collect()
}

// ---------------------------------------------------------------------------
// Field values and normalization
// ---------------------------------------------------------------------------

/// Threshold below which a weight vector counts as identically zero.
pub const ZERO_FIELD_EPS: f64 = 1e-15;

/// A weight vector together with its zero flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub mu: Vec<f64>,
    pub is_zero: bool,
}

impl FieldValue {
    pub fn new(mu: Vec<f64>) -> Self {
        let is_zero = mu.iter().all(|v| v.abs() < ZERO_FIELD_EPS);
        FieldValue { mu, is_zero }
    }
}

/// l1-normalizes a weight vector; the zero vector stays zero with the flag
/// set so the policy can idle.
pub fn normalize_field(value: &FieldValue) -> FieldValue {
    if value.is_zero {
        return FieldValue {
            mu: vec![0.0; value.mu.len()],
            is_zero: true,
        };
    }
    let norm: f64 = value.mu.iter().map(|v| v.abs()).sum();
    FieldValue::new(value.mu.iter().map(|v| v / norm).collect())
}

// ---------------------------------------------------------------------------
// Numeric gradients
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function, one-sided where the
/// step would leave the non-negative orthant.
pub fn numeric_gradient<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>, FieldError>
where
    F: Fn(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(FieldError::InvalidParams("step must be positive".into()));
    }
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let (fp, fm, denom) = if x[i] >= step {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            (fp, fm, 2.0 * step)
        } else {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i];
            let fm = f(&xp);
            (fp, fm, step)
        };
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FieldError::EvaluationError(format!(
                "function not finite near component {i}"
            )));
        }
        grad[i] = (fp - fm) / denom;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, StreamRng};

    const E_INV: f64 = 0.367_879_441_171_442_33;

    #[test]
    fn exp_perturb_matches_frozen_values() {
        assert_eq!(exp_perturb(0.0, 5.0).unwrap(), 0.0);
        assert!((exp_perturb(1.0, 1.0).unwrap() - E_INV).abs() < 1e-15);
        // 9 + e^{-10}, frozen from a 40-digit evaluation.
        assert!((exp_perturb(10.0, 1.0).unwrap() - 9.000_045_399_929_762).abs() < 1e-12);
        // Large x: x~ approaches x - theta.
        assert!((exp_perturb(1e3, 2.0).unwrap() - (1e3 - 2.0)).abs() < 1e-9);
    }

    #[test]
    fn log_perturb_matches_closed_forms() {
        assert_eq!(log_perturb(0.0, 3.0).unwrap(), 0.0);
        let theta = 2.5;
        assert!((log_perturb(theta, theta).unwrap() - theta * 2f64.ln()).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((log_perturb(e - 1.0, 1.0).unwrap() - (e - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn perturbations_reject_bad_domains() {
        assert!(exp_perturb(-0.5, 2.0).is_err());
        assert!(exp_perturb(1.0, 0.5).is_err());
        assert!(log_perturb(-1.0, 1.0).is_err());
        assert!(log_perturb(1.0, 0.0).is_err());
    }

    #[test]
    fn perturbation_derivatives_vanish_exactly_at_zero() {
        assert_eq!(exp_perturb_deriv(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(exp_perturb_deriv(0.0, 7.5).unwrap(), 0.0);
        assert_eq!(log_perturb_deriv(0.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_derivatives_match_central_differences() {
        let mut rng = StreamRng::substream(11, 0, Domain::Analysis, 0);
        for _ in 0..100 {
            let x = rng.next_f64() * 20.0;
            let theta = 1.0 + rng.next_f64() * 5.0;
            let h = 1e-6 * x.max(1.0);
            let num = (exp_perturb_raw(x + h, theta) - exp_perturb_raw((x - h).max(0.0), theta))
                / (x + h - (x - h).max(0.0));
            assert!(
                (exp_perturb_deriv_raw(x, theta) - num).abs() < 1e-6,
                "exp deriv mismatch at x={x}, theta={theta}"
            );
            let num = (log_perturb_raw(x + h, theta) - log_perturb_raw((x - h).max(0.0), theta))
                / (x + h - (x - h).max(0.0));
            assert!(
                (log_perturb_deriv_raw(x, theta) - num).abs() < 1e-6,
                "log deriv mismatch at x={x}, theta={theta}"
            );
        }
    }

    #[test]
    fn exp_perturb_sandwich() {
        let mut rng = StreamRng::substream(12, 0, Domain::Analysis, 0);
        for _ in 0..10_000 {
            let x = rng.next_f64() * 100.0;
            let theta = 1.0 + rng.next_f64() * 9.0;
            let v = exp_perturb_raw(x, theta);
            assert!(v >= 0.0 && v <= x && v >= x - theta, "x={x} theta={theta} v={v}");
        }
    }

    #[test]
    fn p_theta_matches_frozen_values() {
        let p = p_theta(&[0.0, 7.0], 1.0).unwrap();
        assert_eq!(p[0], 0.0);
        let p = p_theta(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        // Symmetric states approach 1 - e^{-1} from below.
        let t = 1e6;
        let p = p_theta(&[t, t], 1.0).unwrap();
        assert!((p[0] - (1.0 - E_INV)).abs() < 1e-5);
        assert!((p[1] - (1.0 - E_INV)).abs() < 1e-5);
    }

    #[test]
    fn p_theta_monotone_own_up_cross_down() {
        let mut rng = StreamRng::substream(13, 0, Domain::Analysis, 0);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| 0.1 + rng.next_f64() * 50.0).collect();
            let base = p_theta(&x, 1.0).unwrap();
            let mut up = x.clone();
            up[0] += 1.0;
            let bumped = p_theta(&up, 1.0).unwrap();
            assert!(bumped[0] > base[0]);
            assert!(bumped[1] < base[1] && bumped[2] < base[2]);
        }
    }

    #[test]
    fn tandem_coefficients_from_printed_formulas() {
        let cost = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 0.5,
            nu2: 1.0,
        };
        let (d1, d2) = cost.tandem_coefficients().unwrap();
        assert_eq!(d1, 2.0);
        assert_eq!(d2, 1.0);
    }

    #[test]
    fn tandem_gradient_zero_at_origin_for_both_variants() {
        let cost = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 0.5,
            nu2: 1.0,
        };
        for variant in [TandemVariant::ExpPerturbed, TandemVariant::Modified] {
            let g = tandem_fluid_gradient(&[0.0, 0.0], &cost, 1.0, variant).unwrap();
            assert_eq!(g, [0.0, 0.0]);
        }
    }

    #[test]
    fn tandem_gradient_matches_frozen_value_and_finite_differences() {
        let cost = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 0.5,
            nu2: 1.0,
        };
        let g =
            tandem_fluid_gradient(&[1.0, 1.0], &cost, 1.0, TandemVariant::ExpPerturbed).unwrap();
        // Frozen from the 40-digit oracle: (4/e)(1 - 1/e), (5/e)(1 - 1/e).
        assert!((g[0] - 0.930_176_631_739_318_5).abs() < 1e-12);
        assert!((g[1] - 1.162_720_789_674_148_1).abs() < 1e-12);

        // The exp-perturbed variant is the gradient of h(x) = h0(x~).
        let h = |x: &[f64]| {
            cost.eval(&[exp_perturb_raw(x[0], 1.0), exp_perturb_raw(x[1], 1.0)])
        };
        let num = numeric_gradient(h, &[1.0, 1.0], 1e-6).unwrap();
        assert!((g[0] - num[0]).abs() < 1e-6);
        assert!((g[1] - num[1]).abs() < 1e-6);
    }

    #[test]
    fn tandem_gradient_rejects_bad_params() {
        let cost = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 1.0,
            nu2: 1.0,
        };
        assert!(tandem_fluid_gradient(&[1.0, 1.0], &cost, 1.0, TandemVariant::Modified).is_err());
    }

    fn linear(m: usize) -> CostFunction {
        CostFunction::Linear { c: vec![1.0; m] }
    }

    #[test]
    fn make_field_examples() {
        let f = make_field(&FieldSpec::MaxWeight { d: vec![1.0, 1.0] }).unwrap();
        assert_eq!(f.eval(&[3.0, 1.0]), vec![3.0, 1.0]);

        let f = make_field(&FieldSpec::MuPTheta { cost: linear(2), theta: 1.0 }).unwrap();
        let mu = f.eval(&[1.0, 0.0]);
        assert!((mu[0] - 0.632_120_558_828_557_7).abs() < 1e-15);
        assert_eq!(mu[1], 0.0);

        let f = make_field(&FieldSpec::HMaxWeightExp {
            cost: CostFunction::QuadraticDiag { d: vec![1.0, 1.0] },
            theta: 1.0,
        })
        .unwrap();
        for k in [0.0, 1.0, 5.0, 500.0] {
            assert_eq!(f.eval(&[0.0, k])[0], 0.0, "mu_1 must vanish on the face");
        }
    }

    #[test]
    fn make_field_rejects_invalid_params() {
        assert!(make_field(&FieldSpec::MaxWeight { d: vec![1.0, -1.0] }).is_err());
        assert!(make_field(&FieldSpec::HMaxWeightExp { cost: linear(2), theta: 0.5 }).is_err());
        assert!(make_field(&FieldSpec::HMaxWeightLog { cost: linear(2), theta: 0.0 }).is_err());
        assert!(make_field(&FieldSpec::Custom { exprs: vec!["(+ x1 x5)".into()] }).is_err());
    }

    #[test]
    fn builtin_fields_nonnegative_and_anchored_at_zero() {
        let specs = vec![
            FieldSpec::MaxWeight { d: vec![2.0, 1.0, 0.5] },
            FieldSpec::HMaxWeightExp { cost: linear(3), theta: 2.0 },
            FieldSpec::HMaxWeightLog {
                cost: CostFunction::QuadraticDiag { d: vec![1.0, 2.0, 3.0] },
                theta: 0.7,
            },
            FieldSpec::MuPTheta { cost: linear(3), theta: 1.0 },
            FieldSpec::MuPTheta {
                cost: CostFunction::QuadraticDiag { d: vec![1.0, 2.0, 3.0] },
                theta: 1.0,
            },
        ];
        let mut rng = StreamRng::substream(14, 0, Domain::Analysis, 0);
        for spec in &specs {
            let f = make_field(spec).unwrap();
            assert!(f.eval(&vec![0.0; f.m()]).iter().all(|&v| v == 0.0));
            for _ in 0..10_000 {
                let x: Vec<f64> = (0..f.m()).map(|_| rng.next_f64() * 200.0).collect();
                assert!(f.eval(&x).iter().all(|&v| v >= 0.0), "negative weight for {spec:?}");
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_numeric() {
        let tandem = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 0.5,
            nu2: 1.0,
        };
        let specs = vec![
            FieldSpec::MaxWeight { d: vec![2.0, 1.0] },
            FieldSpec::HMaxWeightExp { cost: tandem.clone(), theta: 1.0 },
            FieldSpec::HMaxWeightExp {
                cost: CostFunction::QuadraticDiag { d: vec![1.5, 0.5] },
                theta: 2.0,
            },
            FieldSpec::HMaxWeightLog {
                cost: CostFunction::QuadraticDiag { d: vec![1.5, 0.5] },
                theta: 0.8,
            },
            FieldSpec::HMaxWeightLog { cost: linear(2), theta: 1.0 },
            FieldSpec::MuPTheta { cost: linear(2), theta: 1.0 },
            FieldSpec::MuPTheta { cost: tandem, theta: 1.0 },
        ];
        let mut rng = StreamRng::substream(15, 0, Domain::Analysis, 0);
        for spec in &specs {
            let f = make_field(spec).unwrap();
            for _ in 0..200 {
                let x: Vec<f64> = (0..f.m()).map(|_| 0.5 + rng.next_f64() * 30.0).collect();
                let analytic = f.jacobian(&x).expect("analytic jacobian");
                let numeric = f.jacobian_numeric(&x);
                for i in 0..f.m() {
                    for j in 0..f.m() {
                        let tol = 1e-6f64.max(1e-4 * analytic[i][j].abs());
                        assert!(
                            (analytic[i][j] - numeric[i][j]).abs() < tol,
                            "{spec:?} at {x:?}: J[{i}][{j}] {} vs {}",
                            analytic[i][j],
                            numeric[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mu_p_theta_tandem_equals_modified_gradient() {
        let cost = CostFunction::TandemFluid {
            c1: 1.0,
            c2: 2.0,
            alpha1: 0.5,
            nu2: 1.0,
        };
        let f = make_field(&FieldSpec::MuPTheta { cost: cost.clone(), theta: 1.0 }).unwrap();
        let hexp = make_field(&FieldSpec::HMaxWeightExp { cost: cost.clone(), theta: 1.0 }).unwrap();
        let mut rng = StreamRng::substream(16, 0, Domain::Analysis, 0);
        for _ in 0..500 {
            let x = [rng.next_f64() * 40.0, rng.next_f64() * 40.0];
            let modified =
                tandem_fluid_gradient(&x, &cost, 1.0, TandemVariant::Modified).unwrap();
            let expp =
                tandem_fluid_gradient(&x, &cost, 1.0, TandemVariant::ExpPerturbed).unwrap();
            let via_field = f.eval(&x);
            let via_hexp = hexp.eval(&x);
            assert!((modified[0] - via_field[0]).abs() < 1e-12);
            assert!((modified[1] - via_field[1]).abs() < 1e-12);
            assert!((expp[0] - via_hexp[0]).abs() < 1e-12);
            assert!((expp[1] - via_hexp[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_field(&FieldValue::new(vec![2.0, 2.0]));
        assert_eq!(n.mu, vec![0.5, 0.5]);
        let n = normalize_field(&FieldValue::new(vec![0.0, 0.0, 0.0]));
        assert!(n.is_zero);
        assert_eq!(n.mu, vec![0.0, 0.0, 0.0]);
        let n = normalize_field(&FieldValue::new(vec![1.0, 3.0]));
        assert_eq!(n.mu, vec![0.25, 0.75]);
        let sum: f64 = n.mu.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_gradient_examples() {
        let g = numeric_gradient(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[3.0, 1.0], 1e-5)
            .unwrap();
        assert!((g[0] - 3.0).abs() < 1e-6 && (g[1] - 1.0).abs() < 1e-6);

        let g = numeric_gradient(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = numeric_gradient(|x| x[0] * x[1], &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);

        assert!(numeric_gradient(|x| x[0].ln(), &[0.0], 1e-5).is_err());
    }

    #[test]
    fn field_spec_json_round_trip() {
        let spec = FieldSpec::MuPTheta { cost: linear(5), theta: 1.0 };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"mu_p_theta\""));
        let back: FieldSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);

        let custom: FieldSpec =
            serde_json::from_str(r#"{"kind":"custom","exprs":["(+ 1 (sin x1))","1"]}"#).unwrap();
        let f = make_field(&custom).unwrap();
        assert_eq!(f.eval(&[0.0, 9.0]), vec![1.0, 1.0]);
    }
}
