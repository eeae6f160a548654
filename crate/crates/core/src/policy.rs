//! Control selection: minimize `<mu(x), B u + alpha>` over the feasible
//! control set with deterministic tie-breaking.
//!
//! The `<mu, alpha>` term does not depend on `u`, so selection minimizes
//! `<mu, B u>`; [`objective_value`] keeps the full inner product for
//! reporting. Ties resolve to the lexicographically smallest control, and a
//! zero weight vector idles.

use std::cmp::Ordering;

use thiserror::Error;

use crate::fields::{FieldValue, SchedulingField, ZERO_FIELD_EPS};
use crate::model::{feasible_controls, Control, ModelError, QueueState, ValidatedNetwork, Variant};

/// Exact floating-point expansion arithmetic (Shewchuk-style) for control
/// scores.
///
/// Weight components are often exactly equal (symmetric states map to
/// identical weights), which makes control objectives tie in real
/// arithmetic. Naive f64 accumulation breaks such ties by rounding noise,
/// which would override the lexicographic rule and flip under weight
/// scaling. Scores are therefore kept as exact sums of error-free products
/// and compared by the exact sign of their difference.
mod exact {
    use std::cmp::Ordering;

    /// Error-free transformation: `a + b = hi + lo` exactly.
    #[inline]
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let hi = a + b;
        let a_virt = hi - b;
        let b_virt = hi - a_virt;
        let lo = (a - a_virt) + (b - b_virt);
        (hi, lo)
    }

    /// Error-free transformation: `a * b = hi + lo` exactly.
    #[inline]
    fn two_product(a: f64, b: f64) -> (f64, f64) {
        let hi = a * b;
        let lo = a.mul_add(b, -hi);
        (hi, lo)
    }

    /// A sum of f64 components representing an exact real value.
    #[derive(Debug, Clone)]
    pub struct Expansion(Vec<f64>);

    impl Expansion {
        /// Exact value of `sum_i mu_i * k_i`.
        pub fn dot(mu: &[f64], k: &[i64]) -> Expansion {
            let mut terms = Vec::with_capacity(2 * mu.len());
            for (&m, &ki) in mu.iter().zip(k.iter()) {
                if ki == 0 {
                    continue;
                }
                let (hi, lo) = two_product(m, ki as f64);
                if lo != 0.0 {
                    terms.push(lo);
                }
                if hi != 0.0 {
                    terms.push(hi);
                }
            }
            Expansion(terms)
        }

        /// Exact value of `sum_i mu_i * (k_i + a_i)`.
        pub fn dot_with_offset(mu: &[f64], k: &[i64], a: &[f64]) -> Expansion {
            let mut e = Expansion::dot(mu, k);
            for (&m, &ai) in mu.iter().zip(a.iter()) {
                if m == 0.0 || ai == 0.0 {
                    continue;
                }
                let (hi, lo) = two_product(m, ai);
                if lo != 0.0 {
                    e.0.push(lo);
                }
                if hi != 0.0 {
                    e.0.push(hi);
                }
            }
            e
        }

        /// Grows the expansion into a nonoverlapping form and returns the
        /// components sorted by increasing magnitude of significance.
        fn normalized(&self) -> Vec<f64> {
            let mut acc: Vec<f64> = Vec::with_capacity(self.0.len());
            for &t in &self.0 {
                let mut q = t;
                let mut next = Vec::with_capacity(acc.len() + 1);
                for &a in &acc {
                    let (hi, lo) = two_sum(q, a);
                    if lo != 0.0 {
                        next.push(lo);
                    }
                    q = hi;
                }
                if q != 0.0 {
                    next.push(q);
                }
                acc = next;
            }
            acc
        }

        /// Faithful f64 approximation (components summed in order).
        pub fn approximate(&self) -> f64 {
            self.normalized().iter().sum()
        }

        /// Exact comparison of the real values of two expansions.
        pub fn cmp_exact(&self, other: &Expansion) -> Ordering {
            let mut diff = self.0.clone();
            diff.extend(other.0.iter().map(|v| -v));
            let norm = Expansion(diff).normalized();
            // The last component of a nonoverlapping expansion dominates.
            match norm.last() {
                None => Ordering::Equal,
                Some(&v) if v > 0.0 => Ordering::Greater,
                _ => Ordering::Less,
            }
        }
    }

}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no binary control qualifies at this state")]
    EmptyRegion,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A field paired with the dynamics variant it drives.
#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub field: SchedulingField,
    pub variant: Variant,
}

impl PolicyConfig {
    pub fn new(field: SchedulingField, variant: Variant) -> Self {
        PolicyConfig { field, variant }
    }
}

/// The variant-restricted control region at state `x`.
///
/// Truncated dynamics admit the full feasible set. Region-restricted
/// dynamics keep only controls with `[B u + alpha]_i >= 0` at every empty
/// queue, so the un-truncated law cannot drive the state negative in the
/// mean.
pub fn control_region(
    net: &ValidatedNetwork,
    x: &QueueState,
) -> Result<Vec<Control>, PolicyError> {
    let all = feasible_controls(net)?;
    match net.spec().variant {
        Variant::Truncated => Ok(all.to_vec()),
        Variant::MeynRegion => {
            let zero_queues: Vec<usize> =
                (0..net.m()).filter(|&i| x.0[i] == 0).collect();
            let region: Vec<Control> = all
                .iter()
                .filter(|u| {
                    let bu = net.b_times(u);
                    zero_queues
                        .iter()
                        .all(|&i| bu[i] as f64 + net.spec().alpha[i] >= 0.0)
                })
                .cloned()
                .collect();
            if region.is_empty() {
                return Err(PolicyError::EmptyRegion);
            }
            Ok(region)
        }
    }
}

/// Argmin of `<mu, B u>` over `region`, first-in-lexicographic-order among
/// minimizers. `region` must be lexicographically sorted, which
/// [`control_region`] guarantees.
pub fn select_from_weights(
    net: &ValidatedNetwork,
    mu: &[f64],
    region: &[Control],
) -> Result<Control, PolicyError> {
    if mu.len() != net.m() {
        return Err(PolicyError::DimensionMismatch(format!(
            "weight vector has length {}, network has {} queues",
            mu.len(),
            net.m()
        )));
    }
    if region.is_empty() {
        return Err(PolicyError::EmptyRegion);
    }
    if mu.iter().all(|v| v.abs() < ZERO_FIELD_EPS) {
        return Ok(Control::zero(net.l()));
    }
    let mut best: Option<(exact::Expansion, &Control)> = None;
    for u in region {
        let bu = net.b_times(u);
        let score = exact::Expansion::dot(mu, &bu);
        match &best {
            Some((s, _)) if score.cmp_exact(s) != Ordering::Less => {}
            _ => best = Some((score, u)),
        }
    }
    Ok(best.expect("region is non-empty").1.clone())
}

/// Evaluates the field at `x` and selects the control for this slot.
pub fn select_control(
    config: &PolicyConfig,
    net: &ValidatedNetwork,
    x: &QueueState,
) -> Result<Control, PolicyError> {
    debug_assert_eq!(config.variant, net.spec().variant);
    let mu = config.field.eval(&x.as_f64());
    let region = control_region(net, x)?;
    select_from_weights(net, &mu, &region)
}

/// Full objective `<mu, B u + alpha>` of a control, including the
/// control-independent arrival term.
pub fn objective_value(
    mu: &FieldValue,
    net: &ValidatedNetwork,
    u: &Control,
) -> Result<f64, PolicyError> {
    if mu.mu.len() != net.m() {
        return Err(PolicyError::DimensionMismatch(format!(
            "weight vector has length {}, network has {} queues",
            mu.mu.len(),
            net.m()
        )));
    }
    if u.0.len() != net.l() {
        return Err(PolicyError::DimensionMismatch(format!(
            "control has length {}, network has {} activities",
            u.0.len(),
            net.l()
        )));
    }
    let bu = net.b_times(u);
    Ok(exact::Expansion::dot_with_offset(&mu.mu, &bu, &net.spec().alpha).approximate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_field, FieldSpec};
    use crate::model::{tandem2, validate_network, Variant};
    use crate::rng::{Domain, StreamRng};

    fn tandem_net(alpha1: f64, variant: Variant) -> ValidatedNetwork {
        let mut spec = tandem2(alpha1);
        spec.variant = variant;
        validate_network(spec).unwrap()
    }

    #[test]
    fn region_is_full_set_for_truncated_variant() {
        let net = tandem_net(0.5, Variant::Truncated);
        let region = control_region(&net, &QueueState(vec![0, 0])).unwrap();
        assert_eq!(region.len(), 4);
    }

    #[test]
    fn region_drops_controls_draining_empty_queues() {
        let net = tandem_net(0.5, Variant::MeynRegion);
        // x1 = 0: [Bu + alpha]_1 = 0.5 - u1 >= 0 forces u1 = 0.
        let region = control_region(&net, &QueueState(vec![0, 5])).unwrap();
        let as_vecs: Vec<Vec<u8>> = region.iter().map(|c| c.0.clone()).collect();
        assert_eq!(as_vecs, vec![vec![0, 0], vec![0, 1]]);
        // All-positive states keep the full set.
        let region = control_region(&net, &QueueState(vec![2, 5])).unwrap();
        assert_eq!(region.len(), 4);
    }

    #[test]
    fn maxweight_decision_on_tandem() {
        let net = tandem_net(0.5, Variant::Truncated);
        let field = make_field(&FieldSpec::MaxWeight { d: vec![1.0, 1.0] }).unwrap();
        let config = PolicyConfig::new(field, Variant::Truncated);
        // <x, Bu> = u1 (x2 - x1) - u2 x2 = -2 u1 - u2 at x = (3, 1).
        let u = select_control(&config, &net, &QueueState(vec![3, 1])).unwrap();
        assert_eq!(u.0, vec![1, 1]);
    }

    #[test]
    fn zero_field_idles() {
        let net = tandem_net(0.5, Variant::Truncated);
        let field = make_field(&FieldSpec::MaxWeight { d: vec![1.0, 1.0] }).unwrap();
        let config = PolicyConfig::new(field, Variant::Truncated);
        let u = select_control(&config, &net, &QueueState(vec![0, 0])).unwrap();
        assert!(u.is_idle());
    }

    #[test]
    fn meyn_region_decision_at_empty_first_queue() {
        let net = tandem_net(0.5, Variant::MeynRegion);
        let field = make_field(&FieldSpec::MaxWeight { d: vec![1.0, 1.0] }).unwrap();
        let config = PolicyConfig::new(field, Variant::MeynRegion);
        // Over region {(0,0),(0,1)}, objective 5(u1 - u2) is minimized at u2 = 1.
        let u = select_control(&config, &net, &QueueState(vec![0, 5])).unwrap();
        assert_eq!(u.0, vec![0, 1]);
    }

    #[test]
    fn objective_value_examples() {
        let net = tandem_net(0.5, Variant::Truncated);
        let zero = FieldValue::new(vec![0.0, 0.0]);
        let u11 = Control(vec![1, 1]);
        assert_eq!(objective_value(&zero, &net, &u11).unwrap(), 0.0);

        let mu = FieldValue::new(vec![3.0, 1.0]);
        // 3(-1) + 1(1 - 1) + 3 * 0.5 = -1.5
        assert_eq!(objective_value(&mu, &net, &u11).unwrap(), -1.5);

        let idle = Control::zero(2);
        let expected: f64 = 3.0 * 0.5;
        assert_eq!(objective_value(&mu, &net, &idle).unwrap(), expected);

        let short = FieldValue::new(vec![1.0]);
        assert!(objective_value(&short, &net, &u11).is_err());
    }

    #[test]
    fn selection_is_scale_invariant_and_deterministic() {
        let net = tandem_net(0.5, Variant::Truncated);
        let region = control_region(&net, &QueueState(vec![4, 2])).unwrap();
        let mut rng = StreamRng::substream(21, 0, Domain::Analysis, 0);
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..2).map(|_| rng.next_f64() * 10.0).collect();
            let kappa = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
            let scaled: Vec<f64> = mu.iter().map(|v| v * kappa).collect();
            let a = select_from_weights(&net, &mu, &region).unwrap();
            let b = select_from_weights(&net, &scaled, &region).unwrap();
            let c = select_from_weights(&net, &mu, &region).unwrap();
            assert_eq!(a, b, "scaling by {kappa} changed the decision");
            assert_eq!(a, c);
        }
    }

    #[test]
    fn ties_break_to_lexicographically_smallest() {
        let net = tandem_net(0.0, Variant::Truncated);
        // mu = (0+, 0) makes u2 irrelevant: controls (1,0) and (1,1) tie.
        let mu = vec![1.0, 0.0];
        let region = control_region(&net, &QueueState(vec![5, 5])).unwrap();
        let u = select_from_weights(&net, &mu, &region).unwrap();
        assert_eq!(u.0, vec![1, 0]);
    }
}
