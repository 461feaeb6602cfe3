//! Task generalization by mixing component controllers.
//!
//! Components share dynamics, running cost and interior set and differ only
//! in their final costs. Kernel weights over terminal states give `ω̃`; the
//! state-dependent mixing weights are `W^f ∝ ω̃^f Z^f`, evaluated in the log
//! domain because `Z` routinely underflows.

use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::lsoc::ScalarField;
use crate::numeric::{log_sum_exp, softmax};
use crate::zcbf::{safety_filter, AffineConstraint, ZcbfError};

/// Kernel entry used on non-position coordinates.
pub const NEGLIGIBLE_KERNEL: f64 = 1e-8;
pub const DEFAULT_KERNEL_WIDTH: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("target outside kernel support: every raw weight underflows")]
    OutsideKernelSupport,
    #[error("all mixing weights underflow (log ω̃ + log Z = {log_terms:?})")]
    WeightUnderflow { log_terms: Vec<f64> },
    #[error(transparent)]
    Safety(#[from] ZcbfError),
}

/// A solved task: terminal state and final cost.
#[derive(Clone)]
pub struct ComponentTask {
    pub id: usize,
    pub target: DVector<f64>,
    pub final_cost: ScalarField,
}

impl std::fmt::Debug for ComponentTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComponentTask").field("id", &self.id).field("target", &self.target).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionWeights {
    /// `ω̄^f = exp(-½ Δᵀ P Δ)`.
    pub raw: Vec<f64>,
    /// `ω̃^f = ω̄^f / Σ ω̄`.
    pub normalized: Vec<f64>,
    /// Diagonal of the kernel matrix.
    pub kernel: DVector<f64>,
}

/// Kernel diagonal with `width` on `positions` and a negligible entry
/// elsewhere.
pub fn position_kernel(dim: usize, positions: &[usize], width: f64) -> DVector<f64> {
    let mut k = DVector::from_element(dim, NEGLIGIBLE_KERNEL);
    for i in positions {
        k[*i] = width;
    }
    k
}

pub fn composition_weights(targets: &[DVector<f64>], new_target: &DVector<f64>, kernel: &DVector<f64>) -> Result<CompositionWeights, ComposeError> {
    if targets.is_empty() {
        return Err(ComposeError::Argument("at least one component is required".into()));
    }
    if kernel.len() != new_target.len() || targets.iter().any(|t| t.len() != new_target.len()) {
        return Err(ComposeError::Argument("targets and kernel must share one dimension".into()));
    }
    if !kernel.iter().all(|k| *k > 0.0 && k.is_finite()) {
        return Err(ComposeError::Argument("kernel must be positive definite".into()));
    }
    let logs: Vec<f64> = targets
        .iter()
        .map(|t| {
            let d = new_target - t;
            -0.5 * d.iter().zip(kernel.iter()).map(|(di, ki)| ki * di * di).sum::<f64>()
        })
        .collect();
    let raw: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    if raw.iter().all(|w| *w == 0.0) {
        return Err(ComposeError::OutsideKernelSupport);
    }
    let normalized = softmax(&logs);
    Ok(CompositionWeights { raw, normalized, kernel: kernel.clone() })
}

/// `φ(x) = -log Σ ω̃^f exp(-φ^f(x))`.
pub fn composite_final_cost(components: &[ScalarField], weights: &CompositionWeights) -> Result<ScalarField, ComposeError> {
    composite_final_cost_tempered(components, weights, 1.0)
}

/// `φ(x) = -λ log Σ ω̃^f exp(-φ^f(x)/λ)`: the final cost whose desirability
/// is exactly `Σ ω̃^f Z^f` at temperature `λ`.
pub fn composite_final_cost_tempered(components: &[ScalarField], weights: &CompositionWeights, lambda: f64) -> Result<ScalarField, ComposeError> {
    if components.len() != weights.normalized.len() {
        return Err(ComposeError::Argument("one final cost per weight is required".into()));
    }
    if !(lambda > 0.0) {
        return Err(ComposeError::Argument(format!("temperature must be positive, got {lambda}")));
    }
    let phis = components.to_vec();
    let log_w: Vec<f64> = weights.normalized.iter().map(|w| w.ln()).collect();
    Ok(Arc::new(move |x: &[f64]| {
        let terms: Vec<f64> = phis.iter().zip(&log_w).map(|(phi, lw)| lw - phi(x) / lambda).collect();
        -lambda * log_sum_exp(&terms)
    }))
}

/// `W^f = ω̃^f Z^f / Σ_e ω̃^e Z^e` from `log Z^f`.
pub fn state_weights(weights: &CompositionWeights, log_z: &[f64]) -> Result<Vec<f64>, ComposeError> {
    if log_z.len() != weights.normalized.len() {
        return Err(ComposeError::Argument("one desirability per component is required".into()));
    }
    let log_terms: Vec<f64> = weights.normalized.iter().zip(log_z).map(|(w, lz)| w.ln() + lz).collect();
    if log_terms.iter().any(|v| v.is_nan()) || log_sum_exp(&log_terms) == f64::NEG_INFINITY {
        return Err(ComposeError::WeightUnderflow { log_terms });
    }
    Ok(softmax(&log_terms))
}

/// `Σ W^f u^f`.
pub fn composite_control(w: &[f64], controls: &[DVector<f64>]) -> Result<DVector<f64>, ComposeError> {
    if w.is_empty() || w.len() != controls.len() {
        return Err(ComposeError::Argument("one weight per component control is required".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || w.iter().any(|v| *v < 0.0) {
        return Err(ComposeError::Argument(format!("mixing weights must be a distribution, sum = {sum}")));
    }
    let p = controls[0].len();
    if controls.iter().any(|u| u.len() != p) {
        return Err(ComposeError::Argument("component controls differ in dimension".into()));
    }
    let mut u = DVector::zeros(p);
    for (wi, ui) in w.iter().zip(controls) {
        u.axpy(*wi, ui, 1.0);
    }
    Ok(u)
}

/// Re-filters the mixed control.
pub fn safe_composite_control(u: &DVector<f64>, constraints: &[AffineConstraint]) -> Result<DVector<f64>, ComposeError> {
    Ok(safety_filter(u, constraints)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn coincident_target_has_unit_raw_weight() {
        let k = position_kernel(4, &[0, 1], 0.02);
        let t = v(&[35.0, 28.0, 0.0, 0.0]);
        let w = composition_weights(std::slice::from_ref(&t), &t, &k).unwrap();
        assert_eq!(w.raw, vec![1.0]);
        assert_eq!(w.normalized, vec![1.0]);
    }

    #[test]
    fn equidistant_targets_split_evenly() {
        let k = position_kernel(2, &[0, 1], 0.02);
        let w = composition_weights(&[v(&[35.0, 28.0]), v(&[35.0, 14.0])], &v(&[35.0, 21.0]), &k).unwrap();
        assert_eq!(w.normalized, vec![0.5, 0.5]);
        assert!((w.raw[0] - (-0.49f64).exp()).abs() < 1e-15);
        assert!((w.raw[0] - 0.6126).abs() < 1e-4);
    }

    #[test]
    fn far_target_is_outside_support() {
        let k = position_kernel(2, &[0, 1], 100.0);
        let err = composition_weights(&[v(&[0.0, 0.0])], &v(&[100.0, 0.0]), &k).unwrap_err();
        assert_eq!(err, ComposeError::OutsideKernelSupport);
        assert!(composition_weights(&[], &v(&[0.0]), &v(&[1.0])).is_err());
        assert!(composition_weights(&[v(&[0.0])], &v(&[0.0]), &v(&[0.0])).is_err());
    }

    #[test]
    fn composite_final_cost_cases() {
        let k = position_kernel(1, &[0], 0.02);
        let one = composition_weights(&[v(&[0.0])], &v(&[0.0]), &k).unwrap();
        let phi: ScalarField = Arc::new(|x: &[f64]| 3.0 * x[0] + 1.0);
        let c = composite_final_cost(std::slice::from_ref(&phi), &one).unwrap();
        assert!((c(&[2.0]) - 7.0).abs() < 1e-12);

        let half = composition_weights(&[v(&[1.0]), v(&[-1.0])], &v(&[0.0]), &k).unwrap();
        let k4: ScalarField = Arc::new(|_| 4.0);
        let c = composite_final_cost(&[k4.clone(), k4], &half).unwrap();
        assert!((c(&[0.3]) - 4.0).abs() < 1e-12);

        let zero: ScalarField = Arc::new(|_| 0.0);
        let big: ScalarField = Arc::new(|_| 800.0);
        let c = composite_final_cost(&[zero, big], &half).unwrap();
        assert!((c(&[0.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn state_weight_cases() {
        let k = position_kernel(1, &[0], 0.02);
        let half = composition_weights(&[v(&[1.0]), v(&[-1.0])], &v(&[0.0]), &k).unwrap();
        let w = state_weights(&half, &[2f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = state_weights(&half, &[-3.0, -3.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = state_weights(&half, &[-10.0, -900.0]).unwrap();
        assert!(w[0] == 1.0 && w[1] < 1e-300);
        let err = state_weights(&half, &[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap_err();
        assert!(matches!(err, ComposeError::WeightUnderflow { .. }));
    }

    #[test]
    fn composite_control_cases() {
        let u = [v(&[3.0, 0.0]), v(&[0.0, 3.0])];
        assert_eq!(composite_control(&[1.0, 0.0], &u).unwrap(), u[0]);
        let out = composite_control(&[2.0 / 3.0, 1.0 / 3.0], &u).unwrap();
        assert!((out - v(&[2.0, 1.0])).norm() < 1e-15);
        let sym = [v(&[1.5, -2.0]), v(&[-1.5, 2.0])];
        assert_eq!(composite_control(&[0.5, 0.5], &sym).unwrap(), v(&[0.0, 0.0]));
        assert!(composite_control(&[0.5, 0.6], &u).is_err());
    }

    #[test]
    fn feasible_composite_passes_through() {
        let c = AffineConstraint::new(v(&[1.0, 0.0]), -1.0, crate::zcbf::ConstraintId { obstacle: 0, level: 1 }).unwrap();
        let u = v(&[0.2, 0.4]);
        assert_eq!(safe_composite_control(&u, std::slice::from_ref(&c)).unwrap(), u);
        let out = safe_composite_control(&v(&[-3.0, 0.4]), &[c]).unwrap();
        assert!((out - v(&[-1.0, 0.4])).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn weight_invariants(
            logz in proptest::collection::vec(-700.0..50.0f64, 2..6),
            shift in -300.0..300.0f64,
            ty in proptest::collection::vec(0.0..40.0f64, 6),
            controls in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 6),
        ) {
            let f = logz.len();
            let k = position_kernel(2, &[0, 1], 0.02);
            let targets: Vec<DVector<f64>> = (0..f).map(|i| v(&[35.0, ty[i]])).collect();
            let cw = composition_weights(&targets, &v(&[35.0, 21.0]), &k).unwrap();
            prop_assert!((cw.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let w = state_weights(&cw, &logz).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
            let shifted: Vec<f64> = logz.iter().map(|l| l + shift).collect();
            let w2 = state_weights(&cw, &shifted).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let rev_w = CompositionWeights {
                raw: cw.raw.iter().rev().copied().collect(),
                normalized: cw.normalized.iter().rev().copied().collect(),
                kernel: cw.kernel.clone(),
            };
            let rev_z: Vec<f64> = logz.iter().rev().copied().collect();
            let w3 = state_weights(&rev_w, &rev_z).unwrap();
            for (a, b) in w.iter().zip(w3.iter().rev()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
            let us: Vec<DVector<f64>> = controls[..f].iter().map(|(a, b)| v(&[*a, *b])).collect();
            let u = composite_control(&w, &us).unwrap();
            let lo = us.iter().map(|x| x[0]).fold(f64::INFINITY, f64::min);
            let hi = us.iter().map(|x| x[0]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(u[0] >= lo - 1e-9 && u[0] <= hi + 1e-9);
        }
    }
}
