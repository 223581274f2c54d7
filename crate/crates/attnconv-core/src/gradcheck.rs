//! Central finite-difference verification of tape gradients.
//!
//! The check only uses forward evaluations, so it is independent of the
//! reverse-sweep code it validates. Callers supply a closure that rebuilds
//! the scalar loss from scratch on a fresh tape; the closure must be a pure
//! function of the input tensors (seed any RNG it uses internally).

use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Result of one gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error seen across all input elements.
    pub max_rel_error: f64,
    /// Number of scalar gradient entries compared.
    pub checked: usize,
}

/// Relative error with an absolute guard so near-zero gradients compare
/// on an absolute scale.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-4, f64::max(a.abs(), b.abs()))
}

/// Compares tape gradients of `build`'s scalar output against central
/// differences with the given step. Panics if `build` returns a non-scalar.
pub fn check<F>(inputs: &[Tensor], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar_value(loss)
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let marked: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let ids: Vec<NodeId> = marked.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(
        tape.value(loss).len(),
        1,
        "gradcheck build must produce a scalar"
    );
    tape.backward(loss).expect("backward on scalar loss");
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), work[ti].numel(), "missing gradient for input {ti}");
        for e in 0..grad.len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = eval(&work);
            work[ti].data_mut()[e] = orig - step;
            let minus = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel_error = max_rel_error.max(rel_error(grad[e], numeric));
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error,
        checked,
    }
}
