//! Central-finite-difference gradient reference.
//!
//! The reference never touches the tape's backward pass: it re-evaluates a
//! scalar function of plain tensors at perturbed inputs. Validation code
//! compares analytic gradients against [`central_diff`] with
//! [`max_rel_error`].

use super::Tensor;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// d f / d inputs by central differences: (f(x+h) - f(x-h)) / 2h per entry.
pub fn central_diff<F>(inputs: &[Tensor], mut f: F, h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].rows(), inputs[ti].cols());
        for e in 0..inputs[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let fp = f(&work);
            work[ti].data_mut()[e] = orig - h;
            let fm = f(&work);
            work[ti].data_mut()[e] = orig;
            g.data_mut()[e] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between two gradient sets, with the denominator
/// floored at 1 so near-zero gradients compare absolutely.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
