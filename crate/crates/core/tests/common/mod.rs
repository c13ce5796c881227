//! Shared oracles for integration tests: central finite differences for
//! gradients and brute-force ranking metrics.

use coarsetune::model::EncoderWeights;

/// Analytic gradients per parameter, captured from one backward pass.
pub fn collect_grads(w: &EncoderWeights) -> Vec<Vec<f64>> {
    w.params().iter().map(|p| p.grad.clone()).collect()
}

/// Compare analytic gradients against central finite differences of
/// `loss_fn`, element by element. `stride` subsamples elements within each
/// tensor (1 checks everything). Returns the number of elements checked.
pub fn finite_diff_check(
    w: &mut EncoderWeights,
    loss_fn: &dyn Fn(&EncoderWeights) -> f64,
    analytic: &[Vec<f64>],
    h: f64,
    tol: f64,
    stride: usize,
) -> usize {
    let mut checked = 0;
    for idx in 0..w.params().len() {
        let name = w.names()[idx].clone();
        let n = w.params()[idx].value.len();
        for e in (0..n).step_by(stride) {
            let original = w.params()[idx].value.values()[e];
            w.params_mut()[idx].value.values_mut()[e] = original + h;
            let plus = loss_fn(w);
            w.params_mut()[idx].value.values_mut()[e] = original - h;
            let minus = loss_fn(w);
            w.params_mut()[idx].value.values_mut()[e] = original;

            let fd = (plus - minus) / (2.0 * h);
            let g = analytic[idx][e];
            let rel = (fd - g).abs() / f64::max(1.0, f64::max(fd.abs(), g.abs()));
            assert!(
                rel < tol,
                "{name}[{e}]: analytic {g:.10e} vs finite-difference {fd:.10e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    checked
}
