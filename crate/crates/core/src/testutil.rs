//! Finite-difference oracle shared by unit tests.

use rand::Rng;

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Central differences of a scalar function with respect to every entry of
/// every input.
pub fn finite_diff(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Gradients whose norms both fall below this are compared absolutely.
pub const ZERO_FLOOR: f64 = 1e-8;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; when both norms are below [`ZERO_FLOOR`] the
/// absolute difference is returned instead, since the ratio is noise there.
pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| a - n)
        .collect();
    let scale = norm(analytic.data()).max(norm(numeric.data()));
    if scale < ZERO_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn assert_grad_close(name: &str, analytic: &Tensor, numeric: &Tensor) {
    assert_eq!(analytic.shape(), numeric.shape(), "{name}: shape");
    let err = rel_error(analytic, numeric);
    assert!(err < FD_TOL, "{name}: relative error {err:e}");
}
