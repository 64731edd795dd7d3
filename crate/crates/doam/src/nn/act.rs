//! Elementwise activations.

use ndarray::Array3;

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output* (output > 0 iff input > 0).
pub fn relu_backward(output: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |gv, &yv| {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(sigmoid_scalar)
}

/// Backward through sigmoid given the forward output.
pub fn sigmoid_backward(output: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |gv, &yv| *gv *= yv * (1.0 - yv));
    g
}
