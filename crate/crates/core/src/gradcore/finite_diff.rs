use super::tensor::Tensor;

/// Central-difference gradient `(L(p + h e_i) - L(p - h e_i)) / 2h` for
/// every coordinate of `param`.
pub fn finite_diff_grad(mut loss: impl FnMut(&Tensor) -> f64, param: &Tensor, h: f64) -> Tensor {
    let mut probe = param.clone();
    let mut grad = Tensor::zeros(param.shape().to_vec());
    for i in 0..param.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
