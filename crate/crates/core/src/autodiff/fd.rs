use super::tensor::Tensor;

/// Central-difference estimate of the gradient of `f` at `at`.
///
/// Costs `2 * at.numel()` evaluations of `f`.
pub fn finite_difference(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
    let indices: Vec<usize> = (0..at.numel()).collect();
    let partials = finite_difference_at(&mut f, at, step, &indices);
    let mut out = Tensor::zeros(at.shape());
    for (&i, d) in indices.iter().zip(partials) {
        out.data_mut()[i] = d;
    }
    out
}

/// Central differences for selected flat components only.
pub fn finite_difference_at(
    mut f: impl FnMut(&Tensor) -> f64,
    at: &Tensor,
    step: f64,
    indices: &[usize],
) -> Vec<f64> {
    let mut probe = at.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let at = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_difference(|t| t.data().iter().map(|v| v * v).sum(), &at, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let at = Tensor::from_vec(vec![0.3, -1.0, 7.0]);
        let g = finite_difference(|_| 4.2, &at, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
