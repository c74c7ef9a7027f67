//! Minimal dense-tensor arithmetic, 2-D convolution, a reverse-mode
//! gradient tape for the backbone's operations, and Adam.

mod adam;
mod conv;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamState};
pub use conv::{conv2d, conv2d_grads};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// This is the independent oracle the gradient tests check the tape
/// against; it never goes through the tape itself.
pub fn finite_diff_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_on_square() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(&|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(&|_| 7.25, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_matches_pinball_subgradient_off_kink() {
        // One pixel, x = 1, prediction variable x_hat. For x_hat < x the
        // loss is q (x - x_hat) so d/d x_hat = -q; for x_hat > x it is
        // (1 - q)(x_hat - x) so d/d x_hat = 1 - q.
        let q = 0.8;
        let pinball = move |p: &Tensor| {
            let xh = p.data()[0];
            let d: f64 = 1.0 - xh;
            if d >= 0.0 {
                q * d
            } else {
                (1.0 - q) * -d
            }
        };
        let below = Tensor::from_vec(vec![0.3]);
        let g = finite_diff_grad(&pinball, &below, 1e-5);
        assert!((g.data()[0] - (-q)).abs() < 1e-4);
        let above = Tensor::from_vec(vec![1.7]);
        let g = finite_diff_grad(&pinball, &above, 1e-5);
        assert!((g.data()[0] - (1.0 - q)).abs() < 1e-4);
    }
}
