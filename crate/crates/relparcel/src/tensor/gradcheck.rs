//! Central-difference gradient verification.

use super::{Tape, Tensor};

/// Compare the tape gradient of a scalar-valued function against central
/// differences with step `h`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over
/// the components of `x`. The function is re-run on a fresh tape for every
/// probe, so it must be deterministic in its inputs.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> f64
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let analytic = {
        let tape = Tape::new();
        let xt = tape.leaf(x.to_vec(), shape, true).expect("grad_check leaf");
        let loss = f(&tape, &xt);
        assert_eq!(loss.numel(), 1, "grad_check function must be scalar-valued");
        tape.backward(&loss).expect("grad_check backward");
        tape.grad(&xt).expect("grad_check gradient")
    };

    let eval = |probe: &[f64]| -> f64 {
        let tape = Tape::new();
        let xt = tape.leaf(probe.to_vec(), shape, false).expect("grad_check leaf");
        let loss = f(&tape, &xt);
        tape.scalar_value(&loss)
    };

    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&probe);
        probe[i] = orig - h;
        let minus = eval(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Step used throughout the gradient oracle suite.
    pub const H: f64 = 1e-5;

    #[test]
    fn quadratic_self_test() {
        // f(x) = sum x^2 has a smooth, exactly known gradient.
        let f = |tape: &Tape, x: &Tensor| {
            let sq = tape.mul(x, x).unwrap();
            tape.sum(&sq)
        };
        let err = grad_check(f, &[0.5, -1.5, 2.0, 0.25], &[4], H);
        assert!(err < 1e-7, "oracle self-test error {err}");
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let f = |tape: &Tape, x: &Tensor| {
            let z = tape.scale(x, 0.0);
            tape.sum(&z)
        };
        let err = grad_check(f, &[1.0, 2.0], &[2], H);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn injected_fault_is_detected() {
        // A scale op whose backward rule doubles the true gradient.
        let buggy_scale = |tape: &Tape, x: &Tensor, c: f64| -> Tensor {
            let out = tape.with_values(|vals| {
                vals[x.id()].iter().map(|v| v * c).collect::<Vec<_>>()
            });
            let x_id = x.id();
            let backward = move |_vals: &[Vec<f64>], gout: &[f64], grads: &mut [Vec<f64>]| {
                for (g, v) in grads[x_id].iter_mut().zip(gout) {
                    *g += 2.0 * c * v;
                }
            };
            tape.push_op(out, x.shape().to_vec(), &[x], Box::new(backward))
        };
        let f = |tape: &Tape, x: &Tensor| {
            let y = buggy_scale(tape, x, 3.0);
            tape.sum(&y)
        };
        let err = grad_check(f, &[1.0, -2.0], &[2], H);
        assert!(err > 0.4, "doubled backward rule should be flagged, got {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        // d sigmoid(0) = 0.25
        let f = |tape: &Tape, x: &Tensor| {
            let s = tape.sigmoid(x);
            tape.sum(&s)
        };
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0], &[1], true).unwrap();
        let s = tape.sigmoid(&x);
        tape.backward(&s).unwrap();
        assert!((tape.grad(&x).unwrap()[0] - 0.25).abs() < 1e-15);
        assert!(grad_check(f, &[0.0], &[1], H) < 1e-8);
    }
}
