//! Central finite-difference gradient checking.

use crate::scalar::Scalar;

/// Outcome of comparing one analytic derivative against finite differences.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` for each probed element.
///
/// `eval` receives the perturbed parameter vector and returns the scalar
/// objective. `analytic` holds the gradient to compare against.
pub fn central_differences<T: Scalar>(
    params: &mut [T],
    analytic: &[T],
    indices: &[usize],
    step: f64,
    mut eval: impl FnMut(&[T]) -> f64,
) -> Vec<Probe> {
    indices
        .iter()
        .map(|&i| {
            let orig = params[i];
            params[i] = T::from_f64(orig.as_f64() + step);
            let plus = eval(params);
            params[i] = T::from_f64(orig.as_f64() - step);
            let minus = eval(params);
            params[i] = orig;
            Probe {
                index: i,
                analytic: analytic[i].as_f64(),
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
