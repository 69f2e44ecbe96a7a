use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Coordinates whose second difference implies a curvature above this are
/// treated as straddling a ReLU kink and excluded.
const KINK_CURVATURE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// `(parameter name, offset)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor for [`relative_error`]. Central differences carry
/// roundoff near `1e-11` at the loss scales seen here, so coordinates whose
/// true gradient is zero (attention key biases, which softmax cancels) are
/// effectively judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares reverse-sweep gradients of `f` against central differences.
///
/// Every coordinate is checked when there are at most `min_coords` of them;
/// otherwise coordinates are visited in a seeded random order until
/// `min_coords` smooth ones have been checked. `params` is restored
/// bit-for-bit on return.
pub fn grad_check<F>(params: &mut ParamSet, f: F, epsilon: f64, min_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (f0, analytic) = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let value = tape.value(loss).item();
        (value, tape.backward(loss)?)
    };
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut order: Vec<usize> = (0..params.num_coords()).collect();
    let exhaustive = order.len() <= min_coords;
    if !exhaustive {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for coord in order {
        if !exhaustive && report.checked >= min_coords {
            break;
        }
        let (id, offset) = params.locate(coord).expect("coordinate in range");
        let original = params.value(id).data()[offset];
        params.get_mut(id).value.data_mut()[offset] = original + epsilon;
        let plus = eval(params);
        params.get_mut(id).value.data_mut()[offset] = original - epsilon;
        let minus = eval(params);
        params.get_mut(id).value.data_mut()[offset] = original;
        let (plus, minus) = (plus?, minus?);

        if (plus - 2.0 * f0 + minus).abs() > KINK_CURVATURE * epsilon * epsilon {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic.get(id).map_or(0.0, |g| g.data()[offset]);
        let err = relative_error(exact, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((params.get(id).name.clone(), offset));
        }
    }
    Ok(report)
}
