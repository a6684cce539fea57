use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Compares tape gradients against central differences.
///
/// `loss` builds a scalar on a fresh tape from the current parameter values.
/// For every trainable parameter, at most `max_coords` evenly spaced
/// coordinates are perturbed by `±h`; the result is the maximum of
/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn finite_difference_check<M, F>(
    owner: &mut M,
    h: f64,
    max_coords: usize,
    mut loss: F,
) -> Result<GradCheckReport>
where
    M: HasParams + ?Sized,
    F: FnMut(&M, &mut Tape) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(alloc::format!("step h = {h} must be positive")));
    }
    owner.params_mut().zero_grad();
    let mut tape = Tape::new();
    let out = loss(owner, &mut tape)?;
    tape.backward(out, owner.params_mut())?;
    let mut eval = |owner: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(owner, &mut tape)?;
        tape.value(out).item().ok_or_else(|| Error::NotScalar(tape.shape(out).into()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = {
        let store = owner.params();
        store.ids().filter(|&id| store.is_trainable(id)).collect()
    };
    for id in ids {
        let n = owner.params().value(id).len();
        let picks = sample_coordinates(n, max_coords.max(1));
        for i in picks {
            let set = |owner: &mut M, v: f64| {
                owner.params_mut().get_mut(id).value_mut().data_mut()[i] = v;
            };
            let original = owner.params().value(id).data()[i];
            set(owner, original + h);
            let plus = eval(owner)?;
            set(owner, original - h);
            let minus = eval(owner)?;
            set(owner, original);

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = owner.params().grad(id).data()[i];
            let rel = libm::fabs(analytic - numeric) / libm::fmax(1e-8, libm::fabs(numeric));
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst_param = owner.params().get(id).name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn sample_coordinates(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    // evenly spaced, always including the first and last coordinate
    (0..max).map(|j| j * (n - 1) / (max - 1).max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Array;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Array::scalar(3.0), true);
        let report = finite_difference_check(&mut store, 1e-5, 10, |s, tape| {
            let v = tape.param(s, x)?;
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!((report.analytic - 6.0).abs() < 1e-12);
        assert!((report.numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Array::new(alloc::vec![3], alloc::vec![0.5, -1.0, 2.0]).unwrap(), true);
        let report = finite_difference_check(&mut store, 1e-3, 10, |s, tape| {
            let v = tape.param(s, x)?;
            let v = tape.scale(v, 4.0);
            Ok(tape.sum(v))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut store = ParamStore::new();
        let r = finite_difference_check(&mut store, 0.0, 1, |_, tape| {
            tape.constant(Array::scalar(1.0))
        });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_bounded() {
        assert_eq!(sample_coordinates(5, 10), alloc::vec![0, 1, 2, 3, 4]);
        let s = sample_coordinates(1000, 4);
        assert_eq!(s, alloc::vec![0, 333, 666, 999]);
    }
}
