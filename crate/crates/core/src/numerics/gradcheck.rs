use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
    pub coordinates: usize,
}

/// Compares tape gradients against central finite differences over every
/// coordinate of every parameter and returns the worst relative error
/// `|fd - an| / max(1e-8, |fd| + |an|)`.
pub fn grad_check<F>(params: &ParamStore, epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if !first.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss {first}")));
    }

    let analytic = {
        let mut tape = Tape::with_params(params);
        let loss = loss_fn(&mut tape)?;
        let grads = tape.backward(loss)?;
        let mut scratch = params.clone();
        scratch.zero_grad();
        grads.accumulate_into(&mut scratch);
        scratch
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    for id in params.ids() {
        let n = params.value(id).data().len();
        for k in 0..n {
            let original = params.value(id).data()[k];
            work.get_mut(id).value.data_mut()[k] = original + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = original - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[k] = original;

            let fd = (plus - minus) / (2.0 * epsilon);
            let an = analytic.get(id).grad.data()[k];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst = format!("{}[{k}]", params.get(id).name);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Matrix::from_rows(&[[0.4, -1.2], [2.0, 0.1]]))
            .unwrap();
        let report = grad_check(&store, 1e-5, |t| {
            let v = t.param(w);
            Ok(t.sum_squares(v))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 4);
    }

    #[test]
    fn rejects_epsilon_out_of_range() {
        let store = ParamStore::new();
        let r = grad_check(&store, 1e-2, |t| Ok(t.constant(Matrix::scalar(0.0))));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn detects_non_deterministic_loss() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.add("w", Matrix::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let r = grad_check(&store, 1e-5, |t| {
            calls.set(calls.get() + 1.0);
            Ok(t.constant(Matrix::scalar(calls.get())))
        });
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }
}
