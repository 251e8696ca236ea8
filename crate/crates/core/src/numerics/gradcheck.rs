use super::params::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

fn evaluate<F>(params: &ParameterSet<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!("loss must be scalar, got shape {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Checks the gradient of `loss` at `params` against central differences with
/// the given step, coordinate by coordinate.
pub fn finite_difference_check<F>(params: &ParameterSet<f64>, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    finite_difference_check_with_floor(params, step, 1e-8, loss)
}

/// As [`finite_difference_check`], with the relative-error denominator never
/// below `floor`. Derivatives smaller than `floor` are then judged on
/// absolute error, which suits losses averaged over many tokens.
pub fn finite_difference_check_with_floor<F>(
    params: &ParameterSet<f64>,
    step: f64,
    floor: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape)?;
        tape.backward(out, 1.0)?
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_values: (0.0, 0.0), coordinates: 0 };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + step;
            let plus = evaluate(&probe, &loss)?;
            probe.get_mut(id).data_mut()[k] = original - step;
            let minus = evaluate(&probe, &loss)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), k));
                report.worst_values = (exact, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn exact_quadratic() {
        let mut params = ParameterSet::new();
        let id = params.push("theta", Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let report = finite_difference_check(&params, 1e-5, |tape| {
            let t = tape.param(id);
            let sq = tape.mul(t, t)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 1);
    }

    #[test]
    fn constant_function() {
        let mut params = ParameterSet::new();
        params.push("theta", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let report = finite_difference_check(&params, 1e-5, |tape| {
            let c = tape.constant(Tensor::vector(vec![4.0]).unwrap());
            Ok(tape.sum(c))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut params = ParameterSet::new();
        let id = params.push("theta", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let err = finite_difference_check(&params, 1e-5, |tape| {
            let t = tape.param(id);
            Ok(tape.scale(t, f64::INFINITY))
        });
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}
