use std::collections::BTreeMap;

use super::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    /// max over coordinates of |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst coordinate
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Coordinates whose ±step evaluations switched some ReLU on or off.
    pub kink_crossings: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a tape and one leaf per entry of `params`, and must return a
/// scalar. It is called once on a recording tape and twice per coordinate on
/// a non-recording tape, so it must be deterministic.
pub fn finite_diff_check<F>(params: &ParamSet<f64>, step: f64, f: F) -> Result<GradCheckResult>
where
    F: FnMut(&mut Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>>,
{
    finite_diff_check_with_fault(params, step, None, false, f)
}

pub(crate) fn finite_diff_check_with_fault<F>(
    params: &ParamSet<f64>,
    step: f64,
    fault: Option<OpKind>,
    stop_on_crossing: bool,
    mut f: F,
) -> Result<GradCheckResult>
where
    F: FnMut(&mut Tape<f64>, &BTreeMap<String, Var<f64>>) -> Result<Var<f64>>,
{
    let eval = |tape: &mut Tape<f64>, values: &ParamSet<f64>, f: &mut F| -> Result<Var<f64>> {
        let leaves = values
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect();
        let loss = f(tape, &leaves)?;
        if loss.value().len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".to_string()));
        }
        Ok(loss)
    };

    let mut tape = match fault {
        Some(kind) => Tape::new().with_fault(kind),
        None => Tape::new(),
    };
    let loss = eval(&mut tape, params, &mut f)?;
    let signature = tape.relu_signature();
    let analytic = tape.backward(&loss)?;
    drop(tape);

    let mut probe = params.clone();
    let mut result = GradCheckResult {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        kink_crossings: 0,
    };
    for (name, value) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for '{name}'")))?;
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let mut t = Tape::no_grad();
            let up = eval(&mut t, &probe, &mut f)?.value().data()[0];
            let mut crossed = t.relu_signature() != signature;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let mut t = Tape::no_grad();
            let down = eval(&mut t, &probe, &mut f)?.value().data()[0];
            crossed |= t.relu_signature() != signature;
            result.kink_crossings += usize::from(crossed);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            if crossed && stop_on_crossing {
                return Ok(result);
            }

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            result.coordinates += 1;
            if err > result.max_rel_error || err.is_nan() {
                result.max_rel_error = err;
                result.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let params = ParamSet::from([("w".to_string(), Tensor::scalar(3.0))]);
        let r = finite_diff_check(&params, 1e-4, |tape, p| {
            let w = &p["w"];
            let sq = tape.mul(w, w)?;
            Ok(tape.sum(&sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = ParamSet::from([("w".to_string(), Tensor::ones(&[3]))]);
        let r = finite_diff_check(&params, 1e-4, |tape, _| Ok(tape.constant(Tensor::scalar(2.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn fault_is_detected() {
        let params = ParamSet::from([("w".to_string(), Tensor::new(&[2], vec![0.3, -0.2]).unwrap())]);
        let f = |tape: &mut Tape<f64>, p: &BTreeMap<String, Var<f64>>| {
            let s = tape.sigmoid(&p["w"]);
            Ok(tape.sum(&s))
        };
        let clean = finite_diff_check_with_fault(&params, 1e-4, None, false, f).unwrap();
        let broken = finite_diff_check_with_fault(&params, 1e-4, Some(OpKind::Sigmoid), false, f).unwrap();
        assert!(clean.max_rel_error < 1e-8);
        assert!(broken.max_rel_error > 0.1);
    }
}
