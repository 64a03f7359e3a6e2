use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Fourth-order central-difference gradient check of a scalar function of
/// several inputs.
///
/// `f` builds the graph on the given tape from leaf handles and returns the
/// scalar output. At most `max_coords` coordinates per input are probed
/// (evenly strided). Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(inputs: &[Tensor], f: F, h: f64, floor: f64, max_coords: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_pair: (0.0, 0.0), worst_input: 0, worst_index: 0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (ii, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let x = t.data()[j];
            let mut at = |d: f64| -> Result<f64> {
                probe[ii].data_mut()[j] = x + d;
                eval(&probe)
            };
            let (f1, fm1, f2, fm2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe[ii].data_mut()[j] = x;
            let num = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
            let a = analytic[ii][j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = ii;
                report.worst_index = j;
                report.worst_pair = (a, num);
            }
        }
    }
    Ok(report)
}
