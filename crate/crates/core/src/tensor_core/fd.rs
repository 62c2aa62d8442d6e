use crate::error::Result;

use super::{DenseArray, Tape, ValueId};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

/// Compares reverse-mode gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, for every entry of
/// every input. The relative error uses `max(|ad|, |fd|, 1.0)` as the
/// denominator so tiny gradients are compared absolutely.
///
/// `f` rebuilds the computation from scratch on each call; it receives leaf
/// ids in the same order as `inputs` and returns the scalar loss id.
pub fn finite_diff_check<F>(
    inputs: &[DenseArray],
    names: &[&str],
    step: f64,
    mut f: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    assert_eq!(inputs.len(), names.len());

    let run = |arrs: &[DenseArray], f: &mut F| -> Result<(Tape, ValueId)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = arrs
            .iter()
            .map(|a| tape.leaf(a.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok((tape, loss))
    };

    let (mut tape, loss) = run(inputs, &mut f)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<DenseArray>> = {
        // Leaves were pushed first, in order.
        (0..inputs.len())
            .map(|i| tape.grad(ValueId(i)).cloned())
            .collect()
    };

    let mut report = FdReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut work = inputs.to_vec();
    for (p, name) in names.iter().enumerate() {
        for i in 0..inputs[p].numel() {
            let orig = inputs[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let (tp, lp) = run(&work, &mut f)?;
            let f_plus = tp.value(lp).item();
            work[p].data_mut()[i] = orig - step;
            let (tm, lm) = run(&work, &mut f)?;
            let f_minus = tm.value(lm).item();
            work[p].data_mut()[i] = orig;

            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic[p].as_ref().map_or(0.0, |a| a.data()[i]);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]: ad={ad:.6e} fd={fd:.6e}");
            }
        }
    }
    Ok(report)
}
