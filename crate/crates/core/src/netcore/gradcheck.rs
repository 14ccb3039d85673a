use super::{ParamId, ParamStore, Result, Tape, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

const DENOM_FLOOR: f64 = 1e-6;

/// Compares tape gradients of the scalar built by `f` against central
/// differences over every parameter coordinate of `store`.
pub fn grad_check<Fun>(store: &ParamStore<f64>, f: Fun, eps: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_subset(store, f, eps, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_param` evenly spaced coordinates per tensor.
pub fn grad_check_subset<Fun>(
    store: &ParamStore<f64>,
    f: Fun,
    eps: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let analytic = tape.backward(out).param_grads(store);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let stride = if per_param >= n { 1 } else { n.div_ceil(per_param) };
        for k in (0..n).step_by(stride) {
            let x0 = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = x0 + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x0 - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                if rel >= report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}
