//! Central-difference gradient checking in `f64`.

use super::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter (or input) index and flat coordinate of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    /// Coordinates left out because a probe moved some ReLU input across
    /// zero, where the function has no derivative.
    pub skipped: usize,
}

/// Gradients smaller than this are compared on an absolute scale: a
/// central difference through a deep graph carries round-off near 1e-11.
pub const GRADIENT_FLOOR: f64 = 1e-7;

/// `|a - n| / max(GRADIENT_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRADIENT_FLOOR)
}

/// Checks the gradient of a scalar function of `inputs`.
///
/// `f` receives one tape variable per input and must return a scalar. Each
/// coordinate `x` is probed at `x ± h·max(1, |x|)`; coordinates whose
/// probes straddle a ReLU kink are counted in `skipped` and not compared.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    grad_check_store(
        |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            f(tape, &vars)
        },
        &mut store,
        h,
    )
}

/// Checks every coordinate of every gradient-carrying parameter in `store`.
pub fn grad_check_store<F>(
    f: F,
    store: &mut ParamStore<f64>,
    h: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    store.zero_grad();
    tape.accumulate_param_grads(&grads, store);
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<(f64, Vec<bool>), DiffError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok((tape.value(out)[0], tape.relu_pattern()))
    };
    let (_, pattern) = eval(store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        skipped: 0,
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let Some(analytic) = store.tensor(id).grad().map(|g| g.to_vec()) else {
            continue;
        };
        for (coord, &a) in analytic.iter().enumerate() {
            let x0 = store.tensor(id).data()[coord];
            let step = h * x0.abs().max(1.0);
            store.tensor_mut(id).data_mut()[coord] = x0 + step;
            let (plus, p_plus) = eval(store)?;
            store.tensor_mut(id).data_mut()[coord] = x0 - step;
            let (minus, p_minus) = eval(store)?;
            store.tensor_mut(id).data_mut()[coord] = x0;
            report.coordinates += 1;
            if p_plus != pattern || p_minus != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((id.0, coord));
                }
            }
        }
    }
    Ok(report)
}
