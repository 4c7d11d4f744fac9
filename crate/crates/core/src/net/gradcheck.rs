//! Central-difference verification of tape gradients in 64-bit precision.

use super::params::{ParamKind, ParamStore};
use super::tape::{Tape, Var};
use super::NetError;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Entries whose `±eps` evaluations took a different branch at some
    /// ReLU or hard-mining choice than the unperturbed pass. Their finite
    /// differences straddle a kink and are not scored.
    pub straddled: usize,
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences for every non-buffer parameter. At most `max_per_param`
/// evenly spaced entries of each tensor are perturbed.
///
/// Every evaluation records its branch pattern; an entry is scored only
/// when both perturbed passes match the unperturbed one.
pub fn check_params(
    store: &mut ParamStore<f64>,
    eps: f64,
    max_per_param: Option<usize>,
    mut f: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, NetError>,
) -> Result<GradCheckReport, NetError> {
    let mut tape = Tape::new();
    tape.record_branches();
    let root = f(&mut tape, store)?;
    tape.backward(root)?;
    store.zero_grads();
    tape.accumulate_param_grads(store);
    let base = tape.branches().unwrap_or_default().to_vec();
    let mut eval = |store: &ParamStore<f64>| -> Result<(f64, bool), NetError> {
        let mut tape = Tape::new();
        tape.record_branches();
        let v = f(&mut tape, store)?;
        Ok((tape.value(v).item(), tape.branches().unwrap_or_default() == base.as_slice()))
    };

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer).map(|(id, _)| id).collect();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, straddled: 0 };
    for id in ids {
        let len = store.value(id).len();
        let picks: Vec<usize> = match max_per_param {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        for i in picks {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let (up, same_up) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let (down, same_down) = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if !(same_up && same_down) {
                report.straddled += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(store.get(id).grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
