use std::collections::BTreeMap;

use super::{ParamStore, Tensor};

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
///
/// The floor keeps entries whose true gradient is zero from dividing
/// round-off by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub worst_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn checked_entries(&self) -> usize {
        self.params.len()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
    }

    /// Worst offender per name prefix up to the first `.` (`rgb`, `fam`, ...).
    pub fn worst_per_module(&self) -> BTreeMap<String, &ParamCheck> {
        let mut out: BTreeMap<String, &ParamCheck> = BTreeMap::new();
        for p in &self.params {
            let module = p.name.split('.').next().unwrap_or("").to_string();
            let slot = out.entry(module).or_insert(p);
            if p.worst_error > slot.worst_error {
                *slot = p;
            }
        }
        out
    }
}

/// Central-difference check of `analytic` against `loss` for every entry of
/// every listed parameter.
///
/// `floor` is scaled by `max(1, |loss|)` at the unperturbed point, since the
/// round-off in a central difference grows with the magnitude of the loss.
pub fn finite_diff_check(
    mut loss: impl FnMut(&ParamStore) -> f64,
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
    floor: f64,
) -> GradCheckReport {
    let floor = floor * loss(store).abs().max(1.0);
    let mut probe = store.clone();
    let mut params = Vec::new();
    for (name, grad) in analytic {
        let mut check = ParamCheck {
            name: name.clone(),
            worst_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            failures: 0,
        };
        for i in 0..grad.len() {
            let orig = probe.get(name).expect("parameter present").data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, floor);
            if !(err <= tol) {
                check.failures += 1;
            }
            if err > check.worst_error || err.is_nan() || i == 0 {
                check.worst_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    GradCheckReport { tolerance: tol, params }
}
