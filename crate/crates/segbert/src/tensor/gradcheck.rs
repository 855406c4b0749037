//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the reverse-mode code it checks. Used by the `selfcheck grad` command
//! and by the test suites.

use super::graph::ParamStore;

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Guard for the relative-error denominator so near-zero gradients are
/// compared absolutely instead of dividing by noise.
pub const REL_GUARD: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub checks: usize,
    pub worst: String,
}

impl CheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_GUARD)
}

/// Compares analytic gradients against central finite differences at the
/// listed (param index, element index) picks. `loss_fn` must be a pure
/// function of the store contents.
pub fn compare<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    analytic: &[Vec<f64>],
    picks: &[(usize, usize)],
    h: f64,
) -> CheckOutcome
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut max_rel = 0.0;
    let mut worst = String::new();
    for &(p, j) in picks {
        let orig = store.get(super::graph::ParamId(p)).data[j];
        store.get_mut(super::graph::ParamId(p)).data[j] = orig + h;
        let plus = loss_fn(store);
        store.get_mut(super::graph::ParamId(p)).data[j] = orig - h;
        let minus = loss_fn(store);
        store.get_mut(super::graph::ParamId(p)).data[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_err(analytic[p][j], numeric);
        if e > max_rel {
            max_rel = e;
            worst = format!(
                "{}[{}]: analytic {:.3e} vs numeric {:.3e}",
                store.get(super::graph::ParamId(p)).name,
                j,
                analytic[p][j],
                numeric
            );
        }
    }
    CheckOutcome { max_rel_err: max_rel, checks: picks.len(), worst }
}

/// Every element of every parameter.
pub fn all_picks(store: &ParamStore) -> Vec<(usize, usize)> {
    let mut picks = Vec::new();
    for (id, e) in store.iter() {
        for j in 0..e.data.len() {
            picks.push((id.0, j));
        }
    }
    picks
}

/// A deterministic spread of `n` elements across all parameters, so large
/// models can be checked without one forward pass per weight.
pub fn spread_picks(store: &ParamStore, n: usize) -> Vec<(usize, usize)> {
    let total = store.total_values();
    if total == 0 {
        return Vec::new();
    }
    let n = n.min(total);
    let mut flat = Vec::with_capacity(n);
    for s in 0..n {
        let mut target = (s * total) / n;
        for (id, e) in store.iter() {
            if target < e.data.len() {
                flat.push((id.0, target));
                break;
            }
            target -= e.data.len();
        }
    }
    flat
}
