//! Central finite-difference gradient checking.

use super::params::{Gradients, ParamId, ParameterStore};

/// One probed coordinate of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries meaningful.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Central difference `(f(w+h) - f(w-h)) / 2h` of `loss` at one coordinate.
pub fn central_difference<F>(store: &mut ParameterStore, id: ParamId, index: usize, h: f64, loss: &mut F) -> f64
where
    F: FnMut(&ParameterStore) -> f64,
{
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = orig + h;
    let up = loss(store);
    store.value_mut(id).data_mut()[index] = orig - h;
    let down = loss(store);
    store.value_mut(id).data_mut()[index] = orig;
    (up - down) / (2.0 * h)
}

/// Compares `analytic` against central differences at the given coordinates.
pub fn probe<F>(
    store: &mut ParameterStore,
    analytic: &Gradients,
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Vec<Probe>
where
    F: FnMut(&ParameterStore) -> f64,
{
    coords
        .iter()
        .map(|&(param, index)| {
            let a = analytic.get(param).map_or(0.0, |g| g[index]);
            let n = central_difference(store, param, index, h, &mut loss);
            Probe {
                param,
                index,
                analytic: a,
                numeric: n,
            }
        })
        .collect()
}
