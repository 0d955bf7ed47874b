//! Central finite differences, used to validate reverse-mode gradients.

use super::params::ParamSet;
use crate::error::Result;

/// Numerical gradient of a scalar function of `params` by central differences.
pub fn central_difference<F>(mut f: F, params: &ParamSet, step: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = ParamSet::new();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let base = params.require(&name)?.clone();
        let mut grad = base.clone();
        for k in 0..base.len() {
            let x = base.data()[k];
            probe.get_mut(&name).expect("cloned").data_mut()[k] = x + step;
            let up = f(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[k] = x - step;
            let down = f(&probe)?;
            probe.get_mut(&name).expect("cloned").data_mut()[k] = x;
            grad.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over every entry present in both sets;
/// zero when both are exactly zero.
pub fn relative_error(analytic: &ParamSet, numeric: &ParamSet) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else { continue };
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
