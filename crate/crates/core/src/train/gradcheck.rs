use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Grads;
use crate::scalar::Scalar;

/// Allowed finite-difference step range.
pub const EPS_RANGE: (f64, f64) = (1e-5, 1e-3);

/// Worst disagreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Analytic and numeric values at the worst relative error.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub threshold: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_error >= self.threshold)
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss` with central differences for
/// every trainable scalar of `model`. The forward pass must be deterministic.
/// Parameter values are restored exactly after each probe.
pub fn gradient_check<T, F>(model: &mut Model<T>, eps: f64, threshold: f64, loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Model<T>, Option<&mut Grads<T>>) -> Result<T>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::Config(format!(
            "gradient-check eps must lie in [{}, {}], got {eps}",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    let mut grads = Grads::for_trainable(&model.params);
    loss(model, Some(&mut grads))?;
    let step = T::of(eps);

    let mut entries = Vec::new();
    for (id, g) in grads.iter() {
        let analytic: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
        let mut entry = GradCheckEntry {
            name: model.params.get(id).name.clone(),
            elements: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: (0.0, 0.0),
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = slot(model, id, i);
            *slot_mut(model, id, i) = original + step;
            let plus = loss(model, None)?.as_f64();
            *slot_mut(model, id, i) = original - step;
            let minus = loss(model, None)?.as_f64();
            *slot_mut(model, id, i) = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
            if rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst = (a, numeric);
            }
        }
        entries.push(entry);
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        threshold,
        entries,
        max_rel_error,
        passed: max_rel_error < threshold,
    })
}

fn slot<T: Scalar>(model: &Model<T>, id: crate::params::ParamId, i: usize) -> T {
    model.params.get(id).value.as_slice().expect("standard layout")[i]
}

fn slot_mut<T: Scalar>(model: &mut Model<T>, id: crate::params::ParamId, i: usize) -> &mut T {
    &mut model.params.get_mut(id).value.as_slice_mut().expect("standard layout")[i]
}
