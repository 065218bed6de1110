use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::Gradients;
use crate::param::ParamSet;

/// Anything that owns named parameter sets.
pub trait Parameterized {
    fn param_set_names(&self) -> Vec<String>;
    fn param_set(&self, name: &str) -> Option<&ParamSet>;
    fn param_set_mut(&mut self, name: &str) -> Option<&mut ParamSet>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `loss` at
/// `max_coords` sampled coordinates per parameter tensor (all of them when the
/// tensor is smaller). Relative error is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<M, F>(
    model: &mut M,
    analytic: &Gradients,
    mut loss: F,
    eps: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (key, grad) in analytic.iter() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = nudge(model, &key.set, &key.name, i, None)?;
            nudge(model, &key.set, &key.name, i, Some(orig + eps))?;
            let plus = loss(model)?;
            nudge(model, &key.set, &key.name, i, Some(orig - eps))?;
            let minus = loss(model)?;
            nudge(model, &key.set, &key.name, i, Some(orig))?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok(GradCheck { max_rel_error: worst, coordinates: count })
}

fn nudge<M: Parameterized>(model: &mut M, set: &str, name: &str, i: usize, value: Option<f64>) -> Result<f64> {
    let ps = model
        .param_set_mut(set)
        .ok_or_else(|| crate::NumError::Config(format!("unknown parameter set {set}")))?;
    let t = ps.get_mut(name)?;
    let old = t.data()[i];
    if let Some(v) = value {
        t.data_mut()[i] = v;
    }
    Ok(old)
}
