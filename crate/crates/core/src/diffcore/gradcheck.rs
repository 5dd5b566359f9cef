use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences at every coordinate of `point`. The step for a coordinate with
/// value `v` is `epsilon * max(1, |v|)`.
pub fn grad_check<F>(f: F, point: &ParamSet, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    let coords = point
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect::<Vec<_>>();
    check_coords(&f, point, epsilon, &coords)
}

/// Same as [`grad_check`] but only checks up to `per_tensor` randomly chosen
/// coordinates of each tensor.
pub fn grad_check_sampled<F, R>(
    f: F,
    point: &ParamSet,
    epsilon: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
    R: Rng + ?Sized,
{
    let mut coords = Vec::new();
    for (name, t) in point.iter() {
        if t.len() <= per_tensor {
            coords.extend((0..t.len()).map(|i| (name.to_string(), i)));
        } else {
            let mut picked = sample(rng, t.len(), per_tensor).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| (name.to_string(), i)));
        }
    }
    check_coords(&f, point, epsilon, &coords)
}

fn check_coords<F>(
    f: &F,
    point: &ParamSet,
    epsilon: f64,
    coords: &[(String, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "grad_check epsilon must be positive, got {epsilon}"
        )));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    point.expect_same_layout(&analytic)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let (v, _) = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, i) in coords {
        let orig = point.get(name)?.data()[*i];
        let h = epsilon * orig.abs().max(1.0);
        probe.get_mut(name)?.data_mut()[*i] = orig + h;
        let plus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig - h;
        let minus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(name)?.data()[*i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *i));
        }
        report.checked += 1;
    }
    Ok(report)
}
