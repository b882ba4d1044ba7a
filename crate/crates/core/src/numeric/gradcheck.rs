use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

use super::{Graph, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Probed coordinates left out because both one-sided stencils changed
    /// the on/off pattern of some ReLU.
    pub skipped: usize,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is numerically zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// Times the stencil is shrunk (by 4 each) when it straddles a ReLU kink.
const KINK_REFINEMENTS: usize = 5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Coordinates probed per tensor: all of them for small tensors, otherwise
/// `per_tensor` evenly spaced ones.
fn probe_indices(len: usize, per_tensor: usize) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..per_tensor).map(|i| i * len / per_tensor + (i % 3)).collect();
    idx.iter_mut().for_each(|i| *i = (*i).min(len - 1));
    idx.dedup();
    idx
}

/// Analytic gradients of the scalar built by `build`, keyed by parameter name.
pub fn analytic_grads<F>(params: &ParamStore<f64>, build: &F) -> Result<(f64, IndexMap<String, Vec<f64>>)>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(value));
    }
    let grads = g.backward(loss)?;
    let mut out = IndexMap::new();
    for name in params.trainable_names() {
        let v = bound.get(&name)?;
        let grad = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        out.insert(name, grad);
    }
    Ok((value, out))
}

fn evaluate<F>(params: &ParamStore<f64>, build: &F) -> Result<(f64, u64)>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(value));
    }
    Ok((value, g.relu_pattern()))
}

/// Compares `analytic` against central differences of `build` at step `eps`
/// for up to `per_tensor` coordinates of every trainable parameter.
pub fn compare_with_finite_differences<F>(
    params: &ParamStore<f64>,
    analytic: &IndexMap<String, Vec<f64>>,
    eps: f64,
    per_tensor: usize,
    build: &F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &Bound) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-4, 1e-2]"
        )));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        skipped: 0,
    };
    let (base, pattern) = evaluate(params, build)?;
    for name in params.trainable_names() {
        let grad = analytic.get(&name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let len = params.get(&name)?.numel();
        for i in probe_indices(len, per_tensor) {
            let original = params.get(&name)?.data()[i];
            let mut at = |x: f64| -> Result<(f64, u64)> {
                probe.get_mut(&name)?.data_mut()[i] = x;
                let r = evaluate(&probe, build);
                probe.get_mut(&name)?.data_mut()[i] = original;
                r
            };
            // Near a ReLU kink shrink the stencil until it stays on the base
            // point's linear piece, then fall back to the one-sided
            // difference on the side that does.
            let mut numeric = None;
            let mut one_sided = None;
            let mut h = eps;
            for _ in 0..KINK_REFINEMENTS {
                let (up, up_pattern) = at(original + h)?;
                let (down, down_pattern) = at(original - h)?;
                match (up_pattern == pattern, down_pattern == pattern) {
                    (true, true) => {
                        numeric = Some((up - down) / (2.0 * h));
                        break;
                    }
                    (true, false) => one_sided = Some((up - base) / h),
                    (false, true) => one_sided = Some((base - down) / h),
                    (false, false) => {}
                }
                h /= 4.0;
            }
            let Some(numeric) = numeric.or(one_sided) else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(grad[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Worst relative error between the tape's gradient of `build` and central
/// finite differences, evaluated in 64-bit.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, per_tensor: usize, build: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &Bound) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(params, &build)?;
    compare_with_finite_differences(params, &analytic, eps, per_tensor, &build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;
    use crate::params::Role;

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let x = Tensor::from_f64(&[5], &[0.3, -1.2, 2.5, 0.0, 4.0])
            .unwrap()
            .with_requires_grad(true);
        s.insert("x", Role::Head, x).unwrap();
        s
    }

    fn half_norm_sq(g: &mut Graph<'_, f64>, b: &Bound) -> Result<Var> {
        let x = b.get("x")?;
        let sq = g.mul(x, x)?;
        let s = g.sum(sq);
        Ok(g.scale(s, 0.5))
    }

    #[test]
    fn exact_quadratic() {
        let s = quadratic_store();
        let r = grad_check(&s, 1e-3, 100, half_norm_sq).unwrap();
        assert_eq!(r.coordinates, 5);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let s = quadratic_store();
        let (_, mut analytic) = analytic_grads(&s, &half_norm_sq).unwrap();
        analytic["x"][2] *= -1.0;
        let r = compare_with_finite_differences(&s, &analytic, 1e-3, 100, &half_norm_sq).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst, Some(("x".to_string(), 2)));
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        let s = quadratic_store();
        assert!(grad_check(&s, 1e-6, 10, half_norm_sq).is_err());
        let err = grad_check(&s, 1e-3, 10, |g, b| {
            let x = b.get("x")?;
            Ok(g.scale(x, f64::NAN)).map(|v| g.sum(v))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn probes_near_a_relu_kink_use_the_matching_side() {
        let mut s = ParamStore::new();
        let x = Tensor::from_f64(&[3], &[0.00005, 0.7, -0.4])
            .unwrap()
            .with_requires_grad(true);
        s.insert("x", Role::Head, x).unwrap();
        let r = grad_check(&s, 1e-4, 8, |g, b| {
            let y = g.relu(b.get("x")?);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!((r.coordinates, r.skipped), (3, 0));
        assert!(r.max_rel_error < 1e-9);
    }
}
