use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ModelParams, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so gradients that are zero up to
/// rounding do not register as large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    /// Check at most this many elements per parameter (sampled with `seed`).
    pub max_elems_per_param: Option<usize>,
    pub seed: u64,
    /// Evaluate on training graphs seeded with `(seed, stream)`, so dropout
    /// replays the same mask on every evaluation.
    pub training: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Differences term by term when both sides decompose alike, so the
/// cancellation error scales with the terms rather than with their total.
fn central_difference(up: &[f64], down: &[f64], eps: f64) -> f64 {
    if up.len() == down.len() {
        up.iter().zip(down).map(|(u, d)| u - d).sum::<f64>() / (2.0 * eps)
    } else {
        (up.iter().sum::<f64>() - down.iter().sum::<f64>()) / (2.0 * eps)
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` records a scalar on a fresh graph built from the supplied parameters
/// and must be deterministic. Differences are taken per additive term of the
/// objective (see [`Graph::additive_terms`]).
pub fn grad_check<F>(f: F, params: &ModelParams, eps: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ModelParams) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let fresh = || match opts.training {
        Some((seed, stream)) => Graph::training(seed, stream),
        None => Graph::new(),
    };
    let eval = |p: &ModelParams, name: &str| -> Result<Vec<f64>> {
        let mut g = fresh();
        let out = f(&mut g, p)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective at parameter {name}")));
        }
        Ok(g.additive_terms(out))
    };

    let mut g = fresh();
    let out = f(&mut g, params)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let idx: Vec<usize> = match opts.max_elems_per_param {
            Some(cap) if cap < len => {
                let mut v = sample(&mut rng, len, cap).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let grad = analytic.get(&name);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: idx.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for i in idx {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval(&work, &name)?;
            work.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval(&work, &name)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = central_difference(&up, &down, eps);
            let a = grad.map_or(0.0, |g| g[i]);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_gradient_matches() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let f = |g: &mut Graph, p: &ModelParams| {
            let w = g.param(p, "w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        };
        let mut g = Graph::new();
        let out = f(&mut g, &p).unwrap();
        assert_eq!(g.backward(out).unwrap()["w"], vec![2.0, 4.0, 6.0, 8.0]);
        let report = grad_check(f, &p, 1e-5, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let f = |g: &mut Graph, p: &ModelParams| {
            g.param(p, "w")?;
            g.constant(1, 1, vec![4.2])
        };
        let mut g = Graph::new();
        let out = f(&mut g, &p).unwrap();
        let grads = g.backward(out).unwrap();
        assert!(grads.get("w").is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        let report = grad_check(f, &p, 1e-5, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.params[0].max_abs_err, 0.0);
    }

    #[test]
    fn additive_terms_split_the_total() {
        let mut g = Graph::new();
        let x = g.constant(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.25, -4.0]).unwrap();
        let a = g.nll(x, &[2, 0]).unwrap();
        let b = g.sum(x);
        let b = g.scale(b, 2.0);
        let ab = g.add(a, b).unwrap();
        let t = g.add_scalar(ab, 0.125);
        assert_eq!(
            g.additive_terms(t),
            vec![-2.0, -3.0, 1.0, -2.0, 4.0, 6.0, 0.5, -8.0, 0.125]
        );
        let total: f64 = g.additive_terms(t).iter().sum();
        assert_eq!(total, g.scalar(t));
        // anything else is one opaque term
        let s = g.sigmoid(t);
        assert_eq!(g.additive_terms(s), vec![g.scalar(s)]);
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let f = |g: &mut Graph, p: &ModelParams| {
            let w = g.param(p, "w")?;
            let v = g.value(w)[0];
            // log of a non-positive value when perturbed downward
            let c = g.constant(1, 1, vec![if v < 0.0 { f64::NAN } else { v }])?;
            g.add(w, c)
        };
        let err = grad_check(f, &p, 1e-5, &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn eps_range_enforced() {
        let p = ModelParams::new();
        let f = |g: &mut Graph, _: &ModelParams| g.constant(1, 1, vec![0.0]);
        assert!(grad_check(f, &p, 1e-2, &GradCheckOptions::default()).is_err());
    }
}
