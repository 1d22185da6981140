//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of coordinates compared.
    pub checked: usize,
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on coordinates checked per parameter tensor (sampled without
    /// replacement). `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Skip coordinates whose value lies within `2 * eps` of zero (kinks of `|x|`).
    pub skip_near_zero: bool,
    /// Lower bound of the relative-error denominator, so exactly-zero
    /// gradients are compared against finite-difference rounding noise.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            max_coords_per_param: None,
            skip_near_zero: false,
            denom_floor: 1e-8,
            seed: 0,
        }
    }
}

/// Compare the reverse-mode gradient of `f` at `params` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, denom_floor)`.
pub fn grad_check<F>(
    op_name: &str,
    params: &[(String, Tensor<f64>)],
    f: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    match run(params, &f, opts) {
        Ok((max_rel_error, checked, worst)) => GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance: opts.tol,
            passed: max_rel_error <= opts.tol,
            checked,
            diagnostic: worst,
        },
        Err(e) => GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error: f64::INFINITY,
            tolerance: opts.tol,
            passed: false,
            checked: 0,
            diagnostic: Some(e.to_string()),
        },
    }
}

fn evaluate<F>(params: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(format!("gradcheck target must be scalar, got {:?}", v.shape())));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

fn run<F>(
    params: &[(String, Tensor<f64>)],
    f: &F,
    opts: &GradCheckOptions,
) -> Result<(f64, usize, Option<String>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("objective is not finite at the base point".into()));
    }
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut worst = None;
    for (pi, (name, p)) in params.iter().enumerate() {
        let zeros = Tensor::zeros(p.shape());
        let analytic = grads.get(vars[pi]).unwrap_or(&zeros);
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let base = p.data()[i];
            if opts.skip_near_zero && base.abs() < 2.0 * opts.eps {
                continue;
            }
            values[pi].data_mut()[i] = base + opts.eps;
            let fp = evaluate(&values, f)?;
            values[pi].data_mut()[i] = base - opts.eps;
            let fm = evaluate(&values, f)?;
            values[pi].data_mut()[i] = base;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
            checked += 1;
            if err > max_err {
                max_err = err;
                worst = Some(format!("{name}[{i}]: analytic {a:.6e} vs numeric {numeric:.6e}"));
            }
        }
    }
    Ok((max_err, checked, worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = vec![("x".to_string(), Tensor::scalar(3.0))];
        let r = grad_check(
            "square",
            &p,
            |g, v| g.mul(v[0], v[0]),
            &GradCheckOptions {
                eps: 1e-4,
                tol: 1e-10,
                ..Default::default()
            },
        );
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-10);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from the backward pass only
        let p = vec![("x".to_string(), Tensor::scalar(2.0))];
        let r = grad_check(
            "broken",
            &p,
            |g, v| {
                let d = g.detach(v[0]);
                g.mul(v[0], d)
            },
            &GradCheckOptions::default(),
        );
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_fails_with_diagnostic() {
        let p = vec![("x".to_string(), Tensor::scalar(-1.0))];
        let r = grad_check("log", &p, |g, v| Ok(g.log(v[0])), &GradCheckOptions::default());
        assert!(!r.passed);
        assert!(r.diagnostic.unwrap().contains("not finite"));
    }
}
