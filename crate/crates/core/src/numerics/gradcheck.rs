use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Checks the gradient of a scalar function built on a fresh [`Graph`].
///
/// `f` receives the graph and one trainable leaf per entry of `params` and
/// must return a scalar node. It is called once for the analytic gradient and
/// twice per coordinate for the central difference. Stop-gradient outputs are
/// held at their values from the analytic pass during the difference
/// evaluations, which is the function reverse mode actually differentiates.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let stopped = g.stopped_values();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(stopped.clone());
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut worst = (0, 0);
    let mut max_rel_err = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (pi, k);
            }
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        passed: max_rel_err < tol,
    })
}
