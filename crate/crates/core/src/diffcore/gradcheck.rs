use super::params::{Graph, ParamStore};
use super::tape::{Mode, Var};
use crate::error::{Error, Result};

/// Evaluates the scalar loss built by `build` at `point`.
fn eval_loss<F>(build: &F, point: &ParamStore, mode: Mode, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(point, mode, seed);
    let loss = build(&mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::LossNotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients against central differences for every
/// scalar of every parameter in `point`, in eval mode.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(build: F, point: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    finite_diff_check_with(build, point, eps, Mode::Eval, 0)
}

/// As [`finite_diff_check`], with an explicit mode and dropout seed. In train
/// mode every evaluation replays the same dropout masks.
pub fn finite_diff_check_with<F>(build: F, point: &ParamStore, eps: f64, mode: Mode, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(point, mode, seed);
        let loss = build(&mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = point.names().cloned().collect();
    for name in &names {
        let n = point.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = point.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval_loss(&build, &probe, mode, seed)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval_loss(&build, &probe, mode, seed)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
