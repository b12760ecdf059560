//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;
/// Gradient components below `REL_FLOOR · max(1, |f(x)|)` are compared in
/// absolute terms; rounding in `f` swamps a relative error there.
pub const REL_FLOOR: f64 = 1e-5;

/// Worst elementwise relative error between the tape gradient of `f` at `x`
/// and `(f(x+h) − f(x−h)) / 2h`, using
/// `max(|analytic|, |numeric|, REL_FLOOR · max(1, |f(x)|))` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the result is the worst error
/// across all of them.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&step) {
        return Err(Error::invalid("step", format!("{step} outside [1e-5, 1e-2]")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let floor = REL_FLOOR * scalar_of(&g, out)?.abs().max(1.0);
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (e, &exact) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[e];
            probe[which].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = exact.abs().max(numeric.abs()).max(floor);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function returned shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}
