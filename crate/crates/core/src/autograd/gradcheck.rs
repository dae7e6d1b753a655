//! Central finite-difference checks of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Floor on the relative-error denominator; smaller gradients are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    pub checked: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, DENOM_FLOOR)` over the checked entries.
    pub rel_error: f64,
}

/// Compare gradients of `build` w.r.t. each of `inputs` at up to
/// `max_entries` evenly spaced coordinates per input.
///
/// `build` receives a fresh graph plus one trainable var per input and must
/// return the scalar loss.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, max_entries: usize, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let n = t.numel();
        let step = (n / max_entries.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut checked = 0;
        let mut xs = inputs.to_vec();
        for j in (0..n).step_by(step).take(max_entries) {
            let orig = t.data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(DENOM_FLOOR);
        out.push(GradCheck {
            input: i,
            checked,
            rel_error: if a2 == 0.0 && n2 == 0.0 { 0.0 } else { diff2.sqrt() / denom },
        });
    }
    Ok(out)
}
