//! Central finite-difference checks for the tape.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Per-parameter relative errors `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(params: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compare the tape's gradients of `f` with central differences of step `h`.
///
/// `f` receives a fresh graph and one trainable var per entry of `params`
/// and must return a scalar node.
pub fn check<F>(params: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[p.rows(), p.cols()]));
        let mut numeric = vec![0.0; p.len()];
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = eval(&work, &f)?;
            work[pi].data_mut()[k] = orig - h;
            let down = eval(&work, &f)?;
            work[pi].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    Ok(GradCheckReport { rel_errors })
}
