use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

fn at_iteration(err: Error, iteration: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Numeric {
            op: "iterative_pinv",
            iteration,
        },
        other => other,
    }
}

/// Iterative Moore-Penrose pseudo-inverse on the graph.
///
/// `Z₀ = Aᵀ/(‖A‖₁‖A‖∞)`, then `Z ← ¼·Z(13I − AZ(15I − AZ(7I − AZ)))`.
pub fn pinv_graph<E: Element>(g: &mut Graph<E>, a: Var, iters: usize) -> Result<Var> {
    let (n, m) = (g.value(a).rows(), g.value(a).cols());
    if n != m {
        return Err(Error::shape("iterative_pinv", g.shape(a), &[n, n]));
    }
    if iters == 0 {
        return Err(Error::Param("iterative_pinv needs at least one iteration".into()));
    }
    let mut z = g.pinv_init(a).map_err(|e| at_iteration(e, 0))?;
    for it in 1..=iters {
        let step = |g: &mut Graph<E>, z: Var| -> Result<Var> {
            let az = g.matmul(a, z)?;
            let t = g.identity_minus(az, E::lit(7.0))?;
            let t = g.matmul(az, t)?;
            let t = g.identity_minus(t, E::lit(15.0))?;
            let t = g.matmul(az, t)?;
            let t = g.identity_minus(t, E::lit(13.0))?;
            let t = g.matmul(z, t)?;
            g.scale(t, E::lit(0.25))
        };
        z = step(g, z).map_err(|e| at_iteration(e, it))?;
    }
    Ok(z)
}

/// Pseudo-inverse approximation of a square matrix after `iters` iterations.
pub fn iterative_pinv<E: Element>(a: &Tensor<E>, iters: usize) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let av = g.constant(a.as_matrix());
    let z = pinv_graph(&mut g, av, iters)?;
    Ok(g.value(z).clone())
}
