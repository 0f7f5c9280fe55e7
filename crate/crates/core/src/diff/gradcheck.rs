use crate::error::Result;
use crate::geom3d::relative_error;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Outcome of a finite-difference audit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: (usize, usize),
}

/// Central-difference check of `f`'s backward pass.
///
/// `f` builds a scalar from the given input variables; it must be
/// deterministic. Every input element is probed at `±eps`.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0) };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[i].data[j];
            probe[i].data[j] = x + eps;
            let fp = eval(&probe)?;
            probe[i].data[j] = x - eps;
            let fm = eval(&probe)?;
            probe[i].data[j] = x;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Projects `out` onto fixed pseudo-random weights so a non-scalar op can be
/// checked through a scalar loss.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    use rand::{Rng, SeedableRng};
    let shape = g.shape(out).to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor { shape, data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}
