use super::graph::{Graph, Var};
use super::param::Module;
use crate::error::{Error, Result};

/// Per-parameter maximum relative error between analytic and numeric gradients.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`. Central differences with `eps = 1e-5`
/// carry round-off around `1e-10`, so components below the floor are in
/// effect held to an absolute tolerance instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` must be deterministic; stochastic layers should run frozen. Every
/// parameter returned by `model.params()` is checked.
pub fn grad_check<M, F>(model: &mut M, f: F, eps: f64) -> Result<GradReport>
where
    M: Module + ?Sized,
    F: Fn(&M, &Graph) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let loss = f(model, &g)?;
        let grads = g.backward(loss)?;
        model.params().iter().map(|p| grads.get_or_zero(p)).collect()
    };
    let eval = |m: &M| -> Result<f64> {
        let g = Graph::no_grad();
        let loss = f(m, &g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradReport::default();
    let count = model.params().len();
    for pi in 0..count {
        let (name, len) = {
            let ps = model.params();
            (ps[pi].name().to_string(), ps[pi].len())
        };
        let mut worst = 0.0f64;
        for j in 0..len {
            let orig = model.params()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + eps;
            let up = eval(model)?;
            model.params_mut()[pi].data_mut()[j] = orig - eps;
            let down = eval(model)?;
            model.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(name));
            }
            worst = worst.max(relative_error(a, numeric));
        }
        report.entries.push((name, worst));
    }
    Ok(report)
}
