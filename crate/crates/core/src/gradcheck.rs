//! Central finite-difference checks against [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// Checks a scalar function of several tensors. `f` receives one trainable
/// leaf per entry of `points`, in order.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    let mut shifted: Vec<Tensor<f64>> = points.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = match grads.get(*var) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; points[which].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for coord in 0..points[which].numel() {
            let base = points[which].data()[coord];
            let mut plus = points[which].data().to_vec();
            plus[coord] = base + step;
            shifted[which] = Tensor::new(points[which].shape(), plus)?;
            let f_plus = eval(&shifted)?;
            let mut minus = points[which].data().to_vec();
            minus[coord] = base - step;
            shifted[which] = Tensor::new(points[which].shape(), minus)?;
            let f_minus = eval(&shifted)?;
            let fd = (f_plus - f_minus) / (2.0 * step);
            numeric.push(fd);

            let rel = relative_error(analytic[coord], fd);
            if !rel.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            report.max_abs_error = report.max_abs_error.max((analytic[coord] - fd).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (which, coord);
            }
        }
        shifted[which] = points[which].clone();
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert_eq!(report.analytic[0][0], 6.0);
        assert!((report.numeric[0][0] - 6.0).abs() < 1e-6);
        assert!(report.max_rel_error < 1e-6);
    }
}
