use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares autodiff against a five-point central difference for a scalar
/// function of one tensor. Returns the largest
/// `|autodiff - numeric| / (|numeric| + 1e-8)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(point), step)
}

/// [`grad_check`] over several inputs at once; every input is differentiated.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut pts = points.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..pts[t].len() {
            let orig = pts[t].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                pts[t].data_mut()[i] = orig + offset;
                eval(&pts)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            pts[t].data_mut()[i] = orig;
            let central = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let err = (grad.data()[i] - central).abs() / (central.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |g, x| {
                let sq = g.square(x)?;
                g.sum(sq)
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
