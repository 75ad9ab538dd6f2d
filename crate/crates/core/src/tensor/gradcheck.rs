use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences.
///
/// `f` builds the function on a fresh graph from the input variable. Returns
/// the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-10)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    let fx = g.with_value(y, |t| t.data().first().copied());
    match fx {
        Some(v) if v.is_finite() => {}
        _ => return Err(Error::Evaluation("f(x) is not a finite scalar".into())),
    }
    let analytic = g.backward(y)?.get(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t);
        let y = f(&g, v)?;
        let out = g.with_value(y, |t| t.data()[0]);
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::Evaluation("non-finite f during differencing".into()))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-10);
        worst = worst.max(rel);
    }
    Ok(worst)
}
