//! Central finite-difference verification of analytic gradients.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check. Failures are reported here, never raised.
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
    pub max_abs_err: T,
    /// `|a − n| / max(|a|, |n|, floor)` maximized over coordinates.
    pub max_rel_err: T,
    /// Flat index (across all checked inputs) of the worst relative error.
    pub worst: usize,
    pub tol: T,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead of blowing up.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Checks `f` with respect to a single input tensor.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar node.
pub fn grad_check<'a, T, F>(f: F, x: &Tensor<T>, h: T, tol: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, tol)
}

/// Checks `f` with respect to several inputs at once; coordinates are
/// enumerated input by input in row-major order.
pub fn grad_check_many<'a, T, F>(
    f: F,
    xs: &[Tensor<T>],
    h: T,
    tol: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<'a, T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>], track: bool| -> Result<(T, Vec<T>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !track {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let flat = vars
            .iter()
            .flat_map(|&v| grads.get(v).expect("leaf gradient").data().to_vec())
            .collect();
        Ok((value, flat))
    };

    let (_, analytic) = eval(xs, true)?;
    let two_h = h + h;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = xs.to_vec();
    for (t, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[t].data_mut()[i] = orig + h;
            let (plus, _) = eval(&probe, false)?;
            probe[t].data_mut()[i] = orig - h;
            let (minus, _) = eval(&probe, false)?;
            probe[t].data_mut()[i] = orig;
            numeric.push((plus - minus) / two_h);
        }
    }

    let floor = T::lit(REL_ERR_FLOOR);
    let mut max_abs_err = T::zero();
    let mut max_rel_err = T::zero();
    let mut worst = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        max_abs_err = max_abs_err.max(abs);
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_abs_err,
        max_rel_err,
        worst,
        tol,
    })
}
