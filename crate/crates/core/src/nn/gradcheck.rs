use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::ParameterSet;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Largest relative error between backprop and central differences,
/// `|a - n| / max(|a|, |n|, 1e-8)`, over the non-frozen parameters of `theta`.
/// Parameters with more than `max_coords` entries are probed on an evenly
/// strided subset.
pub fn grad_check<T, F>(f: F, theta: &mut ParameterSet<T>, eps: f64, max_coords: usize) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParameterSet<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, theta)?;
    check_finite(g.scalar(root))?;
    let grads = g.backward(root)?;
    let analytic: Vec<(String, Vec<T>)> = g.param_grads(&grads).map(|(n, v)| (n.to_string(), v.to_vec())).collect();

    let eval = |theta: &ParameterSet<T>| -> Result<f64> {
        let mut g = Graph::new();
        let r = f(&mut g, theta)?;
        check_finite(g.scalar(r))
    };

    let names: Vec<String> = theta.names().filter(|n| !theta.is_frozen(n)).map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = theta.get(&name).expect("listed").numel();
        let a_vec = analytic.iter().find(|(k, _)| *k == name).map(|(_, v)| v.clone()).unwrap_or_else(|| vec![T::zero(); n]);
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = theta.get(&name).unwrap().data()[i];
            theta.get_mut(&name).unwrap().data_mut()[i] = T::lit(orig.to_f64_lossy() + eps);
            let fp = eval(theta);
            theta.get_mut(&name).unwrap().data_mut()[i] = T::lit(orig.to_f64_lossy() - eps);
            let fm = eval(theta);
            theta.get_mut(&name).unwrap().data_mut()[i] = orig;
            let num = (fp? - fm?) / (2.0 * eps);
            let a = a_vec[i].to_f64_lossy();
            check_finite(a)?;
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn check_finite<V: Scalar>(v: V) -> Result<f64> {
    let x = v.to_f64_lossy();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("non-finite value {x} during gradient check")));
    }
    Ok(x)
}
