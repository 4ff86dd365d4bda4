//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{Binding, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Offset in the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Max over coordinates of `|analytic - central| / (|central| + 1e-8)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone().with_grad());
        let y = f(&mut g, x)?;
        let grads = g.backward(y)?;
        grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.numel()])
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

/// Same check over every scalar of every trainable tensor in `stores`.
pub fn grad_check_params<F>(f: F, stores: &[&ParamStore], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Binding]) -> Result<Var>,
{
    let eval = |stores: &[&ParamStore]| -> Result<f64> {
        let mut g = Graph::new();
        let bindings: Vec<Binding> = stores.iter().map(|s| s.bind(&mut g)).collect();
        let y = f(&mut g, &bindings)?;
        Ok(g.scalar(y))
    };
    let mut owned: Vec<ParamStore> = stores.iter().map(|s| (*s).clone()).collect();
    {
        let mut g = Graph::new();
        let bindings: Vec<Binding> = stores.iter().map(|s| s.bind(&mut g)).collect();
        let y = f(&mut g, &bindings)?;
        let grads = g.backward(y)?;
        for (store, b) in owned.iter_mut().zip(&bindings) {
            store.zero_grads();
            store.accumulate(b, &grads)?;
        }
    }
    let mut worst: f64 = 0.0;
    for s in 0..owned.len() {
        let ids: Vec<_> = owned[s].iter().map(|(id, _, _)| id).collect();
        for id in ids {
            if !owned[s].get(id).requires_grad() {
                continue;
            }
            let analytic = owned[s].get(id).grad().expect("accumulated above").to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let orig = owned[s].get(id).data()[i];
                owned[s].get_mut(id).data_mut()[i] = orig + eps;
                let fp = eval(&owned.iter().collect::<Vec<_>>())?;
                owned[s].get_mut(id).data_mut()[i] = orig - eps;
                let fm = eval(&owned.iter().collect::<Vec<_>>())?;
                owned[s].get_mut(id).data_mut()[i] = orig;
                worst = worst.max(rel_error(a, (fp - fm) / (2.0 * eps)));
            }
        }
    }
    Ok(worst)
}
