//! Central-difference verification of analytic gradients (64-bit only).

use super::{Ctx, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-6, 1e-3]`.
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    fn validate(&self) -> Result<()> {
        if !(1e-6..=1e-3).contains(&self.eps) {
            return Err(Error::invalid(format!(
                "gradcheck eps {} outside [1e-6, 1e-3]",
                self.eps
            )));
        }
        Ok(())
    }

    fn coords(&self, n: usize, leaf: usize) -> Vec<usize> {
        match self.max_coords_per_leaf {
            Some(k) if k < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                Rng::new(self.seed).fork(leaf as u64).shuffle(&mut idx);
                idx.truncate(k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(g: &Graph<f64>, v: Var, what: &str) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalar(t.shape().to_vec()));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(y)
}

/// Max over all leaves of `|analytic - central difference| / max(1, |analytic|)`
/// for the scalar function `f` of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    opts.validate()?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = f(&mut g, &vs)?;
        scalar_of(&g, y, "perturbed output")
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let y = f(&mut g, &vs)?;
    scalar_of(&g, y, "output")?;
    let grads = g.backward(y)?;
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (li, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[li].shape()));
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of leaf {li}")));
        }
        for i in opts.coords(inputs[li].numel(), li) {
            let x0 = xs[li].data()[i];
            xs[li].data_mut()[i] = x0 + opts.eps;
            let fp = eval(&xs).map_err(|e| tag_leaf(e, li))?;
            xs[li].data_mut()[i] = x0 - opts.eps;
            let fm = eval(&xs).map_err(|e| tag_leaf(e, li))?;
            xs[li].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn tag_leaf(e: Error, leaf: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} while perturbing leaf {leaf}")),
        other => other,
    }
}

/// [`grad_check`] over every parameter of a store (frozen ones included).
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    opts.validate()?;
    let mut cx = Ctx::with_all_grads(store);
    let y = f(&mut cx)?;
    scalar_of(&cx, y, "output")?;
    let grads = cx.backward(y)?;
    let analytic: Vec<(usize, Vec<f64>)> = cx
        .bound_params()
        .map(|(id, v)| {
            let n = store.get(id).value.numel();
            (
                id.index(),
                grads.get_raw(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]),
            )
        })
        .collect();
    drop(cx);
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for (pi, ga) in analytic {
        let id = work.ids().nth(pi).expect("param id");
        if ga.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of {}", store.get(id).name)));
        }
        for i in opts.coords(ga.len(), pi) {
            let x0 = work.get(id).value.data()[i];
            let side = |delta: f64, work: &mut ParamStore<f64>| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = x0 + delta;
                let mut cx = Ctx::new(work);
                let y = f(&mut cx)?;
                scalar_of(&cx, y, &format!("output perturbing {}", store.get(id).name))
            };
            let fp = side(opts.eps, &mut work)?;
            let fm = side(-opts.eps, &mut work)?;
            work.get_mut(id).value.data_mut()[i] = x0;
            worst = worst.max(relative_error(ga[i], (fp - fm) / (2.0 * opts.eps)));
        }
    }
    Ok(worst)
}
