//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Anything that owns one or more parameter stores.
pub trait ParamSet<S: Scalar = f64> {
    fn stores(&self) -> Vec<&ParamStore<S>>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>>;
}

impl<S: Scalar> ParamSet<S> for ParamStore<S> {
    fn stores(&self) -> Vec<&ParamStore<S>> {
        vec![self]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<S>> {
        vec![self]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Elements checked per parameter; larger parameters are subsampled.
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

fn eval<S: Scalar, M: ParamSet<S>>(model: &M, f: &impl Fn(&mut Graph<S>, &M) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, model)?;
    Ok(g.value(loss).item()?.as_f64())
}

/// Compare analytic gradients of `f` with central differences for every
/// trainable parameter of `model`.
pub fn grad_check<S, M, F>(model: &mut M, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    M: ParamSet<S>,
    F: Fn(&mut Graph<S>, &M) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new();
        let loss = f(&mut g, model)?;
        g.backward(loss)?
    };

    // (store index, parameter, name, checked flat indices, analytic gradients)
    type Target = (usize, ParamId, String, Vec<usize>, Vec<f64>);
    let mut targets: Vec<Target> = Vec::new();
    let mut rng = rng_for(opts.seed, &[0x6772_6164]);
    for (si, store) in model.stores().into_iter().enumerate() {
        for (pid, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let mut idx: Vec<usize> = if n <= opts.max_per_param {
                (0..n).collect()
            } else {
                sample(&mut rng, n, opts.max_per_param).into_vec()
            };
            idx.sort_unstable();
            let analytic = match grads.get(store.id(), pid) {
                Some(g) => idx.iter().map(|&k| g.data()[k].as_f64()).collect(),
                None => vec![0.0; idx.len()],
            };
            targets.push((si, pid, p.name.clone(), idx, analytic));
        }
    }

    let h = S::lit(opts.step);
    let mut report = GradCheckReport::default();
    for (si, pid, name, idx, analytic) in targets {
        for (&k, &a) in idx.iter().zip(&analytic) {
            let original = model.stores()[si].get(pid).value.data()[k];
            model.stores_mut()[si].get_mut(pid).value.data_mut()[k] = original + h;
            let plus = eval(model, &f)?;
            model.stores_mut()[si].get_mut(pid).value.data_mut()[k] = original - h;
            let minus = eval(model, &f)?;
            model.stores_mut()[si].get_mut(pid).value.data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
