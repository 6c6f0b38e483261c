use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Tensors with more elements are checked on a random subset of this size.
    pub max_elements: usize,
    /// Relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-3,
            max_elements: 32,
            abs_floor: 1e-6,
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub param: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub step: f64,
    pub checked: usize,
    pub passed: bool,
}

fn eval<F>(loss_fn: &F, params: &ParamStore<f64>, culprit: &str) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss_fn(&mut g, params).map_err(|e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} while perturbing {culprit}")),
        e => e,
    })?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss while perturbing {culprit}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `loss_fn` with central differences,
/// in double precision, for every parameter in `params`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    g.backward(loss)?;
    let grads = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jobs = Vec::new();
    for (name, t) in params.iter() {
        let n = t.len();
        let idx: Vec<usize> = if n <= cfg.max_elements {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.max_elements).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            jobs.push((name.clone(), i));
        }
    }

    let numeric = exec::try_map(cfg.parallel, jobs.clone(), |(name, i)| {
        let mut p = params.clone();
        let x0 = p.get(&name).unwrap().data()[i];
        p.get_mut(&name).unwrap().data_mut()[i] = x0 + cfg.step;
        let up = eval(&loss_fn, &p, &name)?;
        p.get_mut(&name).unwrap().data_mut()[i] = x0 - cfg.step;
        let down = eval(&loss_fn, &p, &name)?;
        Ok::<_, Error>((up - down) / (2.0 * cfg.step))
    })?;

    let mut reports: Vec<GradCheckReport> = Vec::new();
    for ((name, i), num) in jobs.into_iter().zip(numeric) {
        let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
        let abs = (analytic - num).abs();
        let rel = abs / analytic.abs().max(num.abs()).max(cfg.abs_floor);
        match reports.last_mut() {
            Some(r) if r.param == name => {
                r.max_abs_err = r.max_abs_err.max(abs);
                r.max_rel_err = r.max_rel_err.max(rel);
                r.checked += 1;
            }
            _ => reports.push(GradCheckReport {
                param: name,
                max_abs_err: abs,
                max_rel_err: rel,
                step: cfg.step,
                checked: 1,
                passed: false,
            }),
        }
    }
    for r in &mut reports {
        r.passed = r.max_rel_err <= cfg.tol;
    }
    Ok(reports)
}
