use std::collections::BTreeMap;

use super::{Graph, OpKind, ParamSet, ParamVars, Var};
use crate::error::Result;
use crate::rng::Rng64;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elems: Option<usize>,
    /// Chooses the sampled elements.
    pub seed: u64,
    /// Corrupt one backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            max_elems: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1, |a|, |n|)` per parameter.
    pub max_rel_error: BTreeMap<String, f64>,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> (Option<&str>, f64) {
        self.max_rel_error
            .iter()
            .fold((None, 0.0), |(wn, we), (n, &e)| {
                if e > we || wn.is_none() {
                    (Some(n.as_str()), e)
                } else {
                    (wn, we)
                }
            })
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x + h) - f(x - h)) / 2h`, in double precision.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(k) = opts.fault {
        g.inject_fault(k);
    }
    let pv = g.params(params);
    let loss = f(&mut g, &pv)?;
    let analytic = g.backward(loss)?.into_param_grads();

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let pv = g.params(p);
        let loss = f(&mut g, &pv)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = Rng64::keyed(opts.seed, "gradcheck");
    let mut work = params.clone();
    let mut max_rel_error = BTreeMap::new();
    for (name, t) in params.iter() {
        let n = t.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        if let Some(m) = opts.max_elems.filter(|&m| m < n) {
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
        }
        let a = &analytic[name];
        let mut worst = 0.0f64;
        for i in idx {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let av = a.data()[i];
            let rel = (av - numeric).abs() / 1f64.max(av.abs()).max(numeric.abs());
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
        max_rel_error.insert(name.to_string(), worst);
    }
    let pass = max_rel_error.values().all(|&e| e < opts.tol);
    Ok(GradCheckReport {
        max_rel_error,
        pass,
        h: opts.h,
        tol: opts.tol,
    })
}
