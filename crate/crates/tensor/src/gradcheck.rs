//! Reverse-mode gradients versus central finite differences.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }

    /// Error naming the worst offending parameter, if any.
    pub fn ensure(&self) -> Result<()> {
        match self
            .failures()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        {
            None => Ok(()),
            Some(p) => Err(TensorError::GradCheck {
                param: p.name.clone(),
                index: p.worst_index,
                rel_err: p.max_rel_err,
                tol: self.tol,
            }),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<48} n={:<4} max_rel={:.2e} @{} (analytic {:.6e}, numeric {:.6e})",
                p.name, p.checked, p.max_rel_err, p.worst_index, p.analytic, p.numeric
            )?;
        }
        write!(f, "max relative error {:.3e} (tol {:.1e})", self.max_rel_err(), self.tol)
    }
}

fn evaluate<F, E>(store: &ParamStore, tape: &Tape, f: &F) -> std::result::Result<f64, E>
where
    F: for<'t> Fn(&Session<'t>) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let session = Session::inference(tape, store);
    let out = f(&session)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("objective must be scalar, got shape {:?}", v.shape()),
        }
        .into());
    }
    Ok(v.item())
}

/// Checks `f` with respect to every parameter in `store`. Values produced by
/// [`Tape::detached`] are recorded on the analytic pass and replayed on every
/// perturbed pass, so stop-gradients are held fixed on both sides.
pub fn grad_check<F, E>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> std::result::Result<GradCheckReport, E>
where
    F: for<'t> Fn(&Session<'t>) -> std::result::Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let (analytic, frozen) = {
        let tape = Tape::new();
        let session = Session::new(&tape, store);
        let out = f(&session)?;
        let grads = tape.backward(out).map_err(E::from)?;
        (session.param_grads(&grads), tape.detached_values())
    };
    let mut rng = Rng::new(opts.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < numel => {
                let mut all: Vec<usize> = (0..numel).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..numel).collect(),
        };
        let grad = analytic[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in coords {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + opts.step;
            let plus = evaluate(store, &Tape::with_frozen(frozen.clone()), &f);
            store.get_mut(id).data_mut()[idx] = orig - opts.step;
            let minus = evaluate(store, &Tape::with_frozen(frozen.clone()), &f);
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_err || check.checked == 1 {
                check.max_rel_err = check.max_rel_err.max(rel);
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { tol: opts.tol, params })
}
