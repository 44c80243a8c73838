//! Central finite-difference verification of tape gradients.

use rand::Rng as _;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Denominator floor: `rel = |a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check only this fraction of scalar coordinates (sampled), or all when `None`.
    pub sample_fraction: Option<f64>,
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, floor: 1e-2, sample_fraction: None, min_samples: 16, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `loss` against central
/// differences for every (or a sampled subset of) coordinate of `params`.
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        let x = t.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite("grad_check loss".into()))
        }
    };

    let mut tape = Tape::new();
    let root = loss(&mut tape, store);
    if !tape.value(root).item().is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(root);
    let mut analytic = store.zero_grads();
    grads.accumulate_into(&tape, &mut analytic);
    if !analytic.all_finite() {
        return Err(Error::NonFinite("grad_check analytic gradient".into()));
    }

    let mut coords: Vec<(ParamId, usize)> = params.iter().flat_map(|&p| (0..store.get(p).len()).map(move |i| (p, i))).collect();
    if let Some(frac) = opts.sample_fraction {
        let want = ((coords.len() as f64 * frac).ceil() as usize).max(opts.min_samples).min(coords.len());
        let mut r = rng::rng_for(opts.seed, &[rng::tag("gradcheck")]);
        // Partial Fisher-Yates.
        for i in 0..want {
            let j = r.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(want);
    }

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (p, i) in coords {
        let orig = store.get(p).data()[i];
        work.get_mut(p).data_mut()[i] = orig + opts.epsilon;
        let plus = eval(&work)?;
        work.get_mut(p).data_mut()[i] = orig - opts.epsilon;
        let minus = eval(&work)?;
        work.get_mut(p).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let err = relative_error(analytic.get(p).data()[i], numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((store.name(p).to_string(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut r = rng::rng_for(1, &[]);
        let mut store = ParamStore::new();
        let w = store.add_xavier("t", "w", 4, 3, &mut r);
        let x = crate::autograd::xavier_uniform(5, 4, &mut r);
        let c = crate::autograd::xavier_uniform(5, 3, &mut r);
        let report = grad_check(
            &store,
            &[w],
            |t, s| {
                let xv = t.leaf(x.clone());
                let wv = t.param(s, w);
                let y = t.matmul(xv, wv);
                let cv = t.leaf(c.clone());
                let y = t.mul(y, cv);
                t.sum_all(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_is_error() {
        let mut store = ParamStore::new();
        let w = store.add("t", "w", Tensor::scalar(f64::NAN));
        let res = grad_check(&store, &[w], |t, s| t.param(s, w), &GradCheckOptions::default());
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
