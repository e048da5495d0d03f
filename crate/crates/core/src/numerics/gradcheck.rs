use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    pub seed: u64,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(L(p+ε) − L(p−ε)) / 2ε`.
///
/// `per_param` caps the number of coordinates checked in each parameter; the
/// subset is drawn from `seed`. Parameter values are restored bit-exactly and
/// `store`'s gradients are left holding the analytic gradient.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    epsilon: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, store);
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = loss_fn(store, &mut tape)?;
        tape.scalar_value(loss)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
        seed,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.as_slice().len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let original = store.get(id).value.as_slice()[c];
            store.get_mut(id).value.as_mut_slice()[c] = original + epsilon;
            let plus = eval(store)?;
            store.get_mut(id).value.as_mut_slice()[c] = original - epsilon;
            let minus = eval(store)?;
            store.get_mut(id).value.as_mut_slice()[c] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = store.get(id).gradient.as_slice()[c];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((store.get(id).name.clone(), c));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}
