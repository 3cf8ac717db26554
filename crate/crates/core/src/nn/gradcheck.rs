//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradStore, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many elements per parameter (sampled); `None`
    /// checks all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Largest error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences for every parameter in `store`. `f` must be
/// deterministic.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let mut analytic = GradStore::zeros_like(store);
    {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.backward_into(loss, &mut analytic);
    }
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let loss = f(&mut tape);
        tape.value(loss).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in indices {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(id)[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            worst = worst.max(rel);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
        report.per_param.push((store.name(id).to_string(), worst));
    }
    report
}
