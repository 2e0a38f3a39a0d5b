//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;

use crate::autograd::{Gradients, ParamRef, Tape, Var};
use crate::nn::{seeded_rng, ParamStore};

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences. The tape passed to `build` has one group per store,
/// in order. `per_tensor = Some(k)` checks `k` seeded entries of each
/// parameter matrix instead of all of them.
pub fn gradient_check<F>(stores: &mut [ParamStore], per_tensor: Option<usize>, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let eval = |stores: &[ParamStore]| {
        let mut tape = Tape::new(stores.iter().map(|s| s.values()).collect());
        let loss = build(&mut tape);
        tape.value(loss).get(0, 0)
    };
    let sizes: Vec<usize> = stores.iter().map(|s| s.len()).collect();
    let mut grads = Gradients::new(&sizes);
    {
        let mut tape = Tape::new(stores.iter().map(|s| s.values()).collect());
        let loss = build(&mut tape);
        tape.backward(loss, &mut grads);
    }

    let mut rng = seeded_rng(0, "gradcheck");
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for g in 0..stores.len() {
        for i in 0..stores[g].len() {
            let n = stores[g].values()[i].len();
            let entries: Vec<usize> = match per_tensor {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            for e in entries {
                let orig = stores[g].values()[i].data()[e];
                stores[g].values_mut()[i].data_mut()[e] = orig + STEP;
                let plus = eval(stores);
                stores[g].values_mut()[i].data_mut()[e] = orig - STEP;
                let minus = eval(stores);
                stores[g].values_mut()[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                let analytic = grads.get(ParamRef { group: g, index: i }).map_or(0.0, |m| m.data()[e]);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((stores[g].names()[i].clone(), e));
                }
            }
        }
    }
    report
}
