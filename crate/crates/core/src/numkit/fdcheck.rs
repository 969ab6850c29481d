//! Central finite-difference verification of tape gradients.

use std::collections::HashMap;

use crate::error::Result;
use crate::numkit::tape::{Tape, Var};
use crate::numkit::tensor::{ParamId, TensorStore};

/// Relative-error denominators are floored here so near-zero gradients do
/// not blow the ratio up. The floor must sit above central-difference
/// roundoff (~eps/step, a few 1e-11 at step 1e-5): parameters with
/// mathematically zero gradients — key-projection biases cancel in the
/// row-shift-invariant softmax, for instance — differentiate to pure float
/// noise and should be compared on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Sweep every trainable scalar in `store`: perturb it by ±step, compare the
/// central difference of the loss against the autodiff gradient, and report
/// the worst relative error (|difference| / max(|fd|, |ad|, floor)).
///
/// `loss_fn` must be deterministic in the parameters: it gets a fresh tape
/// and the current store, and returns the scalar loss variable.
pub fn finite_diff_check<F>(
    store: &mut TensorStore,
    step: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &TensorStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss)?;
    let trainable: Vec<ParamId> =
        store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    let analytic: HashMap<ParamId, Vec<f64>> = trainable
        .iter()
        .map(|&id| {
            let g = tape
                .param_grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
            (id, g)
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };

    for &id in &trainable {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];

            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval_loss(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval_loss(store, &mut loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig;

            let fd = (up - down) / (2.0 * step);
            let ad = analytic[&id][i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(DENOM_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &TensorStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &TensorStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    Ok(tape.scalar_value(loss))
}
