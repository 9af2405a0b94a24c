use crate::error::Result;

use super::{Matrix, ParamStore, Tape, Var};

/// Worst relative error between analytic gradients and central differences.
///
/// `loss` builds the scalar objective on a fresh tape from the current parameter
/// values. Relative error per entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    tape.backward(out, store);
    let analytic = store.grads();
    compare_gradients(store, &analytic, h, |s| {
        let mut tape = Tape::new();
        let out = loss(s, &mut tape)?;
        Ok(tape.scalar(out))
    })
}

/// Compares supplied gradients against central differences of `eval`.
pub fn compare_gradients<F>(store: &mut ParamStore, analytic: &[Matrix], h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for (id, grad) in ids.into_iter().zip(analytic) {
        for i in 0..grad.len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
