use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// number of scalar entries compared
    pub entries: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape {
            shape: v.shape().to_vec(),
            reason: "gradient check needs a scalar function".into(),
        });
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("checked function returned {x}")));
    }
    Ok(x)
}

/// Compare tape gradients of a scalar function of `inputs` against central
/// finite differences.
pub fn grad_check<F>(inputs: &[Tensor], mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    eval_scalar(&tape, out)?;
    tape.backward_leaves(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut probe = inputs.to_vec();
    let mut eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        eval_scalar(&tape, out)
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    for k in 0..probe.len() {
        for e in 0..probe[k].len() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], numeric));
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        entries,
    })
}

/// Same comparison for every entry of every parameter in `store`. The
/// closure builds the scalar on a fresh tape from the current store values;
/// it may mutate state it captures (e.g. running statistics) as long as the
/// returned value does not depend on that state.
pub fn grad_check_params<F>(store: &mut ParamStore, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    eval_scalar(&tape, out)?;
    tape.backward(out, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let mut entries = 0;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + FD_STEP;
            let mut t = Tape::new();
            let o = f(&mut t, store)?;
            let up = eval_scalar(&t, o)?;
            store.get_mut(id).value.data_mut()[e] = orig - FD_STEP;
            let mut t = Tape::new();
            let o = f(&mut t, store)?;
            let down = eval_scalar(&t, o)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[e], numeric));
            entries += 1;
        }
    }
    store.zero_grad();
    Ok(GradCheckReport {
        max_rel_error: worst,
        entries,
    })
}
