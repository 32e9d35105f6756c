//! Central finite-difference verification of taped gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|a - n| / (|a| + |n| + 1e-12)`.
    pub max_rel_error: f64,
    /// Max over checked entries of `|a - n|`.
    pub max_abs_error: f64,
    /// Max over checked entries of `|a - n| / max(|a| + |n|, 1e-4)`: relative
    /// error that stops growing once both gradients are tiny.
    pub max_floored_error: f64,
    /// `(input or parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite gradient at input {input} element {index}: analytic {analytic}, numeric {numeric}")]
    NonFinite {
        input: usize,
        index: usize,
        analytic: f64,
        numeric: f64,
    },
}

/// Fixed non-uniform weights used to reduce a non-scalar output to a scalar.
/// A plain sum would hide errors in ops whose outputs have a constant total
/// (softmax rows, for instance).
fn reduction_weight(i: usize) -> f64 {
    1.0 + 0.5 * (1.3 * i as f64 + 0.7).sin()
}

fn reduce(tape: &mut Tape, out: Var) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let w = Tensor::from_fn(tape.shape(out), reduction_weight);
    let w = tape.constant(w);
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

fn scalar_of(f: &impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars);
    let out = reduce(&mut tape, out);
    tape.value(out).data()[0]
}

struct Tracker {
    report: GradCheckReport,
}

impl Tracker {
    fn new() -> Self {
        Self {
            report: GradCheckReport {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                max_floored_error: 0.0,
                worst: None,
                worst_values: None,
                checked: 0,
            },
        }
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) -> Result<(), GradCheckError> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(GradCheckError::NonFinite {
                input,
                index,
                analytic,
                numeric,
            });
        }
        let abs = (analytic - numeric).abs();
        let err = abs / (analytic.abs() + numeric.abs() + 1e-12);
        self.report.checked += 1;
        self.report.max_abs_error = self.report.max_abs_error.max(abs);
        let floored = abs / (analytic.abs() + numeric.abs()).max(1e-4);
        self.report.max_floored_error = self.report.max_floored_error.max(floored);
        if err > self.report.max_rel_error || self.report.worst.is_none() {
            self.report.max_rel_error = err;
            self.report.worst = Some((input, index));
            self.report.worst_values = Some((analytic, numeric));
        }
        Ok(())
    }
}

/// Compares the taped gradient of `f` with central differences of step
/// `eps` for every element of every input.
///
/// `f` builds the computation from leaves standing for `inputs`; a
/// non-scalar result is reduced with fixed weights before differentiation.
/// Inputs should keep clear of kinks (ReLU at zero, max ties) by
/// construction.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let out = reduce(&mut tape, out);
    let grads = tape.backward(out);

    let mut tracker = Tracker::new();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = scalar_of(&f, &probe);
            probe[k].data_mut()[i] = orig - eps;
            let minus = scalar_of(&f, &probe);
            probe[k].data_mut()[i] = orig;
            tracker.record(k, i, analytic.data()[i], (plus - minus) / (2.0 * eps))?;
        }
    }
    Ok(tracker.report)
}

/// Finite-difference check of every parameter of `store` (or an evenly spaced
/// subset of at most `max_per_param` entries of each, when given). `f` runs a
/// forward pass against the given store and returns its tape and output.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParamStore) -> (Tape, Var),
{
    let eval = |s: &ParamStore| {
        let (mut tape, out) = f(s);
        let out = reduce(&mut tape, out);
        tape.value(out).data()[0]
    };
    let (mut tape, out) = f(store);
    let out = reduce(&mut tape, out);
    let grads = tape.backward(out);

    let mut tracker = Tracker::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let step = match max_per_param {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let numeric = central_difference(&mut probe, id, i, eps, &eval);
            tracker.record(id.index(), i, analytic.data()[i], numeric)?;
        }
    }
    Ok(tracker.report)
}

fn central_difference(
    probe: &mut ParamStore,
    id: ParamId,
    i: usize,
    eps: f64,
    eval: &impl Fn(&ParamStore) -> f64,
) -> f64 {
    let orig = probe.get(id).data()[i];
    probe.get_mut(id).data_mut()[i] = orig + eps;
    let plus = eval(probe);
    probe.get_mut(id).data_mut()[i] = orig - eps;
    let minus = eval(probe);
    probe.get_mut(id).data_mut()[i] = orig;
    (plus - minus) / (2.0 * eps)
}
