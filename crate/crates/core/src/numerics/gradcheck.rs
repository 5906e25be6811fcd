use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Bindings, ParamStore, Tape, Var};
use crate::error::{Error, Result};

const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest entry of `per_parameter_errors`.
    pub max_relative_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
}

/// Compares the tape gradient of `f` with the fourth-order central
/// difference `(f(p - 2e) - 8 f(p - e) + 8 f(p + e) - f(p + 2e)) / 12 e` on
/// every coordinate of every parameter. Errors are `|a - n| / max(|a|, |n|, 1e-6)`: relative, except
/// that gradients below `1e-6` are compared in absolute terms.
pub fn grad_check<F>(params: &ParamStore, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    check(params, epsilon, None, 0, f)
}

/// Same as [`grad_check`] but probes at most `coords_per_param`
/// coordinates of each parameter, picked deterministically from `seed`.
pub fn grad_check_sampled<F>(
    params: &ParamStore,
    epsilon: f64,
    coords_per_param: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    check(params, epsilon, Some(coords_per_param), seed, f)
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binds = tape.bind_frozen(params);
    let out = f(&mut tape, &binds)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

fn check<F>(
    params: &ParamStore,
    epsilon: f64,
    cap: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::contract(format!("epsilon must be > 0, got {epsilon}")));
    }

    let mut tape = Tape::new();
    let binds = tape.bind(params);
    let out = f(&mut tape, &binds)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    tape.backward(out)?;
    let analytic = tape.param_grads(&binds);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut per_parameter_errors = BTreeMap::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let coords: Vec<usize> = match cap {
            Some(c) if c < n => {
                let mut picked = rand::seq::index::sample(&mut rng, n, c).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = work.get(name).expect("bound parameter").data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[i] = orig + offset;
                eval(&work, &f)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * epsilon)?, at(-epsilon)?, at(epsilon)?, at(2.0 * epsilon)?);
            work.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = ((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * epsilon);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max(err);
        }
        per_parameter_errors.insert(name.clone(), worst);
    }
    let max_relative_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_parameter_errors,
    })
}
