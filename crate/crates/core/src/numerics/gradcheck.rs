//! Central-difference gradient checking against the tape's backward pass.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Floor on the error denominator, times `max(1, |f|)`: gradients near
    /// zero are compared in absolute terms, at a scale above the round-off
    /// of the difference quotient (about `|f| * 1e-16 / h`).
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(input, flat coordinate)` of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Worst error per input.
    pub per_input: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn relative_error(a: f64, n: f64, abs_floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(n.abs()).max(abs_floor)
    }
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference evaluation".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar `f(inputs)` with central
/// differences, coordinate by coordinate.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let floor = opts.abs_floor * tape.value(out).item()?.abs().max(1.0);
    let mut rng = Rng::new(opts.seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        per_input: vec![0.0; inputs.len()],
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape().to_vec());
        let analytic = grads.wrt(*v).unwrap_or(&zero);
        let n = inputs[i].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut all: Vec<usize> = (0..n).collect();
                // partial Fisher-Yates
                for j in 0..m {
                    let r = rng.index(j, n);
                    all.swap(j, r);
                }
                all.truncate(m);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let x = inputs[i].data()[c];
            probe[i].data_mut()[c] = x + opts.h;
            let fp = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = x - opts.h;
            let fm = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = x;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric, floor);
            report.coords_checked += 1;
            report.per_input[i] = report.per_input[i].max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, c));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check over parameters of `store` (all, or those in `only`),
/// plus extra free inputs. `f` must read parameters through
/// [`Tape::param`].
pub fn check_params<F>(
    store: &ParamStore,
    only: Option<&[ParamId]>,
    extra: &[Tensor],
    f: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    inputs.extend(extra.iter().cloned());
    let np = ids.len();
    finite_difference_check(
        |tape, vars| {
            for (id, v) in ids.iter().zip(vars) {
                tape.bind_param(*id, *v);
            }
            f(tape, store, &vars[np..])
        },
        &inputs,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes() {
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn([3, 4], |_| rng.normal());
        let w = Tensor::from_fn([4, 2], |_| rng.normal());
        let b = Tensor::from_fn([2], |_| rng.normal());
        let r = finite_difference_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &[x, w, b],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 12 + 8 + 2);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn([2, 5], |_| rng.normal());
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let s = t.softmax(v, -1).unwrap();
        let s = t.sum(s).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.wrt(v).unwrap().data().iter().all(|x| x.abs() < 1e-15));
        let r = finite_difference_check(
            |t, v| {
                let s = t.softmax(v[0], -1)?;
                t.sum(s)
            },
            &[x],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_functions() {
        let r = finite_difference_check(
            |_, v| Ok(v[0]),
            &[Tensor::zeros([2])],
            &FdOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn subsampling_checks_requested_count() {
        let x = Tensor::full([100], 0.5);
        let opts = FdOptions {
            max_coords: Some(7),
            ..FdOptions::default()
        };
        let r = finite_difference_check(
            |t, v| {
                let s = t.square(v[0])?;
                t.sum(s)
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert_eq!(r.coords_checked, 7);
        assert!(r.max_rel_error < 1e-8);
    }
}
