//! Central-difference gradient oracle.
//!
//! Independent of the backward rules it checks: it only ever evaluates the
//! forward pass, at `x + h·e_i` and `x − h·e_i`, and compares
//! `(f(x+h) − f(x−h)) / 2h` against the tape's analytic gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true derivative is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled), or all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, floor: 1e-6, max_coords: None, seed: 0 }
    }
}

impl GradcheckOptions {
    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn sampled(mut self, coords: usize, seed: u64) -> Self {
        self.max_coords = Some(coords);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when a forward evaluation failed, e.g. a primitive produced NaN.
    pub failure: Option<String>,
}

/// Relative error with a floored denominator.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], requires_grad: bool) -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + ?Sized,
{
    let tape = Tape::with_finite_checks(true);
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&tape, &vars)?;
    let shape = out.shape();
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::Contract(format!("gradcheck needs a scalar-valued function, got shape {shape:?}")));
    }
    let value = out.item();
    if !requires_grad {
        return Ok((value, None));
    }
    let mut grads = tape.backward(out)?;
    Ok((value, Some(vars.iter().map(|&v| grads.take(v)).collect())))
}

/// Compares analytic and central-difference gradients of a scalar function
/// of several tensors.
///
/// Returns `Err` only for contract violations (non-scalar output). Forward
/// failures such as a NaN-producing primitive come back as a failed report
/// naming the primitive.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let fail = |msg: String| GradcheckReport {
        max_rel_err: f64::INFINITY,
        worst: None,
        coords_checked: 0,
        tol: opts.tol,
        passed: false,
        failure: Some(msg),
    };
    let analytic = match eval(&f, inputs, true) {
        Ok((_, Some(g))) => g,
        Ok(_) => unreachable!(),
        Err(e @ Error::Contract(_)) => return Err(e),
        Err(e) => return Ok(fail(e.to_string())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = (0.0f64, None);
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            probe[which].data_mut()[i] = x0 + opts.h;
            let plus = eval(&f, &probe, false);
            probe[which].data_mut()[i] = x0 - opts.h;
            let minus = eval(&f, &probe, false);
            probe[which].data_mut()[i] = x0;
            let (plus, minus) = match (plus, minus) {
                (Ok((p, _)), Ok((m, _))) => (p, m),
                (Err(e), _) | (_, Err(e)) => return Ok(fail(e.to_string())),
            };
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[which].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = rel_err(a, numeric, opts.floor);
            checked += 1;
            if err > worst.0 || worst.1.is_none() || err.is_nan() {
                worst = (err, Some((which, i)));
            }
        }
    }
    let passed = worst.0 <= opts.tol;
    Ok(GradcheckReport { max_rel_err: worst.0, worst: worst.1, coords_checked: checked, tol: opts.tol, passed, failure: None })
}

/// Single-input convenience over [`gradcheck_many`].
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), opts)
}
