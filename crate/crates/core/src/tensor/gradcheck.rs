//! Central finite-difference verification of tape gradients.
//!
//! Every differentiable building block is validated the same way: build the
//! scalar twice per probed coordinate (at +step and -step), compare the
//! central difference against the adjoint from one backward pass.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Default probe step.
pub const FD_STEP: f64 = 1e-5;
/// Default pass threshold on [`rel_err`].
pub const FD_TOL: f64 = 1e-4;
/// Below this magnitude the comparison turns absolute; protects near-zero
/// gradients from division blow-up while staying far above FD noise.
pub const FD_FLOOR: f64 = 1e-3;

/// |analytic - fd| relative to the larger magnitude, floored at [`FD_FLOOR`].
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub module: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// Coordinate of the worst probe, e.g. "input 1 @ (3,2)".
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Probes `f` (a scalar-valued tape program over the given inputs) at
/// `probes` random coordinates and compares central differences against the
/// backward pass. Errors if any probe exceeds `tol`.
pub fn check<F>(
    module: &str,
    inputs: &[Matrix],
    probes: usize,
    tol: f64,
    rng: &mut ChaCha12Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = measure(module, inputs, probes, rng, &f)?;
    if report.passes(tol) {
        Ok(report)
    } else {
        Err(Error::GradCheck {
            module: module.to_string(),
            max_rel: report.max_rel_err,
            worst: report.worst.clone(),
            tol,
        })
    }
}

/// Like [`check`] but always returns the report instead of failing.
pub fn measure<F>(
    module: &str,
    inputs: &[Matrix],
    probes: usize,
    rng: &mut ChaCha12Rng,
    f: &F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |mats: &[Matrix]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::shape(
                "gradcheck",
                format!("function must be scalar, got {}", tape.value(out).shape_str()),
            ));
        }
        let v = tape.scalar_value(out);
        Ok((v, tape, vars, out))
    };

    let (_, tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| grads.get_or_zeros(v, m.rows(), m.cols()))
        .collect();

    let total: usize = inputs.iter().map(|m| m.len()).sum();
    if total == 0 {
        return Err(Error::shape("gradcheck", "no input coordinates".to_string()));
    }

    let mut work: Vec<Matrix> = inputs.to_vec();
    let mut max_rel = 0.0;
    let mut worst = String::from("none");
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= work[which].len() {
            flat -= work[which].len();
            which += 1;
        }
        let orig = work[which].data()[flat];

        work[which].data_mut()[flat] = orig + FD_STEP;
        let f_plus = eval(&work)?.0;
        work[which].data_mut()[flat] = orig - FD_STEP;
        let f_minus = eval(&work)?.0;
        work[which].data_mut()[flat] = orig;

        let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let an = analytic[which].data()[flat];
        let e = rel_err(an, fd);
        if e > max_rel {
            max_rel = e;
            let (r, c) = (flat / work[which].cols(), flat % work[which].cols());
            worst = format!("input {which} @ ({r},{c}): analytic {an:.6e} vs fd {fd:.6e}");
        }
    }

    Ok(GradCheckReport {
        module: module.to_string(),
        probes,
        max_rel_err: max_rel,
        worst,
    })
}

/// Uniform random matrix in [lo, hi], for building gradcheck inputs.
pub fn rand_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Finite-difference check over named parameters of a model store.
///
/// `f(store, need_grads)` runs a forward pass against the given parameter
/// values and returns the scalar loss, plus named parameter adjoints when
/// `need_grads` is set. Probes perturb individual coordinates of the listed
/// parameters through a cloned store.
pub fn check_named<F>(
    module: &str,
    store: &crate::params::ParamStore,
    names: &[String],
    probes: usize,
    tol: f64,
    rng: &mut ChaCha12Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&crate::params::ParamStore, bool) -> Result<(f64, Option<std::collections::BTreeMap<String, Matrix>>)>,
{
    let (_, grads) = f(store, true)?;
    let grads = grads.ok_or_else(|| Error::shape("gradcheck", "no gradients returned".to_string()))?;

    let sizes: Vec<usize> = names
        .iter()
        .map(|n| store.get(n).map(|m| m.len()))
        .collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::shape("gradcheck", "no parameter coordinates".to_string()));
    }

    let mut max_rel = 0.0;
    let mut worst = String::from("none");
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let orig = store.get(name)?.clone();

        let mut perturbed = store.clone();
        let mut plus = orig.clone();
        plus.data_mut()[flat] += FD_STEP;
        perturbed.set(name, plus)?;
        let f_plus = f(&perturbed, false)?.0;

        let mut minus = orig.clone();
        minus.data_mut()[flat] -= FD_STEP;
        perturbed.set(name, minus)?;
        let f_minus = f(&perturbed, false)?.0;

        let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let an = grads
            .get(name)
            .map(|g| g.data()[flat])
            .unwrap_or(0.0);
        let e = rel_err(an, fd);
        if e > max_rel {
            max_rel = e;
            let cols = orig.cols();
            worst = format!(
                "{name} @ ({},{}): analytic {an:.6e} vs fd {fd:.6e}",
                flat / cols,
                flat % cols
            );
        }
    }

    let report = GradCheckReport {
        module: module.to_string(),
        probes,
        max_rel_err: max_rel,
        worst,
    };
    if report.passes(tol) {
        Ok(report)
    } else {
        Err(Error::GradCheck {
            module: module.to_string(),
            max_rel: report.max_rel_err,
            worst: report.worst.clone(),
            tol,
        })
    }
}
