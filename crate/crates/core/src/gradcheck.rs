//! Central finite-difference gradient checking.
//!
//! The checker evaluates the function through forward passes only and
//! compares the result with the tape's backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients that are
/// zero on both sides do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates across all inputs.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        _ => Err(Error::Tape("gradient check needs a scalar function".into())),
    }
}

/// Compares the backward pass of `f` with central differences on the
/// inputs that require a gradient.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.max_coords {
        Some(m) if m < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, coords.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| coords[k]).collect()
        }
        _ => coords,
    };

    let mut work = inputs.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, j) in chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + cfg.step;
        let plus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig - cfg.step;
        let minus = eval(&work, &f)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i][j];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, j));
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
