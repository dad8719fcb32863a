//! Central finite-difference verification of tape gradients.
//!
//! The checkers only ever evaluate forward passes, so they stay independent
//! of the backward implementation they validate.
//!
//! Graphs with relu, maxpool or clamped-sigmoid nodes are piecewise smooth;
//! a central difference straddling a piece boundary does not approximate
//! any derivative. [`check_gradients_smooth`] therefore compares the
//! discrete activation pattern of the two perturbed evaluations and skips
//! the (rare) elements whose probes land on different pieces; every
//! remaining element must match.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Default perturbation used by the gradient checks.
pub const DEFAULT_H: f64 = 1e-3;
/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over all compared elements.
    pub max_rel_err: f64,
    /// (input index, element index) where it occurred.
    pub worst: (usize, usize),
    /// Elements actually compared.
    pub tested: usize,
    /// Elements skipped because the probes crossed a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences over every element of every input.
///
/// `build` reconstructs the graph from leaf variables; it is invoked once
/// for the analytic pass and twice per perturbed element.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run_check(inputs, build, h, false)
}

/// [`check_gradients`] that skips elements whose two probe evaluations land
/// on different smooth pieces of the graph (see module docs).
pub fn check_gradients_smooth<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run_check(inputs, build, h, true)
}

fn run_check<F>(inputs: &[Tensor], build: F, h: f64, skip_kinks: bool) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok((
            tape.value(root).scalar_value()?,
            tape.activation_pattern(),
        ))
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        tested: 0,
        skipped: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (f_plus, p_plus) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (f_minus, p_minus) = eval(&work)?;
            work[i].data_mut()[j] = orig;

            if skip_kinks && p_plus != p_minus {
                out.skipped += 1;
                continue;
            }
            out.tested += 1;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = (i, j);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_graph_passes_exactly() {
        let x = Tensor::from_vec(&[3], vec![0.5, 1.0, -2.0]).unwrap();
        let check = check_gradients(
            &[x],
            |tape, vars| {
                let sq = tape.square(vars[0]);
                Ok(tape.sum(sq))
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(check.within(DEFAULT_TOL));
        assert_eq!(check.tested, 3);
    }

    #[test]
    fn composite_graph_passes() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![0.3, 0.8, -0.4, 1.2]).unwrap();
        let k = Tensor::from_vec(&[2, 2, 1, 1], vec![0.5, -0.25, 0.75, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.1]).unwrap();
        let check = check_gradients(
            &[x, k, b],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1, 0)?;
                let r = tape.relu(y);
                let s = tape.sigmoid(r);
                let sq = tape.square(s);
                Ok(tape.sum(sq))
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(
            check.within(DEFAULT_TOL),
            "max rel err {} at {:?}",
            check.max_rel_err,
            check.worst
        );
    }

    #[test]
    fn smooth_variant_skips_elements_straddling_a_relu_kink() {
        // One element sits exactly at the relu kink: its probes land on two
        // different linear pieces and must be skipped; the rest is checked.
        let x = Tensor::from_vec(&[3], vec![0.5, 0.0, -0.7]).unwrap();
        let check = check_gradients_smooth(
            &[x],
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum(r))
            },
            DEFAULT_H,
        )
        .unwrap();
        assert_eq!(check.skipped, 1);
        assert_eq!(check.tested, 2);
        assert!(check.within(DEFAULT_TOL));
    }
}
