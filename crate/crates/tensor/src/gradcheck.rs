//! Central finite-difference gradient verification.
//!
//! Used by the test suites of every downstream crate: a forward builder is
//! replayed with perturbed leaf values and the analytic gradients from
//! [`Tape::backward`] are compared against `(f(x+h) − f(x−h)) / 2h`.

use crate::tape::{Tape, TapeMark, Var};
use crate::tensor::Tensor;

/// Result of one finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Relative error with a small floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic and central-difference gradients of a scalar loss.
///
/// `build` must construct the loss from the given leaf vars on a fresh tape;
/// it is invoked `2·Σ checked coordinates + 1` times. When `max_coords` is
/// `Some(n)`, only the first `n` coordinates of each input are perturbed
/// (deterministic subsample; enough to catch wiring mistakes in big blocks).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], max_coords: Option<usize>, h: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.data(loss).numel(), 1, "gradcheck loss must be scalar");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.data(loss).data()[0]
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, input) in inputs.iter().enumerate() {
        if analytic[pi].is_empty() {
            continue;
        }
        let coords = match max_coords {
            Some(n) => n.min(input.numel()),
            None => input.numel(),
        };
        for ci in 0..coords {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[ci] += h;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[ci] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let r = rel_err(analytic[pi][ci], numeric);
            if r > max_rel {
                max_rel = r;
            }
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
    }
}

/// Finite-difference check for parameters living on a persistent tape.
///
/// `forward` must rebuild the loss above `mark` on every call (the tape is
/// rolled back first). Parameter values are perturbed in place through
/// `data_mut` and restored afterwards. Parameters the loss does not reach
/// are reported in `unreached` rather than failing the comparison.
pub fn check_param_gradients<F>(
    tape: &mut Tape<f64>,
    mark: TapeMark,
    params: &[Var],
    max_coords: Option<usize>,
    h: f64,
    mut forward: F,
) -> (GradCheck, Vec<Var>)
where
    F: FnMut(&mut Tape<f64>) -> Var,
{
    for &p in params {
        tape.zero_grad(p);
    }
    tape.rollback(mark);
    let loss = forward(tape);
    assert_eq!(tape.data(loss).numel(), 1, "gradcheck loss must be scalar");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Option<Vec<f64>>> =
        params.iter().map(|&p| tape.grad(p).map(|g| g.to_vec())).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut unreached = Vec::new();
    for (pi, &p) in params.iter().enumerate() {
        let Some(grads) = &analytic[pi] else {
            unreached.push(p);
            continue;
        };
        // Coordinates far below the tensor's gradient scale sit at the
        // finite-difference noise floor; compare them against that scale
        // instead of their own magnitude.
        let scale = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let floor = (scale * 1e-3).max(1e-8);
        let n = tape.data(p).numel();
        let coords = match max_coords {
            Some(m) => m.min(n),
            None => n,
        };
        // Deterministic spread over the tensor rather than a prefix.
        let stride = (n / coords.max(1)).max(1);
        for ci in (0..n).step_by(stride).take(coords) {
            let orig = tape.data(p).data()[ci];
            tape.data_mut(p).data_mut()[ci] = orig + h;
            tape.rollback(mark);
            let lp = {
                let l = forward(tape);
                tape.data(l).data()[0]
            };
            tape.data_mut(p).data_mut()[ci] = orig - h;
            tape.rollback(mark);
            let lm = {
                let l = forward(tape);
                tape.data(l).data()[0]
            };
            tape.data_mut(p).data_mut()[ci] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[ci];
            let r = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if r > max_rel {
                max_rel = r;
            }
            checked += 1;
        }
    }
    tape.rollback(mark);
    (
        GradCheck {
            max_rel_err: max_rel,
            checked,
        },
        unreached,
    )
}
