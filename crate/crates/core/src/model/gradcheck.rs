//! Central-difference validation of the analytic gradients.
//!
//! Errors are measured per tensor as `||a - n|| / max(||a||, ||n||, floor)`
//! and the worst tensor is reported. The floor is `1e-6` times the norm of
//! the whole gradient (and at least `1e-8`). Some tensors have a gradient
//! that is exactly zero, such as attention key biases, whose contribution
//! cancels in the softmax. For those the numeric estimate is pure rounding
//! noise, and the floor keeps that noise from reading as a large relative
//! error.

use super::*;

const FLOOR: f64 = 1e-8;
const RELATIVE_FLOOR: f64 = 1e-6;

/// Analytic and numeric gradients for every parameter of a model.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub analytic: Gradients,
    pub numeric: Gradients,
}

impl GradientCheck {
    pub fn max_relative_error(&self) -> f64 {
        relative_error(&self.analytic, &self.numeric)
    }
}

/// Worst per-tensor relative error between two gradient sets of equal layout.
pub fn relative_error(a: &Gradients, b: &Gradients) -> f64 {
    let pairs: Vec<(&Weights, &Weights)> = [(&a.base, &b.base), (&a.adapter, &b.adapter)]
        .into_iter()
        .filter_map(|(x, y)| Some((x.as_ref()?, y.as_ref()?)))
        .collect();
    let sq = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>();
    let (mut total_a, mut total_b) = (0.0, 0.0);
    for (x, y) in &pairs {
        total_a += x.tensors.iter().map(|t| sq(t)).sum::<f64>();
        total_b += y.tensors.iter().map(|t| sq(t)).sum::<f64>();
    }
    let floor = (RELATIVE_FLOOR * total_a.sqrt().max(total_b.sqrt())).max(FLOOR);

    let mut worst = 0.0f64;
    for (x, y) in pairs {
        for (tx, ty) in x.tensors.iter().zip(&y.tensors) {
            let diff: f64 = tx.iter().zip(ty).map(|(p, q)| (p - q) * (p - q)).sum();
            let denom = sq(tx).sqrt().max(sq(ty).sqrt()).max(floor);
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    worst
}

/// Computes analytic gradients and their central-difference counterparts.
pub fn gradient_check(model: &Model, tokens: &TokenSequence, step: f64) -> Result<GradientCheck> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = model.loss_and_gradients(tokens, true, true)?;
    let mut probe = model.clone();

    let mut base = model.base.zeros_like();
    for t in 0..base.tensors.len() {
        for i in 0..base.tensors[t].len() {
            base.tensors[t][i] = central_difference(&mut probe, tokens, step, |m| &mut m.base.tensors[t][i])?;
        }
    }
    let adapter = match &model.adapter {
        None => None,
        Some(a) => {
            let mut g = a.zeros_like();
            for t in 0..g.tensors.len() {
                for i in 0..g.tensors[t].len() {
                    g.tensors[t][i] = central_difference(&mut probe, tokens, step, |m| {
                        &mut m.adapter.as_mut().expect("adapter present").tensors[t][i]
                    })?;
                }
            }
            Some(g)
        }
    };
    Ok(GradientCheck {
        analytic,
        numeric: Gradients {
            base: Some(base),
            adapter,
        },
    })
}

fn central_difference(
    probe: &mut Model,
    tokens: &TokenSequence,
    step: f64,
    slot: impl Fn(&mut Model) -> &mut f64,
) -> Result<f64> {
    let orig = *slot(probe);
    *slot(probe) = orig + step;
    let plus = probe.nll(tokens)?;
    *slot(probe) = orig - step;
    let minus = probe.nll(tokens)?;
    *slot(probe) = orig;
    Ok((plus - minus) / (2.0 * step))
}

/// Maximum relative error between analytic and central-difference gradients
/// of the target-segment loss, over base and adapter parameters.
pub fn finite_difference_check(
    config: &ModelConfig,
    params: &ParameterSet,
    adapter: Option<&ParameterSet>,
    tokens: &TokenSequence,
    step: f64,
) -> Result<f64> {
    let model = Model::new(*config, params, adapter)?;
    Ok(gradient_check(&model, tokens, step)?.max_relative_error())
}
