use crate::error::{contract, Result};
use crate::hoga::safe_ln;
use crate::nets::Model;
use crate::{Graph, Tensor};

/// Margin loss `log p_y − max_{j≠y} log p_j`. Negative exactly when some
/// other class outscores `y`.
pub fn attack_loss(probs: &[f64], y: usize) -> Result<f64> {
    if y >= probs.len() || probs.len() < 2 {
        return contract(format!("label {y} invalid for {} classes", probs.len()));
    }
    let runner_up = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(safe_ln(probs[y]) - safe_ln(runner_up))
}

/// Margin loss on log-probabilities (no flooring needed).
fn margin_and_rival(log_probs: &[f64], y: usize) -> (f64, usize) {
    let (mut best, mut rival) = (f64::NEG_INFINITY, usize::from(y == 0));
    for (j, &v) in log_probs.iter().enumerate() {
        if j != y && v > best {
            best = v;
            rival = j;
        }
    }
    (log_probs[y] - best, rival)
}

/// The surrogate's margin loss at `x` and its input gradient. The rival
/// class is fixed at its value at `x`.
pub fn surrogate_loss_grad(model: &Model, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
    let classes = model.spec().classes;
    if y >= classes || classes < 2 {
        return contract(format!("label {y} invalid for {classes} classes"));
    }
    let batch = model.as_batch(x)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xi = g.leaf(batch, true);
    let logits = model.forward(&mut g, xi, &params)?;
    let ls = g.log_softmax(logits)?;
    let (j, rival) = margin_and_rival(g.value(ls).data(), y);
    let py = g.gather(ls, &[y])?;
    let pr = g.gather(ls, &[rival])?;
    let d = g.sub(py, pr)?;
    let root = g.sum(d);
    let grad = g.backward(root, &[xi])?.remove(0);
    Ok((j, grad.reshape(x.shape())?))
}

fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return contract(format!("zeta must be positive and finite, got {zeta}"));
    }
    Ok(())
}

/// Pull `x_adv` back onto the l2 sphere of radius `zeta` around `x` if it lies
/// on or outside it. No pixel clamping.
pub fn project_l2(x_adv: &Tensor, x: &Tensor, zeta: f64) -> Result<Tensor> {
    check_zeta(zeta)?;
    let d = x_adv.distance_l2(x)?;
    if d < zeta {
        return Ok(x_adv.clone());
    }
    let s = zeta / d;
    x.zip_map(x_adv, "project_l2", |a, b| a + s * (b - a))
}

/// [`project_l2`] followed by clamping pixels to `[0, 1]`. Clamping can only
/// move pixels towards `x` (which is itself in range), so the result stays
/// inside the ball without a second projection.
pub fn clip_l2(x_adv: &Tensor, x: &Tensor, zeta: f64) -> Result<Tensor> {
    Ok(project_l2(x_adv, x, zeta)?.clamp(0.0, 1.0))
}
