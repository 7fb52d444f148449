use crate::error::Result;
use crate::nets::Model;
use crate::tensor::smooth;
use crate::Tensor;

use super::loss::{clip_l2, surrogate_loss_grad};
use super::AttackConfig;

/// Transfer attack on the surrogate: `n_T` steps of smoothed, normalized,
/// momentum-accumulated descent on the margin loss, each followed by the l2
/// clip around `x`.
///
/// Returns the final image and the smoothed gradient map from the last
/// iteration. A zero gradient ends the run early with the current image.
pub fn timi(surrogate: &Model, x_adv: &Tensor, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<(Tensor, Tensor)> {
    let kernel = cfg.kernel_tensor()?;
    let step = cfg.transfer_step();
    let mut cur = x_adv.clone();
    let mut g = Tensor::zeros(x.shape());
    let mut map = Tensor::zeros(x.shape());
    for _ in 0..cfg.n_t {
        let (_, grad) = surrogate_loss_grad(surrogate, &cur, y)?;
        map = smooth(&grad, &kernel)?;
        let n = map.norm_l2();
        if !(n > 0.0 && n.is_finite()) {
            break;
        }
        g = g.scale(cfg.mu);
        g.axpy(1.0 / n, &map)?;
        let next = cur.zip_map(&g, "timi step", |a, b| a - step * b)?;
        cur = clip_l2(&next, x, cfg.zeta)?;
    }
    Ok((cur, map))
}
