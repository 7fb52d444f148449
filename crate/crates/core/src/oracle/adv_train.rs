use crate::error::{contract, Result};
use crate::nets::{accuracy, check_data, epoch_orders, sgd_on_batch, train, LabeledDataset, Model};
use crate::{Graph, Tensor};

/// One-step l-inf FGSM: `clamp(x + eps * sign(d CE / dx), 0, 1)` for a batch.
pub fn fgsm_examples(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let batch = model.as_batch(x)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xi = g.leaf(batch.clone(), true);
    let logits = model.forward(&mut g, xi, &params)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let grad = g.backward(loss, &[xi])?.remove(0);
    let step = grad.map(|v| eps * v.signum() * f64::from(u8::from(v != 0.0)));
    Ok(batch.add(&step)?.clamp(0.0, 1.0).reshape(x.shape())?)
}

/// Accuracy on FGSM examples crafted against the model itself.
pub fn fgsm_accuracy(model: &Model, data: &LabeledDataset, eps: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(128) {
        let (x, y) = data.batch(chunk)?;
        let adv = fgsm_examples(model, &x, &y, eps)?;
        let logits = model.logits(&adv)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            if Tensor::from_vec(row.to_vec()).argmax() == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Adversarial training: every minibatch is the clean batch followed by its
/// FGSM counterpart at `fgsm_eps` (a 50/50 mix). With `fgsm_eps == 0` the
/// adversarial half would duplicate the clean half, so this reduces to
/// [`train`] exactly.
///
/// Returns the model, its clean accuracy and its FGSM accuracy on `data`.
pub fn adversarial_train(
    mut model: Model,
    data: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch: usize,
    fgsm_eps: f64,
) -> Result<(Model, f64, f64)> {
    if !(fgsm_eps >= 0.0) {
        return contract(format!("fgsm_eps must be non-negative, got {fgsm_eps}"));
    }
    if fgsm_eps == 0.0 {
        let (m, acc) = train(model, data, epochs, lr, batch)?;
        return Ok((m, acc, acc));
    }
    check_data(&model, data, lr, batch)?;
    for order in epoch_orders(model.spec().seed, data.len(), epochs) {
        for chunk in order.chunks(batch) {
            let (x, y) = data.batch(chunk)?;
            let adv = fgsm_examples(&model, &x, &y, fgsm_eps)?;
            let both = Tensor::stack(&[&x, &adv])?;
            let s = x.shape();
            let both = both.reshape(&[2 * s[0], s[1], s[2], s[3]])?;
            let labels: Vec<usize> = y.iter().chain(&y).copied().collect();
            sgd_on_batch(&mut model, both, &labels, lr)?;
        }
    }
    let clean = accuracy(&model, data)?;
    let robust = fgsm_accuracy(&model, data, fgsm_eps)?;
    Ok((model, clean, robust))
}
