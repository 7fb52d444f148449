use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::{Graph, Tensor};

use super::Model;

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return contract(format!("dataset images must be [N, C, H, W], got {s:?}"));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(i) = images
            .data()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return contract(format!("pixel {i} outside [0, 1]"));
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return contract(format!("label {} at index {i} out of range", labels[i]));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.index_outer(i)
    }

    /// Gather a minibatch by index.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.images.shape();
        let step = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(step * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * step..(i + 1) * step]);
        }
        let x = Tensor::new(&[idx.len(), s[1], s[2], s[3]], data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// A dataset made of the selected rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(idx)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }
}

/// Fraction of `data` the model classifies correctly.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(128) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.logits(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            if Tensor::from_vec(row.to_vec()).argmax() == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn check_data(model: &Model, data: &LabeledDataset, lr: f64, batch: usize) -> Result<()> {
    if data.is_empty() {
        return contract("training on an empty dataset");
    }
    if !(lr >= 0.0) || batch == 0 {
        return contract(format!("invalid training setup lr={lr} batch={batch}"));
    }
    if data.image_shape() != model.spec().input_shape || data.classes() != model.spec().classes {
        return contract("dataset geometry does not match the model spec");
    }
    Ok(())
}

/// Epoch order: a fresh permutation per epoch from a generator seeded by the
/// model's seed.
pub(crate) fn epoch_orders(seed: u64, n: usize, epochs: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// One SGD step on mean cross-entropy over `(x, y)`; returns the loss.
pub(crate) fn sgd_on_batch(model: &mut Model, x: Tensor, y: &[usize], lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let xi = g.constant(x);
    let logits = model.forward(&mut g, xi, &params)?;
    let loss = g.softmax_cross_entropy(logits, y)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss, &params)?;
    model.sgd_step(&grads, lr)?;
    Ok(value)
}

/// Minibatch SGD on softmax cross-entropy. Returns the trained model and its
/// accuracy on `data`. Deterministic for a fixed model seed.
pub fn train(
    mut model: Model,
    data: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch: usize,
) -> Result<(Model, f64)> {
    check_data(&model, data, lr, batch)?;
    for order in epoch_orders(model.spec().seed, data.len(), epochs) {
        for chunk in order.chunks(batch) {
            let (x, y) = data.batch(chunk)?;
            sgd_on_batch(&mut model, x, &y, lr)?;
        }
    }
    let acc = accuracy(&model, data)?;
    Ok((model, acc))
}
