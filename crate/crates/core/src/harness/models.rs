//! Training the desk victim, surrogate and adversarially trained victim.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Result};
use crate::nets::{accuracy, init_model, save_weights, train, Arch, LabeledDataset, Model, ModelSpec};
use crate::oracle::{adversarial_train, fgsm_accuracy};

use super::dataset::{load_dataset, split_paths};

/// Architectures and schedules for `train-models`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub data_dir: PathBuf,
    pub classes: usize,
    pub victim_arch: Arch,
    pub victim_seed: u64,
    pub victim_epochs: usize,
    pub victim_lr: f64,
    pub surrogate_arch: Arch,
    pub surrogate_seed: u64,
    pub surrogate_epochs: usize,
    pub surrogate_lr: f64,
    pub batch: usize,
    /// Also train an FGSM-adversarially-trained victim at this step size.
    pub fgsm_eps: Option<f64>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            classes: 10,
            victim_arch: Arch::TinyCnn {
                channels: vec![8, 16],
                kernel: 3,
            },
            victim_seed: 1,
            victim_epochs: 5,
            victim_lr: 0.05,
            surrogate_arch: Arch::Mlp { hidden: vec![64] },
            surrogate_seed: 2,
            surrogate_epochs: 15,
            surrogate_lr: 0.1,
            batch: 16,
            fgsm_eps: Some(0.1),
        }
    }
}

/// A trained model with its clean test accuracy.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub victim: Trained,
    pub surrogate: Trained,
    /// Adversarially trained victim and its FGSM accuracy on the test split.
    pub robust: Option<(Trained, f64)>,
    /// FGSM accuracy of the plain victim at the same step size.
    pub plain_fgsm_acc: Option<f64>,
}

pub fn load_splits(dir: &Path, classes: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let (i, l) = split_paths(dir, "train");
    let train_set = load_dataset(i, l, classes, None)?;
    let (i, l) = split_paths(dir, "test");
    let test_set = load_dataset(i, l, classes, None)?;
    Ok((train_set, test_set))
}

fn fit(spec: ModelSpec, data: &LabeledDataset, test: &LabeledDataset, epochs: usize, lr: f64, batch: usize) -> Result<Trained> {
    let (model, train_acc) = train(init_model(&spec)?, data, epochs, lr, batch)?;
    let test_acc = accuracy(&model, test)?;
    Ok(Trained {
        model,
        train_acc,
        test_acc,
    })
}

pub fn train_models(plan: &TrainPlan) -> Result<TrainedModels> {
    let (train_set, test_set) = load_splits(&plan.data_dir, plan.classes)?;
    let shape = train_set.image_shape();
    let spec = |arch: &Arch, seed| ModelSpec {
        arch: arch.clone(),
        input_shape: shape,
        classes: plan.classes,
        seed,
    };
    let victim_spec = spec(&plan.victim_arch, plan.victim_seed);
    let victim = fit(victim_spec.clone(), &train_set, &test_set, plan.victim_epochs, plan.victim_lr, plan.batch)?;
    log::info!("victim: train {:.3} test {:.3}", victim.train_acc, victim.test_acc);
    let surrogate = fit(
        spec(&plan.surrogate_arch, plan.surrogate_seed),
        &train_set,
        &test_set,
        plan.surrogate_epochs,
        plan.surrogate_lr,
        plan.batch,
    )?;
    log::info!("surrogate: train {:.3} test {:.3}", surrogate.train_acc, surrogate.test_acc);
    let (robust, plain_fgsm_acc) = match plan.fgsm_eps {
        Some(eps) => {
            let (model, train_acc, _) = adversarial_train(
                init_model(&victim_spec)?,
                &train_set,
                plan.victim_epochs,
                plan.victim_lr,
                plan.batch,
                eps,
            )?;
            let test_acc = accuracy(&model, &test_set)?;
            let robust_acc = fgsm_accuracy(&model, &test_set, eps)?;
            let plain = fgsm_accuracy(&victim.model, &test_set, eps)?;
            log::info!("robust victim: test {test_acc:.3}, fgsm {robust_acc:.3} (plain victim fgsm {plain:.3})");
            (
                Some((
                    Trained {
                        model,
                        train_acc,
                        test_acc,
                    },
                    robust_acc,
                )),
                Some(plain),
            )
        }
        None => (None, None),
    };
    Ok(TrainedModels {
        victim,
        surrogate,
        robust,
        plain_fgsm_acc,
    })
}

/// Write `victim.w`, `surrogate.w` and (if trained) `victim_adv.w`.
pub fn save_models(models: &TrainedModels, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = vec![dir.join("victim.w"), dir.join("surrogate.w")];
    save_weights(&models.victim.model, &written[0])?;
    save_weights(&models.surrogate.model, &written[1])?;
    if let Some((r, _)) = &models.robust {
        let p = dir.join("victim_adv.w");
        save_weights(&r.model, &p)?;
        written.push(p);
    }
    Ok(written)
}
