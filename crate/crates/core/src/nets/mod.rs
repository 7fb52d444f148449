//! Small differentiable classifiers used as victims and surrogates.

mod io;
mod model;
mod spec;
mod train;

pub use io::{decode_weights, encode_weights, load_model, load_weights, save_weights};
pub use model::{init_model, Model, Param};
pub use spec::{Arch, ModelSpec};
pub use train::{accuracy, train, LabeledDataset};

pub(crate) use train::{check_data, epoch_orders, sgd_on_batch};
