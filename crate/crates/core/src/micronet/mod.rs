//! A small fully convolutional detector with hand-written backward passes.

mod conv;
mod net;
mod objective;
mod sgd;
mod tensor;
mod train;
mod weights;

pub use conv::{Conv2d, ConvGrad};
pub use net::{DetectorNet, HeadKind, NetConfig, NetGrads, NetOutput};
pub use objective::{anchor_slot, cls_weight, detection_loss, LossParts};
pub use sgd::{sgd_update, Sgd, SgdConfig};
pub use tensor::Tensor;
pub use train::{trace_csv, train, TraceRow, TrainConfig, TrainParams, TrainSample};
pub use weights::{load_into, load_weights, read_weights, save_weights, write_weights};

pub(crate) use train::{check_finite, draw_batch, label_dataset, prepare_grads};
