//! Trainable model: tensors, layers with analytic gradients, the shared
//! backbone, per-range detector heads, losses, the optimizer, training
//! drivers, and filter-count compression.

pub mod layers;
pub mod loss;
pub mod train;
pub mod net;
pub mod checkpoint;
pub mod optim;
pub mod spec;
pub mod tensor;

pub use loss::{decode_deltas, encode_deltas, LossBreakdown};
pub use net::{image_to_tensor, pad_to_stride, Model};
pub use spec::{bind_scheme, compress, predicted_param_counts, BackboneSpec, DetectorBinding, HeadSpec, ModelSpec, StageConfig};
pub use tensor::{Param, Tensor};
