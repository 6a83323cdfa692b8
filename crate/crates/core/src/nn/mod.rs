//! Minimal CPU network stack: 4-D tensors, layers with manual backward,
//! Adam, and a checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use layers::{
    sigmoid, softplus, softplus_inverse, AvgPool2d, BatchNorm2d, Conv2d, KBitAct, Layer, Linear, Mode, PRelu, Param,
    QuantSlot, Sequential,
};
pub use tensor::Tensor4;
