//! Activation-guided low-bit quantization for transformer inference.
//!
//! * [`tensor`]: dense FP32 tensors and a binary named-tensor store.
//! * [`quant`]: affine and log2 quantizers.
//! * [`trip`]: layer-wise affine quantization with per-channel power-of-two step refinements.
//! * [`kernels`]: reference and integer GEMMs, including a packed INT4 lane multiplier.
//! * [`pruning`]: start-token attentivity scoring and cascade token pruning.
//! * [`pipeline`]: toy causal decoder blocks wired through all of the above.

pub mod error;
pub mod kernels;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod tensor;
pub mod trip;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
