//! Pure numeric kernels with hand-derived gradients.
//!
//! Each kernel is a free function over immutable tensors; its backward
//! counterpart takes the forward inputs plus the output gradient. The
//! autodiff tape in [`crate::graph`] only sequences these calls.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{dropout, gelu, relu, softmax};
pub use conv::conv2d;
pub use layout::{cyclic_shift, gather, window_merge, window_partition};
pub use linear::{bmm, linear};
pub use norm::layer_norm;
pub use pool::softpool2d;
