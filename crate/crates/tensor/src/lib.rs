//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Ops are recorded on a [`Tape`]; [`Var`] is a
//! copyable handle into it. Besides the usual elementwise, reduction and
//! matrix ops the engine provides the image kernels the super-resolution
//! pipeline needs: dilated/strided convolution, transposed convolution, 2-D
//! DFT and a Hann-windowed sliding STFT.

mod error;
pub mod gradcheck;
mod linalg;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::Conv2dOpts;
pub use ops::reduce::{cosine, softmax_last};
pub use ops::spectral::{dft2, dft_matrices, hann, hann2d, idft2, window_origins, ComplexGrid, ComplexVar};
pub use params::{Binder, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{numel, strides, Tensor};
