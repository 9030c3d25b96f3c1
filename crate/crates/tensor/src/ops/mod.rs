pub(crate) mod conv;
mod elementwise;
mod matmul;
pub(crate) mod reduce;
mod shape;
pub(crate) mod spectral;
