//! Differentiable array substrate.

pub mod array;
pub(crate) mod conv;
pub mod fft;
pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use array::{ComplexPair, NdArray};
pub use fft::{fft2, ifft2};
pub use gradcheck::gradcheck;
pub use tape::{BackwardRule, Grads, Tape, Var};
