//! Audio-visual synchronization lab: a self-contained, CPU-sized stack for
//! studying contrastive-generative training of frame-synchronous audio and
//! lip-video encoders against a frozen speech-recognition head.
//!
//! The crate is organized around the pipeline:
//!
//! ```text
//! corpus -> backbone (audio / visual / context) -> sync losses
//!                                   \-> adapter -> frozen SR head -> text
//! ```
//!
//! Everything numerical runs on the f64 autodiff tape in [`tensor`], which
//! keeps analytic gradients checkable against finite differences.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod srhead;
pub mod sync;
pub mod tensor;
pub mod train;

pub use error::{AvError, Result};
