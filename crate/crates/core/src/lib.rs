//! SIEDD: a video codec that stores a clip as the weights of a coordinate
//! network. A shared sine encoder maps positionally encoded pixel
//! coordinates to a latent; per-group decoders with one linear head per
//! frame turn that latent into RGB. Decoder trunks are quantized and
//! entropy coded into a compact `.siedd` file.

pub mod error;
pub mod tensor;
pub mod trig;
pub mod nn;
pub mod coords;
pub mod video;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod quant;
pub mod bitstream;
pub mod metrics;
pub mod codec;
pub mod bench;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
