//! Quantized fully-convolutional Siamese tracking engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and the reference kernels.
//! * [`quantize`]: quantizers, packed layouts, XNOR-popcount, footprint.
//! * [`siamnet`]: backbone manifest, quantized fast paths, weight container.
//! * [`tracker`]: the five-scale tracking loop.
//! * [`toytrain`]: synthetic data, quantization-aware training, pruning.
//! * [`evalbench`]: sequence loading, metrics, reports, kernel benchmark.

pub mod error;
pub mod evalbench;
pub mod kernels;
pub mod quantize;
pub mod siamnet;
pub mod tensor;
pub mod toytrain;
pub mod tracker;

pub use error::{Error, Result};
pub use quantize::{LayerGroup, QuantConfig, QuantScheme, QuantizedBlock};
pub use siamnet::{NetworkManifest, SiamNetwork};
pub use tensor::{ConvParams, Tensor};
pub use tracker::{BBox, TrackerState};
