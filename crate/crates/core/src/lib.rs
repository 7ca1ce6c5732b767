//! Quantized distillation, differentiable quantization and compression
//! accounting for small dense networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`quantcore`]: bucketed linear scaling, uniform and non-uniform
//!   quantizers, and the gradient of the quantizer with respect to its points.
//! - [`sizing`]: the size-gain formula, Huffman coding, bit packing and the
//!   `QDZ1` container.
//! - [`nn`]: a minimal dense network with softmax, distillation loss,
//!   backpropagation and SGD.
//! - [`train`]: quantized distillation, differentiable quantization, the
//!   post-training baseline and the point-allocation heuristics.
//! - [`stats`]: Monte-Carlo checks that stochastic quantization noise is
//!   zero-mean and asymptotically normal.
//! - [`data`]: synthetic and CSV datasets.
//! - [`recipe`]: the teacher, student and quantization steps wired together
//!   with shared defaults.
//!
//! ```
//! use qdz::quantcore::{quantize_uniform, dequantize, Rounding, UniformScheme};
//!
//! let weights = [-1.0, 0.0, 3.0, 0.4];
//! let scheme = UniformScheme::for_bits(2, Rounding::Deterministic)?;
//! let q = quantize_uniform(&weights, 256, scheme, None)?;
//! assert_eq!(q.indices, vec![0, 1, 3, 1]);
//! let back = dequantize(&q)?;
//! assert!((back[1] - 1.0 / 3.0).abs() < 1e-12);
//! # Ok::<(), qdz::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod nn;
pub mod quantcore;
pub mod recipe;
pub mod rng;
pub mod sizing;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use quantcore::{
    LevelScheme, QuantizationPoints, QuantizedVector, Rounding, ScaledVector, UniformScheme,
};
