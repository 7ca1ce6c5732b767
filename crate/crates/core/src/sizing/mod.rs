//! Compression accounting: the size-gain formula, Huffman coding of level
//! indices, fixed-width bit packing, and the binary model container.
//!
//! A quantized vector of `N` weights with `b`-bit indices and buckets of `k`
//! values costs `bN + 2fN/k` bits, since each bucket stores its `α` and `β`
//! at full precision `f`. Against `fN` bits for the raw vector that gives
//!
//! ```text
//! g(b, k; f) = k f / (k b + 2 f)
//! ```

mod container;
mod huffman;
mod pack;

pub use container::{
    read_container, write_container, Container, Encoding, Entry, EntryData, FORMAT_VERSION, MAGIC,
};
pub use huffman::{huffman_build, huffman_decode, huffman_encode, HuffmanCode};
pub use pack::{pack_indices, unpack_indices};

use crate::error::{argument, Result};
use crate::quantcore::QuantizedVector;

/// Compression ratio `kf / (kb + 2f)` of bucketed `b`-bit quantization.
pub fn size_gain(b: f64, k: f64, f: f64) -> Result<f64> {
    if !(b > 0.0 && k > 0.0 && f > 0.0) {
        return Err(argument(format!(
            "size gain needs positive arguments, got b={b}, k={k}, f={f}"
        )));
    }
    Ok(k * f / (k * b + 2.0 * f))
}

/// Size of one quantized tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSize {
    pub name: String,
    pub weights: u64,
    pub bits: u8,
    pub buckets: u64,
    /// Fixed-width indices plus scale overhead.
    pub plain_bits: u64,
    /// Huffman-coded indices plus the same scale overhead.
    pub huffman_bits: u64,
    pub mean_code_length: f64,
}

/// Whole-model size accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub full_precision_bits: u64,
    pub quantized_bits: u64,
    pub huffman_bits: u64,
    pub gain_plain: f64,
    pub gain_huffman: f64,
    /// Huffman bits per quantized weight, averaged over all quantized tensors.
    pub mean_code_length: f64,
    pub layers: Vec<LayerSize>,
}

/// Histogram of the indices of one quantized vector, sized to its scheme.
pub fn index_histogram(qv: &QuantizedVector) -> Vec<u64> {
    let mut counts = vec![0u64; qv.scheme.index_count()];
    for &i in &qv.indices {
        if let Some(c) = counts.get_mut(i as usize) {
            *c += 1;
        }
    }
    counts
}

/// Size of a model made of quantized tensors plus `raw_params` values kept at
/// full precision (biases). Huffman codes are built per tensor. Storage for
/// non-uniform points is independent of `N` and left out of the ratios.
pub fn model_size_report(
    layers: &[(&str, &QuantizedVector)],
    raw_params: u64,
    f: u32,
) -> Result<SizeReport> {
    let f64_bits = u64::from(f);
    let mut out = Vec::with_capacity(layers.len());
    let mut total_weights = 0u64;
    let mut total_huffman_index_bits = 0u64;
    for (name, qv) in layers {
        let n = qv.len() as u64;
        let buckets = qv.scaling.num_buckets() as u64;
        let overhead = 2 * f64_bits * buckets;
        let counts = index_histogram(qv);
        let index_bits = if n == 0 {
            0
        } else {
            huffman_build(&counts)?.encoded_bits()
        };
        total_weights += n;
        total_huffman_index_bits += index_bits;
        out.push(LayerSize {
            name: name.to_string(),
            weights: n,
            bits: qv.bits,
            buckets,
            plain_bits: u64::from(qv.bits) * n + overhead,
            huffman_bits: index_bits + overhead,
            mean_code_length: if n == 0 { 0.0 } else { index_bits as f64 / n as f64 },
        });
    }
    let raw_bits = raw_params * f64_bits;
    let full_precision_bits = (total_weights + raw_params) * f64_bits;
    let quantized_bits = out.iter().map(|l| l.plain_bits).sum::<u64>() + raw_bits;
    let huffman_bits = out.iter().map(|l| l.huffman_bits).sum::<u64>() + raw_bits;
    Ok(SizeReport {
        full_precision_bits,
        quantized_bits,
        huffman_bits,
        gain_plain: full_precision_bits as f64 / quantized_bits.max(1) as f64,
        gain_huffman: full_precision_bits as f64 / huffman_bits.max(1) as f64,
        mean_code_length: if total_weights == 0 {
            0.0
        } else {
            total_huffman_index_bits as f64 / total_weights as f64
        },
        layers: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantcore::{quantize_uniform, UniformScheme};

    #[test]
    fn gain_examples() {
        assert!((size_gain(2.0, 256.0, 32.0).unwrap() - 8192.0 / 576.0).abs() < 1e-12);
        assert!((size_gain(4.0, 512.0, 32.0).unwrap() - 16384.0 / 2112.0).abs() < 1e-12);
        assert!((size_gain(32.0, 256.0, 32.0).unwrap() - 8192.0 / 8256.0).abs() < 1e-12);
        assert!(size_gain(0.0, 256.0, 32.0).is_err());
        assert!(size_gain(2.0, -1.0, 32.0).is_err());
    }

    #[test]
    fn gain_monotone() {
        for b in 1..8 {
            for k in [1.0, 16.0, 256.0, 1024.0] {
                let g = size_gain(b as f64, k, 32.0).unwrap();
                assert!(size_gain(b as f64, k * 2.0, 32.0).unwrap() > g);
                assert!(size_gain(b as f64 + 1.0, k, 32.0).unwrap() < g);
            }
        }
    }

    #[test]
    fn one_layer_report() {
        let v: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = quantize_uniform(&v, 256, UniformScheme::for_bits(2, crate::Rounding::Deterministic).unwrap(), None)
            .unwrap();
        let r = model_size_report(&[("w", &q)], 0, 32).unwrap();
        assert_eq!(r.full_precision_bits, 8192);
        assert_eq!(r.quantized_bits, 576);
        assert!((r.gain_plain - 14.222).abs() < 1e-3);
        assert!(r.huffman_bits <= r.quantized_bits);
        assert!(r.mean_code_length <= 2.0);
    }

    #[test]
    fn constant_indices_cost_only_scales() {
        let v = vec![1.5; 300];
        let q = quantize_uniform(&v, 256, UniformScheme::for_bits(2, crate::Rounding::Deterministic).unwrap(), None)
            .unwrap();
        let r = model_size_report(&[("w", &q)], 10, 32).unwrap();
        assert_eq!(r.layers[0].huffman_bits, 2 * 32 * 2);
        assert_eq!(r.huffman_bits, 2 * 32 * 2 + 10 * 32);
        assert_eq!(r.mean_code_length, 0.0);
    }
}
