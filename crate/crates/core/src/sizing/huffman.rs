use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{argument, Error, Result};

/// An optimal prefix code over symbols `0..counts.len()`, with canonical
/// codeword assignment.
///
/// Construction is deterministic: among equal weights, leaves come before
/// merged nodes, leaves by symbol index and merged nodes by creation order.
/// A one-symbol alphabet gets a zero-length code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanCode {
    counts: Vec<u64>,
    lengths: Vec<u8>,
    codes: Vec<u64>,
}

/// Longest codeword the bit writer supports.
const MAX_LEN: u8 = 64;

pub fn huffman_build(counts: &[u64]) -> Result<HuffmanCode> {
    let present: Vec<usize> = (0..counts.len()).filter(|&s| counts[s] > 0).collect();
    if present.is_empty() {
        return Err(argument("Huffman code needs at least one symbol with a positive count"));
    }
    let mut lengths = vec![0u8; counts.len()];
    if present.len() > 1 {
        // Node ids: leaves are their symbol, merged nodes follow after the alphabet.
        let alphabet = counts.len();
        let mut parent = vec![usize::MAX; alphabet + present.len() - 1];
        let mut heap = BinaryHeap::with_capacity(present.len());
        for &s in &present {
            heap.push(Reverse((counts[s], 0u8, s)));
        }
        let mut next = alphabet;
        while heap.len() > 1 {
            let Reverse((wa, _, a)) = heap.pop().expect("heap has two nodes");
            let Reverse((wb, _, b)) = heap.pop().expect("heap has two nodes");
            parent[a] = next;
            parent[b] = next;
            heap.push(Reverse((wa + wb, 1u8, next)));
            next += 1;
        }
        for &s in &present {
            let mut depth = 0u32;
            let mut node = s;
            while parent[node] != usize::MAX {
                node = parent[node];
                depth += 1;
            }
            if depth > u32::from(MAX_LEN) {
                return Err(argument(format!("codeword for symbol {s} exceeds {MAX_LEN} bits")));
            }
            lengths[s] = depth as u8;
        }
    }
    let codes = canonical_codes(&lengths, &present);
    Ok(HuffmanCode {
        counts: counts.to_vec(),
        lengths,
        codes,
    })
}

fn canonical_order(lengths: &[u8], present: &[usize]) -> Vec<usize> {
    let mut order = present.to_vec();
    order.sort_by_key(|&s| (lengths[s], s));
    order
}

fn canonical_codes(lengths: &[u8], present: &[usize]) -> Vec<u64> {
    let mut codes = vec![0u64; lengths.len()];
    let mut code = 0u64;
    let mut prev_len = 0u8;
    for (i, s) in canonical_order(lengths, present).into_iter().enumerate() {
        let len = lengths[s];
        if i > 0 {
            code += 1;
        }
        code <<= len - prev_len;
        codes[s] = code;
        prev_len = len;
    }
    codes
}

impl HuffmanCode {
    /// Rebuild a code from stored lengths. `present` marks symbols that
    /// occur, which distinguishes the zero-length single-symbol case from
    /// absent symbols.
    pub fn from_lengths(lengths: Vec<u8>, present: &[bool]) -> Result<Self> {
        if lengths.len() != present.len() {
            return Err(argument("length table and presence table differ in size"));
        }
        let syms: Vec<usize> = (0..lengths.len()).filter(|&s| present[s]).collect();
        if syms.is_empty() {
            return Err(Error::Corruption("Huffman table lists no symbols".into()));
        }
        if syms.len() == 1 && lengths[syms[0]] != 0 || syms.len() > 1 && syms.iter().any(|&s| lengths[s] == 0) {
            return Err(Error::Corruption("inconsistent Huffman length table".into()));
        }
        if syms.iter().any(|&s| lengths[s] > MAX_LEN) {
            return Err(Error::Corruption("Huffman codeword too long".into()));
        }
        let code = HuffmanCode {
            counts: present.iter().map(|&p| u64::from(p)).collect(),
            codes: canonical_codes(&lengths, &syms),
            lengths,
        };
        if syms.len() > 1 && code.kraft_sum() > 1.0 {
            return Err(Error::Corruption("Huffman lengths violate the Kraft inequality".into()));
        }
        Ok(code)
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Codeword of `symbol` as `(bits, length)`, most significant bit first.
    pub fn codeword(&self, symbol: u32) -> Option<(u64, u8)> {
        let s = symbol as usize;
        (self.counts.get(s).copied().unwrap_or(0) > 0).then(|| (self.codes[s], self.lengths[s]))
    }

    pub fn symbols(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.counts.len()).filter(|&s| self.counts[s] > 0)
    }

    /// Bits needed to encode the histogram the code was built from.
    pub fn encoded_bits(&self) -> u64 {
        self.symbols()
            .map(|s| self.counts[s] * u64::from(self.lengths[s]))
            .sum()
    }

    pub fn mean_length(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        self.encoded_bits() as f64 / total as f64
    }

    /// Empirical entropy in bits of the histogram.
    pub fn entropy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let t = total as f64;
        self.symbols()
            .map(|s| {
                let p = self.counts[s] as f64 / t;
                -p * p.log2()
            })
            .sum()
    }

    pub fn kraft_sum(&self) -> f64 {
        self.symbols().map(|s| (-(self.lengths[s] as f64)).exp2()).sum()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            used: 8,
        }
    }

    fn push(&mut self, code: u64, len: u8) {
        for shift in (0..len).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = ((code >> shift) & 1) as u8;
            *self.bytes.last_mut().expect("byte pushed above") |= bit << (7 - self.used);
            self.used += 1;
        }
    }
}

/// Encode `indices`; the stream is MSB-first and zero-padded to a whole byte.
pub fn huffman_encode(indices: &[u32], code: &HuffmanCode) -> Result<Vec<u8>> {
    let mut w = BitWriter::new();
    for &i in indices {
        let (c, len) = code
            .codeword(i)
            .ok_or_else(|| argument(format!("symbol {i} has no codeword")))?;
        w.push(c, len);
    }
    Ok(w.bytes)
}

/// Decode exactly `n` symbols from `bytes`.
pub fn huffman_decode(bytes: &[u8], code: &HuffmanCode, n: usize) -> Result<Vec<u32>> {
    let present: Vec<usize> = code.symbols().collect();
    if present.len() == 1 {
        return Ok(vec![present[0] as u32; n]);
    }
    let order = canonical_order(&code.lengths, &present);
    let max_len = code.lengths[*order.last().expect("non-empty")] as usize;
    // Per length: first canonical code, its position in `order`, and how many codes.
    let mut first_code = vec![0u64; max_len + 1];
    let mut first_pos = vec![0usize; max_len + 1];
    let mut per_len = vec![0usize; max_len + 1];
    for (pos, &s) in order.iter().enumerate() {
        let l = code.lengths[s] as usize;
        if per_len[l] == 0 {
            first_code[l] = code.codes[s];
            first_pos[l] = pos;
        }
        per_len[l] += 1;
    }

    let total_bits = bytes.len() * 8;
    let mut out = Vec::with_capacity(n.min(total_bits));
    let mut bit = 0usize;
    while out.len() < n {
        let mut acc = 0u64;
        let mut len = 0usize;
        loop {
            if bit >= total_bits || len >= max_len {
                return Err(Error::Corruption(format!(
                    "Huffman stream ended after {} of {n} symbols",
                    out.len()
                )));
            }
            acc = (acc << 1) | u64::from((bytes[bit / 8] >> (7 - bit % 8)) & 1);
            bit += 1;
            len += 1;
            if per_len[len] > 0 && acc >= first_code[len] && acc - first_code[len] < per_len[len] as u64 {
                let s = order[first_pos[len] + (acc - first_code[len]) as usize];
                out.push(s as u32);
                break;
            }
        }
    }
    Ok(out)
}
