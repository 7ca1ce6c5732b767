//! The `QDZ1` binary container.
//!
//! ```text
//! magic "QDZ1" | version u16 | entry count u16
//! per entry:
//!   name length u16 | UTF-8 name
//!   scheme u8 (0 uniform, 1 non-uniform, 2 raw f64)
//!   b u8 | s u32 | bucket size u32 | N u64
//!   ceil(N / bucket size) × (α f32, β f32)
//!   non-uniform only: s × f32 points
//!   encoding u8 (0 packed, 1 Huffman) | payload length u64 | payload | CRC32(payload) u32
//! ```
//!
//! All integers and floats are little-endian. Raw entries carry `b = 64`,
//! `s = 0`, bucket size 0, no scale pairs and `N` little-endian f64 values.
//! A Huffman payload starts with the alphabet size (u16) and one byte per
//! symbol holding `code length + 1` (0 marks an absent symbol), followed by
//! the canonical-code bitstream.

use std::io::{self, Read, Write};

use super::huffman::{huffman_build, huffman_decode, huffman_encode, HuffmanCode};
use super::index_histogram;
use super::pack::{pack_indices, unpack_indices};
use crate::error::{argument, Error, Result};
use crate::quantcore::{BucketScaling, LevelScheme, QuantizationPoints, QuantizedVector};

pub const MAGIC: &[u8; 4] = b"QDZ1";
pub const FORMAT_VERSION: u16 = 1;

/// Largest entry the reader accepts.
const MAX_VALUES: usize = u32::MAX as usize;

const SCHEME_UNIFORM: u8 = 0;
const SCHEME_NONUNIFORM: u8 = 1;
const SCHEME_RAW: u8 = 2;

/// How index payloads are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Packed,
    Huffman,
}

impl Encoding {
    fn tag(self) -> u8 {
        match self {
            Encoding::Packed => 0,
            Encoding::Huffman => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    Quantized(QuantizedVector),
    Raw(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.data)
    }

    pub fn to_bytes(&self, encoding: Encoding) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_container(&mut out, self, encoding)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_container(&mut io::Cursor::new(bytes))
    }
}

fn encode_payload(qv: &QuantizedVector, encoding: Encoding) -> Result<Vec<u8>> {
    match encoding {
        Encoding::Packed => pack_indices(&qv.indices, qv.bits),
        Encoding::Huffman => {
            let counts = index_histogram(qv);
            let alphabet = u16::try_from(counts.len())
                .map_err(|_| argument("alphabet too large for the container"))?;
            let mut out = alphabet.to_le_bytes().to_vec();
            if qv.indices.is_empty() {
                out.extend(std::iter::repeat(0u8).take(counts.len()));
                return Ok(out);
            }
            let code = huffman_build(&counts)?;
            out.extend(
                code.lengths()
                    .iter()
                    .zip(&counts)
                    .map(|(&l, &c)| if c > 0 { l + 1 } else { 0 }),
            );
            out.extend(huffman_encode(&qv.indices, &code)?);
            Ok(out)
        }
    }
}

fn decode_payload(payload: &[u8], encoding: u8, bits: u8, n: usize) -> Result<Vec<u32>> {
    match encoding {
        0 => unpack_indices(payload, bits, n),
        1 => {
            if payload.len() < 2 {
                return Err(Error::Corruption("Huffman payload too short".into()));
            }
            let alphabet = u16::from_le_bytes([payload[0], payload[1]]) as usize;
            let table = payload
                .get(2..2 + alphabet)
                .ok_or_else(|| Error::Corruption("Huffman table truncated".into()))?;
            if n == 0 {
                return Ok(Vec::new());
            }
            let present: Vec<bool> = table.iter().map(|&b| b > 0).collect();
            let lengths: Vec<u8> = table.iter().map(|&b| b.saturating_sub(1)).collect();
            let code = HuffmanCode::from_lengths(lengths, &present)?;
            huffman_decode(&payload[2 + alphabet..], &code, n)
        }
        t => Err(Error::Corruption(format!("unknown encoding tag {t}"))),
    }
}

fn put_u16(w: &mut impl Write, v: u16) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_f32(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

fn write_payload(w: &mut impl Write, encoding: u8, payload: &[u8]) -> Result<()> {
    w.write_all(&[encoding])?;
    put_u64(w, payload.len() as u64)?;
    w.write_all(payload)?;
    put_u32(w, crc32fast::hash(payload))?;
    Ok(())
}

/// Serialize `container`; quantized entries use `encoding`.
pub fn write_container(w: &mut impl Write, container: &Container, encoding: Encoding) -> Result<()> {
    let count = u16::try_from(container.entries.len())
        .map_err(|_| argument("too many entries for one container"))?;
    w.write_all(MAGIC)?;
    put_u16(w, FORMAT_VERSION)?;
    put_u16(w, count)?;
    for entry in &container.entries {
        let name = entry.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| argument("entry name longer than 65535 bytes"))?;
        put_u16(w, name_len)?;
        w.write_all(name)?;
        match &entry.data {
            EntryData::Raw(values) => {
                w.write_all(&[SCHEME_RAW, 64])?;
                put_u32(w, 0)?;
                put_u32(w, 0)?;
                put_u64(w, values.len() as u64)?;
                let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                write_payload(w, Encoding::Packed.tag(), &payload)?;
            }
            EntryData::Quantized(qv) => {
                qv.scaling.validate()?;
                let (tag, s) = match &qv.scheme {
                    LevelScheme::Uniform { levels } => (SCHEME_UNIFORM, *levels),
                    LevelScheme::NonUniform(p) => (SCHEME_NONUNIFORM, p.len() as u32),
                };
                let bucket = u32::try_from(qv.scaling.bucket_size)
                    .map_err(|_| argument("bucket size exceeds u32"))?;
                w.write_all(&[tag, qv.bits])?;
                put_u32(w, s)?;
                put_u32(w, bucket)?;
                put_u64(w, qv.indices.len() as u64)?;
                for (a, b) in qv.scaling.alphas.iter().zip(&qv.scaling.betas) {
                    put_f32(w, *a)?;
                    put_f32(w, *b)?;
                }
                if let LevelScheme::NonUniform(p) = &qv.scheme {
                    for &x in p.as_slice() {
                        put_f32(w, x)?;
                    }
                }
                write_payload(w, encoding.tag(), &encode_payload(qv, encoding)?)?;
            }
        }
    }
    Ok(())
}

struct Reader<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    /// Read exactly `n` bytes. The buffer grows with the data actually
    /// present, so a corrupted length cannot force a huge allocation.
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.inner.by_ref().take(n as u64).read_to_end(&mut buf)?;
        if buf.len() < n {
            return Err(Error::Corruption("container truncated".into()));
        }
        Ok(buf)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.array()?) as f64)
    }
    fn payload(&mut self) -> Result<(u8, Vec<u8>)> {
        let encoding = self.u8()?;
        let len = usize::try_from(self.u64()?)
            .map_err(|_| Error::Corruption("payload length overflows".into()))?;
        let payload = self.bytes(len)?;
        let crc = self.u32()?;
        if crc != crc32fast::hash(&payload) {
            return Err(Error::Corruption("payload checksum mismatch".into()));
        }
        Ok((encoding, payload))
    }
}

pub fn read_container(r: &mut impl Read) -> Result<Container> {
    let mut r = Reader { inner: r };
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Corruption("bad magic; not a QDZ1 container".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Corruption(format!("unsupported format version {version}")));
    }
    let count = r.u16()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Corruption("entry name is not UTF-8".into()))?;
        let scheme = r.u8()?;
        let bits = r.u8()?;
        let s = r.u32()?;
        let bucket_size = r.u32()? as usize;
        let n = usize::try_from(r.u64()?)
            .ok()
            .filter(|&n| n <= MAX_VALUES)
            .ok_or_else(|| Error::Corruption(format!("entry {name} claims more than {MAX_VALUES} values")))?;
        let data = match scheme {
            SCHEME_RAW => {
                let (_, payload) = r.payload()?;
                if payload.len() / 8 != n || payload.len() % 8 != 0 {
                    return Err(Error::Corruption(format!(
                        "raw entry {name} has {} payload bytes for {n} values",
                        payload.len()
                    )));
                }
                EntryData::Raw(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect(),
                )
            }
            SCHEME_UNIFORM | SCHEME_NONUNIFORM => {
                if bucket_size == 0 {
                    return Err(Error::Corruption(format!("entry {name} has bucket size 0")));
                }
                let buckets = n.div_ceil(bucket_size);
                let mut alphas = Vec::with_capacity(buckets.min(1 << 16));
                let mut betas = Vec::with_capacity(buckets.min(1 << 16));
                for _ in 0..buckets {
                    alphas.push(r.f32()?);
                    betas.push(r.f32()?);
                }
                let level_scheme = if scheme == SCHEME_UNIFORM {
                    if s == 0 {
                        return Err(Error::Corruption(format!("entry {name} has zero levels")));
                    }
                    LevelScheme::Uniform { levels: s }
                } else {
                    let points = (0..s).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                    LevelScheme::NonUniform(
                        QuantizationPoints::new(points)
                            .map_err(|e| Error::Corruption(format!("entry {name}: {e}")))?,
                    )
                };
                if !(1..=8).contains(&bits) || bits < level_scheme.bits() {
                    return Err(Error::Corruption(format!(
                        "entry {name}: width {bits} cannot hold {} levels",
                        level_scheme.index_count()
                    )));
                }
                let (encoding, payload) = r.payload()?;
                let indices = decode_payload(&payload, encoding, bits, n)?;
                if let Some(bad) = indices.iter().find(|&&i| level_scheme.level_value(i).is_none()) {
                    return Err(Error::Corruption(format!("entry {name}: index {bad} out of range")));
                }
                let scaling = BucketScaling {
                    bucket_size,
                    alphas,
                    betas,
                    original_len: n,
                };
                scaling.validate()?;
                EntryData::Quantized(QuantizedVector {
                    indices,
                    scaling,
                    scheme: level_scheme,
                    bits,
                })
            }
            t => return Err(Error::Corruption(format!("unknown scheme tag {t}"))),
        };
        entries.push(Entry { name, data });
    }
    Ok(Container { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantcore::{quantize_nonuniform, quantize_uniform, Rounding, UniformScheme};

    fn sample() -> Container {
        let v: Vec<f64> = (0..700).map(|i| ((i * 7919) % 1000) as f64 / 333.0 - 1.5).collect();
        let u = quantize_uniform(&v, 256, UniformScheme::for_bits(3, Rounding::Deterministic).unwrap(), None)
            .unwrap();
        let p = QuantizationPoints::new(vec![0.1, 0.3, 0.5, 0.9, 0.95]).unwrap();
        let nu = quantize_nonuniform(&v[..300], 64, &p).unwrap();
        Container {
            entries: vec![
                Entry { name: "0.relu.weight".into(), data: EntryData::Quantized(u) },
                Entry { name: "0.relu.bias".into(), data: EntryData::Raw(vec![0.5, -1.25, 1e-300]) },
                Entry { name: "1.identity.weight".into(), data: EntryData::Quantized(nu) },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes(Encoding::Packed).unwrap();
        assert_eq!(&bytes[..4], b"QDZ1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[3, 0]);
        assert_eq!(&bytes[8..10], &[13, 0]);
        assert_eq!(&bytes[10..23], b"0.relu.weight");
        assert_eq!(bytes[23], 0); // uniform
        assert_eq!(bytes[24], 3); // bits
        assert_eq!(&bytes[25..29], &7u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &256u32.to_le_bytes());
        assert_eq!(&bytes[33..41], &700u64.to_le_bytes());
    }

    #[test]
    fn round_trip_both_encodings() {
        let c = sample();
        for enc in [Encoding::Packed, Encoding::Huffman] {
            let bytes = c.to_bytes(enc).unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            assert_eq!(back.entries.len(), 3);
            for (a, b) in c.entries.iter().zip(&back.entries) {
                assert_eq!(a.name, b.name);
                match (&a.data, &b.data) {
                    (EntryData::Quantized(x), EntryData::Quantized(y)) => {
                        assert_eq!(x.indices, y.indices);
                        for (p, q) in x.scaling.alphas.iter().zip(&y.scaling.alphas) {
                            assert_eq!((*p as f32).to_bits(), (*q as f32).to_bits());
                        }
                    }
                    (EntryData::Raw(x), EntryData::Raw(y)) => assert_eq!(x, y),
                    _ => panic!("entry kind changed"),
                }
            }
            // a second pass is a byte-level fixpoint
            assert_eq!(back.to_bytes(enc).unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes(Encoding::Huffman).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 6;
        bad[last] ^= 0x10;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Corruption(_))));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corruption(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Container::from_bytes(&magic).is_err());
    }
}
