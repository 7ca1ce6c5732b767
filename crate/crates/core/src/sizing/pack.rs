use crate::error::{argument, Error, Result};

fn check_width(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(argument(format!("index width {bits} outside 1..=8")))
    }
}

/// Pack indices at `bits` bits each, MSB-first, zero-padding the last byte.
pub fn pack_indices(indices: &[u32], bits: u8) -> Result<Vec<u8>> {
    check_width(bits)?;
    let limit = 1u32 << bits;
    let mut out = vec![0u8; (indices.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &i in indices {
        if i >= limit {
            return Err(argument(format!("index {i} does not fit in {bits} bits")));
        }
        for shift in (0..bits).rev() {
            if (i >> shift) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_indices`] for `n` indices.
pub fn unpack_indices(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u32>> {
    check_width(bits)?;
    let needed = n.checked_mul(bits as usize).map(|b| b.div_ceil(8));
    if needed.is_none_or(|needed| bytes.len() < needed) {
        return Err(Error::Corruption(format!(
            "packed stream has {} bytes, too few for {n} indices of {bits} bits",
            bytes.len()
        )));
    }
    let mut pos = 0usize;
    Ok((0..n)
        .map(|_| {
            let mut v = 0u32;
            for _ in 0..bits {
                v = (v << 1) | u32::from((bytes[pos / 8] >> (7 - pos % 8)) & 1);
                pos += 1;
            }
            v
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_order() {
        assert_eq!(pack_indices(&[0, 1, 2, 3], 2).unwrap(), vec![0b0001_1011]);
        assert_eq!(pack_indices(&[15], 4).unwrap(), vec![0xF0]);
        assert_eq!(pack_indices(&[1, 0, 1], 1).unwrap(), vec![0b1010_0000]);
        assert_eq!(pack_indices(&[200, 7], 8).unwrap(), vec![200, 7]);
        assert!(pack_indices(&[], 3).unwrap().is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(pack_indices(&[4], 2), Err(Error::Argument(_))));
        assert!(pack_indices(&[0], 0).is_err());
        assert!(pack_indices(&[0], 9).is_err());
        assert!(matches!(unpack_indices(&[0], 4, 3), Err(Error::Corruption(_))));
    }

    #[test]
    fn odd_widths_round_trip() {
        let idx: Vec<u32> = (0..1000).map(|i| (i * 37 % 32) as u32).collect();
        for bits in [5u8, 6, 7] {
            let packed = pack_indices(&idx, bits).unwrap();
            assert_eq!(unpack_indices(&packed, bits, idx.len()).unwrap(), idx);
        }
    }
}
