//! `TSKR` kernel files: a little-endian header
//! `{magic "TSKR", version u32, i u32, j u32, lagH u32, lagW u32, G u32}`
//! followed by `lagH × lagW` row-major `f64` values.
//!
//! The lag pitch is not part of the header; caches key it in the file name.

use super::kernel::{CorrelationKernel, LagGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSKR";
pub const VERSION: u32 = 1;
const HEADER: usize = 28;

/// Encodes `kernel` with `g` aperture samples across the diameter.
pub fn encode(kernel: &CorrelationKernel, g: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * (kernel.values.len() + 1));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        kernel.i as u32,
        kernel.j as u32,
        kernel.grid.rows as u32,
        kernel.grid.cols as u32,
        g,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &kernel.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a kernel. The returned grid has pitch 0 and `zero_lag` is NaN until the caller fills them.
pub fn decode(bytes: &[u8]) -> Result<CorrelationKernel> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TSKR kernel file".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::Format(format!("unsupported TSKR version {}", word(0))));
    }
    let (i, j, rows, cols) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let n = rows * cols;
    let body = &bytes[HEADER..];
    if body.len() != 8 * n {
        return Err(Error::Format(format!(
            "TSKR payload has {} bytes, expected {}",
            body.len(),
            8 * n
        )));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(CorrelationKernel {
        i,
        j,
        grid: LagGrid { rows, cols, pitch_s: 0.0 },
        values: vals,
        zero_lag: f64::NAN,
        warnings: Vec::new(),
    })
}

/// Reads the `G` header field.
pub fn header_g(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TSKR kernel file".into()));
    }
    Ok(u32::from_le_bytes(bytes[24..28].try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let k = CorrelationKernel {
            i: 4,
            j: 4,
            grid: LagGrid { rows: 2, cols: 3, pitch_s: 0.5 },
            values: vec![0.1, -0.2, 1.0, 0.3, 0.25, f64::MIN_POSITIVE],
            zero_lag: 0.023,
            warnings: vec![],
        };
        let bytes = encode(&k, 64);
        assert_eq!(&bytes[..4], b"TSKR");
        assert_eq!(header_g(&bytes).unwrap(), 64);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.values, k.values);
        assert_eq!((back.i, back.j, back.grid.rows, back.grid.cols), (4, 4, 2, 3));
        assert_eq!(bytes.len(), 28 + 8 * 6);
        assert!(decode(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
