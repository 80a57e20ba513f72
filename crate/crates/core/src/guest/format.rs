//! The RLI run-length image format.
//!
//! ```text
//! "RLI1" | width u32 LE | height u32 LE | rows...
//! row := (count u8 >= 1, value u8)* 0x00      -- counts sum to width
//! ```

use rand::Rng;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RLI1";
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated input")]
    Truncated,
    #[error("row {0} does not sum to the image width")]
    BadRow(u32),
    #[error("pixel buffer holds {got} bytes, {want} expected")]
    SizeMismatch { got: usize, want: usize },
}

/// Encodes `pixels` (row-major, one byte each).
pub fn encode(pixels: &[u8], width: u32, height: u32) -> Result<Vec<u8>, FormatError> {
    let want = width as usize * height as usize;
    if pixels.len() != want {
        return Err(FormatError::SizeMismatch { got: pixels.len(), want });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + want / 2 + height as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    if width > 0 {
        for row in pixels.chunks(width as usize) {
            let mut i = 0;
            while i < row.len() {
                let v = row[i];
                let mut n = 1;
                while i + n < row.len() && row[i + n] == v && n < 255 {
                    n += 1;
                }
                out.push(n as u8);
                out.push(v);
                i += n;
            }
            out.push(0);
        }
    } else {
        out.extend(std::iter::repeat_n(0, height as usize));
    }
    Ok(out)
}

/// Reference decoder, independent of the guest implementation.
pub fn decode_reference(data: &[u8]) -> Result<(u32, u32, Vec<u8>), FormatError> {
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let rd = |at: usize| -> Result<u32, FormatError> {
        let b = data.get(at..at + 4).ok_or(FormatError::Truncated)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let (w, h) = (rd(4)?, rd(8)?);
    let mut out = Vec::new();
    let mut p = HEADER_LEN;
    for y in 0..h {
        let start = out.len();
        loop {
            let n = *data.get(p).ok_or(FormatError::Truncated)?;
            p += 1;
            if n == 0 {
                break;
            }
            let v = *data.get(p).ok_or(FormatError::Truncated)?;
            p += 1;
            out.extend(std::iter::repeat_n(v, n as usize));
            if out.len() - start > w as usize {
                return Err(FormatError::BadRow(y));
            }
        }
        if out.len() - start != w as usize {
            return Err(FormatError::BadRow(y));
        }
    }
    Ok((w, h, out))
}

/// A random image with runs of random length, at most `max_w`×`max_h`.
pub fn random_image(rng: &mut impl Rng, max_w: u32, max_h: u32) -> (u32, u32, Vec<u8>) {
    let w = rng.gen_range(1..=max_w);
    let h = rng.gen_range(1..=max_h);
    let mut px = Vec::with_capacity((w * h) as usize);
    // Mix long runs (compressible) with noise.
    let noisy = rng.gen_bool(0.2);
    while px.len() < (w * h) as usize {
        let run = if noisy { 1 } else { rng.gen_range(1..=300usize) };
        let v: u8 = rng.gen();
        px.extend(std::iter::repeat_n(v, run));
    }
    px.truncate((w * h) as usize);
    (w, h, px)
}
