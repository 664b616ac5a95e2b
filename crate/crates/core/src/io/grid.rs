//! `TGRD` grid tensors: a 20-byte header (magic, version, H, W, C as
//! little-endian u32) followed by H*W*C little-endian f32 values, row-major
//! with channels interleaved.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TGRD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GridTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl GridTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_pixels<const C: usize>(height: usize, width: usize, pixels: &[[f32; C]]) -> Result<Self> {
        Self::new(height, width, C, pixels.iter().flatten().copied().collect())
    }

    /// Pixels as fixed-size channel arrays; fails when the channel count differs.
    pub fn to_pixels<const C: usize>(&self) -> Option<Vec<[f32; C]>> {
        (self.channels == C).then(|| {
            self.data
                .chunks_exact(C)
                .map(|c| std::array::from_fn(|k| c[k]))
                .collect()
        })
    }

    /// Bit-equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        for v in [VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one record. `path` only labels errors.
    pub fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(|e| short_read(path, e, "header"))?;
        if header[..4] != MAGIC {
            return Err(Error::format(path, format!("bad magic {:?}, expected \"TGRD\"", &header[..4])));
        }
        let field = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        let version = field(0);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let (height, width, channels) = (field(1) as usize, field(2) as usize, field(3) as usize);
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, "grid dimensions overflow"))?;
        let mut bytes = Vec::new();
        r.take(4 * count as u64)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * count {
            return Err(Error::format(
                path,
                format!("payload holds {} bytes, header implies {}", bytes.len(), 4 * count),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Parses a complete file; trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cursor = bytes;
        let grid = Self::read_from(&mut cursor, path)?;
        if !cursor.is_empty() {
            return Err(Error::format(path, format!("{} trailing bytes", cursor.len())));
        }
        Ok(grid)
    }
}

fn short_read(path: &Path, e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format(path, format!("truncated {what}"))
    } else {
        Error::io(path, e)
    }
}

pub fn read_grid(path: &Path) -> Result<GridTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GridTensor::from_bytes(&bytes, path)
}

pub fn write_grid(path: &Path, grid: &GridTensor) -> Result<()> {
    std::fs::write(path, grid.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout_is_fixed() {
        let g = GridTensor::new(1, 2, 1, vec![1.0, -0.5]).unwrap();
        let b = g.to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[..4], b"TGRD");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_version_and_length() {
        let good = GridTensor::new(2, 2, 2, vec![0.0; 8]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(GridTensor::from_bytes(&bad, p()), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(GridTensor::from_bytes(&bad, p()), Err(Error::Format { .. })));
        assert!(matches!(GridTensor::from_bytes(&good[..good.len() - 1], p()), Err(Error::Format { .. })));
        assert!(matches!(GridTensor::from_bytes(&good[..10], p()), Err(Error::Format { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(GridTensor::from_bytes(&long, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn oversized_header_does_not_allocate() {
        let mut b = GridTensor::new(1, 1, 1, vec![0.0]).unwrap().to_bytes();
        b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(GridTensor::from_bytes(&b, p()).is_err());
    }

    #[test]
    fn pixels_convert_both_ways() {
        let px = vec![[1.0f32, 2.0, 3.0], [4.0, f32::NAN, 6.0]];
        let g = GridTensor::from_pixels(1, 2, &px).unwrap();
        let back: Vec<[f32; 3]> = g.to_pixels().unwrap();
        assert_eq!(back[0], px[0]);
        assert!(back[1][1].is_nan());
        assert!(g.to_pixels::<2>().is_none());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, c in 1usize..4, bits in proptest::collection::vec(any::<u32>(), 100)) {
            let data: Vec<f32> = (0..h * w * c).map(|k| f32::from_bits(bits[k % bits.len()])).collect();
            let g = GridTensor::new(h, w, c, data).unwrap();
            let bytes = g.to_bytes();
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * h * w * c);
            let back = GridTensor::from_bytes(&bytes, p()).unwrap();
            prop_assert!(g.bit_eq(&back));
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
