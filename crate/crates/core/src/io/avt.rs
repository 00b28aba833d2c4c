//! `AVT1` container: magic `AVT1`, five little-endian u32 (T, H, W, C, dtype),
//! then the row-major payload. dtype 0 stores u8 pixels, dtype 1 stores f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AVT1";

#[derive(Clone, Debug, PartialEq)]
pub enum AvtData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvtFile {
    /// `[T, H, W, C]`
    pub dims: [usize; 4],
    pub data: AvtData,
}

impl AvtFile {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::dim("AvtFile::from_tensor", s, &[0, 0, 0, 0]));
        }
        Ok(Self {
            dims: [s[0], s[1], s[2], s[3]],
            data: AvtData::F64(t.data().to_vec()),
        })
    }

    /// Pixels as f64; u8 payloads are mapped to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data = match &self.data {
            AvtData::U8(v) => v.iter().map(|&b| b as f64 / 255.0).collect(),
            AvtData::F64(v) => v.clone(),
        };
        Tensor::new(self.dims.to_vec(), data).expect("validated on construction")
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let dtype = match self.data {
            AvtData::U8(_) => 0u32,
            AvtData::F64(_) => 1,
        };
        for v in self.dims.iter().map(|&d| d as u32).chain([dtype]) {
            w.write_all(&v.to_le_bytes())?;
        }
        match &self.data {
            AvtData::U8(v) => w.write_all(v)?,
            AvtData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated AVT1 stream: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected AVT1")));
        }
        let mut header = [0usize; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(fmt)?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let dims = [header[0], header[1], header[2], header[3]];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let data = match header[4] {
            0 => {
                let mut v = vec![0u8; n];
                r.read_exact(&mut v).map_err(fmt)?;
                AvtData::U8(v)
            }
            1 => {
                let mut bytes = vec![0u8; n * 8];
                r.read_exact(&mut bytes).map_err(fmt)?;
                AvtData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            d => return Err(Error::Format(format!("unknown AVT1 dtype {d}"))),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        for file in [
            AvtFile {
                dims: [2, 2, 3, 1],
                data: AvtData::U8((0..12).collect()),
            },
            AvtFile {
                dims: [1, 1, 3, 2],
                data: AvtData::F64(vec![0.5, -1.0, 2.25, 1e300, 0.0, -0.0]),
            },
        ] {
            let mut buf = Vec::new();
            file.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"AVT1");
            assert_eq!(AvtFile::read_from(&buf[..]).unwrap(), file);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(AvtFile::read_from(&b"AVT2\0\0\0\0"[..]), Err(Error::Format(_))));
        let file = AvtFile {
            dims: [1, 2, 2, 1],
            data: AvtData::U8(vec![1, 2, 3, 4]),
        };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        assert!(matches!(AvtFile::read_from(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn u8_maps_to_unit_range() {
        let file = AvtFile {
            dims: [1, 1, 1, 2],
            data: AvtData::U8(vec![0, 255]),
        };
        assert_eq!(file.to_tensor().data(), &[0.0, 1.0]);
    }
}
