//! Binary tensor container used for model checkpoints, peer banks and saved
//! perturbations.
//!
//! Layout: 8-byte magic `PEERNET1`, entry count (u32 LE), then per entry:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each), raw
//! 32-bit little-endian floats. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PEERNET1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// An ordered collection of named f32 arrays.
#[derive(Debug, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.entries.push(Entry {
            name: name.into(),
            dims,
            values,
        });
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let values = tensor.data().iter().map(|v| v.as_f32()).collect();
        self.push(name, tensor.shape().to_vec(), values);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for &d in &e.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut reader = Tracked { inner: r, offset: 0 };
        let mut magic = [0u8; 8];
        reader.read_exact_at(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic {:02x?}, expected {MAGIC:02x?}", magic),
            });
        }
        let count = reader.read_u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = reader.read_u32()? as usize;
            let mut name_buf = vec![0u8; name_len];
            reader.read_exact_at(&mut name_buf)?;
            let at = reader.offset;
            let name = String::from_utf8(name_buf).map_err(|_| Error::Parse {
                offset: at,
                message: "entry name is not valid UTF-8".into(),
            })?;
            let rank = reader.read_u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(reader.read_u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut values = vec![0.0f32; numel];
            for v in &mut values {
                let mut b = [0u8; 4];
                reader.read_exact_at(&mut b)?;
                *v = f32::from_le_bytes(b);
            }
            entries.push(Entry { name, dims, values });
        }
        Ok(Container { entries })
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

struct Tracked<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Tracked<'_, R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            message: format!("truncated container: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Pack a u64 into two f32 bit patterns (for seeds riding in a container).
pub fn pack_u64(v: u64) -> [f32; 2] {
    [
        f32::from_bits((v & 0xffff_ffff) as u32),
        f32::from_bits((v >> 32) as u32),
    ]
}

pub fn unpack_u64(lo: f32, hi: f32) -> u64 {
    (lo.to_bits() as u64) | ((hi.to_bits() as u64) << 32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut c = Container::new();
        c.push("a.weight", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, f32::NAN]);
        c.push("b", vec![1], vec![f32::from_bits(0x7f80_0001)]);
        c.push("empty", vec![0], vec![]);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Container::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.entries.len(), 3);
        for (orig, read) in c.entries.iter().zip(&back.entries) {
            assert_eq!(orig.name, read.name);
            assert_eq!(orig.dims, read.dims);
            let ob: Vec<u32> = orig.values.iter().map(|v| v.to_bits()).collect();
            let rb: Vec<u32> = read.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ob, rb);
        }
    }

    #[test]
    fn truncated_reports_offset() {
        let mut c = Container::new();
        c.push("w", vec![4], vec![1.0; 4]);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match Container::read(&mut buf.as_slice()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTMAGIC\x00\x00\x00\x00".to_vec();
        match Container::read(&mut buf.as_slice()) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at 0, got {other:?}"),
        }
    }

    #[test]
    fn u64_packing() {
        for v in [0u64, 1, u64::MAX, 0xdead_beef_cafe_f00d] {
            let [lo, hi] = pack_u64(v);
            assert_eq!(unpack_u64(lo, hi), v);
        }
    }
}
