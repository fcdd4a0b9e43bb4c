//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!   magic  b"RGED"
//!   version u32 (currently 1)
//!   count   u32
//!   then `count` entries:
//!     name_len u16, name bytes (UTF-8),
//!     rank u8, rank extents as u32,
//!     numel f64 values (LE bits).
//!
//! Entries preserve insertion order so files are byte-reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RGED";
pub const VERSION: u32 = 1;

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!(
                "checkpoint: duplicate tensor name {name:?}"
            )));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!(
                "checkpoint: tensor name too long ({} bytes)",
                name.len()
            )));
        }
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Contract(format!("checkpoint: missing tensor {name:?}")))
    }

    /// Like `get`, but also checks the stored shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Contract(format!(
                "checkpoint: tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of a simple rolling checksum over all values, used to verify that
    /// frozen parameters did not move during a training run.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Contract(format!(
                "checkpoint {}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Contract(format!(
                "checkpoint {}: unsupported version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut out = Self::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| {
                Error::Contract(format!("checkpoint {}: non-UTF-8 name", path.display()))
            })?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape: Vec<usize> = (0..rank[0])
                .map(|_| read_u32(&mut r).map(|e| e as usize))
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            out.insert(&name, Tensor::new(shape, data)?)?;
        }
        // Trailing bytes mean the file is not what we wrote.
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Contract(format!(
                "checkpoint {}: trailing bytes after last entry",
                path.display()
            )));
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rged");
        let mut r = rng::seeded(7);
        let mut ck = Checkpoint::new();
        ck.insert("enc.w", rng::normal_tensor(&mut r, vec![3, 5])).unwrap();
        ck.insert("enc.b", rng::normal_tensor(&mut r, vec![5])).unwrap();
        ck.insert("scalar", Tensor::scalar(-0.125)).unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        assert_eq!(ck.checksum(), back.checksum());
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["enc.w", "enc.b", "scalar"]);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        let mut ck = Checkpoint::new();
        ck.insert("t", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let good = dir.path().join("good");
        let mut ck = Checkpoint::new();
        ck.insert("t", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        ck.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Checkpoint::load(&cut).is_err());
        let padded = dir.path().join("padded");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&padded, &longer).unwrap();
        assert!(Checkpoint::load(&padded).is_err());
    }

    #[test]
    fn duplicate_and_missing_names_are_contract_errors() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(ck.insert("x", Tensor::scalar(2.0)).is_err());
        assert!(ck.get("y").is_err());
        assert!(ck.get_shaped("x", &[2]).is_err());
    }
}
