//! Named-tensor checkpoint container.
//!
//! Layout: magic `PFEck01`, little-endian u32 entry count, then a manifest of
//! (name, dims) records, then every entry's f32 payload in manifest order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"PFEck";
const VERSION: &[u8; 2] = b"01";

#[derive(Debug)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        let len: usize = shape.iter().product();
        assert_eq!(data.len(), len, "checkpoint entry {} data/shape mismatch", name);
        assert!(
            !self.index.contains_key(name),
            "duplicate checkpoint entry {}",
            name
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn push_scalar(&mut self, name: &str, v: f32) {
        self.push(name, &[1], vec![v]);
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.index
            .get(name)
            .map(|&i| (self.entries[i].1.as_slice(), self.entries[i].2.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("checkpoint is missing entry `{}`", name)))
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let (shape, data) = self.require(name)?;
        if data.len() != 1 {
            return Err(Error::format(format!(
                "checkpoint entry `{}` should be a scalar, has shape {:?}",
                name, shape
            )));
        }
        Ok(data[0])
    }

    pub fn scalar_usize(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::format(format!(
                "checkpoint entry `{}` should be a non-negative integer, got {}",
                name, v
            )));
        }
        Ok(v as usize)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.entries.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(VERSION)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, shape, _) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for (_, _, data) in &self.entries {
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("file too short for a checkpoint header"))?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let mut version = [0u8; 2];
        r.read_exact(&mut version)
            .map_err(|_| Error::format("file too short for a checkpoint header"))?;
        if &version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version `{}` (expected {})",
                String::from_utf8_lossy(&version),
                String::from_utf8_lossy(VERSION),
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut ck = Checkpoint::new();
        let mut lens = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(Error::format("checkpoint entry name is implausibly long"));
            }
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb).map_err(|_| Error::format("truncated checkpoint"))?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::format("checkpoint entry name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 16 {
                return Err(Error::format("checkpoint entry rank is implausibly large"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            lens.push((name, shape, len));
        }
        for (name, shape, len) in lens {
            let mut data = vec![0f32; len];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format("truncated checkpoint payload"))?;
                *v = f32::from_le_bytes(buf);
            }
            ck.push(&name, &shape, data);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(ck)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::new()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::format("truncated checkpoint"))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::new();
        ck.push("stage0.weight", &[2, 3], vec![0.1, -0.2, 0.3, 1e-20, -0.0, 7.5]);
        ck.push("stage0.bias", &[2], vec![0.5, -0.5]);
        ck.push_scalar("meta.m", 3.0);
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec![
            "stage0.weight",
            "stage0.bias",
            "meta.m"
        ]);
        let (shape, data) = back.get("stage0.weight").unwrap();
        assert_eq!(shape, &[2, 3]);
        let orig = [0.1f32, -0.2, 0.3, 1e-20, -0.0, 7.5];
        for (a, b) in data.iter().zip(orig) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.scalar("meta.m").unwrap(), 3.0);
        assert_eq!(back.scalar_usize("meta.m").unwrap(), 3);
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"PFEck99").unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {}", err);
    }

    #[test]
    fn rejects_wrong_magic_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("not.ckpt");
        std::fs::write(&bad, b"GARBAGE").unwrap();
        assert!(Checkpoint::load(&bad).is_err());

        let trailing = dir.path().join("trailing.ckpt");
        let mut ck = Checkpoint::new();
        ck.push_scalar("x", 1.0);
        ck.save(&trailing).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(&trailing).unwrap();
        f.write_all(&[0u8]).unwrap();
        drop(f);
        let err = Checkpoint::load(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "got: {}", err);
    }

    #[test]
    fn missing_entry_is_a_named_error() {
        let ck = Checkpoint::new();
        let err = ck.require("absent.weight").unwrap_err();
        assert!(err.to_string().contains("absent.weight"));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut ck = Checkpoint::new();
        ck.push_scalar("x", 1.0);
        ck.push_scalar("x", 2.0);
    }
}
