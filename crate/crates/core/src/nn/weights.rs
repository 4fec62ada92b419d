//! `.evsrw` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "EVSRW\0"
//! version  u16 = 1
//! count    u32
//! count x { name_len u16, name utf-8, rank u8, dims u32[rank], data f32[prod(dims)] }
//! ```
//!
//! Conv tensors are named `<node-id>.weight` with dims `(out, in, kh, kw)` and
//! `<node-id>.bias` with dims `(out)`. Pixel-shuffle channel order is `(c, dy, dx)`
//! with `dx` fastest, so exported tail convs are unambiguous.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{NnError, Result};

pub const MAGIC: &[u8; 6] = b"EVSRW\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    entries: Vec<(String, WeightTensor)>,
    index: HashMap<String, usize>,
}

impl WeightSet {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        let tensor = WeightTensor { dims, data };
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightTensor> {
        let i = self.index.remove(name)?;
        let (_, tensor) = self.entries.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, sink: &mut W) -> Result<()> {
        sink.write_all(MAGIC)?;
        sink.write_all(&VERSION.to_le_bytes())?;
        sink.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| NnError::WeightFormat(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| NnError::WeightFormat(format!("rank too large: {name}")))?;
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(NnError::WeightFormat(format!(
                    "`{name}` dims {:?} do not match {} values",
                    t.dims,
                    t.data.len()
                )));
            }
            sink.write_all(&name_len.to_le_bytes())?;
            sink.write_all(name.as_bytes())?;
            sink.write_all(&[rank])?;
            for &d in &t.dims {
                let d = u32::try_from(d)
                    .map_err(|_| NnError::WeightFormat(format!("dim too large: {name}")))?;
                sink.write_all(&d.to_le_bytes())?;
            }
            for v in &t.data {
                sink.write_all(&v.to_le_bytes())?;
            }
        }
        sink.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(source: &mut R) -> Result<Self> {
        let truncated = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof => NnError::WeightFormat("truncated weight file".into()),
            _ => NnError::Io(e),
        };
        let mut magic = [0u8; 6];
        source.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(NnError::WeightFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(source).map_err(truncated)?);
        if version != VERSION {
            return Err(NnError::WeightFormat(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_array(source).map_err(truncated)?);
        let mut set = WeightSet::default();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(source).map_err(truncated)?) as usize;
            let mut name = vec![0u8; name_len];
            source.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::WeightFormat("tensor name is not UTF-8".into()))?;
            let [rank] = read_array::<_, 1>(source).map_err(truncated)?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(read_array(source).map_err(truncated)?) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut raw = vec![0u8; numel * 4];
            source.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if set.get(&name).is_some() {
                return Err(NnError::WeightFormat(format!("duplicate tensor `{name}`")));
            }
            set.push(name, dims, data);
        }
        Ok(set)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

fn read_array<R: Read, const N: usize>(source: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    source.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let mut set = WeightSet::default();
        set.push("c.bias", vec![2], vec![1.0, -2.5]);
        let bytes = set.to_bytes().unwrap();
        let mut expected = b"EVSRW\0".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&6u16.to_le_bytes());
        expected.extend_from_slice(b"c.bias");
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(WeightSet::from_bytes(&bytes).unwrap(), set);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(
            WeightSet::from_bytes(b"NOTEVS\x01\x00"),
            Err(NnError::WeightFormat(_))
        ));
        let mut set = WeightSet::default();
        set.push("w", vec![3], vec![1.0, 2.0, 3.0]);
        let bytes = set.to_bytes().unwrap();
        assert!(matches!(
            WeightSet::from_bytes(&bytes[..bytes.len() - 1]),
            Err(NnError::WeightFormat(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[6] = 2;
        assert!(WeightSet::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn remove_keeps_index_consistent() {
        let mut set = WeightSet::default();
        for (i, n) in ["a", "b", "c"].iter().enumerate() {
            set.push(*n, vec![1], vec![i as f32]);
        }
        set.remove("a");
        assert_eq!(set.get("c").unwrap().data, vec![2.0]);
        assert_eq!(set.names().collect::<Vec<_>>(), vec!["b", "c"]);
    }
}
