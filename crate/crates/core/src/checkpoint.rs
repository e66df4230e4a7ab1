//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ADSEG" | version | flags | json_len | architecture JSON
//! | param_count | param_count × entry
//! [ | omega_count | omega_count × entry ]      (when flags & 1)
//!
//! entry = name_len | UTF-8 name | rank | rank × extent | n × f32 data
//! ```
//!
//! Values are stored as `f32`, so the first save rounds parameters; any
//! later save/load cycle is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::ImportanceSet;
use crate::params::ParamSet;
use crate::segnet::{Architecture, SegNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ADSEG";
pub const VERSION: u32 = 1;
const FLAG_IMPORTANCE: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SegNet,
    pub importance: Option<ImportanceSet>,
}

impl Checkpoint {
    pub fn new(net: SegNet, importance: Option<ImportanceSet>) -> Self {
        Self { net, importance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, if self.importance.is_some() { FLAG_IMPORTANCE } else { 0 });
        let json = serde_json::to_vec(&self.net.arch)?;
        put_len(&mut out, json.len())?;
        out.extend_from_slice(&json);
        write_block(&mut out, &self.net.params)?;
        if let Some(omega) = &self.importance {
            write_block(&mut out, omega.as_params())?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        let json_len = r.u32()? as usize;
        let arch: Architecture = serde_json::from_slice(r.take(json_len)?)?;
        let params = read_block(&mut r)?;
        let net = SegNet::from_params(arch, params)?;
        let importance = if flags & FLAG_IMPORTANCE != 0 {
            let omega = read_block(&mut r)?;
            net.params
                .check_layout(&omega, "checkpoint")
                .map_err(|e| Error::Checkpoint(format!("importance block: {e}")))?;
            Some(ImportanceSet::from_params_unchecked(omega))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { net, importance })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

fn write_block(out: &mut Vec<u8>, params: &ParamSet) -> Result<()> {
    put_len(out, params.len())?;
    for (name, t) in params.iter() {
        put_len(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(out, t.rank())?;
        for &d in t.shape() {
            put_len(out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

fn read_block(r: &mut Reader<'_>) -> Result<ParamSet> {
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> SegNet {
        SegNet::build(
            Architecture {
                input_size: 16,
                widths: vec![2, 3],
                ..Architecture::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::new(small_net(), None).to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"ADSEG");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 0);
    }

    #[test]
    fn second_round_trip_is_bit_exact() {
        let ck = Checkpoint::new(small_net(), None);
        let once = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let bytes = once.to_bytes().unwrap();
        let twice = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(once, twice);
        assert_eq!(bytes, twice.to_bytes().unwrap());
    }

    #[test]
    fn importance_block_round_trips() {
        let net = small_net();
        let omega = ImportanceSet::from_params_unchecked(net.params.zeros_like());
        let ck = Checkpoint::new(net, Some(omega));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.importance.is_some());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::new(small_net(), None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
