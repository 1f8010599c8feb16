//! `PBRW` weight files: a JSON config echo followed by a named parameter
//! table stored as `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{len_u32, Reader, Writer};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBRW";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub config: serde_json::Value,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.json(&self.config)?;
        w.u32(len_u32(self.params.len())?);
        for (_, p) in self.params.iter() {
            w.u32(len_u32(p.name.len())?);
            w.bytes(p.name.as_bytes());
            w.u8(p.trainable as u8);
            w.u8(u8::try_from(p.value.shape().len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?);
            for &d in p.value.shape() {
                w.u32(len_u32(d)?);
            }
            let data: Vec<f32> = p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
            w.f32s(&data);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = r.json()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            if params.id(&name).is_some() {
                return Err(Error::Corrupt(format!("duplicate parameter {name}")));
            }
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Corrupt(format!("bad trainable flag {b}"))),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("shape of {name} overflows")))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(&shape, data.into_iter().map(|v| S::lit(v as f64)).collect())?;
            params.add(name, t, trainable);
        }
        r.finish()?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        let mut rng = Rng::new(2);
        params.add("a.w", Tensor::randn(&[2, 3, 1, 1], 1.0, &mut rng), true);
        params.add("b", Tensor::randn(&[4], 1.0, &mut rng), false);
        Checkpoint {
            config: serde_json::json!({"base_width": 8}),
            params,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.params.frozen_hash(), ck.params.frozen_hash());
        assert_eq!(back.params.hash_where(|_| true), ck.params.hash_where(|_| true));
        assert!(back.params.get(back.params.id("a.w").unwrap()).trainable);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&extra), Err(Error::Corrupt(_))));
    }
}
