//! One rendered view and its `PBRD` serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{len_u32, Reader, Writer};
use crate::raster::Raster;
use crate::shading::{PbrStack, PBR_CHANNELS};

pub const RECORD_MAGIC: &[u8; 4] = b"PBRD";
pub const RECORD_VERSION: u16 = 1;
/// normals 3, mask 1, pbr 8, rgb 3.
pub const RECORD_CHANNELS: usize = 3 + 1 + PBR_CHANNELS + 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub prompt: [usize; 3],
    pub object_id: usize,
    pub view_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// View-space unit normals, zero on the background.
    pub normals: Raster,
    pub mask: Raster,
    pub pbr: PbrStack,
    pub rgb: Raster,
    pub meta: RecordMeta,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn mask_values(&self) -> &[f32] {
        &self.mask.data
    }

    /// Normals and mask stacked as the 4-channel conditioning image.
    pub fn condition(&self) -> Raster {
        Raster::concat(&[&self.normals, &self.mask]).expect("equal sizes")
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [&self.normals, &self.mask, &self.pbr.raster, &self.rgb];
        let chans = [3, 1, PBR_CHANNELS, 3];
        for (p, c) in parts.iter().zip(chans) {
            if p.channels != c || !p.same_size(&self.mask) {
                return Err(Error::shape(
                    "sample record",
                    &[c, self.height(), self.width()],
                    &[p.channels, p.height, p.width],
                ));
            }
        }
        self.pbr.validate(&self.mask.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::new(RECORD_MAGIC, RECORD_VERSION);
        w.u16(RECORD_CHANNELS as u16);
        w.u32(len_u32(self.height())?);
        w.u32(len_u32(self.width())?);
        for part in [&self.normals, &self.mask, &self.pbr.raster, &self.rgb] {
            w.f32s(&part.data);
        }
        w.json(&serde_json::to_value(&self.meta)?)?;
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, RECORD_MAGIC, RECORD_VERSION)?;
        let channels = r.u16()? as usize;
        if channels != RECORD_CHANNELS {
            return Err(Error::Corrupt(format!(
                "record has {channels} channels, expected {RECORD_CHANNELS}"
            )));
        }
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let mut take = |c: usize| -> Result<Raster> { Raster::new(c, h, w, r.f32s(c * h * w)?) };
        let normals = take(3)?;
        let mask = take(1)?;
        let pbr = PbrStack::new(take(PBR_CHANNELS)?)?;
        let rgb = take(3)?;
        let meta: RecordMeta =
            serde_json::from_value(r.json()?).map_err(|e| Error::Corrupt(format!("record metadata: {e}")))?;
        r.finish()?;
        Ok(Self {
            normals,
            mask,
            pbr,
            rgb,
            meta,
        })
    }
}

pub fn save_record(record: &SampleRecord, path: &Path) -> Result<()> {
    std::fs::write(path, record.to_bytes()?)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<SampleRecord> {
    SampleRecord::from_bytes(&std::fs::read(path)?)
}
