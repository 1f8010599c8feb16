//! Records converted once into model-space tensors.

use crate::collab::{stack_to_triplets, triplets_to_stack, PbrSpace};
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::Vae;

/// Maps signed 8-channel stacks to the space the PBR chain runs in.
#[derive(Clone, Debug)]
pub enum PbrCodec<S> {
    Pixel,
    PbrVae(Vae<S>),
    /// RGB autoencoder applied to the three triplets.
    RgbTriplets(Vae<S>),
}

impl<S: Scalar> PbrCodec<S> {
    pub fn space(&self) -> PbrSpace {
        match self {
            PbrCodec::Pixel => PbrSpace::Pixel,
            PbrCodec::PbrVae(_) => PbrSpace::PbrVae,
            PbrCodec::RgbTriplets(_) => PbrSpace::RgbVaeTriplets,
        }
    }

    pub fn encode(&self, signed: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            PbrCodec::Pixel => Ok(signed.clone()),
            PbrCodec::PbrVae(v) => v.encode_mean(signed),
            PbrCodec::RgbTriplets(v) => {
                let t = stack_to_triplets(signed)?;
                let z: Vec<Tensor<S>> = t.iter().map(|x| v.encode_mean(x)).collect::<Result<_>>()?;
                Tensor::concat1(&[&z[0], &z[1], &z[2]])
            }
        }
    }

    pub fn decode(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            PbrCodec::Pixel => Ok(z.clone()),
            PbrCodec::PbrVae(v) => v.decode_tensor(z),
            PbrCodec::RgbTriplets(v) => {
                let l = v.config.latent_channels;
                let parts: Vec<Tensor<S>> = (0..3)
                    .map(|i| v.decode_tensor(&z.narrow1(i * l, l)?))
                    .collect::<Result<_>>()?;
                triplets_to_stack(&[parts[0].clone(), parts[1].clone(), parts[2].clone()])
            }
        }
    }

    /// Encode then decode.
    pub fn roundtrip(&self, signed: &Tensor<S>) -> Result<Tensor<S>> {
        self.decode(&self.encode(signed)?)
    }
}

/// Model-space tensors for a set of records, indexed in record order.
#[derive(Clone, Debug)]
pub struct TrainData<S> {
    /// `(M, 3, H, W)` in `[-1, 1]`.
    pub rgb: Tensor<S>,
    /// `(M, C, H/f, W/f)`.
    pub pbr: Tensor<S>,
    /// `(M, 4, H, W)`: normals then mask.
    pub cond: Tensor<S>,
    pub tokens: Vec<[usize; 3]>,
    pub object_ids: Vec<usize>,
}

/// A drawn minibatch.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub rgb: Tensor<S>,
    pub pbr: Tensor<S>,
    pub cond: Tensor<S>,
    pub tokens: Vec<[usize; 3]>,
}

impl<S: Scalar> TrainData<S> {
    pub fn from_records(records: &[&SampleRecord], codec: &PbrCodec<S>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("no records"));
        }
        let rgb_signed: Vec<Raster> = records
            .iter()
            .map(|r| {
                let mut x = r.rgb.clone();
                x.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
                x
            })
            .collect();
        let rgb = Raster::batch(&rgb_signed.iter().collect::<Vec<_>>())?;
        let pbr_signed: Vec<Raster> = records.iter().map(|r| r.pbr.to_signed()).collect();
        let pbr_signed: Tensor<S> = Raster::batch(&pbr_signed.iter().collect::<Vec<_>>())?;
        let conds: Vec<Raster> = records.iter().map(|r| r.condition()).collect();
        let cond = Raster::batch(&conds.iter().collect::<Vec<_>>())?;
        // Encode in chunks to bound graph memory.
        let mut parts = Vec::new();
        let m = records.len();
        let mut start = 0;
        while start < m {
            let len = 32.min(m - start);
            parts.push(codec.encode(&pbr_signed.slice0(start, len)?)?);
            start += len;
        }
        Ok(Self {
            rgb,
            pbr: Tensor::stack0(&parts)?,
            cond,
            tokens: records.iter().map(|r| r.meta.prompt).collect(),
            object_ids: records.iter().map(|r| r.meta.object_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Result<Batch<S>> {
        Ok(Batch {
            rgb: self.rgb.gather0(idx)?,
            pbr: self.pbr.gather0(idx)?,
            cond: self.cond.gather0(idx)?,
            tokens: idx.iter().map(|&i| self.tokens[i]).collect(),
        })
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Batch<S>> {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(self.len())).collect();
        self.gather(&idx)
    }
}
