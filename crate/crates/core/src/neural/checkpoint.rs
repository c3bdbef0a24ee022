//! `UPHN` weight files: magic, version, layer count, then per layer
//! `(net u8, in u32, out u32, activation u8, W f32[in·out], b f32[out])`,
//! then the stress scale (f64), the optimiser step counter (u64) and the
//! latent codebook (`count u32`, then `id u64, z f32[32]` per entry).

use std::fs;
use std::path::Path;

use super::{Activation, Latent, LatentCodebook, Layer, Mlp, Model, LATENT_DIM};
use crate::autodiff::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UPHN";
pub const CHECKPOINT_VERSION: u32 = 1;

const NET_PROJECTION: u8 = 0;
const NET_STRESS: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub codebook: LatentCodebook,
    /// Optimiser steps taken so far; training resumes from here.
    pub step: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let m = &ck.model;
    w.u32((m.projection.layers.len() + m.stress.layers.len()) as u32);
    for (tag, net) in [(NET_PROJECTION, &m.projection), (NET_STRESS, &m.stress)] {
        for l in &net.layers {
            w.u8(tag);
            w.u32(l.inputs() as u32);
            w.u32(l.outputs() as u32);
            w.u8(l.activation.code());
            w.f32s(l.w.data.iter().copied());
            w.f32s(l.b.data.iter().copied());
        }
    }
    w.f64(m.stress_scale);
    w.u64(ck.step);
    w.u32(ck.codebook.len() as u32);
    for (id, z) in &ck.codebook.entries {
        w.u64(*id);
        w.f32s(z.as_slice().iter().copied());
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32("layer count")?;
    let (mut projection, mut stress) = (Vec::new(), Vec::new());
    for i in 0..count {
        let tag = r.u8("layer tag")?;
        let din = r.u32("layer input width")? as usize;
        let dout = r.u32("layer output width")? as usize;
        let act = r.u8("activation")?;
        let activation = Activation::from_code(act)
            .ok_or_else(|| Error::Argument(format!("layer {i}: unknown activation {act}")))?;
        let w = Tensor::new(din, dout, r.f32s(din * dout, "weights")?);
        let b = Tensor::row_vector(r.f32s(dout, "bias")?);
        let layer = Layer { w, b, activation };
        match tag {
            NET_PROJECTION => projection.push(layer),
            NET_STRESS => stress.push(layer),
            t => {
                return Err(Error::Argument(format!(
                    "layer {i}: unknown network tag {t}"
                )))
            }
        }
    }
    let stress_scale = r.f64("stress scale")?;
    let step = r.u64("step counter")?;
    let n = r.u32("codebook size")?;
    let mut codebook = LatentCodebook::new();
    for _ in 0..n {
        let id = r.u64("latent id")?;
        let z = Latent::new(r.f32s(LATENT_DIM, "latent")?)?;
        codebook.entries.insert(id, z);
    }
    if !r.at_end() {
        return Err(Error::Argument("trailing bytes after checkpoint".into()));
    }
    let model = Model {
        projection: Mlp { layers: projection },
        stress: Mlp { layers: stress },
        stress_scale,
    };
    model.validate()?;
    Ok(Checkpoint {
        model,
        codebook,
        step,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
