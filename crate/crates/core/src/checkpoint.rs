//! Binary model container.
//!
//! A checkpoint is self-describing: it stores the backbone configuration,
//! the variant spec, and every named parameter record, so a saved model can
//! be rebuilt without the config that trained it. Round-trips are bit-exact.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "VTCKPT01"
//! 8       7×4   u32: image_size, patch_size, channels, d_model,
//!               depth, heads, ffn_ratio
//! 36      1     u8 variant kind: 0 series, 1 parallel, 2 mixed, 3 lora
//! 37      1     u8 activation: 0 relu, 1 gelu
//! 38      8     f64 adapter_ratio
//! 46      4     u32 lora_rank
//! 50      8     f64 lora_scale
//! 58      4     u32 parameter record count
//! 62      ...   records
//! ```
//!
//! Each record is: u16 path length, UTF-8 path, u8 rank, u32 dims (rank of
//! them), then the row-major f64 data.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::peft::Activation;
use crate::tensor::Tensor;
use crate::variants::{build_variant, PeftModel, VariantKind, VariantSpec};

const MAGIC: &[u8; 8] = b"VTCKPT01";

/// A parsed checkpoint: config, variant, and named parameter records.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub spec: VariantSpec,
    pub records: Vec<(String, Tensor)>,
}

fn kind_to_u8(kind: VariantKind) -> u8 {
    match kind {
        VariantKind::Series => 0,
        VariantKind::Parallel => 1,
        VariantKind::Mixed => 2,
        VariantKind::Lora => 3,
    }
}

fn kind_from_u8(v: u8, path: &Path) -> Result<VariantKind> {
    match v {
        0 => Ok(VariantKind::Series),
        1 => Ok(VariantKind::Parallel),
        2 => Ok(VariantKind::Mixed),
        3 => Ok(VariantKind::Lora),
        other => Err(Error::format(path, format!("unknown variant byte {other}"))),
    }
}

/// Serialize a model: configuration header plus every parameter record in
/// canonical order. Backbone records let a checkpoint stand alone; the
/// `peft.` prefix keeps adapter weights separable from the frozen backbone.
pub fn serialize_model(model: &PeftModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let c = model.config();
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.d_model,
        c.depth,
        c.heads,
        c.ffn_ratio,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(kind_to_u8(model.spec.kind));
    out.push(match model.spec.activation {
        Activation::Relu => 0,
        Activation::Gelu => 1,
    });
    out.extend_from_slice(&model.spec.adapter_ratio.to_le_bytes());
    out.extend_from_slice(&(model.spec.lora_rank as u32).to_le_bytes());
    out.extend_from_slice(&model.spec.lora_scale.to_le_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, tensor) in params {
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(tensor.shape().len() as u8);
        for dim in tensor.shape() {
            out.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(path: &Path, model: &PeftModel) -> Result<()> {
    let bytes = serialize_model(model);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path: origin };
    if r.take(8)? != MAGIC {
        return Err(Error::format(origin, "bad magic; not a checkpoint file"));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = BackboneConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        d_model: dims[3],
        depth: dims[4],
        heads: dims[5],
        ffn_ratio: dims[6],
    };
    let kind = kind_from_u8(r.u8()?, origin)?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Gelu,
        other => return Err(Error::format(origin, format!("unknown activation byte {other}"))),
    };
    let adapter_ratio = r.f64()?;
    let lora_rank = r.u32()? as usize;
    let lora_scale = r.f64()?;
    let spec = VariantSpec {
        kind,
        adapter_ratio,
        lora_rank,
        lora_scale,
        activation,
    };
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let path_len = r.u16()? as usize;
        let path = std::str::from_utf8(r.take(path_len)?)
            .map_err(|_| Error::format(origin, "parameter path is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        records.push((path, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after last record"));
    }
    Ok(Checkpoint { config, spec, records })
}

/// Rebuild the model a checkpoint describes. Every parameter slot must be
/// covered by a record of the same shape; the freeze state is not stored and
/// is left unfrozen (callers re-freeze for training).
pub fn load_model(path: &Path) -> Result<PeftModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = parse(&bytes, path)?;
    instantiate(&ckpt, path)
}

pub fn instantiate(ckpt: &Checkpoint, origin: &Path) -> Result<PeftModel> {
    let backbone = Backbone::new(ckpt.config, 0)?;
    let mut model = build_variant(backbone, ckpt.spec, 0)?;
    apply_records(&mut model, &ckpt.records, origin)?;
    Ok(model)
}

/// Copy matching records into a model, shape-guarded. Records whose paths do
/// not exist in the model are an error; slots not covered keep their values,
/// which is what loading a `peft.`-only record set onto a fresh backbone
/// relies on.
pub fn apply_records(model: &mut PeftModel, records: &[(String, Tensor)], origin: &Path) -> Result<()> {
    use std::collections::HashMap;
    let mut by_path: HashMap<&str, &Tensor> = HashMap::new();
    for (path, tensor) in records {
        if by_path.insert(path.as_str(), tensor).is_some() {
            return Err(Error::format(origin, format!("duplicate record '{path}'")));
        }
    }
    let mut matched = 0;
    for (path, slot) in model.params_mut() {
        if let Some(record) = by_path.remove(path.as_str()) {
            if record.shape() != slot.shape() {
                return Err(Error::format(
                    origin,
                    format!(
                        "record '{path}' has shape {:?} but the model expects {:?}",
                        record.shape(),
                        slot.shape()
                    ),
                ));
            }
            slot.data_mut().copy_from_slice(record.data());
            matched += 1;
        }
    }
    if !by_path.is_empty() {
        let mut stray: Vec<&str> = by_path.into_keys().collect();
        stray.sort_unstable();
        return Err(Error::format(
            origin,
            format!("records not present in the model: {}", stray.join(", ")),
        ));
    }
    let _ = matched;
    Ok(())
}
