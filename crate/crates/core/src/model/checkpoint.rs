//! Binary model snapshot.
//!
//! Layout (little-endian): magic `EVTC`, `u32` version, `u32` length and
//! UTF-8 text of the `key = value` model configuration, `u32` parameter
//! count, then per parameter: `u32` name length, name, `u32` rank, `u64`
//! dimensions, and the `f64` values. Anything after the parameters is left
//! to the caller (the trainer appends optimizer state).

use super::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVTC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ModelError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Decodes a model; returns it with the number of bytes consumed.
pub fn decode_model(bytes: &[u8]) -> Result<(Model, usize), ModelError> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(ModelError::Checkpoint(
            "not a checkpoint (bad magic)".into(),
        ));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| ModelError::Checkpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text)?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "{count} tensors, model has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| ModelError::Checkpoint("name is not UTF-8".into()))?;
        let id = model
            .params
            .id(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != model.params.get(id).shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        let values = r.f64s(shape.iter().product())?;
        model.params.get_mut(id).data_mut().copy_from_slice(&values);
        seen[id.index()] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(ModelError::Checkpoint("duplicate tensor entries".into()));
    }
    Ok((model, r.pos))
}
