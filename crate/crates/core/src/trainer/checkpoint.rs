use std::path::Path;

use crate::model::{decode_model, encode_model, Model, ModelError, Reader};

use super::optim::{AdamW, AdamWConfig};
use super::TrainError;

/// Marks the optimizer section that follows the model bytes: five `f64`
/// hyperparameters, `u64` step, then per parameter a frozen flag byte and
/// the first and second moments.
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"ADMW";

pub fn encode_checkpoint(model: &Model, optimizer: Option<&AdamW>) -> Vec<u8> {
    let mut out = encode_model(model);
    if let Some(o) = optimizer {
        out.extend_from_slice(OPTIMIZER_MAGIC);
        let c = o.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&o.step.to_le_bytes());
        for ((m, v), &f) in o.m.iter().zip(&o.v).zip(&o.frozen) {
            out.push(f as u8);
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<AdamW>), TrainError> {
    let (model, used) = decode_model(bytes)?;
    let mut r = Reader::new(bytes, used);
    if r.at_end() {
        return Ok((model, None));
    }
    if r.take(4)? != OPTIMIZER_MAGIC {
        return Err(ModelError::Checkpoint("unknown section after the model".into()).into());
    }
    let h = r.f64s(5)?;
    let config = AdamWConfig {
        lr: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
        weight_decay: h[4],
    };
    let mut opt = AdamW::new(&model.params, config);
    opt.step = r.u64()?;
    for k in 0..opt.m.len() {
        opt.frozen[k] = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(ModelError::Checkpoint(format!("bad frozen flag {b}")).into()),
        };
        let n = opt.m[k].len();
        opt.m[k] = r.f64s(n)?;
        opt.v[k] = r.f64s(n)?;
    }
    if !r.at_end() {
        return Err(ModelError::Checkpoint("trailing bytes".into()).into());
    }
    Ok((model, Some(opt)))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&AdamW>,
) -> Result<(), TrainError> {
    std::fs::write(path, encode_checkpoint(model, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<AdamW>), TrainError> {
    decode_checkpoint(&std::fs::read(path)?)
}
