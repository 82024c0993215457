//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/checkpoint.json     format version, config, step, speakers, tokenizer, dtype
//! <dir>/params.safetensors  every parameter tensor by dotted name
//! ```

use std::path::Path;

use candle::DType;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::SpeakerLm;
use crate::tokenizer::BpeTokenizer;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub dtype: String,
    pub speakers: Vec<String>,
    pub tokenizer: BpeTokenizer,
    pub config: Config,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &SpeakerLm, step: usize) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step,
        dtype: dtype_name(model.dtype())?.into(),
        speakers: model.speakers.clone(),
        tokenizer: model.tokenizer.clone(),
        config: model.config().clone(),
    };
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    model.store.save_safetensors(dir.join(PARAMS_FILE))
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = dir.as_ref().join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    match v.get("format_version").and_then(|f| f.as_u64()) {
        Some(n) if n == FORMAT_VERSION as u64 => {}
        Some(n) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {n}, this build reads version {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint(format!("{}: no format_version", path.display()))),
    }
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(SpeakerLm, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let model = SpeakerLm::new(&meta.config, meta.tokenizer.clone(), meta.speakers.clone(), parse_dtype(&meta.dtype)?)?;
    model.store.load_safetensors(dir.join(PARAMS_FILE))?;
    Ok((model, meta))
}
