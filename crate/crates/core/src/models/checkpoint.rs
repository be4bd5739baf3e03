//! Parameter blob (safetensors) plus a JSON sidecar describing the run.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub epoch: usize,
    pub validation_loss: f64,
    pub norm_max: f64,
    pub seed: u64,
    pub code_version: String,
    pub dtype: String,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Format {
            node: "dtype".into(),
            reason: format!("unsupported dtype `{other}`"),
        }),
    }
}

fn write(blob: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = blob.parent() {
        std::fs::create_dir_all(dir)?;
    }
    store.save(blob)?;
    std::fs::write(sidecar_path(blob), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_meta(blob: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(blob);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::Format {
        node: side.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[allow(clippy::too_many_arguments)]
pub fn save_generator(
    blob: &Path,
    g: &Generator,
    epoch: usize,
    validation_loss: f64,
    norm_max: f64,
    seed: u64,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        model: ModelSpec::Generator(g.cfg.clone()),
        epoch,
        validation_loss,
        norm_max,
        seed,
        code_version: crate::code_version(),
        dtype: dtype_name(g.dtype()).into(),
    };
    write(blob, &g.store, &meta)?;
    Ok(meta)
}

pub fn save_discriminator(
    blob: &Path,
    d: &Discriminator,
    epoch: usize,
    validation_loss: f64,
    norm_max: f64,
    seed: u64,
) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        model: ModelSpec::Discriminator(d.cfg.clone()),
        epoch,
        validation_loss,
        norm_max,
        seed,
        code_version: crate::code_version(),
        dtype: dtype_name(d.dtype()).into(),
    };
    write(blob, &d.store, &meta)?;
    Ok(meta)
}

pub fn load_generator(blob: &Path) -> Result<(Generator, CheckpointMeta)> {
    let meta = read_meta(blob)?;
    let ModelSpec::Generator(cfg) = &meta.model else {
        return Err(Error::Format {
            node: sidecar_path(blob).display().to_string(),
            reason: "checkpoint does not hold a generator".into(),
        });
    };
    let g = Generator::new(cfg.clone(), meta.seed, parse_dtype(&meta.dtype)?)?;
    g.store.load(blob)?;
    Ok((g, meta))
}

pub fn load_discriminator(blob: &Path) -> Result<(Discriminator, CheckpointMeta)> {
    let meta = read_meta(blob)?;
    let ModelSpec::Discriminator(cfg) = &meta.model else {
        return Err(Error::Format {
            node: sidecar_path(blob).display().to_string(),
            reason: "checkpoint does not hold a discriminator".into(),
        });
    };
    let d = Discriminator::new(cfg.clone(), meta.seed, parse_dtype(&meta.dtype)?)?;
    d.store.load(blob)?;
    Ok((d, meta))
}
