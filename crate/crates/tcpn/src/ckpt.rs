//! Checkpoint on disk: a manifest file whose first line is the version
//! header `TCPN-CKPT-1` followed by a JSON document, plus a sibling buffer
//! file holding every parameter as raw little-endian f64, concatenated in
//! lexicographic name order. One checkpoint carries everything inference
//! needs: model weights, vocabulary, category schema, lattice parameters.

use crate::doc::{CategorySchema, Vocabulary};
use crate::error::{Result, TcpnError};
use crate::lattice::LatticeParams;
use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const HEADER: &str = "TCPN-CKPT-1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    buffer: String,
    config: ModelConfig,
    lattice: LatticeParams,
    vocab: Vec<String>,
    categories: Vec<String>,
    params: BTreeMap<String, ParamRecord>,
}

/// Everything a checkpoint restores.
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub categories: CategorySchema,
    pub lattice: LatticeParams,
}

fn buffer_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    name.push_str(".bin");
    manifest_path.with_file_name(name)
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    vocab: &Vocabulary,
    categories: &CategorySchema,
    lattice: &LatticeParams,
) -> Result<()> {
    let bin_path = buffer_path(path);
    let mut records = BTreeMap::new();
    let mut buffer: Vec<u8> = Vec::new();
    for (name, tensor) in params.iter() {
        records.insert(
            name.to_string(),
            ParamRecord {
                shape: tensor.shape().to_vec(),
                dtype: "f64".into(),
                offset: buffer.len() as u64,
            },
        );
        for v in tensor.data() {
            buffer.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        buffer: bin_path
            .file_name()
            .expect("buffer path has a file name")
            .to_string_lossy()
            .into_owned(),
        config: params.cfg,
        lattice: *lattice,
        vocab: vocab.entries().to_vec(),
        categories: categories.names().to_vec(),
        params: records,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, format!("{}\n{}\n", HEADER, json))?;
    std::fs::write(&bin_path, &buffer)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        TcpnError::Checkpoint(format!("cannot read {}: {}", path.display(), e))
    })?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| TcpnError::Checkpoint("missing header line".into()))?;
    if first.trim_end() != HEADER {
        return Err(TcpnError::Checkpoint(format!(
            "bad header {:?}, expected {:?}",
            first.trim_end(),
            HEADER
        )));
    }
    let manifest: Manifest = serde_json::from_str(rest)
        .map_err(|e| TcpnError::Checkpoint(format!("bad manifest: {}", e)))?;

    let bin_path = path.with_file_name(&manifest.buffer);
    let mut buffer = Vec::new();
    std::fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut buffer))
        .map_err(|e| {
            TcpnError::Checkpoint(format!("cannot read buffer {}: {}", bin_path.display(), e))
        })?;

    let mut table = BTreeMap::new();
    for (name, rec) in &manifest.params {
        if rec.dtype != "f64" {
            return Err(TcpnError::Checkpoint(format!(
                "parameter {} has unsupported dtype {}",
                name, rec.dtype
            )));
        }
        let numel: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + numel * 8;
        if end > buffer.len() || start % 8 != 0 {
            return Err(TcpnError::Checkpoint(format!(
                "parameter {} spans bytes {}..{} outside buffer of {} bytes",
                name,
                start,
                end,
                buffer.len()
            )));
        }
        let data: Vec<f64> = buffer[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        table.insert(
            name.clone(),
            crate::autodiff::Tensor::from_vec(&rec.shape, data),
        );
    }
    let expected: usize = table.values().map(|t| t.numel() * 8).sum();
    if expected != buffer.len() {
        return Err(TcpnError::Checkpoint(format!(
            "buffer holds {} bytes but manifest accounts for {}",
            buffer.len(),
            expected
        )));
    }

    manifest.config.validate()?;
    let vocab = Vocabulary::from_entries(manifest.vocab)?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(TcpnError::Checkpoint(format!(
            "vocabulary has {} entries but config says {}",
            vocab.len(),
            manifest.config.vocab_size
        )));
    }
    let categories = CategorySchema::new(manifest.categories)?;
    if categories.len() != manifest.config.num_categories {
        return Err(TcpnError::Checkpoint(format!(
            "schema has {} categories but config says {}",
            categories.len(),
            manifest.config.num_categories
        )));
    }
    Ok(Checkpoint {
        params: ModelParams::from_table(manifest.config, table),
        vocab,
        categories,
        lattice: manifest.lattice,
    })
}
