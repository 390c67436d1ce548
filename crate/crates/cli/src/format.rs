//! Binary containers for datasets and checkpoints.
//!
//! Both share one layout (all integers little-endian):
//!
//! | offset   | size        | content                               |
//! |----------|-------------|---------------------------------------|
//! | 0        | 8           | magic (`MCNDATA1` or `MCNCKPT1`)      |
//! | 8        | 8           | `u64` header length `L` in bytes       |
//! | 16       | `L`         | UTF-8 JSON header                      |
//! | 16 + L   | 8           | `u64` value count `K`                  |
//! | 24 + L   | 8 K         | `K` IEEE-754 `f64` values              |
//!
//! Dataset values, in order: source features (sample-major, each sequence
//! `T x D_src` row-major), auxiliary features (`T x D_aux`), source labels,
//! auxiliary labels, then — only for paired datasets — the pairing, where
//! entry `i` is the auxiliary index of source sample `i`. Labels and pairing
//! indices are stored as exact integer-valued reals.
//!
//! Checkpoint values are the parameter blocks listed in the header, in
//! order, each row-major.

use std::path::Path;

use mcn_core::linalg::Matrix;
use mcn_core::model::{AuxiliaryEncoder, Architecture, StreamModel};
use mcn_core::params::Parameters;
use mcn_core::rnn::{LstmParams, SequenceBatch};
use mcn_core::synthdata::{Alignment, GeneratorConfig, MultimodalDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const DATASET_MAGIC: &[u8; 8] = b"MCNDATA1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_container<H: Serialize>(magic: &[u8; 8], header: &H, values: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers serialize infallibly");
    let mut out = Vec::with_capacity(24 + json.len() + 8 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_container<H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
    path: &Path,
) -> CliResult<(H, Vec<f64>)> {
    let bad = |m: String| CliError::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad(format!(
            "not a {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let read_u64 = |at: usize| -> CliResult<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| bad(format!("truncated at byte {at}")))
    };
    let header_len = read_u64(8)? as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let header: H = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| bad(format!("header: {e}")))?;
    let count = read_u64(header_end)? as usize;
    let payload = &bytes[header_end + 8..];
    if Some(payload.len()) != count.checked_mul(8) {
        return Err(bad(format!(
            "payload holds {} bytes, header promises {count} values",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub alignment: Alignment,
    pub classes: usize,
    pub seq_len: usize,
    pub source_dim: usize,
    pub aux_dim: usize,
    pub source_count: usize,
    pub aux_count: usize,
    pub paired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub data: MultimodalDataset,
}

pub fn encode_dataset(data: &MultimodalDataset, generator: &GeneratorConfig) -> Vec<u8> {
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        generator: *generator,
        alignment: data.alignment,
        classes: data.num_classes(),
        seq_len: data.source.seq_len(),
        source_dim: data.source.input_dim(),
        aux_dim: data.auxiliary.input_dim(),
        source_count: data.source.len(),
        aux_count: data.auxiliary.len(),
        paired: data.pairing.is_some(),
    };
    let mut values = Vec::new();
    for batch in [&data.source, &data.auxiliary] {
        for x in batch.features() {
            values.extend_from_slice(x.as_slice());
        }
    }
    for batch in [&data.source, &data.auxiliary] {
        values.extend(batch.labels().iter().map(|&l| l as f64));
    }
    if let Some(p) = &data.pairing {
        values.extend(p.iter().map(|&i| i as f64));
    }
    encode_container(DATASET_MAGIC, &header, &values)
}

fn as_index(v: f64, bound: usize, what: &str, path: &Path) -> CliResult<usize> {
    if v.fract() == 0.0 && v >= 0.0 && (v as usize) < bound {
        Ok(v as usize)
    } else {
        Err(CliError::format(path, format!("{what} {v} is not an index below {bound}")))
    }
}

fn read_sequences(
    values: &[f64],
    off: &mut usize,
    count: usize,
    rows: usize,
    cols: usize,
) -> CliResult<Vec<Matrix>> {
    (0..count)
        .map(|_| {
            let m = Matrix::from_vec(rows, cols, values[*off..*off + rows * cols].to_vec())?;
            *off += rows * cols;
            Ok(m)
        })
        .collect()
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> CliResult<DatasetFile> {
    let (header, values): (DatasetHeader, Vec<f64>) =
        decode_container(DATASET_MAGIC, bytes, path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let h = &header;
    // Widened so a corrupt header cannot overflow the size check.
    let [t, ds, da, ns, na] = [h.seq_len, h.source_dim, h.aux_dim, h.source_count, h.aux_count]
        .map(|v| v as u128);
    let expected = ns * t * ds + na * t * da + ns + na + if h.paired { ns } else { 0 };
    if values.len() as u128 != expected {
        return Err(CliError::format(
            path,
            format!("{} values stored, header implies {expected}", values.len()),
        ));
    }
    let mut off = 0;
    let src_x = read_sequences(&values, &mut off, h.source_count, h.seq_len, h.source_dim)?;
    let aux_x = read_sequences(&values, &mut off, h.aux_count, h.seq_len, h.aux_dim)?;
    let labels = |vals: &[f64]| -> CliResult<Vec<usize>> {
        vals.iter().map(|&v| as_index(v, h.classes, "label", path)).collect()
    };
    let (src_l, rest) = values[off..].split_at(h.source_count);
    let (aux_l, rest) = rest.split_at(h.aux_count);
    let src_y = labels(src_l)?;
    let aux_y = labels(aux_l)?;
    let pairing = if h.paired {
        Some(
            rest.iter()
                .map(|&v| as_index(v, h.aux_count, "pairing index", path))
                .collect::<CliResult<Vec<_>>>()?,
        )
    } else {
        None
    };
    let data = MultimodalDataset::new(
        SequenceBatch::new(src_x, src_y, h.classes)?,
        SequenceBatch::new(aux_x, aux_y, h.classes)?,
        pairing,
        h.alignment,
    )?;
    Ok(DatasetFile { header, data })
}

pub fn load_dataset(path: &Path) -> CliResult<DatasetFile> {
    decode_dataset(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ResLstm,
    VLstm,
    AuxEncoder,
}

impl ModelKind {
    pub fn of(arch: Architecture) -> Self {
        match arch {
            Architecture::ResLstm => ModelKind::ResLstm,
            Architecture::VLstm => ModelKind::VLstm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::ResLstm => "res_lstm",
            ModelKind::VLstm => "v_lstm",
            ModelKind::AuxEncoder => "aux_encoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d_in: usize,
    pub n: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub dims: Dims,
    pub init_seed: u64,
    pub blocks: Vec<BlockShape>,
    pub config_echo: RunConfig,
}

/// A decoded checkpoint whose block table has been checked against `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

fn block_table<P: Parameters + ?Sized>(p: &P) -> Vec<BlockShape> {
    p.blocks()
        .into_iter()
        .map(|b| BlockShape {
            name: b.name,
            rows: b.shape.0,
            cols: b.shape.1,
        })
        .collect()
}

impl Checkpoint {
    pub fn from_params<P: Parameters + ?Sized>(
        kind: ModelKind,
        dims: Dims,
        init_seed: u64,
        params: &P,
        config: &RunConfig,
    ) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_kind: kind,
                dims,
                init_seed,
                blocks: block_table(params),
                config_echo: config.clone(),
            },
            values: params.to_flat(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_container(CHECKPOINT_MAGIC, &self.header, &self.values)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let (header, values): (CheckpointHeader, Vec<f64>) =
            decode_container(CHECKPOINT_MAGIC, bytes, path)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CliError::format(
                path,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let ckpt = Checkpoint { header, values };
        // Rebuilding the model validates the block table against the dims.
        match ckpt.header.model_kind {
            ModelKind::AuxEncoder => ckpt.encoder(path).map(drop)?,
            _ => ckpt.stream_model(path).map(drop)?,
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::decode(&read_file(path)?, path)
    }

    fn fill<P: Parameters>(&self, mut target: P, path: &Path) -> CliResult<P> {
        let expected = block_table(&target);
        if expected != self.header.blocks {
            return Err(CliError::format(
                path,
                format!(
                    "block table does not match a {} model with dims {:?}",
                    self.header.model_kind.as_str(),
                    self.header.dims
                ),
            ));
        }
        if self.values.len() != target.param_count() {
            return Err(CliError::format(
                path,
                format!(
                    "{} values stored, blocks need {}",
                    self.values.len(),
                    target.param_count()
                ),
            ));
        }
        let mut off = 0;
        for b in target.blocks_mut() {
            let len = b.values.len();
            b.values.copy_from_slice(&self.values[off..off + len]);
            off += len;
        }
        Ok(target)
    }

    pub fn stream_model(&self, path: &Path) -> CliResult<StreamModel> {
        let arch = match self.header.model_kind {
            ModelKind::ResLstm => Architecture::ResLstm,
            ModelKind::VLstm => Architecture::VLstm,
            ModelKind::AuxEncoder => {
                return Err(CliError::format(
                    path,
                    "expected a stream model checkpoint, found aux_encoder",
                ))
            }
        };
        let Dims { d_in, n, c } = self.header.dims;
        let dropout = self.header.config_echo.train.dropout();
        self.fill(StreamModel::zeros(arch, d_in, n, c, dropout), path)
    }

    pub fn encoder(&self, path: &Path) -> CliResult<AuxiliaryEncoder> {
        if self.header.model_kind != ModelKind::AuxEncoder {
            return Err(CliError::format(
                path,
                format!(
                    "expected an aux_encoder checkpoint, found {}",
                    self.header.model_kind.as_str()
                ),
            ));
        }
        let Dims { d_in, n, .. } = self.header.dims;
        let lstm = self.fill(LstmParams::zeros(d_in, n), path)?;
        Ok(AuxiliaryEncoder::frozen(lstm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcn_core::synthdata::make_dataset;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            classes: 3,
            samples_per_class: 4,
            seq_len: 5,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn dataset_round_trips_bytewise() {
        for alignment in [Alignment::Sample, Alignment::Unaligned] {
            let cfg = GeneratorConfig { alignment, ..small() };
            let data = make_dataset(&cfg).unwrap();
            let bytes = encode_dataset(&data, &cfg);
            let back = decode_dataset(&bytes, Path::new("d")).unwrap();
            assert_eq!(back.data, data);
            assert_eq!(encode_dataset(&back.data, &back.header.generator), bytes);
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let cfg = small();
        let bytes = encode_dataset(&make_dataset(&cfg).unwrap(), &cfg);
        assert!(decode_dataset(&bytes[..bytes.len() - 3], Path::new("d")).is_err());
        let mut wrong = bytes.clone();
        wrong[..8].copy_from_slice(CHECKPOINT_MAGIC);
        assert!(decode_dataset(&wrong, Path::new("d")).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bytewise() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 0.1 + 0.2;
        let model = mcn_core::train::init_stream_model(Architecture::VLstm, 4, 3, 2, &cfg.train).unwrap();
        let ckpt = Checkpoint::from_params(ModelKind::VLstm, Dims { d_in: 4, n: 3, c: 2 }, 9, &model, &cfg);
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.stream_model(Path::new("c")).unwrap().to_flat(), model.to_flat());
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let cfg = RunConfig::default();
        let model = mcn_core::train::init_stream_model(Architecture::ResLstm, 4, 3, 2, &cfg.train).unwrap();
        let mut ckpt = Checkpoint::from_params(ModelKind::ResLstm, Dims { d_in: 4, n: 3, c: 2 }, 0, &model, &cfg);
        ckpt.header.dims.n = 5;
        assert!(Checkpoint::decode(&ckpt.encode(), Path::new("c")).is_err());
    }
}
