//! `CETM` checkpoints.
//!
//! Layout: magic, u32 version, length-prefixed UTF-8 header, u32 parameter
//! count, then per parameter a length-prefixed name, u32 rank, u32 extents
//! and little-endian f32 values, then CRC32 of all preceding bytes. The
//! header is TOML holding the model configuration, class names, creation
//! seed, input normalization and the echoed run configuration.

use std::path::Path;

use cetx_core::data::ChannelStats;
use cetx_core::model::{BlockSpec, ModelConfig, MultiExitNet};
use cetx_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{format_err, Result};

const MAGIC: &[u8; 4] = b"CETM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Statistics applied to raw inputs before the network sees them.
    pub normalization: ChannelStats,
    pub config_echo: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seed: u64,
    class_names: Vec<String>,
    model: ModelHeader,
    normalization: NormHeader,
    config: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    channels_in: usize,
    length_in: usize,
    num_classes: usize,
    hidden_units: usize,
    l2_rate: f64,
    seed: u64,
    blocks: Vec<BlockHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    filters: usize,
    kernel: usize,
    pool: usize,
    dropout_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormHeader {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl From<&ModelConfig> for ModelHeader {
    fn from(m: &ModelConfig) -> Self {
        Self {
            channels_in: m.channels_in,
            length_in: m.length_in,
            num_classes: m.num_classes,
            hidden_units: m.hidden_units,
            l2_rate: m.l2_rate,
            seed: m.seed,
            blocks: m
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    filters: b.filters,
                    kernel: b.kernel,
                    pool: b.pool,
                    dropout_rate: b.dropout_rate,
                })
                .collect(),
        }
    }
}

impl From<ModelHeader> for ModelConfig {
    fn from(m: ModelHeader) -> Self {
        Self {
            channels_in: m.channels_in,
            length_in: m.length_in,
            num_classes: m.num_classes,
            blocks: m
                .blocks
                .into_iter()
                .map(|b| BlockSpec {
                    filters: b.filters,
                    kernel: b.kernel,
                    pool: b.pool,
                    dropout_rate: b.dropout_rate,
                })
                .collect(),
            hidden_units: m.hidden_units,
            l2_rate: m.l2_rate,
            seed: m.seed,
        }
    }
}

pub fn save_checkpoint(net: &MultiExitNet<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        seed: meta.seed,
        class_names: meta.class_names.clone(),
        model: net.config().into(),
        normalization: NormHeader {
            mean: meta.normalization.mean.clone(),
            std: meta.normalization.std.clone(),
        },
        config: meta.config_echo.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| format_err(path, e.to_string()))?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.bytes(text.as_bytes());
    w.u32(net.params().len() as u32);
    for p in net.params() {
        w.bytes(p.name.as_bytes());
        w.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        for &v in p.value.data() {
            w.f32(v);
        }
    }
    w.finish(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(MultiExitNet<f32>, CheckpointMeta)> {
    let buf = read_file(path)?;
    let mut r = Reader::open(path, &buf, MAGIC, VERSION)?;
    let text = r.string()?;
    let header: Header =
        toml::from_str(&text).map_err(|e| format_err(path, format!("bad header: {}", e.message().replace('\n', " "))))?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(path, format!("parameter `{name}`: shape overflows")))?;
        let data = r.f32s(n)?;
        values.push((name, Tensor::new(shape, data).expect("length matches shape")));
    }
    r.finish()?;
    let config: ModelConfig = header.model.into();
    let mut net = MultiExitNet::new(config).map_err(|e| format_err(path, e.to_string()))?;
    net.load_values(values).map_err(|e| format_err(path, e.to_string()))?;
    let normalization = ChannelStats {
        mean: header.normalization.mean,
        std: header.normalization.std,
    };
    if normalization.mean.len() != net.config().channels_in || normalization.std.len() != net.config().channels_in {
        return Err(format_err(path, "normalization statistics do not match the input channels"));
    }
    Ok((
        net,
        CheckpointMeta {
            class_names: header.class_names,
            seed: header.seed,
            normalization,
            config_echo: header.config,
        },
    ))
}
