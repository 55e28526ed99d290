//! Single-file model archives.
//!
//! Layout: magic `REIDCKPT`, `u32` format version, `u64` header length, a JSON
//! header (configs, flags, label maps, phase counter, tensor index), then the
//! raw little-endian `f64` tensor data in index order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::model::{Backbone, BackboneConfig, Head, HeadConfig, MultiHeadModel, TaskBinding};
use crate::nn::Module;
use crate::schedule::{Optimizer, OptimizerKind, SlotState};

pub const CKPT_MAGIC: &[u8; 8] = b"REIDCKPT";
pub const CKPT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;
const OPT_FIRST: &str = "optimizer.first.";
const OPT_SECOND: &str = "optimizer.second.";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    config: HeadConfig,
    frozen: bool,
    trained: bool,
    task: Option<TaskBinding>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    kind: OptimizerKind,
    iteration: usize,
}

/// Where training stood when the archive was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingCursor {
    pub phase: usize,
    /// Completed epochs within `phase`.
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    backbone: BackboneConfig,
    heads: Vec<HeadMeta>,
    phase: usize,
    optimizer: Option<OptimizerMeta>,
    cursor: Option<TrainingCursor>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub kind: OptimizerKind,
    pub iteration: usize,
    pub state: BTreeMap<String, SlotState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MultiHeadModel,
    pub optimizer: Option<OptimizerSnapshot>,
    pub cursor: Option<TrainingCursor>,
}

fn collect_tensors(module: &dyn Module, prefix: &str, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    module.visit(prefix, &mut |name, t| {
        out.push((
            name.to_string(),
            t.value.shape().to_vec(),
            t.value.iter().copied().collect(),
        ));
    });
}

pub fn encode_checkpoint(
    model: &MultiHeadModel,
    optimizer: Option<&Optimizer>,
    cursor: Option<TrainingCursor>,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    collect_tensors(model, "", &mut tensors);
    if let Some(opt) = optimizer {
        for (name, slot) in opt.state() {
            tensors.push((
                format!("{OPT_FIRST}{name}"),
                slot.first.shape().to_vec(),
                slot.first.iter().copied().collect(),
            ));
            if let Some(second) = &slot.second {
                tensors.push((
                    format!("{OPT_SECOND}{name}"),
                    second.shape().to_vec(),
                    second.iter().copied().collect(),
                ));
            }
        }
    }
    let heads = (0..model.num_heads())
        .map(|i| {
            Ok(HeadMeta {
                config: model.head(i)?.config().clone(),
                frozen: model.is_frozen(i)?,
                trained: model.is_trained(i)?,
                task: model.task(i)?.cloned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = Header {
        format_version: CKPT_VERSION,
        backbone: model.backbone().config().clone(),
        heads,
        phase: model.phase(),
        optimizer: optimizer.map(|o| OptimizerMeta {
            kind: o.kind(),
            iteration: o.iteration(),
        }),
        cursor,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * total);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write atomically: a crash mid-write leaves the previous archive intact.
pub fn save_checkpoint(
    path: &Path,
    model: &MultiHeadModel,
    optimizer: Option<&Optimizer>,
    cursor: Option<TrainingCursor>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, cursor)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Archive {
    header: Header,
    tensors: HashMap<String, ArrayD<f64>>,
}

fn parse_archive(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(ReidError::BadMagic {
            expected: "REIDCKPT",
            reason: "magic bytes missing".into(),
        });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(ReidError::Format("checkpoint header truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ReidError::Format(format!(
            "checkpoint format version {version}, this build reads {CKPT_VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let json_end = usize::try_from(json_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ReidError::Format(format!("header length {json_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..json_end])?;
    if header.format_version != version {
        return Err(ReidError::Format(
            "header and prefix disagree on the format version".into(),
        ));
    }
    let mut data = &bytes[json_end..];
    let mut tensors = HashMap::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .filter(|&n| n <= data.len())
            .ok_or_else(|| ReidError::Format(format!("tensor '{}' runs past the end of the file", entry.name)))?;
        let (raw, rest) = data.split_at(len);
        data = rest;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
        if tensors.insert(entry.name.clone(), array).is_some() {
            return Err(ReidError::Format(format!("duplicate tensor '{}'", entry.name)));
        }
    }
    if !data.is_empty() {
        return Err(ReidError::Format(format!(
            "{} trailing bytes after tensor data",
            data.len()
        )));
    }
    Ok(Archive { header, tensors })
}

/// Copy archived tensors named `{prefix}.{name}` into `module`, checking
/// shapes. Returns the archive names that were consumed.
fn assign(module: &mut dyn Module, prefix: &str, tensors: &HashMap<String, ArrayD<f64>>) -> Result<Vec<String>> {
    let mut used = Vec::new();
    let mut failure = None;
    module.visit_mut(prefix, &mut |name, mut t| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            None => failure = Some(ReidError::Format(format!("archive lacks tensor '{name}'"))),
            Some(src) if src.shape() != t.value.shape() => {
                failure = Some(ReidError::ShapeMismatch(format!(
                    "tensor '{name}': archive has {:?}, model expects {:?}",
                    src.shape(),
                    t.value.shape()
                )))
            }
            Some(src) => {
                t.value.assign(src);
                if let Some(mut g) = t.grad {
                    g.fill(0.0);
                }
                used.push(name.to_string());
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(used),
    }
}

/// Lower bound on the element count a model described by `header` needs, so
/// a forged header cannot make us allocate a network the file cannot fill.
fn element_floor(header: &Header) -> usize {
    let c = header.backbone.output_channels;
    let backbone = match header.backbone.arch {
        crate::model::BackboneArch::Tiny => c.saturating_mul(c).saturating_mul(9),
        crate::model::BackboneArch::Resnet50 => 23_000_000,
    };
    header.heads.iter().fold(backbone, |acc, h| {
        let half = h.config.in_channels / 2;
        let head = h
            .config
            .num_classes
            .saturating_add(h.config.in_channels)
            .saturating_mul(half);
        acc.saturating_add(head)
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let Archive { header, mut tensors } = parse_archive(bytes)?;
    let stored: usize = tensors.values().map(|t| t.len()).sum();
    if element_floor(&header) > stored {
        return Err(ReidError::Format(format!(
            "archive holds {stored} values, too few for the model it describes"
        )));
    }
    // Parameters are overwritten below, so the init seed is irrelevant.
    let mut rng = StdRng::seed_from_u64(0);
    let backbone = Backbone::new(header.backbone.clone(), &mut rng)?;
    let heads = header
        .heads
        .iter()
        .map(|h| {
            if h.config.in_channels != backbone.output_channels() {
                return Err(ReidError::ShapeMismatch(format!(
                    "head expects {} channels, backbone produces {}",
                    h.config.in_channels,
                    backbone.output_channels()
                )));
            }
            Head::new(h.config.clone(), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = MultiHeadModel::from_parts(backbone, heads);
    for name in assign(&mut model, "", &tensors)? {
        tensors.remove(&name);
    }
    for (i, h) in header.heads.into_iter().enumerate() {
        model.set_frozen(i, h.frozen)?;
        if h.trained {
            model.mark_trained(i)?;
        }
        if let Some(task) = h.task {
            model.bind_task(i, task)?;
        }
    }
    model.set_phase(header.phase);

    let mut state: BTreeMap<String, SlotState> = BTreeMap::new();
    let mut seconds = Vec::new();
    for (name, array) in tensors {
        if let Some(param) = name.strip_prefix(OPT_FIRST) {
            state.insert(
                param.to_string(),
                SlotState {
                    first: array,
                    second: None,
                },
            );
        } else if let Some(param) = name.strip_prefix(OPT_SECOND) {
            seconds.push((param.to_string(), array));
        } else {
            return Err(ReidError::Format(format!("unexpected tensor '{name}' in archive")));
        }
    }
    for (param, array) in seconds {
        let slot = state
            .get_mut(&param)
            .ok_or_else(|| ReidError::Format(format!("optimizer second moment without first for '{param}'")))?;
        slot.second = Some(array);
    }
    let optimizer = match header.optimizer {
        Some(meta) => Some(OptimizerSnapshot {
            kind: meta.kind,
            iteration: meta.iteration,
            state,
        }),
        None if state.is_empty() => None,
        None => return Err(ReidError::Format("optimizer tensors without optimizer metadata".into())),
    };
    Ok(Checkpoint {
        model,
        optimizer,
        cursor: header.cursor,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Load backbone weights from any archive holding `backbone.*` tensors.
pub fn load_backbone_weights(backbone: &mut Backbone, path: &Path) -> Result<()> {
    let archive = parse_archive(&fs::read(path)?)?;
    if archive.header.backbone.arch != backbone.config().arch {
        return Err(ReidError::Config(format!(
            "weights in {} are for a {:?} backbone",
            path.display(),
            archive.header.backbone.arch
        )));
    }
    assign(backbone, "backbone", &archive.tensors)?;
    Ok(())
}
