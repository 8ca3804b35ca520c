//! Checkpoint persistence.
//!
//! Layout: magic `SMKD`, format version (u32 LE), header length (u64 LE),
//! UTF-8 header text, then the concatenated little-endian f32 arrays. The
//! header carries scalar state plus one `name dims offset len` line per
//! array; offsets are byte positions inside the data section.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::head::{CenterState, HeadConfig};
use crate::tensor::Tensor;
use crate::trainer::{AdamW, ModelPair, ModelParams, Moments, Stage, TrainState};
use crate::util::hash_str;
use crate::vit::VitConfig;

const MAGIC: &[u8; 4] = b"SMKD";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    BadVersion { got: u32 },
    Truncated { expected: u64, actual: u64 },
    HashMismatch { expected: u64, got: u64 },
    Header(String),
    MissingArray(String),
    ArchMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "i/o error: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint (bad magic)"),
            CheckpointError::BadVersion { got } => {
                write!(f, "unsupported checkpoint version {got} (expected {VERSION})")
            }
            CheckpointError::Truncated { expected, actual } => {
                write!(f, "checkpoint truncated: expected {expected} bytes, found {actual}")
            }
            CheckpointError::HashMismatch { expected, got } => write!(
                f,
                "config hash mismatch: checkpoint {got:016x}, current config {expected:016x}"
            ),
            CheckpointError::Header(msg) => write!(f, "bad checkpoint header: {msg}"),
            CheckpointError::MissingArray(name) => {
                write!(f, "checkpoint/config architecture mismatch: missing array {name}")
            }
            CheckpointError::ArchMismatch { name, expected, got } => write!(
                f,
                "checkpoint/config architecture mismatch: {name} has shape {got:?}, expected {expected:?}"
            ),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Architecture fingerprint embedded in checkpoints: every config field that
/// determines parameter shapes.
pub fn config_hash(vit_cfg: &VitConfig, head_cfg: &HeadConfig) -> u64 {
    let canon = format!(
        "image_size={};patch_size={};embed_dim={};depth={};num_heads={};mlp_ratio={};\
         head_in={};head_hidden={};head_bottleneck={};head_out={}",
        vit_cfg.image_size,
        vit_cfg.patch_size,
        vit_cfg.embed_dim,
        vit_cfg.depth,
        vit_cfg.num_heads,
        vit_cfg.mlp_ratio,
        head_cfg.in_dim,
        head_cfg.hidden_dim,
        head_cfg.bottleneck_dim,
        head_cfg.out_dim,
    );
    hash_str(&canon)
}

struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn collect_arrays(state: &TrainState<f32>) -> Vec<ArrayEntry> {
    let mut arrays = Vec::new();
    let mut push_params = |prefix: &str, params: &ModelParams<f32>| {
        params.visit(&mut |name, t| {
            arrays.push(ArrayEntry {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        });
    };
    push_params("student", &state.pair.student);
    push_params("teacher", &state.pair.teacher);
    arrays.push(ArrayEntry {
        name: "center_cls".into(),
        shape: vec![state.pair.center_cls.center.len()],
        data: state.pair.center_cls.center.clone(),
    });
    arrays.push(ArrayEntry {
        name: "center_patch".into(),
        shape: vec![state.pair.center_patch.center.len()],
        data: state.pair.center_patch.center.clone(),
    });
    let mut opt_names: Vec<&String> = state.opt.state.keys().collect();
    opt_names.sort();
    for name in opt_names {
        let moments = &state.opt.state[name];
        arrays.push(ArrayEntry {
            name: format!("opt.m.{name}"),
            shape: vec![moments.m.len()],
            data: moments.m.clone(),
        });
        arrays.push(ArrayEntry {
            name: format!("opt.v.{name}"),
            shape: vec![moments.v.len()],
            data: moments.v.clone(),
        });
    }
    arrays
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState<f32>,
    stage: Stage,
    cfg_hash: u64,
) -> Result<(), CheckpointError> {
    let arrays = collect_arrays(state);

    let mut header = String::new();
    header.push_str(&format!("config_hash={cfg_hash:016x}\n"));
    header.push_str(&format!(
        "stage={}\n",
        match stage {
            Stage::SslPretrain => "pretrain",
            Stage::Supervised => "supervised",
        }
    ));
    header.push_str(&format!("epoch={}\n", state.pair.epoch));
    header.push_str(&format!("step={}\n", state.pair.step));
    header.push_str(&format!("opt_t={}\n", state.opt.t));
    header.push_str(&format!("arrays={}\n", arrays.len()));
    let mut offset = 0u64;
    for a in &arrays {
        let dims = a
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("{} {} {} {}\n", a.name, dims, offset, a.data.len()));
        offset += (a.data.len() * 4) as u64;
    }

    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    for a in &arrays {
        let mut bytes = Vec::with_capacity(a.data.len() * 4);
        for v in &a.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub state: TrainState<f32>,
    pub stage: Stage,
    pub cfg_hash: u64,
}

/// Load and validate a checkpoint against the current architecture. A config
/// hash mismatch is a warning unless `strict`.
pub fn load_checkpoint(
    path: &Path,
    vit_cfg: &VitConfig,
    head_cfg: &HeadConfig,
    strict: bool,
) -> Result<LoadedCheckpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;

    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CheckpointError::Truncated {
            expected: (16 + header_len) as u64,
            actual: bytes.len() as u64,
        });
    }
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|_| CheckpointError::Header("header is not utf-8".into()))?;
    let data = &bytes[16 + header_len..];

    let mut scalars: HashMap<&str, &str> = HashMap::new();
    let mut entries: Vec<(String, Vec<usize>, u64, usize)> = Vec::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            scalars.insert(key, value);
        } else {
            let mut parts = line.split(' ');
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::Header(format!("bad array line {line:?}")))?;
            let dims = parts
                .next()
                .ok_or_else(|| CheckpointError::Header(format!("bad array line {line:?}")))?;
            let offset: u64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CheckpointError::Header(format!("bad offset in {line:?}")))?;
            let len: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CheckpointError::Header(format!("bad length in {line:?}")))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| CheckpointError::Header(format!("bad dims in {line:?}")))
                })
                .collect::<Result<_, _>>()?;
            entries.push((name.to_string(), shape, offset, len));
        }
    }

    let expected_data: u64 = entries
        .iter()
        .map(|(_, _, off, len)| off + (len * 4) as u64)
        .max()
        .unwrap_or(0);
    if (data.len() as u64) < expected_data {
        return Err(CheckpointError::Truncated {
            expected: 16 + header_len as u64 + expected_data,
            actual: bytes.len() as u64,
        });
    }

    let cfg_hash_stored = scalars
        .get("config_hash")
        .and_then(|v| u64::from_str_radix(v, 16).ok())
        .ok_or_else(|| CheckpointError::Header("missing config_hash".into()))?;
    let expected_hash = config_hash(vit_cfg, head_cfg);
    if cfg_hash_stored != expected_hash {
        if strict {
            return Err(CheckpointError::HashMismatch {
                expected: expected_hash,
                got: cfg_hash_stored,
            });
        }
        eprintln!(
            "warning: checkpoint config hash {cfg_hash_stored:016x} differs from current \
             config {expected_hash:016x}"
        );
    }

    let stage = match scalars.get("stage").copied() {
        Some("pretrain") => Stage::SslPretrain,
        Some("supervised") => Stage::Supervised,
        other => {
            return Err(CheckpointError::Header(format!(
                "missing or unknown stage {other:?}"
            )))
        }
    };
    let parse_u64 = |key: &str| -> Result<u64, CheckpointError> {
        scalars
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::Header(format!("missing {key}")))
    };
    let epoch = parse_u64("epoch")?;
    let step = parse_u64("step")?;
    let opt_t = parse_u64("opt_t")?;

    let mut table: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for (name, shape, offset, len) in entries {
        let start = offset as usize;
        let mut values = Vec::with_capacity(len);
        for chunk in data[start..start + len * 4].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        table.insert(name, (shape, values));
    }

    // rebuild parameters against the current architecture
    let has_ce = table.contains_key("student.ce_head.w");
    let ce_classes = table
        .get("student.ce_head.w")
        .map(|(shape, _)| shape.get(1).copied().unwrap_or(0));
    let template = ModelPair::<f32>::fresh(
        vit_cfg,
        head_cfg,
        if has_ce { ce_classes } else { None },
        0,
    );
    let fill = |prefix: &str, params: &ModelParams<f32>| -> Result<ModelParams<f32>, CheckpointError> {
        let mut failure = None;
        let result = params.try_map(&mut |name, t| {
            let full = format!("{prefix}.{name}");
            match table.get(&full) {
                None => {
                    failure.get_or_insert(CheckpointError::MissingArray(full));
                    Ok(t.clone())
                }
                Some((shape, values)) => {
                    if shape != t.shape() {
                        failure.get_or_insert(CheckpointError::ArchMismatch {
                            name: full,
                            expected: t.shape().to_vec(),
                            got: shape.clone(),
                        });
                        return Ok(t.clone());
                    }
                    Ok(Tensor::param(shape, values.clone()).expect("shape checked"))
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => result.map_err(|e| CheckpointError::Header(e.to_string())),
        }
    };
    let student = fill("student", &template.student)?;
    let teacher = fill("teacher", &template.teacher)?;

    let take_center = |name: &str| -> Result<CenterState<f32>, CheckpointError> {
        let (shape, values) = table
            .get(name)
            .ok_or_else(|| CheckpointError::MissingArray(name.into()))?;
        if shape != &[head_cfg.out_dim] {
            return Err(CheckpointError::ArchMismatch {
                name: name.into(),
                expected: vec![head_cfg.out_dim],
                got: shape.clone(),
            });
        }
        Ok(CenterState {
            center: values.clone(),
        })
    };
    let center_cls = take_center("center_cls")?;
    let center_patch = take_center("center_patch")?;

    let mut opt = AdamW::new();
    opt.t = opt_t;
    for (name, (_, values)) in &table {
        if let Some(param) = name.strip_prefix("opt.m.") {
            let v_name = format!("opt.v.{param}");
            let v = table
                .get(&v_name)
                .ok_or_else(|| CheckpointError::MissingArray(v_name.clone()))?;
            opt.state.insert(
                param.to_string(),
                Moments {
                    m: values.clone(),
                    v: v.1.clone(),
                },
            );
        }
    }

    Ok(LoadedCheckpoint {
        state: TrainState {
            pair: ModelPair {
                student,
                teacher,
                center_cls,
                center_patch,
                step,
                epoch,
            },
            opt,
        },
        stage,
        cfg_hash: cfg_hash_stored,
    })
}
