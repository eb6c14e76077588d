//! Single-file checkpoints: magic bytes, a format version, a JSON header
//! (run setup, counters, logs, array directory), then the arrays as raw
//! little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::trainer::{LogRow, TrainSetup, TrainState};

const MAGIC: &[u8; 8] = b"SCRBSEG\0";
pub const FORMAT_VERSION: u32 = 1;
/// Array key of the memory bank.
pub const MEMORY_BANK_KEY: &str = "memory_bank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    AdamM,
    AdamV,
    MemoryBank,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the data section.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    setup: TrainSetup,
    epoch: usize,
    step: usize,
    adam_step: u64,
    bank_alpha: f64,
    bank_initialized: Vec<bool>,
    epoch_log: Vec<LogRow>,
    step_log: Vec<LogRow>,
    arrays: Vec<ArrayEntry>,
}

/// Writes `setup` and `state` to `path`.
pub fn save(path: &Path, setup: &TrainSetup, state: &TrainState) -> Result<()> {
    let mut arrays = Vec::new();
    let mut data: Vec<&[f64]> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, group: Group, shape: Vec<usize>, values: &'_ [f64], arrays: &mut Vec<ArrayEntry>| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            group,
            shape,
            offset,
            len: values.len(),
        });
        offset += values.len();
    };
    let params = state.model.params();
    for id in params.ids() {
        push(params.name(id), Group::Param, params.shape(id).to_vec(), params.get(id), &mut arrays);
        data.push(params.get(id));
    }
    let buffers = state.model.buffers();
    for id in buffers.ids() {
        push(buffers.name(id), Group::Buffer, buffers.shape(id).to_vec(), buffers.get(id), &mut arrays);
        data.push(buffers.get(id));
    }
    for (i, id) in params.ids().enumerate() {
        let shape = params.shape(id).to_vec();
        push(params.name(id), Group::AdamM, shape.clone(), &state.optimizer.m[i], &mut arrays);
        data.push(&state.optimizer.m[i]);
        push(params.name(id), Group::AdamV, shape, &state.optimizer.v[i], &mut arrays);
        data.push(&state.optimizer.v[i]);
    }
    let bank = &state.bank;
    push(MEMORY_BANK_KEY, Group::MemoryBank, vec![bank.num_classes(), bank.dim()], bank.as_slice(), &mut arrays);
    data.push(bank.as_slice());

    let header = Header {
        format_version: FORMAT_VERSION,
        setup: setup.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_step: state.optimizer.step,
        bank_alpha: bank.alpha(),
        bank_initialized: bank.initialized().to_vec(),
        epoch_log: state.epoch_log.clone(),
        step_log: state.step_log.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;

    // Write to a sibling temp file, then rename, so a crash never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("ckpt.tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&tmp, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for chunk in data {
        for v in chunk {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loaded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub setup: TrainSetup,
    pub state: TrainState,
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt(path, "not a checkpoint"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "not a checkpoint"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| corrupt(path, "truncated header"))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(corrupt(path, &format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| corrupt(path, "truncated header"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if raw.len() != total * 8 {
        return Err(corrupt(path, "data section length does not match the array directory"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut bank_rows = None;
    for a in &header.arrays {
        if a.shape.iter().product::<usize>() != a.len || a.offset + a.len > values.len() {
            return Err(corrupt(path, &format!("array `{}` has an inconsistent shape", a.name)));
        }
        let slice = values[a.offset..a.offset + a.len].to_vec();
        match a.group {
            Group::Param => {
                if params.find(&a.name).is_some() {
                    return Err(corrupt(path, &format!("duplicate parameter `{}`", a.name)));
                }
                params.add(a.name.clone(), a.shape.clone(), slice);
            }
            Group::Buffer => {
                if buffers.find(&a.name).is_some() {
                    return Err(corrupt(path, &format!("duplicate buffer `{}`", a.name)));
                }
                buffers.add(a.name.clone(), a.shape.clone(), slice);
            }
            Group::AdamM => m.push((a.name.clone(), slice)),
            Group::AdamV => v.push((a.name.clone(), slice)),
            Group::MemoryBank => bank_rows = Some(slice),
        }
    }
    let setup = header.setup;
    let model = Backbone::from_parts(setup.backbone.clone(), params, buffers)
        .map_err(|e| corrupt(path, &format!("parameters do not fit the stored config: {e}")))?;
    let order: Vec<String> = model.params().ids().map(|id| model.params().name(id).to_string()).collect();
    let pick = |list: Vec<(String, Vec<f64>)>, what: &str| -> Result<Vec<Vec<f64>>> {
        if list.len() != order.len() || list.iter().zip(&order).any(|((n, _), o)| n != o) {
            return Err(corrupt(path, &format!("{what} moments do not match the parameters")));
        }
        Ok(list.into_iter().map(|(_, s)| s).collect())
    };
    let optimizer = Adam {
        cfg: setup.train.optimizer.clone(),
        step: header.adam_step,
        m: pick(m, "first")?,
        v: pick(v, "second")?,
    };
    let bank_rows = bank_rows.ok_or_else(|| corrupt(path, "missing memory bank"))?;
    let bank = MemoryBank::from_rows(
        setup.backbone.num_classes,
        setup.backbone.hidden_dim,
        header.bank_alpha,
        bank_rows,
        header.bank_initialized,
    )?;
    Ok(Loaded {
        state: TrainState {
            epoch: header.epoch,
            step: header.step,
            model,
            optimizer,
            bank,
            epoch_log: header.epoch_log,
            step_log: header.step_log,
        },
        setup,
    })
}
