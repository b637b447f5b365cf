//! Model checkpoints: the architecture manifest goes in the file header,
//! network parameters under their own paths, and optimizer state under
//! `optim/`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::fit::TrainState;
use crate::autograd::{read_checkpoint, write_checkpoint, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Architecture, CmmdModel};

const OPTIM: &str = "optim/";
const STEP: &str = "optim/step";
const EPOCH: &str = "optim/epoch";

pub fn write_model_checkpoint<W: Write>(w: W, model: &CmmdModel, state: Option<&TrainState>) -> Result<()> {
    let mut store = model.params.clone();
    if let Some(s) = state {
        for (k, t) in s.adam.m.iter() {
            store.insert(format!("{OPTIM}m/{k}"), t.clone());
        }
        for (k, t) in s.adam.v.iter() {
            store.insert(format!("{OPTIM}v/{k}"), t.clone());
        }
        store.insert(STEP, Tensor::scalar(s.adam.step as f64));
        store.insert(EPOCH, Tensor::scalar(s.epoch as f64));
    }
    write_checkpoint(w, &model.arch.manifest(), &store)
}

/// Reads a model and, when present, its optimizer state. The learning rate
/// is not stored; callers set it from their configuration.
pub fn read_model_checkpoint<R: Read>(r: R) -> Result<(CmmdModel, Option<TrainState>)> {
    let (header, store) = read_checkpoint(r)?;
    let arch = Architecture::from_manifest(&header)?;
    let mut params = ParameterStore::new();
    let (mut m, mut v) = (ParameterStore::new(), ParameterStore::new());
    let (mut step, mut epoch) = (None, None);
    for (k, t) in store.iter() {
        if let Some(rest) = k.strip_prefix(OPTIM) {
            if let Some(p) = rest.strip_prefix("m/") {
                m.insert(p, t.clone());
            } else if let Some(p) = rest.strip_prefix("v/") {
                v.insert(p, t.clone());
            } else if k == STEP {
                step = Some(t.item()? as u64);
            } else if k == EPOCH {
                epoch = Some(t.item()? as usize);
            } else {
                return Err(Error::format(format!("unknown optimizer entry `{k}`")));
            }
        } else {
            params.insert(k.clone(), t.clone());
        }
    }
    let model = CmmdModel::from_parts(arch, params)?;
    let state = match (step, epoch) {
        (Some(step), Some(epoch)) => {
            let mut adam = AdamState::new(&model.params, 0.0);
            for (k, t) in model.params.iter() {
                let mk = m.get(k)?;
                let vk = v.get(k)?;
                if mk.shape() != t.shape() || vk.shape() != t.shape() {
                    return Err(Error::format(format!("optimizer moments for `{k}` have the wrong shape")));
                }
            }
            if m.len() != model.params.len() || v.len() != model.params.len() {
                return Err(Error::format("optimizer moments do not match the parameters"));
            }
            adam.m = m;
            adam.v = v;
            adam.step = step;
            Some(TrainState { adam, epoch })
        }
        (None, None) if m.is_empty() && v.is_empty() => None,
        _ => return Err(Error::format("incomplete optimizer state")),
    };
    Ok((model, state))
}

pub fn save_checkpoint(path: &Path, model: &CmmdModel, state: Option<&TrainState>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    // Write beside the target and rename so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    {
        let f = BufWriter::new(fs::File::create(&tmp)?);
        write_model_checkpoint(f, model, state)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CmmdModel, Option<TrainState>)> {
    read_model_checkpoint(BufReader::new(fs::File::open(path)?))
}
