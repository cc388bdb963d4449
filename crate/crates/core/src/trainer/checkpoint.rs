//! Single-file checkpoints: online and target parameters, SGD momentum
//! buffers, normalization running statistics and both memory banks, plus
//! the run configuration and completed step count in a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::contrastive::MemoryBank;
use crate::error::{Error, Result};
use crate::io::{Container, Section};
use crate::layers::Module;
use crate::model::CmacModel;
use crate::Modality;

const MAGIC: &[u8; 8] = b"CMACCKP1";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    config: RunConfig,
    online: Vec<Entry>,
    target: Vec<Entry>,
    /// Online parameters that carry an SGD momentum buffer.
    momentum: Vec<String>,
    buffers: Vec<String>,
    target_buffers: Vec<String>,
    bank_v: BankMeta,
    bank_a: BankMeta,
}

/// A parsed checkpoint, ready to be restored into a freshly built model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    manifest: Manifest,
    container: Container,
}

fn bank_meta(b: &MemoryBank) -> BankMeta {
    let (_, len, cursor) = b.raw_state();
    BankMeta {
        capacity: b.capacity(),
        dim: b.dim(),
        len,
        cursor,
    }
}

fn to_container(model: &CmacModel, config: &RunConfig, step: u64) -> Container {
    let online = model.parameters();
    let target = model.target_parameters();
    let buffers = model.buffers();
    let target_buffers = model.target_buffers();
    let entry = |p: &&crate::optim::Parameter| Entry {
        name: p.name.clone(),
        shape: p.shape().to_vec(),
    };
    let manifest = Manifest {
        format: "cmac-checkpoint-v1".into(),
        step,
        config: config.clone(),
        online: online.iter().map(entry).collect(),
        target: target.iter().map(entry).collect(),
        momentum: online
            .iter()
            .filter(|p| p.momentum_buffer().is_some())
            .map(|p| p.name.clone())
            .collect(),
        buffers: buffers.iter().map(|(n, _)| n.clone()).collect(),
        target_buffers: target_buffers.iter().map(|(n, _)| n.clone()).collect(),
        bank_v: bank_meta(&model.bank_v),
        bank_a: bank_meta(&model.bank_a),
    };
    let mut c = Container::new(serde_json::to_vec(&manifest).expect("manifest serializes"));
    for p in &online {
        c.push_f64(format!("online/{}", p.name), &p.values());
    }
    for p in &online {
        if let Some(buf) = p.momentum_buffer() {
            c.push_f64(format!("momentum/{}", p.name), buf);
        }
    }
    for p in &target {
        c.push_f64(format!("target/{}", p.name), &p.values());
    }
    for (n, b) in &buffers {
        c.push_f64(format!("buffer/{n}"), b);
    }
    for (n, b) in &target_buffers {
        c.push_f64(format!("target_buffer/{n}"), b);
    }
    c.push_f64("bank_v", model.bank_v.raw_state().0);
    c.push_f64("bank_a", model.bank_a.raw_state().0);
    c
}

pub fn checkpoint_bytes(model: &CmacModel, config: &RunConfig, step: u64) -> Vec<u8> {
    to_container(model, config, step).to_bytes(MAGIC)
}

pub fn save_checkpoint(path: &Path, model: &CmacModel, config: &RunConfig, step: u64) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_container(model, config, step).write(path, MAGIC)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {path:?} not found"),
        )));
    }
    let container = Container::read(path, "checkpoint", MAGIC)?;
    let manifest: Manifest =
        serde_json::from_slice(&container.manifest).map_err(|e| Error::format("checkpoint", path, e.to_string()))?;
    manifest.config.validate()?;
    Ok(Checkpoint {
        step: manifest.step,
        config: manifest.config.clone(),
        manifest,
        container,
    })
}

impl Checkpoint {
    fn f64s(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        match self.container.section(name) {
            Some(Section::F64(v)) if v.len() == len => Ok(v.clone()),
            Some(_) => Err(Error::Contract(format!("checkpoint section {name:?} has the wrong size or kind"))),
            None => Err(Error::Contract(format!("checkpoint lacks section {name:?}"))),
        }
    }

    /// Overwrite a model built from `self.config` with the saved state.
    pub fn restore(&self, model: &mut CmacModel) -> Result<()> {
        let m = &self.manifest;
        let check = |saved: &[Entry], live: Vec<(&str, &[usize])>| -> Result<()> {
            let same = saved.len() == live.len()
                && saved.iter().zip(&live).all(|(e, (n, s))| e.name == *n && e.shape == *s);
            if same {
                Ok(())
            } else {
                Err(Error::Contract("checkpoint parameters do not match the model layout".into()))
            }
        };
        check(&m.online, model.parameters().iter().map(|p| (p.name.as_str(), p.shape())).collect())?;
        check(&m.target, model.target_parameters().iter().map(|p| (p.name.as_str(), p.shape())).collect())?;

        for p in model.parameters_mut() {
            let n = p.values().len();
            p.set_values(&self.f64s(&format!("online/{}", p.name), n)?)?;
            let buf = if m.momentum.contains(&p.name) {
                Some(self.f64s(&format!("momentum/{}", p.name), n)?)
            } else {
                None
            };
            p.set_momentum_buffer(buf)?;
        }
        for p in model.target_parameters_mut() {
            let n = p.values().len();
            p.set_values(&self.f64s(&format!("target/{}", p.name), n)?)?;
        }
        for (name, b) in model.buffers_mut() {
            *b = self.f64s(&format!("buffer/{name}"), b.len())?;
        }
        for (name, b) in model.target_buffers_mut() {
            *b = self.f64s(&format!("target_buffer/{name}"), b.len())?;
        }
        let bank = |modality: Modality, meta: &BankMeta, section: &str| -> Result<MemoryBank> {
            let slots = self.f64s(section, meta.capacity * meta.dim)?;
            MemoryBank::from_raw(modality, meta.capacity, meta.dim, slots, meta.len, meta.cursor)
        };
        model.bank_v = bank(Modality::Visual, &m.bank_v, "bank_v")?;
        model.bank_a = bank(Modality::Audio, &m.bank_a, "bank_a")?;
        Ok(())
    }
}
