//! Checkpoint directory:
//!
//! ```text
//! manifest.json              configs, epoch, best validation Dice, names
//! params/<dotted.name>.axtn  f32 weights
//! optim/{m,v}/<name>.axtn    Adam moments, when saved
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{AxUNet, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::io;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "axunet-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Zero-based epoch after which these weights were taken.
    pub epoch: usize,
    pub best_val_dice: f64,
    pub train: Option<TrainConfig>,
    pub adam: Option<AdamState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    best_val_dice: f64,
    adam_step: Option<u64>,
    params: Vec<String>,
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint { model, epoch: 0, best_val_dice: 0.0, train: None, adam: None }
    }

    /// Writes the directory; stale parameter files from earlier saves are removed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params_dir = dir.join("params");
        let optim_dir = dir.join("optim");
        reset_dir(&params_dir)?;
        reset_dir(&optim_dir)?;
        for (name, t) in self.model.params.iter() {
            io::write(params_dir.join(format!("{name}.axtn")), t)?;
        }
        if let Some(adam) = &self.adam {
            for (sub, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for (name, t) in moments {
                    io::write(optim_dir.join(sub).join(format!("{name}.axtn")), t)?;
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_val_dice: self.best_val_dice,
            adam_step: self.adam.as_ref().map(|a| a.step),
            params: self.model.params.names().map(str::to_string).collect(),
        };
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::Data(format!("no checkpoint at {} (missing {MANIFEST})", dir.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::format(&path, format!("unsupported checkpoint {} v{}", m.format, m.version)));
        }
        let arch = AxUNet::new(m.model)?;
        let mut params = ParamStore::new();
        for name in &m.params {
            params.insert(name.clone(), io::read(dir.join("params").join(format!("{name}.axtn")))?);
        }
        params
            .validate(&arch.param_specs())
            .map_err(|e| Error::Config(format!("checkpoint does not match its architecture: {e}")))?;
        let adam = match m.adam_step {
            None => None,
            Some(step) => {
                let mut st = AdamState { step, m: Default::default(), v: Default::default() };
                for name in &m.params {
                    st.m.insert(name.clone(), io::read(dir.join("optim/m").join(format!("{name}.axtn")))?);
                    st.v.insert(name.clone(), io::read(dir.join("optim/v").join(format!("{name}.axtn")))?);
                }
                Some(st)
            }
        };
        Ok(Checkpoint { model: Model::from_parts(arch, params)?, epoch: m.epoch, best_val_dice: m.best_val_dice, train: m.train, adam })
    }
}
