//! Parameter checkpoints: a tensor container (f32) plus a `key = value`
//! sidecar holding the model config.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::container::{self, DType, Record};
use crate::textconf::KeyValues;

/// `model.splr` keeps its config in `model.splr.conf`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".conf");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<Record> = model
        .store
        .iter()
        .map(|(_, p)| Record::new(p.name.clone(), DType::F32, p.value.clone()))
        .collect();
    container::write(path, &records)?;
    std::fs::write(sidecar_path(path), model.config.to_kv().render())?;
    Ok(())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(sidecar_path(path.as_ref()))?;
    ModelConfig::from_kv(&KeyValues::parse(&text)?)
}

/// Rebuilds the model from the sidecar and fills every parameter, checking
/// names and shapes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let config = read_config(path)?;
    let records = container::read(path)?;
    let mut model = Model::new(config, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let rec = container::find(&records, &name)?;
        let want = model.store.value(id).shape().to_vec();
        if rec.tensor.shape() != want.as_slice() {
            return Err(Error::RecordMismatch {
                name,
                detail: format!("shape {:?}, model expects {want:?}", rec.tensor.shape()),
            });
        }
        *model.store.value_mut(id) = rec.tensor.clone();
    }
    if let Some(extra) = records.iter().find(|r| model.store.id(&r.name).is_none()) {
        return Err(Error::RecordMismatch {
            name: extra.name.clone(),
            detail: "not a parameter of this model".into(),
        });
    }
    Ok(model)
}

/// As [`load_checkpoint`], refusing a checkpoint whose config differs.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let found = read_config(path.as_ref())?;
    if &found != expected {
        return Err(Error::Config(format!(
            "checkpoint config differs from the requested one:\n{}",
            found.to_kv().render()
        )));
    }
    load_checkpoint(path)
}
