//! Dataset files: a tensor container with `scene/{i}/image`,
//! `scene/{i}/stuff` and `scene/{i}/mask/{j}` records, plus a
//! `key = value` manifest of seeds, classes and boxes next to it.

use std::path::{Path, PathBuf};

use crate::data::scene::{
    generate_scene, Instance, SceneConfig, SceneRecord, ShapeClass, STUFF_NAMES, THING_NAMES,
};
use crate::error::{Error, Result};
use crate::numerics::container::{self, DType, Record};
use crate::numerics::Tensor;
use crate::parallel::map_indexed;
use crate::textconf::{parse_list, KeyValues};

/// `data.splr` keeps its manifest in `data.splr.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Scenes for `seeds`, generated in parallel, in seed order.
pub fn generate_scenes(seeds: &[u64], cfg: &SceneConfig) -> Result<Vec<SceneRecord>> {
    map_indexed(seeds.len(), |i| generate_scene(seeds[i], cfg))
        .into_iter()
        .collect()
}

pub fn export_scenes(scenes: &[SceneRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut records = Vec::new();
    let mut kv = KeyValues::new();
    kv.set("things", THING_NAMES.join(","));
    kv.set("stuff", STUFF_NAMES.join(","));
    kv.set("scenes", scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        records.push(Record::new(
            format!("scene/{i}/image"),
            DType::F32,
            s.image.clone(),
        ));
        let stuff = Tensor::new(
            [s.height, s.width],
            s.stuff.iter().map(|&v| v as f64).collect(),
        )?;
        records.push(Record::new(format!("scene/{i}/stuff"), DType::F32, stuff));
        kv.set(&format!("scene.{i}.seed"), s.seed);
        kv.set(&format!("scene.{i}.instances"), s.instances.len());
        for (j, inst) in s.instances.iter().enumerate() {
            records.push(Record::new(
                format!("scene/{i}/mask/{j}"),
                DType::F32,
                inst.mask.clone(),
            ));
            kv.set(
                &format!("scene.{i}.instance.{j}.class"),
                THING_NAMES[inst.class.id()],
            );
            let b = inst
                .bbox
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            kv.set(&format!("scene.{i}.instance.{j}.box"), b);
        }
    }
    container::write(path, &records)?;
    std::fs::write(manifest_path(path), kv.render())?;
    Ok(())
}

pub fn export_dataset(
    seeds: &[u64],
    cfg: &SceneConfig,
    path: impl AsRef<Path>,
) -> Result<Vec<SceneRecord>> {
    let scenes = generate_scenes(seeds, cfg)?;
    export_scenes(&scenes, path)?;
    Ok(scenes)
}

pub fn import_dataset(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let path = path.as_ref();
    let records = container::read(path)?;
    let kv = KeyValues::parse(&std::fs::read_to_string(manifest_path(path))?)?;
    let n: usize = kv.require("scenes")?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let image = container::find(&records, &format!("scene/{i}/image"))?
            .tensor
            .clone();
        let is = image.shape().to_vec();
        if is.len() != 3 || is[2] != 3 {
            return Err(Error::RecordMismatch {
                name: format!("scene/{i}/image"),
                detail: format!("shape {is:?}"),
            });
        }
        let (h, w) = (is[0], is[1]);
        let stuff_t = &container::find(&records, &format!("scene/{i}/stuff"))?.tensor;
        if stuff_t.shape() != [h, w] {
            return Err(Error::RecordMismatch {
                name: format!("scene/{i}/stuff"),
                detail: format!("shape {:?}, image is {h}x{w}", stuff_t.shape()),
            });
        }
        let stuff = stuff_t.data().iter().map(|&v| v as u8).collect();
        let count: usize = kv.require(&format!("scene.{i}.instances"))?;
        let mut instances = Vec::with_capacity(count);
        for j in 0..count {
            let name = format!("scene/{i}/mask/{j}");
            let mask = container::find(&records, &name)?.tensor.clone();
            if mask.shape() != [h, w] {
                return Err(Error::RecordMismatch {
                    name,
                    detail: format!("shape {:?}", mask.shape()),
                });
            }
            let cname: String = kv.require(&format!("scene.{i}.instance.{j}.class"))?;
            let class = THING_NAMES
                .iter()
                .position(|c| *c == cname)
                .ok_or_else(|| Error::Format(format!("unknown class {cname:?} in manifest")))
                .and_then(ShapeClass::from_id)?;
            let b: Vec<f64> =
                parse_list(&kv.require::<String>(&format!("scene.{i}.instance.{j}.box"))?)?;
            let bbox: [f64; 4] = b.try_into().map_err(|_| {
                Error::Format(format!("scene {i} instance {j}: box needs 4 values"))
            })?;
            instances.push(Instance { class, bbox, mask });
        }
        scenes.push(SceneRecord {
            seed: kv.require(&format!("scene.{i}.seed"))?,
            image,
            instances,
            stuff,
            height: h,
            width: w,
        });
    }
    Ok(scenes)
}
