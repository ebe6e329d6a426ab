//! On-disk dataset layout: one directory per scene plus `manifest.json`.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/scene_0000/{hr,lr,psr}.png
//! <dir>/scene_0000/map.tnsr      continuous texture map [H, W]
//! <dir>/scene_0000/mask.tnsr     latent mask [H/8, W/8] (+ mask.png preview)
//! <dir>/scene_0000/region.tnsr   ground-truth rich regions [H, W]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DegradeConfig, DegradeDraw, SceneDistribution, SceneSpec, SceneTuple};
use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_image, Image};
use crate::rtdm::{BinaryMask, Resolution, RtdmConfig, TextureMap};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub dir: String,
    pub seed: u64,
    pub tau: f64,
    pub draw: DegradeDraw,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub scenes: Vec<SceneRecord>,
    pub distribution: SceneDistribution,
    pub degrade: DegradeConfig,
    pub rtdm: RtdmConfig,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn save_dataset<T: Scalar>(
    dir: impl AsRef<Path>,
    scenes: &[SceneTuple<T>],
    master_seed: u64,
    distribution: &SceneDistribution,
    degrade: &DegradeConfig,
    rtdm: &RtdmConfig,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        let name = format!("scene_{:04}", s.index);
        let sd = dir.join(&name);
        create_dir(&sd)?;
        save_image(&s.hr, sd.join("hr.png"))?;
        save_image(&s.lr, sd.join("lr.png"))?;
        save_image(&s.psr, sd.join("psr.png"))?;
        s.map.save(sd.join("map.tnsr"))?;
        s.mask.save(sd.join("mask.tnsr"))?;
        save_image(&s.mask.to_image::<f32>(), sd.join("mask.png"))?;
        s.region_mask.save(sd.join("region.tnsr"))?;
        records.push(SceneRecord {
            index: s.index,
            dir: name,
            seed: s.seed,
            tau: s.tau,
            draw: s.draw,
            spec: s.spec.clone(),
        });
    }
    let manifest = DatasetManifest {
        master_seed,
        scenes: records,
        distribution: distribution.clone(),
        degrade: degrade.clone(),
        rtdm: rtdm.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A scene as read back from disk (8-bit quantized images).
#[derive(Clone, Debug)]
pub struct StoredScene<T: Scalar = f32> {
    pub record: SceneRecord,
    pub hr: Image<T>,
    pub lr: Image<T>,
    pub psr: Image<T>,
    pub map: TextureMap<T>,
    pub mask: BinaryMask,
    pub region_mask: BinaryMask,
}

pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<StoredScene<T>>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|r| {
            let sd: PathBuf = dir.join(&r.dir);
            Ok(StoredScene {
                record: r.clone(),
                hr: load_image(sd.join("hr.png"))?,
                lr: load_image(sd.join("lr.png"))?,
                psr: load_image(sd.join("psr.png"))?,
                map: TextureMap::load(sd.join("map.tnsr"))?,
                mask: BinaryMask::load(sd.join("mask.tnsr"), Resolution::Latent)?,
                region_mask: BinaryMask::load(sd.join("region.tnsr"), Resolution::Pixel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}
