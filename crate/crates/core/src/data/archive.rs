//! Sample archive: one directory per split holding, per sample `NNNNN`,
//! `NNNNN.png` (image), `NNNNN.depth` (raw inverse depth),
//! `NNNNN.lanes.json` (lane set) and `NNNNN.rig.toml` (camera), plus an
//! `index.json` listing sample names and content ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::laneset::{read_lane_set, write_lane_set, LaneSetFile};
use super::synth::Sample;
use crate::distill::content_hash;
use crate::error::{with_path, Error, Result};
use crate::geometry::{CameraRig, RigConfig};
use crate::lane::Lane3D;
use crate::raster::Raster;

/// A sample as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    pub name: String,
    pub id: String,
    pub image: Raster,
    pub depth: Raster,
    pub lanes: Vec<Lane3D>,
    pub rig: CameraRig,
}

impl SplitEntry {
    pub fn from_sample(name: impl Into<String>, s: &Sample) -> Self {
        SplitEntry {
            name: name.into(),
            id: s.id.clone(),
            image: s.image.clone(),
            depth: s.depth.clone(),
            lanes: s.lanes.clone(),
            rig: s.rig.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    id: String,
}

pub fn save_split(dir: &Path, entries: &[SplitEntry]) -> Result<()> {
    with_path(dir, std::fs::create_dir_all(dir))?;
    let mut index = Vec::new();
    for e in entries {
        e.image.save_png(&dir.join(format!("{}.png", e.name)))?;
        e.depth.write_raw(&dir.join(format!("{}.depth", e.name)))?;
        write_lane_set(&LaneSetFile::from_lanes(&e.lanes), &dir.join(format!("{}.lanes.json", e.name)))?;
        let rig = dir.join(format!("{}.rig.toml", e.name));
        with_path(&rig, std::fs::write(&rig, e.rig.to_config().to_toml()))?;
        index.push(IndexEntry {
            name: e.name.clone(),
            id: e.id.clone(),
        });
    }
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    with_path(&path, std::fs::write(&path, text))
}

pub fn load_split(dir: &Path) -> Result<Vec<SplitEntry>> {
    let path = dir.join("index.json");
    let text = with_path(&path, std::fs::read_to_string(&path))?;
    let index: Vec<IndexEntry> =
        serde_json::from_str(&text).map_err(|e| super::annotations::parse_error(&text, &e))?;
    index
        .into_iter()
        .map(|ie| {
            let image = Raster::load_rgb(&dir.join(format!("{}.png", ie.name)))?;
            let id = hex::encode(content_hash(&image));
            if id != ie.id {
                return Err(Error::Archive(format!(
                    "{}: image content does not match its recorded id",
                    ie.name
                )));
            }
            let depth = Raster::read_raw(&dir.join(format!("{}.depth", ie.name)))?;
            let lanes = read_lane_set(&dir.join(format!("{}.lanes.json", ie.name)))?.lanes;
            let rig_path = dir.join(format!("{}.rig.toml", ie.name));
            let rig = RigConfig::from_toml(&with_path(&rig_path, std::fs::read_to_string(&rig_path))?)?.build()?;
            Ok(SplitEntry {
                name: ie.name,
                id,
                image,
                depth,
                lanes,
                rig,
            })
        })
        .collect()
}
