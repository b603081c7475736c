//! The repo's lane-set JSON format:
//!
//! ```json
//! {"format": "depth3dlane.laneset", "version": 1,
//!  "lanes": [{"score": 0.93, "category": 1, "points": [[x, y, z], ...]}]}
//! ```
//!
//! Coordinates are road-frame meters, points sorted by strictly increasing
//! `y`; `score` and `category` are optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::parse_error;
use crate::error::{with_path, Error, Result};
use crate::lane::{Lane3D, ScoredLane};

pub const LANESET_FORMAT: &str = "depth3dlane.laneset";
pub const LANESET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<i64>,
    points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneSetRepr {
    format: String,
    version: u32,
    lanes: Vec<LaneEntry>,
}

/// Lanes with optional per-lane scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneSetFile {
    pub lanes: Vec<Lane3D>,
    pub scores: Vec<Option<f64>>,
}

impl LaneSetFile {
    pub fn from_scored(lanes: &[ScoredLane]) -> Self {
        LaneSetFile {
            lanes: lanes.iter().map(|l| l.lane.clone()).collect(),
            scores: lanes.iter().map(|l| Some(l.score)).collect(),
        }
    }

    pub fn from_lanes(lanes: &[Lane3D]) -> Self {
        LaneSetFile {
            lanes: lanes.to_vec(),
            scores: vec![None; lanes.len()],
        }
    }

    /// Missing scores count as 1.
    pub fn scored(&self) -> Vec<ScoredLane> {
        self.lanes
            .iter()
            .zip(&self.scores)
            .map(|(l, s)| ScoredLane {
                lane: l.clone(),
                score: s.unwrap_or(1.0),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let repr = LaneSetRepr {
            format: LANESET_FORMAT.into(),
            version: LANESET_VERSION,
            lanes: self
                .lanes
                .iter()
                .zip(&self.scores)
                .map(|(l, s)| LaneEntry {
                    score: *s,
                    category: l.category(),
                    points: l.points().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&repr).expect("lane sets serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: LaneSetRepr = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        if repr.format != LANESET_FORMAT || repr.version != LANESET_VERSION {
            return Err(Error::Parse {
                key: Some("format".into()),
                location: super::annotations::location_at(text, 0),
                message: format!(
                    "expected format `{LANESET_FORMAT}` version {LANESET_VERSION}, got `{}` version {}",
                    repr.format, repr.version
                ),
            });
        }
        let mut out = LaneSetFile::default();
        for (k, e) in repr.lanes.into_iter().enumerate() {
            let lane = Lane3D::new(e.points, e.category).map_err(|err| Error::Parse {
                key: Some(format!("lanes[{k}].points")),
                location: super::annotations::location_at(text, 0),
                message: err.to_string(),
            })?;
            out.lanes.push(lane);
            out.scores.push(e.score);
        }
        Ok(out)
    }
}

pub fn write_lane_set(set: &LaneSetFile, path: &Path) -> Result<()> {
    with_path(path, std::fs::write(path, set.to_json()))
}

pub fn read_lane_set(path: &Path) -> Result<LaneSetFile> {
    let text = with_path(path, std::fs::read_to_string(path))?;
    LaneSetFile::from_json(&text)
}
