//! Readers for OpenLane per-frame JSON and Apollo-synthetic JSON-lines
//! annotations. Every failure carries the byte offset, line and column
//! where it was detected.

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use serde_json::value::RawValue;

use crate::error::{Error, Location, Result};
use crate::geometry::CameraRig;
use crate::lane::Lane3D;

/// Fixed Apollo-synthetic camera: 1080×1920, f = 2015 px.
pub const APOLLO_INTRINSICS: [f64; 4] = [2015.0, 2015.0, 960.0, 540.0];
pub const APOLLO_IMAGE_SIZE: (usize, usize) = (1080, 1920);
/// OpenLane front camera resolution, used when the file does not say.
pub const OPENLANE_IMAGE_SIZE: (usize, usize) = (1280, 1920);

/// Lanes in the road frame plus the frame's camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAnnotation {
    pub lanes: Vec<Lane3D>,
    pub rig: CameraRig,
    /// Lanes dropped for having fewer than 2 visible points.
    pub skipped: usize,
}

pub(crate) fn location_at(text: &str, offset: usize) -> Location {
    let offset = offset.min(text.len());
    let before = &text.as_bytes()[..offset];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let line_start = before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    Location {
        offset,
        line,
        column: offset - line_start + 1,
    }
}

fn offset_of(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let full = e.to_string();
    let message = match full.rfind(" at line ") {
        Some(p) => full[..p].to_string(),
        None => full,
    };
    let key = message.split('`').nth(1).map(str::to_string);
    Error::Parse {
        key,
        location: location_at(text, offset_of(text, e.line(), e.column())),
        message,
    }
}

/// Waymo-style camera axes (x forward, y left, z up) from optical axes.
fn optical_to_waymo() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Road frame (x right, y forward, z up) from vehicle axes (x forward, y left, z up).
fn vehicle_to_road() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

struct OpenLaneLine {
    points: Vec<[f64; 3]>,
    visibility: Vec<f64>,
    category: Option<i64>,
}

#[derive(Deserialize)]
struct RawOpenLaneLine {
    xyz: Vec<Vec<f64>>,
    visibility: Vec<f64>,
    #[serde(default)]
    category: Option<i64>,
}

impl RawOpenLaneLine {
    /// Shape checks; failures carry the offending key.
    fn check(self) -> std::result::Result<OpenLaneLine, (&'static str, String)> {
        let r = self;
        if r.xyz.len() != 3 {
            return Err(("xyz", format!("expected 3 rows, got {}", r.xyz.len())));
        }
        let n = r.xyz[0].len();
        if r.xyz[1].len() != n || r.xyz[2].len() != n {
            return Err(("xyz", "rows differ in length".into()));
        }
        if r.visibility.len() != n {
            return Err(("visibility", format!("{} entries for {n} points", r.visibility.len())));
        }
        Ok(OpenLaneLine {
            points: (0..n).map(|i| [r.xyz[0][i], r.xyz[1][i], r.xyz[2][i]]).collect(),
            visibility: r.visibility,
            category: r.category,
        })
    }
}

#[derive(Deserialize)]
struct OpenLaneFrame<'a> {
    intrinsic: [[f64; 3]; 3],
    extrinsic: [[f64; 4]; 4],
    #[serde(borrow)]
    lane_lines: Vec<&'a RawValue>,
    #[serde(default)]
    image_height: Option<usize>,
    #[serde(default)]
    image_width: Option<usize>,
}

/// Parse one element of `lane_lines`; errors are located inside `text`.
fn parse_lane_line(text: &str, raw: &RawValue) -> Result<OpenLaneLine> {
    let sub = raw.get();
    let base = sub.as_ptr() as usize - text.as_ptr() as usize;
    let r: RawOpenLaneLine = serde_json::from_str(sub).map_err(|e| {
        let inner = parse_error(sub, &e);
        match inner {
            Error::Parse { key, location, message } => Error::Parse {
                key,
                location: location_at(text, base + location.offset),
                message,
            },
            other => other,
        }
    })?;
    r.check().map_err(|(key, message)| Error::Parse {
        key: Some(key.into()),
        location: location_at(text, base),
        message: format!("invalid field `{key}`: {message}"),
    })
}

/// Parse one OpenLane frame.
///
/// Lane `xyz` is read in the camera's Waymo-style axes; `extrinsic` maps
/// camera to vehicle coordinates, whose origin is on the ground below the
/// rear axle. Points with visibility ≤ 0.5 are dropped.
pub fn parse_openlane(text: &str) -> Result<ParsedAnnotation> {
    let frame: OpenLaneFrame = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    let lines = frame
        .lane_lines
        .iter()
        .map(|raw| parse_lane_line(text, raw))
        .collect::<Result<Vec<_>>>()?;
    let k = Matrix3::from_fn(|r, c| frame.intrinsic[r][c]);
    let r_vc = Matrix3::from_fn(|r, c| frame.extrinsic[r][c]);
    let t_vc = Vector3::new(frame.extrinsic[0][3], frame.extrinsic[1][3], frame.extrinsic[2][3]);
    let b = vehicle_to_road();
    let rotation = (b * r_vc * optical_to_waymo()).transpose();
    let size = (
        frame.image_height.unwrap_or(OPENLANE_IMAGE_SIZE.0),
        frame.image_width.unwrap_or(OPENLANE_IMAGE_SIZE.1),
    );
    let rig = CameraRig::new(k, rotation, b * t_vc, size).map_err(|e| Error::Parse {
        key: Some("extrinsic".into()),
        location: location_at(text, 0),
        message: e.to_string(),
    })?;
    let mut lanes = Vec::new();
    let mut skipped = 0;
    for line in lines {
        let pts: Vec<[f64; 3]> = line
            .points
            .iter()
            .zip(&line.visibility)
            .filter(|(_, &v)| v > 0.5)
            .map(|(p, _)| {
                let q = b * (r_vc * Vector3::from(*p) + t_vc);
                [q.x, q.y, q.z]
            })
            .collect();
        match Lane3D::from_unordered(pts, line.category) {
            Ok(l) => lanes.push(l),
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} OpenLane lane(s) with fewer than 2 visible points");
    }
    Ok(ParsedAnnotation { lanes, rig, skipped })
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ApolloFrame {
    #[serde(rename = "cam_height")]
    cam_height: f64,
    /// Radians, positive looking down.
    #[serde(rename = "cam_pitch")]
    cam_pitch: f64,
    lane_lines: Vec<Vec<[f64; 3]>>,
    #[serde(default, rename = "laneLines_visibility")]
    lane_lines_visibility: Option<Vec<Vec<f64>>>,
}

/// Parse an Apollo-synthetic JSON-lines file (one frame per non-empty line).
/// Lane points are already in the road frame.
pub fn parse_apollo(text: &str) -> Result<Vec<ParsedAnnotation>> {
    let mut out = Vec::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let line_start = start;
        start += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let shift = |err: Error| match err {
            Error::Parse { key, location, message } => Error::Parse {
                key,
                location: location_at(text, line_start + location.offset),
                message,
            },
            other => other,
        };
        let frame: ApolloFrame = serde_json::from_str(line).map_err(|e| shift(parse_error(line, &e)))?;
        if let Some(vis) = &frame.lane_lines_visibility {
            let bad = vis.len() != frame.lane_lines.len()
                || vis.iter().zip(&frame.lane_lines).any(|(v, l)| v.len() != l.len());
            if bad {
                return Err(Error::Parse {
                    key: Some("laneLines_visibility".into()),
                    location: location_at(text, line_start),
                    message: "visibility does not match laneLines in shape".into(),
                });
            }
        }
        let [fx, fy, cx, cy] = APOLLO_INTRINSICS;
        let rig = CameraRig::from_params(
            fx,
            fy,
            cx,
            cy,
            APOLLO_IMAGE_SIZE,
            0.0,
            frame.cam_pitch.to_degrees(),
            0.0,
            [0.0, 0.0, frame.cam_height],
        )
        .map_err(|e| Error::Parse {
            key: Some("cam_height".into()),
            location: location_at(text, line_start),
            message: e.to_string(),
        })?;
        let mut lanes = Vec::new();
        let mut skipped = 0;
        for (k, pts) in frame.lane_lines.iter().enumerate() {
            let visible: Vec<[f64; 3]> = match &frame.lane_lines_visibility {
                Some(vis) => pts.iter().zip(&vis[k]).filter(|(_, &v)| v > 0.5).map(|(p, _)| *p).collect(),
                None => pts.clone(),
            };
            match Lane3D::from_unordered(visible, None) {
                Ok(l) => lanes.push(l),
                Err(_) => skipped += 1,
            }
        }
        out.push(ParsedAnnotation { lanes, rig, skipped });
    }
    Ok(out)
}
