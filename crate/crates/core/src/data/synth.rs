//! Parametric road scenes rendered by ray marching against a height field.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::content_hash;
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, RigConfig};
use crate::lane::Lane3D;
use crate::raster::Raster;

/// Stored depth is `min(1, DEPTH_REF / depth_m)`; 0 where nothing is hit.
pub const DEPTH_REF: f64 = 2.0;
const MAX_RANGE: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub lane_count: (usize, usize),
    pub lane_spacing: f64,
    pub offset_jitter: f64,
    /// Range of the quadratic coefficient of `x(y)` (1/m).
    pub curvature: (f64, f64),
    /// Range of the cubic coefficient of `x(y)` (1/m²).
    pub curvature_rate: (f64, f64),
    /// Range of `|a|` in `z = a·sin(2πy/λ)`; the sign is drawn separately.
    pub slope_amplitude: (f64, f64),
    pub slope_wavelength: (f64, f64),
    pub mark_width: f64,
    pub texture_amplitude: f64,
    pub texture_cell: f64,
    pub supersample: usize,
    pub rig: RigConfig,
    pub pitch_jitter_deg: f64,
    pub height_jitter: f64,
    /// Longitudinal extent and spacing of ground-truth polylines.
    pub gt_y_range: (f64, f64),
    pub gt_step: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            lane_count: (2, 4),
            lane_spacing: 3.5,
            offset_jitter: 0.5,
            curvature: (-2e-4, 2e-4),
            curvature_rate: (-1e-6, 1e-6),
            slope_amplitude: (0.0, 2.0),
            slope_wavelength: (150.0, 300.0),
            mark_width: 0.15,
            texture_amplitude: 0.05,
            texture_cell: 0.25,
            supersample: 2,
            rig: CameraRig::desk_default().to_config(),
            pitch_jitter_deg: 0.0,
            height_jitter: 0.0,
            gt_y_range: (3.0, 103.0),
            gt_step: 0.5,
        }
    }
}

impl SceneConfig {
    /// Straight, flat lanes only.
    pub fn flat_straight() -> Self {
        SceneConfig {
            curvature: (0.0, 0.0),
            curvature_rate: (0.0, 0.0),
            slope_amplitude: (0.0, 0.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |k: &str, r: (f64, f64)| {
            if r.0 <= r.1 && r.0.is_finite() && r.1.is_finite() {
                Ok(())
            } else {
                Err(Error::config(k, format!("range ({}, {}) is not ordered", r.0, r.1)))
            }
        };
        ordered("scene.curvature", self.curvature)?;
        ordered("scene.curvature_rate", self.curvature_rate)?;
        ordered("scene.slope_amplitude", self.slope_amplitude)?;
        ordered("scene.slope_wavelength", self.slope_wavelength)?;
        ordered("scene.gt_y_range", self.gt_y_range)?;
        if self.lane_count.0 == 0 || self.lane_count.0 > self.lane_count.1 {
            return Err(Error::config("scene.lane_count", "needs 1 ≤ min ≤ max"));
        }
        if self.slope_amplitude.0 < 0.0 || self.slope_wavelength.0 <= 0.0 {
            return Err(Error::config("scene.slope_amplitude", "amplitudes must be ≥ 0 and wavelengths > 0"));
        }
        if !(self.lane_spacing > 0.0 && self.mark_width > 0.0 && self.texture_cell > 0.0 && self.gt_step > 0.0) {
            return Err(Error::config("scene.lane_spacing", "spacings and widths must be positive"));
        }
        if self.supersample == 0 {
            return Err(Error::config("scene.supersample", "must be at least 1"));
        }
        self.rig.build().map(|_| ())
    }
}

/// Parameters drawn for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub offsets: Vec<f64>,
    pub c2: f64,
    pub c3: f64,
    pub amplitude: f64,
    pub wavelength: f64,
    pub texture_seed: u64,
}

impl SceneParams {
    pub fn lane_x(&self, lane: usize, y: f64) -> f64 {
        self.offsets[lane] + self.c2 * y * y + self.c3 * y * y * y
    }

    pub fn road_z(&self, y: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        self.amplitude * (std::f64::consts::TAU * y / self.wavelength).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 3 × H × W in `[0, 1]`, quantized to 8-bit levels.
    pub image: Raster,
    /// 1 × H × W normalized inverse depth.
    pub depth: Raster,
    pub lanes: Vec<Lane3D>,
    pub rig: CameraRig,
    /// Hex SHA-256 of the image.
    pub id: String,
    pub params: SceneParams,
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

pub fn draw_params(config: &SceneConfig, rng: &mut ChaCha8Rng) -> SceneParams {
    let n = rng.random_range(config.lane_count.0..=config.lane_count.1);
    let jitter = if config.offset_jitter > 0.0 {
        rng.random_range(-config.offset_jitter..=config.offset_jitter)
    } else {
        0.0
    };
    let offsets = (0..n)
        .map(|k| (k as f64 - (n - 1) as f64 / 2.0) * config.lane_spacing + jitter)
        .collect();
    let c2 = draw(rng, config.curvature);
    let c3 = draw(rng, config.curvature_rate);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let amplitude = sign * draw(rng, config.slope_amplitude);
    let wavelength = draw(rng, config.slope_wavelength);
    SceneParams {
        offsets,
        c2,
        c3,
        amplitude,
        wavelength,
        texture_seed: rng.random(),
    }
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[-1, 1]`.
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let a = hash2(ix, iy, seed) * (1.0 - tx) + hash2(ix + 1, iy, seed) * tx;
    let b = hash2(ix, iy + 1, seed) * (1.0 - tx) + hash2(ix + 1, iy + 1, seed) * tx;
    2.0 * (a * (1.0 - ty) + b * ty) - 1.0
}

/// First intersection of `origin + t·dir` with the road surface.
pub fn march(origin: &Vector3<f64>, dir: &Vector3<f64>, params: &SceneParams) -> Option<Vector3<f64>> {
    let above = |t: f64| {
        let p = origin + dir * t;
        p.z - params.road_z(p.y)
    };
    let horizontal = dir.x.hypot(dir.y).max(1e-12);
    let bound = params.amplitude.abs();
    let mut t0 = 0.0;
    if above(0.0) <= 0.0 {
        return None;
    }
    loop {
        let p = origin + dir * t0;
        if dir.z >= 0.0 && p.z > bound {
            return None;
        }
        let dist = (p - origin).xy().norm();
        if dist > MAX_RANGE {
            return None;
        }
        // step of 0.2 m plus 1% of the distance travelled, in ground distance
        let t1 = t0 + (0.2 + 0.01 * dist) / horizontal;
        let f1 = above(t1);
        if f1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if above(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let p = origin + dir * hi;
            return Some(Vector3::new(p.x, p.y, params.road_z(p.y)));
        }
        t0 = t1;
    }
}

fn shade(p: &Vector3<f64>, params: &SceneParams, config: &SceneConfig) -> [f64; 3] {
    let noise = config.texture_amplitude * value_noise(p.x, p.y, config.texture_cell, params.texture_seed);
    let half = config.mark_width / 2.0;
    let n = params.offsets.len();
    let left = params.lane_x(0, p.y) - 1.5;
    let right = params.lane_x(n - 1, p.y) + 1.5;
    if (0..n).any(|k| (p.x - params.lane_x(k, p.y)).abs() <= half) {
        let v = 0.9 + 0.5 * noise;
        return [v, v, 0.95 * v];
    }
    if p.x < left || p.x > right {
        return [0.25 + noise, 0.4 + noise, 0.2 + noise];
    }
    let v = 0.35 + noise;
    [v, v, v]
}

fn sky(v: f64, height: usize) -> [f64; 3] {
    let t = v / height as f64;
    [0.55 + 0.2 * t, 0.7 + 0.15 * t, 0.9]
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Camera-centered optical depth of a road point.
fn optical_depth(rig: &CameraRig, p: &Vector3<f64>) -> f64 {
    rig.to_camera(p).z
}

/// Whether the straight segment from the camera to `p` stays above the road.
fn visible(rig: &CameraRig, p: &Vector3<f64>, params: &SceneParams) -> bool {
    let c = rig.translation();
    let len = (p - c).xy().norm();
    let steps = (len / 0.25).ceil().max(1.0) as usize;
    (1..steps).all(|k| {
        let q = c + (p - c) * (k as f64 / steps as f64);
        q.z >= params.road_z(q.y) - 1e-6
    })
}

fn gt_lanes(rig: &CameraRig, params: &SceneParams, config: &SceneConfig) -> Vec<Lane3D> {
    let (h, w) = rig.image_size();
    let n_steps = ((config.gt_y_range.1 - config.gt_y_range.0) / config.gt_step).round() as usize;
    let mut lanes = Vec::new();
    for k in 0..params.offsets.len() {
        let mut pts = Vec::new();
        for s in 0..=n_steps {
            let y = config.gt_y_range.0 + s as f64 * config.gt_step;
            let p = Vector3::new(params.lane_x(k, y), y, params.road_z(y));
            let inside = rig
                .project(&p)
                .is_some_and(|(u, v)| u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64);
            if inside && visible(rig, &p, params) {
                pts.push([p.x, p.y, p.z]);
            } else if !pts.is_empty() {
                break;
            }
        }
        if let Ok(lane) = Lane3D::new(pts, Some(1)) {
            lanes.push(lane);
        }
    }
    lanes
}

pub fn scene_rig(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<CameraRig> {
    let mut rc = config.rig.clone();
    if config.pitch_jitter_deg > 0.0 {
        rc.pitch_deg += rng.random_range(-config.pitch_jitter_deg..=config.pitch_jitter_deg);
    }
    if config.height_jitter > 0.0 {
        rc.z += rng.random_range(-config.height_jitter..=config.height_jitter);
    }
    rc.build()
}

/// Render scene `index`; a pure function of `(config, index)`.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let params = draw_params(config, &mut rng);
    let rig = scene_rig(config, &mut rng)?;
    render(&params, &rig, config)
}

pub fn render(params: &SceneParams, rig: &CameraRig, config: &SceneConfig) -> Result<Sample> {
    let (h, w) = rig.image_size();
    let ss = config.supersample;
    let mut image = Raster::zeros(3, h, w);
    let mut depth = Raster::zeros(1, h, w);
    let origin = *rig.translation();
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let pu = u as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                    let pv = v as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                    let dir = rig.pixel_ray(pu, pv);
                    let c = match march(&origin, &dir, params) {
                        Some(p) => shade(&p, params, config),
                        None => sky(pv, h),
                    };
                    for (a, x) in acc.iter_mut().zip(c) {
                        *a += x;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                image.set(ch, v, u, quantize(a / (ss * ss) as f64));
            }
            let dir = rig.pixel_ray(u as f64, v as f64);
            if let Some(p) = march(&origin, &dir, params) {
                depth.set(0, v, u, (DEPTH_REF / optical_depth(rig, &p)).min(1.0));
            }
        }
    }
    let lanes = gt_lanes(rig, params, config);
    let id = hex::encode(content_hash(&image));
    Ok(Sample {
        image,
        depth,
        lanes,
        rig: rig.clone(),
        id,
        params: params.clone(),
    })
}
