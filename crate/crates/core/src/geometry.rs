//! Pinhole camera rigs relative to the road frame, plane-induced
//! homographies for virtual-camera normalization, and the BEV grid.
//!
//! Road frame: right-handed, `x` to the right of the ego vehicle, `y`
//! forward, `z` up; the road plane is `z = 0`. Camera coordinates are the
//! usual optical frame (`x` right, `y` down, `z` along the optical axis).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Road frame to level, forward-looking optical frame.
fn base_rotation() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Camera←road rotation from roll/pitch/yaw in radians.
///
/// `R = Rz(roll) · Rx(pitch) · Ry(yaw) · B`, where `B` maps the road frame
/// onto a level camera looking along `+y`. Positive pitch tilts the optical
/// axis down towards the road, positive yaw turns it to the right.
pub fn rotation_from_rpy(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_z(roll) * rot_x(pitch) * rot_y(yaw) * base_rotation()
}

/// Inverse of [`rotation_from_rpy`]; angles in radians.
pub fn rpy_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let m = r * base_rotation().transpose();
    let pitch = m[(2, 1)].clamp(-1.0, 1.0).asin();
    let yaw = (-m[(2, 0)]).atan2(m[(2, 2)]);
    let roll = (-m[(0, 1)]).atan2(m[(1, 1)]);
    (roll, pitch, yaw)
}

/// A pinhole camera placed relative to the road frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    height: usize,
    width: usize,
}

impl CameraRig {
    /// `rotation` maps road-frame vectors into camera coordinates,
    /// `translation` is the camera center expressed in the road frame.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidRig(
                "intrinsics must be upper-triangular with K[2][2] = 1".into(),
            ));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidRig("focal lengths must be positive".into()));
        }
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || rotation.determinant() < 0.0 {
            return Err(Error::InvalidRig(format!(
                "rotation is not a proper orthonormal matrix (|R·Rᵀ − I| = {ortho:e})"
            )));
        }
        if !(translation.z > 0.0) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidRig(format!(
                "camera must sit above the road plane, got z = {}",
                translation.z
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidRig("image size must be non-zero".into()));
        }
        Ok(CameraRig {
            intrinsics,
            rotation,
            translation,
            height: image_size.0,
            width: image_size.1,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_params(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        image_size: (usize, usize),
        roll_deg: f64,
        pitch_deg: f64,
        yaw_deg: f64,
        translation: [f64; 3],
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let r = rotation_from_rpy(
            roll_deg.to_radians(),
            pitch_deg.to_radians(),
            yaw_deg.to_radians(),
        );
        CameraRig::new(k, r, Vector3::from(translation), image_size)
    }

    /// Default virtual camera: 576×1024, pitch-only, 1.5 m above the road.
    pub fn virtual_default() -> Self {
        CameraRig::from_params(640.0, 640.0, 512.0, 288.0, (576, 1024), 0.0, 5.0, 0.0, [0.0, 0.0, 1.5])
            .expect("default virtual rig is valid")
    }

    /// Virtual camera at the desk-scale network resolution (256×512).
    pub fn desk_default() -> Self {
        CameraRig::from_params(300.0, 300.0, 256.0, 128.0, (256, 512), 0.0, 5.0, 0.0, [0.0, 0.0, 1.5])
            .expect("default desk rig is valid")
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `(height, width)` in pixels.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn camera_height(&self) -> f64 {
        self.translation.z
    }

    /// Road point → camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.translation)
    }

    /// Project a road-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 1e-12 {
            return None;
        }
        let h = self.intrinsics * pc;
        Some((h.x / h.z, h.y / h.z))
    }

    /// Viewing ray through a pixel, as a road-frame direction (not normalized).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        self.rotation.transpose() * Vector3::new(x, y, 1.0)
    }

    /// Homography taking homogeneous road-plane coordinates `(x, y, 1)` to pixels.
    pub fn ground_to_image(&self) -> Matrix3<f64> {
        let t = -(self.rotation * self.translation);
        let mut m = Matrix3::zeros();
        m.set_column(0, &self.rotation.column(0));
        m.set_column(1, &self.rotation.column(1));
        m.set_column(2, &t);
        self.intrinsics * m
    }

    /// Same camera with every pixel quantity scaled to a new resolution.
    pub fn resized(&self, height: usize, width: usize) -> Result<CameraRig> {
        let sy = height as f64 / self.height as f64;
        let sx = width as f64 / self.width as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] = (k[(0, 2)] + 0.5) * sx - 0.5;
        k[(1, 1)] *= sy;
        k[(1, 2)] = (k[(1, 2)] + 0.5) * sy - 0.5;
        CameraRig::new(k, self.rotation, self.translation, (height, width))
    }

    pub fn to_config(&self) -> RigConfig {
        let (roll, pitch, yaw) = rpy_from_rotation(&self.rotation);
        RigConfig {
            fx: self.intrinsics[(0, 0)],
            fy: self.intrinsics[(1, 1)],
            cx: self.intrinsics[(0, 2)],
            cy: self.intrinsics[(1, 2)],
            image_height: self.height,
            image_width: self.width,
            roll_deg: roll.to_degrees(),
            pitch_deg: pitch.to_degrees(),
            yaw_deg: yaw.to_degrees(),
            x: self.translation.x,
            y: self.translation.y,
            z: self.translation.z,
        }
    }
}

/// Human-readable key-value form of a [`CameraRig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default)]
    pub roll_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    pub z: f64,
}

impl RigConfig {
    pub fn build(&self) -> Result<CameraRig> {
        CameraRig::from_params(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            (self.image_height, self.image_width),
            self.roll_deg,
            self.pitch_deg,
            self.yaw_deg,
            [self.x, self.y, self.z],
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rig config serializes")
    }

    pub fn from_toml(text: &str) -> Result<RigConfig> {
        toml::from_str(text).map_err(|e| Error::config("rig", e.to_string()))
    }
}

/// Intersection of the viewing ray through `pixel` with the road plane.
///
/// Returns `None` when the ray is parallel to the plane or points at or
/// above the horizon.
pub fn ray_ground_intersection(pixel: (f64, f64), rig: &CameraRig) -> Option<Vector3<f64>> {
    let d = rig.pixel_ray(pixel.0, pixel.1);
    let n = d.norm();
    if d.z >= -1e-9 * n {
        return None;
    }
    let c = rig.translation();
    let s = -c.z / d.z;
    Some(Vector3::new(c.x + s * d.x, c.y + s * d.y, 0.0))
}

/// Plane-induced homography mapping `src` pixels of road points to `dst` pixels.
pub fn ground_homography(src: &CameraRig, dst: &CameraRig) -> Matrix3<f64> {
    let hs = src.ground_to_image();
    let hd = dst.ground_to_image();
    let inv = hs
        .try_inverse()
        .expect("ground homography of a camera above the plane is invertible");
    hd * inv
}

/// Normalize a homography to unit Frobenius norm with a positive last entry
/// (or first non-zero entry), so matrices equal up to scale compare equal.
pub fn normalize_homography(h: &Matrix3<f64>) -> Matrix3<f64> {
    let mut m = h / h.norm();
    let pivot = m
        .iter()
        .rev()
        .copied()
        .find(|x| x.abs() > 1e-12)
        .unwrap_or(1.0);
    if pivot < 0.0 {
        m = -m;
    }
    m
}

fn apply_h(h: &Matrix3<f64>, u: f64, v: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(u, v, 1.0);
    if p.z.abs() < 1e-15 {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}

/// Warp `image` (seen by `src`) into the view of `virt` through the road
/// plane. Bilinear sampling; samples outside the source are zero.
pub fn warp_to_virtual(image: &Raster, src: &CameraRig, virt: &CameraRig) -> Result<Raster> {
    if (image.height, image.width) != src.image_size() {
        return Err(Error::shape(format!(
            "image is {}x{}, source rig expects {:?}",
            image.height,
            image.width,
            src.image_size()
        )));
    }
    if src == virt {
        return Ok(image.clone());
    }
    let (h, w) = virt.image_size();
    // virtual pixel -> road plane -> source pixel
    let to_src = ground_homography(virt, src);
    let to_ground = virt.ground_to_image().try_inverse().expect("invertible");
    let mut out = Raster::zeros(image.channels, h, w);
    let mut px = vec![0.0; image.channels];
    for v in 0..h {
        for u in 0..w {
            // only pixels whose ray meets the road in front of both cameras carry content
            let g = to_ground * Vector3::new(u as f64, v as f64, 1.0);
            if g.z.abs() < 1e-15 {
                continue;
            }
            let ground = Vector3::new(g.x / g.z, g.y / g.z, 0.0);
            if virt.to_camera(&ground).z <= 0.0 || src.to_camera(&ground).z <= 0.0 {
                continue;
            }
            let Some((su, sv)) = apply_h(&to_src, u as f64, v as f64) else {
                continue;
            };
            if image.sample_bilinear(su, sv, &mut px) {
                for (c, &x) in px.iter().enumerate() {
                    out.set(c, v, u, x);
                }
            }
        }
    }
    Ok(out)
}

/// Discretization of the road plane into BEV cells.
///
/// Row index grows with `y` (row 0 is nearest to the ego vehicle), column
/// index grows with `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell_size: (f64, f64),
    pub rows: usize,
    pub cols: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        BevGrid::new((-10.0, 10.0), (3.0, 103.0), (0.5, 0.5)).expect("default grid is valid")
    }
}

impl BevGrid {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), cell_size: (f64, f64)) -> Result<Self> {
        if !(cell_size.0 > 0.0 && cell_size.1 > 0.0) {
            return Err(Error::config("bev.cell_size", "cell sizes must be positive"));
        }
        if !(x_range.1 > x_range.0 && y_range.1 > y_range.0) {
            return Err(Error::config("bev.range", "ranges must be non-empty"));
        }
        let cols = ((x_range.1 - x_range.0) / cell_size.0).round() as usize;
        let rows = ((y_range.1 - y_range.0) / cell_size.1).round() as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::config("bev.cell_size", "grid must have at least one cell"));
        }
        Ok(BevGrid {
            x_range,
            y_range,
            cell_size,
            rows,
            cols,
        })
    }

    pub fn cell_center_x(&self, c: usize) -> f64 {
        self.x_range.0 + (c as f64 + 0.5) * self.cell_size.0
    }

    pub fn row_center_y(&self, r: usize) -> f64 {
        self.y_range.0 + (r as f64 + 0.5) * self.cell_size.1
    }

    /// Road point at the center of cell `(r, c)`.
    pub fn cell_to_road(&self, r: usize, c: usize) -> Vector3<f64> {
        Vector3::new(self.cell_center_x(c), self.row_center_y(r), 0.0)
    }

    pub fn road_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fc = ((x - self.x_range.0) / self.cell_size.0).floor();
        let fr = ((y - self.y_range.0) / self.cell_size.1).floor();
        if !(fc >= 0.0 && fr >= 0.0) {
            return None;
        }
        let (r, c) = (fr as usize, fc as usize);
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A front-view raster resampled onto the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRaster {
    pub raster: Raster,
    /// Row-major per-cell flag: the cell's ground center projects inside the image.
    pub valid: Vec<bool>,
}

/// Sample a front-view raster at the projection of every BEV cell center.
pub fn warp_fv_raster_to_bev(raster: &Raster, rig: &CameraRig, grid: &BevGrid) -> Result<BevRaster> {
    if (raster.height, raster.width) != rig.image_size() {
        return Err(Error::shape(format!(
            "raster is {}x{}, rig expects {:?}",
            raster.height,
            raster.width,
            rig.image_size()
        )));
    }
    let mut out = Raster::zeros(raster.channels, grid.rows, grid.cols);
    let mut valid = vec![false; grid.len()];
    let mut px = vec![0.0; raster.channels];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let Some((u, v)) = rig.project(&grid.cell_to_road(r, c)) else {
                continue;
            };
            if raster.sample_bilinear(u, v, &mut px) {
                valid[r * grid.cols + c] = true;
                for (ch, &x) in px.iter().enumerate() {
                    out.set(ch, r, c, x);
                }
            }
        }
    }
    Ok(BevRaster { raster: out, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_camera_below_road() {
        let r = CameraRig::from_params(300.0, 300.0, 256.0, 128.0, (256, 512), 0.0, 5.0, 0.0, [0.0, 0.0, -0.1]);
        assert!(matches!(r, Err(Error::InvalidRig(_))));
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let k = CameraRig::desk_default().intrinsics().clone_owned();
        let r = Matrix3::identity() * 1.01;
        assert!(CameraRig::new(k, r, Vector3::new(0.0, 0.0, 1.0), (10, 10)).is_err());
    }

    #[test]
    fn nadir_principal_point_hits_below_camera() {
        let rig = CameraRig::from_params(300.0, 300.0, 256.0, 128.0, (256, 512), 0.0, 90.0, 0.0, [1.25, -3.0, 2.0])
            .unwrap();
        let p = ray_ground_intersection((256.0, 128.0), &rig).unwrap();
        assert!((p.x - 1.25).abs() < 1e-12);
        assert!((p.y + 3.0).abs() < 1e-12);
        assert_eq!(p.z, 0.0);
    }

    #[test]
    fn horizon_row_has_no_intersection() {
        let rig = CameraRig::desk_default();
        let k = rig.intrinsics();
        let v = k[(1, 2)] - k[(1, 1)] * 5f64.to_radians().tan();
        assert!(ray_ground_intersection((100.0, v), &rig).is_none());
        assert!(ray_ground_intersection((100.0, v - 10.0), &rig).is_none());
        assert!(ray_ground_intersection((100.0, v + 10.0), &rig).is_some());
    }

    #[test]
    fn intersection_reprojects() {
        let rig = CameraRig::desk_default();
        for &(u, v) in &[(0.0, 255.0), (511.0, 200.0), (256.0, 150.0)] {
            let p = ray_ground_intersection((u, v), &rig).unwrap();
            let (pu, pv) = rig.project(&p).unwrap();
            assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_homography() {
        let rig = CameraRig::desk_default();
        let h = normalize_homography(&ground_homography(&rig, &rig));
        let i = normalize_homography(&Matrix3::identity());
        assert!((h - i).norm() < 1e-12);
    }

    #[test]
    fn bev_corner_cell() {
        let g = BevGrid::default();
        assert_eq!((g.rows, g.cols), (200, 40));
        let p = g.cell_to_road(0, 0);
        assert_eq!((p.x, p.y, p.z), (-9.75, 3.25, 0.0));
        assert_eq!(g.road_to_cell(11.0, 50.0), None);
        assert_eq!(g.road_to_cell(-10.5, 50.0), None);
        assert_eq!(g.road_to_cell(0.0, 2.9), None);
    }

    #[test]
    fn bev_round_trip_all_cells() {
        let g = BevGrid::default();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let p = g.cell_to_road(r, c);
                assert_eq!(g.road_to_cell(p.x, p.y), Some((r, c)));
            }
        }
    }

    #[test]
    fn warp_identity_is_noop() {
        let rig = CameraRig::desk_default();
        let img = Raster::from_fn(3, 256, 512, |c, v, u| ((c + v * 7 + u * 13) % 255) as f64 / 255.0);
        assert_eq!(warp_to_virtual(&img, &rig, &rig).unwrap(), img);
    }

    #[test]
    fn warp_rejects_wrong_size() {
        let rig = CameraRig::desk_default();
        let img = Raster::zeros(3, 10, 10);
        assert!(matches!(warp_to_virtual(&img, &rig, &rig), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_raster_warps_to_constant_bev() {
        let rig = CameraRig::desk_default();
        let g = BevGrid::default();
        let r = Raster::filled(1, 256, 512, 0.42);
        let b = warp_fv_raster_to_bev(&r, &rig, &g).unwrap();
        assert!(b.valid.iter().any(|&v| v));
        for (i, &ok) in b.valid.iter().enumerate() {
            if ok {
                assert!((b.raster.data[i] - 0.42).abs() < 1e-15);
            } else {
                assert_eq!(b.raster.data[i], 0.0);
            }
        }
    }

    #[test]
    fn cells_behind_camera_are_invalid() {
        let rig = CameraRig::desk_default();
        let g = BevGrid::new((-5.0, 5.0), (-20.0, 20.0), (1.0, 1.0)).unwrap();
        let r = Raster::filled(1, 256, 512, 1.0);
        let b = warp_fv_raster_to_bev(&r, &rig, &g).unwrap();
        for row in 0..20 {
            for c in 0..g.cols {
                assert!(!b.valid[row * g.cols + c]);
            }
        }
    }

    #[test]
    fn rig_config_round_trip() {
        let rig = CameraRig::from_params(310.0, 305.0, 250.0, 130.0, (256, 512), 1.5, 4.0, -2.0, [0.3, -0.2, 1.6])
            .unwrap();
        let text = rig.to_config().to_toml();
        let back = RigConfig::from_toml(&text).unwrap().build().unwrap();
        assert!((back.rotation() - rig.rotation()).norm() < 1e-12);
        assert!((back.translation() - rig.translation()).norm() < 1e-12);
        assert_eq!(back.intrinsics(), rig.intrinsics());
    }

    proptest! {
        #[test]
        fn rpy_round_trip(roll in -30.0f64..30.0, pitch in -60.0f64..60.0, yaw in -60.0f64..60.0) {
            let r = rotation_from_rpy(roll.to_radians(), pitch.to_radians(), yaw.to_radians());
            let (a, b, c) = rpy_from_rotation(&r);
            prop_assert!((a.to_degrees() - roll).abs() < 1e-9);
            prop_assert!((b.to_degrees() - pitch).abs() < 1e-9);
            prop_assert!((c.to_degrees() - yaw).abs() < 1e-9);
        }

        #[test]
        fn homography_composition(p1 in 1.0f64..10.0, p2 in 1.0f64..10.0, h2 in 1.0f64..2.5, yaw in -5.0f64..5.0) {
            let a = CameraRig::desk_default();
            let b = CameraRig::from_params(290.0, 290.0, 250.0, 120.0, (256, 512), 0.5, p1, yaw, [0.2, 0.0, h2]).unwrap();
            let c = CameraRig::from_params(320.0, 310.0, 260.0, 130.0, (256, 512), -0.3, p2, 0.0, [-0.1, 0.5, 1.4]).unwrap();
            let direct = normalize_homography(&ground_homography(&a, &c));
            let composed = normalize_homography(&(ground_homography(&b, &c) * ground_homography(&a, &b)));
            prop_assert!((direct - composed).norm() < 1e-8);
        }
    }
}
