//! Synthetic scenes, training targets, annotation parsers and on-disk
//! sample/lane-set formats.

mod annotations;
mod archive;
mod laneset;
mod synth;

pub(crate) use annotations::location_at;
pub use annotations::{parse_apollo, parse_openlane, ParsedAnnotation, APOLLO_IMAGE_SIZE, APOLLO_INTRINSICS};
pub use archive::{load_split, save_split, SplitEntry};
pub use laneset::{read_lane_set, write_lane_set, LaneSetFile, LANESET_FORMAT, LANESET_VERSION};
pub use synth::{draw_params, generate_scene, march, render, Sample, SceneConfig, SceneParams, DEPTH_REF};

use crate::bevhead::GtRasters;
use crate::geometry::BevGrid;
use crate::lane::Lane3D;

/// BEV training targets: per row, each lane marks the cell containing its
/// `x`, with the fractional residual as offset and `z` as height. When two
/// lanes claim a cell, the one with the smaller `|x|` wins (then the lower
/// lane index).
pub fn rasterize_gt(lanes: &[Lane3D], grid: &BevGrid) -> GtRasters {
    let mut gt = GtRasters::empty(grid.rows, grid.cols);
    let mut claimed_x = vec![f64::INFINITY; grid.len()];
    for (k, lane) in lanes.iter().enumerate() {
        for r in 0..grid.rows {
            let y = grid.row_center_y(r);
            let Some((x, z)) = lane.interpolate(y) else {
                continue;
            };
            let Some((_, c)) = grid.road_to_cell(x, y) else {
                continue;
            };
            let i = r * grid.cols + c;
            if x.abs() >= claimed_x[i] {
                continue;
            }
            claimed_x[i] = x.abs();
            gt.confidence[i] = 1.0;
            gt.offset[i] = (x - grid.cell_center_x(c)) / grid.cell_size.0;
            gt.height[i] = z;
            gt.instance[i] = k as i32;
        }
    }
    gt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bevhead::{decode_instances, BevPrediction};

    fn straight(x: f64) -> Lane3D {
        Lane3D::new(vec![[x, 0.0, 0.0], [x, 120.0, 0.0]], None).unwrap()
    }

    #[test]
    fn straight_lane_single_column() {
        let grid = BevGrid::default();
        let gt = rasterize_gt(&[straight(0.0)], &grid);
        assert_eq!(gt.positives(), grid.rows);
        for r in 0..grid.rows {
            let i = r * grid.cols + 20;
            assert_eq!(gt.instance[i], 0);
            assert_eq!(gt.offset[i], -0.5);
        }
        let gt = rasterize_gt(&[straight(0.125)], &grid);
        assert!((0..grid.rows).all(|r| gt.offset[r * grid.cols + 20] == -0.25));
    }

    #[test]
    fn coincident_lanes_lower_index_wins() {
        let grid = BevGrid::default();
        let gt = rasterize_gt(&[straight(1.1), straight(1.1)], &grid);
        assert!(gt.instance.iter().all(|&i| i <= 0));
        let gt = rasterize_gt(&[straight(1.3), straight(1.1)], &grid);
        assert!(gt.instance.iter().filter(|&&i| i >= 0).all(|&i| i == 1));
    }

    #[test]
    fn rasterize_decode_round_trip() {
        let grid = BevGrid::default();
        let lanes: Vec<Lane3D> = [-5.3, -1.7, 1.8, 5.4]
            .iter()
            .map(|&o| {
                let pts = (0..=60).map(|k| {
                    let y = 3.0 + k as f64 * 1.7;
                    [o + 2e-4 * y * y, y, 0.5 * (y / 30.0).sin()]
                });
                Lane3D::new(pts.collect(), None).unwrap()
            })
            .collect();
        let gt = rasterize_gt(&lanes, &grid);
        let mut pred = BevPrediction::zeros(grid.rows, grid.cols, 4);
        for i in 0..grid.len() {
            if gt.instance[i] >= 0 {
                pred.confidence[i] = 1.0;
                pred.x_offset[i] = gt.offset[i];
                pred.height[i] = gt.height[i];
                pred.embedding[i] = 3.0 * gt.instance[i] as f64;
            }
        }
        let decoded = decode_instances(&pred, 0.5, 0.5, &grid);
        assert_eq!(decoded.len(), 4);
        for d in decoded {
            let k = gt.instance[d.cells[0]] as usize;
            for p in d.lane.points() {
                let (x, z) = lanes[k].interpolate(p[1]).unwrap();
                assert!((p[0] - x).abs() < 1e-9 && (p[2] - z).abs() < 1e-9);
            }
        }
    }
}
