//! Minimal raster plots of lane sets: a top view over the BEV grid and a
//! height profile along y.

use crate::error::Result;
use crate::geometry::BevGrid;
use crate::lane::Lane3D;
use crate::raster::Raster;

const PRED: [f64; 3] = [0.9, 0.2, 0.1];
const GT: [f64; 3] = [0.1, 0.6, 0.2];
const PX_PER_M: f64 = 8.0;
const PROFILE_H: usize = 160;
const Z_SPAN: f64 = 4.0;

struct Canvas {
    r: Raster,
}

impl Canvas {
    fn dot(&mut self, u: f64, v: f64, c: [f64; 3]) {
        let (ui, vi) = (u.round() as i64, v.round() as i64);
        for dv in -1..=1 {
            for du in -1..=1 {
                let (x, y) = (ui + du, vi + dv);
                if x >= 0 && y >= 0 && (x as usize) < self.r.width && (y as usize) < self.r.height {
                    for (k, &ck) in c.iter().enumerate() {
                        self.r.set(k, y as usize, x as usize, ck);
                    }
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: [f64; 3]) {
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=n {
                let t = i as f64 / n as f64;
                self.dot(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
            }
        }
        if let [p] = pts {
            self.dot(p.0, p.1, c);
        }
    }
}

/// Top view (x across, far at the top) above a z-versus-y profile.
pub fn plot_lanes(pred: &[Lane3D], gt: Option<&[Lane3D]>, grid: &BevGrid) -> Result<Raster> {
    let (x0, x1) = grid.x_range;
    let (y0, y1) = grid.y_range;
    let top_w = ((x1 - x0) * PX_PER_M).ceil() as usize;
    let top_h = ((y1 - y0) * PX_PER_M / 4.0).ceil() as usize;
    let width = top_w.max(2 * PROFILE_H);
    let height = top_h + 4 + PROFILE_H;
    let mut cv = Canvas {
        r: Raster::filled(3, height, width, 1.0),
    };
    for u in 0..width {
        for k in 0..3 {
            cv.r.set(k, top_h + 2, u, 0.5);
        }
    }
    let top = |x: f64, y: f64| ((x - x0) * PX_PER_M, (y1 - y) * PX_PER_M / 4.0);
    let side = |y: f64, z: f64| {
        (
            (y - y0) / (y1 - y0) * (width - 1) as f64,
            top_h as f64 + 4.0 + (0.5 - z / Z_SPAN) * (PROFILE_H - 1) as f64,
        )
    };
    let sets: Vec<(&[Lane3D], [f64; 3])> = match gt {
        Some(g) => vec![(g, GT), (pred, PRED)],
        None => vec![(pred, PRED)],
    };
    for (lanes, c) in sets {
        for l in lanes {
            let pts = l.points();
            cv.polyline(&pts.iter().map(|p| top(p[0], p[1])).collect::<Vec<_>>(), c);
            cv.polyline(&pts.iter().map(|p| side(p[1], p[2])).collect::<Vec<_>>(), c);
        }
    }
    Ok(cv.r)
}
