use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One lane as an ordered road-frame polyline with strictly increasing `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LaneRepr")]
pub struct Lane3D {
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<i64>,
}

#[derive(Deserialize)]
struct LaneRepr {
    points: Vec<[f64; 3]>,
    #[serde(default)]
    category: Option<i64>,
}

impl TryFrom<LaneRepr> for Lane3D {
    type Error = Error;

    fn try_from(r: LaneRepr) -> Result<Lane3D> {
        Lane3D::new(r.points, r.category)
    }
}

impl Lane3D {
    pub fn new(points: Vec<[f64; 3]>, category: Option<i64>) -> Result<Lane3D> {
        if points.len() < 2 {
            return Err(Error::shape(format!("a lane needs at least 2 points, got {}", points.len())));
        }
        if !points.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::shape("lane coordinates must be finite"));
        }
        if points.windows(2).any(|w| w[1][1] <= w[0][1]) {
            return Err(Error::shape("lane y coordinates must be strictly increasing"));
        }
        Ok(Lane3D { points, category })
    }

    /// Sort by `y`, drop points with duplicate `y`, then validate.
    pub fn from_unordered(mut points: Vec<[f64; 3]>, category: Option<i64>) -> Result<Lane3D> {
        points.sort_by(|a, b| a[1].total_cmp(&b[1]));
        points.dedup_by(|b, a| b[1] <= a[1]);
        Lane3D::new(points, category)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn category(&self) -> Option<i64> {
        self.category
    }

    pub fn y_span(&self) -> (f64, f64) {
        (self.points[0][1], self.points[self.points.len() - 1][1])
    }

    /// Linear interpolation of `(x, z)` at `y`; `None` outside the lane's span.
    pub fn interpolate(&self, y: f64) -> Option<(f64, f64)> {
        let (y0, y1) = self.y_span();
        if !(y >= y0 && y <= y1) {
            return None;
        }
        let i = self.points.partition_point(|p| p[1] < y);
        if i < self.points.len() && self.points[i][1] == y {
            return Some((self.points[i][0], self.points[i][2]));
        }
        let (a, b) = (self.points[i - 1], self.points[i]);
        let t = (y - a[1]) / (b[1] - a[1]);
        Some((a[0] + t * (b[0] - a[0]), a[2] + t * (b[2] - a[2])))
    }
}

/// A lane with a detection confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLane {
    pub lane: Lane3D,
    pub score: f64,
}
