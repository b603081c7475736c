//! Lane evaluation: resampling on fixed `y` positions, one-to-one matching,
//! F-score, average precision and near/far x/z errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lane::{Lane3D, ScoredLane};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub y_samples: Vec<f64>,
    pub point_threshold: f64,
    pub coverage_ratio: f64,
    /// Half-open `[start, end)`.
    pub near_range: (f64, f64),
    /// Closed `[start, end]`.
    pub far_range: (f64, f64),
    pub ap_thresholds: Vec<f64>,
    pub min_covisible: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            y_samples: (0..=20).map(|k| 3.0 + 5.0 * k as f64).collect(),
            point_threshold: 1.5,
            coverage_ratio: 0.75,
            near_range: (0.0, 40.0),
            far_range: (40.0, 100.0),
            ap_thresholds: (0..20).map(|k| k as f64 * 0.05).collect(),
            min_covisible: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.y_samples.is_empty() || self.y_samples.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("eval.y_samples", "must be non-empty and strictly increasing"));
        }
        if !(self.point_threshold > 0.0) {
            return Err(Error::config("eval.point_threshold", "must be positive"));
        }
        if !(self.coverage_ratio > 0.0 && self.coverage_ratio <= 1.0) {
            return Err(Error::config("eval.coverage_ratio", "must lie in (0, 1]"));
        }
        let (n, f) = (self.near_range, self.far_range);
        if !(n.0 < n.1 && f.0 <= f.1) || (n.0 < f.1 && f.0 < n.1) {
            return Err(Error::config("eval.near_range", "ranges must be non-empty and disjoint"));
        }
        if self.ap_thresholds.is_empty() {
            return Err(Error::config("eval.ap_thresholds", "must not be empty"));
        }
        Ok(())
    }

    fn in_near(&self, y: f64) -> bool {
        y >= self.near_range.0 && y < self.near_range.1
    }

    fn in_far(&self, y: f64) -> bool {
        y >= self.far_range.0 && y <= self.far_range.1
    }
}

/// `(x, z, visible)` at each sample position.
pub type Resampled = Vec<(f64, f64, bool)>;

pub fn resample_lane(lane: &Lane3D, y_samples: &[f64]) -> Resampled {
    y_samples
        .iter()
        .map(|&y| match lane.interpolate(y) {
            Some((x, z)) => (x, z, true),
            None => (0.0, 0.0, false),
        })
        .collect()
}

/// Mean co-visible distance and admissibility of one pair.
pub fn pair_cost(a: &Resampled, b: &Resampled, config: &EvalConfig) -> Option<f64> {
    let dists: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(p, g)| p.2 && g.2)
        .map(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1))
        .collect();
    if dists.len() < config.min_covisible.max(1) {
        return None;
    }
    let close = dists.iter().filter(|&&d| d <= config.point_threshold).count();
    if (close as f64) < config.coverage_ratio * dists.len() as f64 {
        return None;
    }
    Some(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Square-matrix minimum-cost assignment; returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(pred index, gt index, cost)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub num_preds: usize,
    pub num_gts: usize,
}

impl Matching {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.num_preds - self.pairs.len()
    }

    pub fn fn_(&self) -> usize {
        self.num_gts - self.pairs.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// One-to-one matching over admissible pairs: the largest number of
/// matches, and among those the smallest total cost.
pub fn match_resampled(preds: &[Resampled], gts: &[Resampled], config: &EvalConfig) -> Matching {
    let costs: Vec<Vec<Option<f64>>> = preds.iter().map(|p| gts.iter().map(|g| pair_cost(p, g, config)).collect()).collect();
    let n = preds.len().max(gts.len());
    let finite_sum: f64 = costs.iter().flatten().flatten().sum();
    // any admissible match outweighs every possible cost difference
    let big = 2.0 * finite_sum + 1.0;
    let mut matrix = vec![vec![big; n]; n];
    for (i, row) in costs.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if let Some(c) = c {
                matrix[i][j] = *c;
            }
        }
    }
    let mut pairs = Vec::new();
    if n > 0 {
        for (i, j) in hungarian(&matrix).into_iter().enumerate() {
            if i < preds.len() && j < gts.len() {
                if let Some(c) = costs[i][j] {
                    pairs.push((i, j, c));
                }
            }
        }
    }
    Matching {
        pairs,
        num_preds: preds.len(),
        num_gts: gts.len(),
    }
}

pub fn match_lanes(preds: &[Lane3D], gts: &[Lane3D], config: &EvalConfig) -> Matching {
    let rp: Vec<Resampled> = preds.iter().map(|l| resample_lane(l, &config.y_samples)).collect();
    let rg: Vec<Resampled> = gts.iter().map(|l| resample_lane(l, &config.y_samples)).collect();
    match_resampled(&rp, &rg, config)
}

/// Sums of absolute errors and sample counts per range.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub x_near: f64,
    pub z_near: f64,
    pub n_near: usize,
    pub x_far: f64,
    pub z_far: f64,
    pub n_far: usize,
}

impl ErrorSums {
    fn add(&mut self, o: &ErrorSums) {
        self.x_near += o.x_near;
        self.z_near += o.z_near;
        self.n_near += o.n_near;
        self.x_far += o.x_far;
        self.z_far += o.z_far;
        self.n_far += o.n_far;
    }

    fn mean(sum: f64, n: usize) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn error_sums(matching: &Matching, preds: &[Resampled], gts: &[Resampled], config: &EvalConfig) -> ErrorSums {
    let mut s = ErrorSums::default();
    for &(i, j, _) in &matching.pairs {
        for (k, &y) in config.y_samples.iter().enumerate() {
            let (p, g) = (preds[i][k], gts[j][k]);
            if !(p.2 && g.2) {
                continue;
            }
            let (dx, dz) = ((p.0 - g.0).abs(), (p.1 - g.1).abs());
            if config.in_near(y) {
                s.x_near += dx;
                s.z_near += dz;
                s.n_near += 1;
            } else if config.in_far(y) {
                s.x_far += dx;
                s.z_far += dz;
                s.n_far += 1;
            }
        }
    }
    s
}

/// Near/far means of `|Δx|`, `|Δz|`; `None` when a range has no matched samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeErrors {
    pub x_err_near: Option<f64>,
    pub x_err_far: Option<f64>,
    pub z_err_near: Option<f64>,
    pub z_err_far: Option<f64>,
}

impl From<ErrorSums> for RangeErrors {
    fn from(s: ErrorSums) -> Self {
        RangeErrors {
            x_err_near: ErrorSums::mean(s.x_near, s.n_near),
            x_err_far: ErrorSums::mean(s.x_far, s.n_far),
            z_err_near: ErrorSums::mean(s.z_near, s.n_near),
            z_err_far: ErrorSums::mean(s.z_far, s.n_far),
        }
    }
}

pub fn compute_errors(matching: &Matching, preds: &[Lane3D], gts: &[Lane3D], config: &EvalConfig) -> RangeErrors {
    let rp: Vec<Resampled> = preds.iter().map(|l| resample_lane(l, &config.y_samples)).collect();
    let rg: Vec<Resampled> = gts.iter().map(|l| resample_lane(l, &config.y_samples)).collect();
    error_sums(matching, &rp, &rg, config).into()
}

/// Precision, recall and F1 from counts. No predictions gives precision 1,
/// no ground truth gives recall 1, and `P + R = 0` gives F1 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Ground truth and scored predictions of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub preds: Vec<ScoredLane>,
    pub gts: Vec<Lane3D>,
}

/// 11-point interpolated AP over a confidence-threshold sweep; matching is
/// re-run at every threshold. Thresholds that keep no prediction add no
/// precision-recall point.
pub fn average_precision(frames: &[Frame], config: &EvalConfig) -> f64 {
    let resampled: Vec<(Vec<(f64, Resampled)>, Vec<Resampled>)> = frames
        .iter()
        .map(|f| {
            (
                f.preds.iter().map(|p| (p.score, resample_lane(&p.lane, &config.y_samples))).collect(),
                f.gts.iter().map(|g| resample_lane(g, &config.y_samples)).collect(),
            )
        })
        .collect();
    let mut points = Vec::new();
    for &t in &config.ap_thresholds {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (preds, gts) in &resampled {
            let kept: Vec<Resampled> = preds.iter().filter(|p| p.0 >= t).map(|p| p.1.clone()).collect();
            let m = match_resampled(&kept, gts, config);
            tp += m.tp();
            fp += m.fp();
            fn_ += m.fn_();
        }
        if tp + fp == 0 {
            continue;
        }
        let (p, r, _) = prf(tp, fp, fn_);
        points.push((r, p));
    }
    interpolated_ap(&points)
}

/// Mean over recall levels `0, 0.1, …, 1` of the best precision at recall
/// at least that level (0 if none).
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|k| {
            let level = k as f64 / 10.0;
            points
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    #[serde(flatten)]
    pub errors: RangeErrors,
    /// Mean `|Δz|` over every matched sample in either range.
    pub z_err: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub frames: Vec<FrameResult>,
}

impl EvalResult {
    /// Mean `|Δz|` over all matched samples in either range.
    pub fn z_err_all(&self) -> Option<f64> {
        self.z_err
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval results serialize")
    }

    pub fn table(&self, name: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        format!(
            "{:<24} {:>7} {:>7} {:>10} {:>10} {:>10} {:>10}\n{:<24} {:>7.1} {:>7.1} {:>10} {:>10} {:>10} {:>10}\n",
            "method",
            "F1(%)",
            "AP(%)",
            "x-err/N",
            "x-err/F",
            "z-err/N",
            "z-err/F",
            name,
            100.0 * self.f1,
            100.0 * self.ap,
            f(self.errors.x_err_near),
            f(self.errors.x_err_far),
            f(self.errors.z_err_near),
            f(self.errors.z_err_far),
        )
    }
}

/// Dataset-level evaluation: counts and errors pooled over frames.
pub fn evaluate(frames: &[Frame], config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut sums = ErrorSums::default();
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let rp: Vec<Resampled> = f.preds.iter().map(|p| resample_lane(&p.lane, &config.y_samples)).collect();
        let rg: Vec<Resampled> = f.gts.iter().map(|g| resample_lane(g, &config.y_samples)).collect();
        let m = match_resampled(&rp, &rg, config);
        sums.add(&error_sums(&m, &rp, &rg, config));
        tp += m.tp();
        fp += m.fp();
        fn_ += m.fn_();
        per_frame.push(FrameResult {
            id: f.id.clone(),
            tp: m.tp(),
            fp: m.fp(),
            fn_: m.fn_(),
        });
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(EvalResult {
        precision,
        recall,
        f1,
        ap: average_precision(frames, config),
        errors: sums.into(),
        z_err: ErrorSums::mean(sums.z_near + sums.z_far, sums.n_near + sums.n_far),
        tp,
        fp,
        fn_,
        frames: per_frame,
    })
}
