//! Per-lane binary CRF over the BEV confidence raster with contrast-sensitive
//! Potts pairwise terms on color and depth, solved by sequential mean field.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bevhead::{cluster_cells, BevPrediction};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub sigma_color: f64,
    pub sigma_depth: f64,
    pub iterations: usize,
    /// 4 or 8.
    pub neighborhood: usize,
    pub region_floor: f64,
    pub max_region: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            w1: 1.0,
            w2: 0.5,
            w3: 0.5,
            sigma_color: 13.0 / 255.0,
            sigma_depth: 0.1,
            iterations: 5,
            neighborhood: 8,
            region_floor: 0.2,
            max_region: 5000,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |k: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(k, format!("must be a finite non-negative number, got {v}")))
            }
        };
        nonneg("crf.w1", self.w1)?;
        nonneg("crf.w2", self.w2)?;
        nonneg("crf.w3", self.w3)?;
        if !(self.sigma_color > 0.0) {
            return Err(Error::config("crf.sigma_color", "must be positive"));
        }
        if !(self.sigma_depth > 0.0) {
            return Err(Error::config("crf.sigma_depth", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("crf.iterations", "must be at least 1"));
        }
        if self.neighborhood != 4 && self.neighborhood != 8 {
            return Err(Error::config("crf.neighborhood", "must be 4 or 8"));
        }
        if !(0.0..1.0).contains(&self.region_floor) {
            return Err(Error::config("crf.region_floor", "must lie in [0, 1)"));
        }
        if self.max_region == 0 {
            return Err(Error::config("crf.max_region", "must be at least 1"));
        }
        Ok(())
    }

    fn offsets(&self) -> &'static [(isize, isize)] {
        const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const N8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        if self.neighborhood == 4 {
            &N4
        } else {
            &N8
        }
    }
}

/// One lane's CRF: rasters over the whole grid plus the active region.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfProblem {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub unary_prob: Vec<f64>,
    /// 3 channels.
    pub color: Raster,
    /// 1 channel in `[0, 1]`.
    pub depth: Raster,
    /// Sorted, distinct row-major cell indices.
    pub region: Vec<usize>,
    pub baseline: (usize, usize),
}

impl CrfProblem {
    pub fn new(
        unary_prob: &[f64],
        color: Raster,
        depth: Raster,
        mut region: Vec<usize>,
        baseline: (usize, usize),
    ) -> Result<CrfProblem> {
        let (cc, rows, cols) = color.dims();
        if cc != 3 || depth.dims() != (1, rows, cols) || unary_prob.len() != rows * cols {
            return Err(Error::shape(format!(
                "CRF rasters disagree: color {:?}, depth {:?}, {} probabilities",
                color.dims(),
                depth.dims(),
                unary_prob.len()
            )));
        }
        region.sort_unstable();
        region.dedup();
        let b = baseline.0 * cols + baseline.1;
        if baseline.0 >= rows || baseline.1 >= cols || region.binary_search(&b).is_err() {
            return Err(Error::shape("CRF region must contain the baseline cell"));
        }
        if region.last().is_some_and(|&i| i >= rows * cols) {
            return Err(Error::shape("CRF region exceeds the raster"));
        }
        Ok(CrfProblem {
            rows,
            cols,
            unary_prob: unary_prob.iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect(),
            color,
            depth,
            region,
            baseline,
        })
    }

    fn pair_weight(&self, i: usize, j: usize, config: &CrfConfig) -> f64 {
        let (n, mut dc) = (self.rows * self.cols, 0.0);
        for ch in 0..3 {
            let d = self.color.data[ch * n + i] - self.color.data[ch * n + j];
            dc += d * d;
        }
        let dd = self.depth.data[i] - self.depth.data[j];
        config.w2 * (-dc / (2.0 * config.sigma_color * config.sigma_color)).exp()
            + config.w3 * (-dd * dd / (2.0 * config.sigma_depth * config.sigma_depth)).exp()
    }

    /// Per region position, `(neighbor position, weight)` for region neighbors.
    fn graph(&self, config: &CrfConfig) -> Vec<Vec<(usize, f64)>> {
        let pos: BTreeMap<usize, usize> = self.region.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        self.region
            .iter()
            .map(|&i| {
                neighbors(i, self.rows, self.cols, config.offsets())
                    .filter_map(|j| pos.get(&j).map(|&k| (k, self.pair_weight(i, j, config))))
                    .collect()
            })
            .collect()
    }
}

fn neighbors(i: usize, rows: usize, cols: usize, offsets: &'static [(isize, isize)]) -> impl Iterator<Item = usize> {
    let (r, c) = ((i / cols) as isize, (i % cols) as isize);
    offsets.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols).then(|| nr as usize * cols + nc as usize)
    })
}

/// Bottom-center cell of an instance mask (cell indices, row-major).
pub fn baseline_pixel(mask: &[usize], cols: usize) -> Result<(usize, usize)> {
    let bottom = mask.iter().map(|&i| i / cols).min().ok_or(Error::EmptyMask)?;
    let columns: Vec<usize> = mask.iter().filter(|&&i| i / cols == bottom).map(|&i| i % cols).collect();
    let centroid = columns.iter().sum::<usize>() as f64 / columns.len() as f64;
    let best = columns
        .iter()
        .copied()
        .min_by(|&a, &b| (a as f64 - centroid).abs().total_cmp(&(b as f64 - centroid).abs()).then(a.cmp(&b)))
        .expect("bottom row is non-empty");
    Ok((bottom, best))
}

/// Flood fill from `baseline` over cells with `prob ≥ floor`, plus a 1-cell
/// ring, at most `config.max_region` cells. Sorted cell indices.
pub fn build_lane_region(prob: &[f64], rows: usize, cols: usize, baseline: (usize, usize), config: &CrfConfig) -> Vec<usize> {
    let offsets = config.offsets();
    let start = baseline.0 * cols + baseline.1;
    let mut seen = vec![false; rows * cols];
    let mut filled = vec![start];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for j in neighbors(i, rows, cols, offsets) {
            if !seen[j] && prob[j] >= config.region_floor && filled.len() < config.max_region {
                seen[j] = true;
                filled.push(j);
                queue.push_back(j);
            }
        }
    }
    let mut region = filled.clone();
    for &i in &filled {
        for j in neighbors(i, rows, cols, offsets) {
            if !seen[j] && region.len() < config.max_region {
                seen[j] = true;
                region.push(j);
            }
        }
    }
    region.sort_unstable();
    region
}

/// Energy of a binary labeling of the region cells (`labels[k]` belongs to
/// `problem.region[k]`).
pub fn crf_energy(labels: &[bool], problem: &CrfProblem, config: &CrfConfig) -> f64 {
    assert_eq!(labels.len(), problem.region.len(), "one label per region cell");
    let mut e = 0.0;
    for (k, &i) in problem.region.iter().enumerate() {
        let p = problem.unary_prob[i];
        e += config.w1 * if labels[k] { -p.ln() } else { -(1.0 - p).ln() };
    }
    for (k, adj) in problem.graph(config).iter().enumerate() {
        for &(m, w) in adj {
            if m > k && labels[m] != labels[k] {
                e += w;
            }
        }
    }
    e
}

fn entropy(q: f64) -> f64 {
    let t = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    t(q) + t(1.0 - q)
}

fn free_energy(q: &[f64], problem: &CrfProblem, graph: &[Vec<(usize, f64)>], config: &CrfConfig) -> f64 {
    let mut f = 0.0;
    for (k, &i) in problem.region.iter().enumerate() {
        let p = problem.unary_prob[i];
        f += config.w1 * (q[k] * -p.ln() + (1.0 - q[k]) * -(1.0 - p).ln()) - entropy(q[k]);
        for &(m, w) in &graph[k] {
            if m > k {
                f += w * (q[k] + q[m] - 2.0 * q[k] * q[m]);
            }
        }
    }
    f
}

/// Exact minimizer of the free energy in one coordinate.
fn coordinate_update(p: f64, w1: f64, field: f64) -> f64 {
    if field == 0.0 && w1 == 1.0 {
        // decoupled cell: the marginal is the unary itself
        return p;
    }
    let a = w1 * (p.ln() - (1.0 - p).ln()) + field;
    1.0 / (1.0 + (-a).exp())
}

/// Refined marginals for the region cells plus the free energy before the
/// first sweep and after every sweep.
pub fn mean_field_trace(problem: &CrfProblem, config: &CrfConfig) -> (Vec<f64>, Vec<f64>) {
    let graph = problem.graph(config);
    let mut q: Vec<f64> = problem.region.iter().map(|&i| problem.unary_prob[i]).collect();
    let mut energies = vec![free_energy(&q, problem, &graph, config)];
    for _ in 0..config.iterations {
        for k in 0..q.len() {
            let field: f64 = graph[k].iter().map(|&(m, w)| w * (2.0 * q[m] - 1.0)).sum();
            q[k] = coordinate_update(problem.unary_prob[problem.region[k]], config.w1, field);
        }
        energies.push(free_energy(&q, problem, &graph, config));
    }
    log::debug!("crf free energies: {energies:?}");
    (q, energies)
}

/// Refined probability raster: region cells replaced by mean-field
/// marginals, everything else copied from the (unclamped) input.
pub fn mean_field_refine(problem: &CrfProblem, input: &[f64], config: &CrfConfig) -> Vec<f64> {
    let (q, _) = mean_field_trace(problem, config);
    let mut out = input.to_vec();
    for (k, &i) in problem.region.iter().enumerate() {
        out[i] = q[k];
    }
    out
}

/// Run an independent CRF per decoded instance and write the refined
/// confidences back (max where regions overlap).
pub fn refine_all_lanes(
    pred: &BevPrediction,
    color_bev: &Raster,
    depth_bev: &Raster,
    conf_threshold: f64,
    embed_threshold: f64,
    config: &CrfConfig,
) -> Result<BevPrediction> {
    config.validate()?;
    let instances = cluster_cells(pred, conf_threshold, embed_threshold);
    let mut out = pred.clone();
    let mut refined: BTreeMap<usize, f64> = BTreeMap::new();
    for mask in instances {
        let baseline = baseline_pixel(&mask, pred.cols)?;
        let region = build_lane_region(&pred.confidence, pred.rows, pred.cols, baseline, config);
        let problem = CrfProblem::new(&pred.confidence, color_bev.clone(), depth_bev.clone(), region, baseline)?;
        let (q, _) = mean_field_trace(&problem, config);
        for (k, &i) in problem.region.iter().enumerate() {
            let e = refined.entry(i).or_insert(q[k]);
            *e = e.max(q[k]);
        }
    }
    for (i, v) in refined {
        out.confidence[i] = v;
    }
    Ok(out)
}
