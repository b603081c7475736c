//! Front-view → BEV spatial transformation pyramid, the keypoint BEV head,
//! its training losses and instance decoding.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraRig};
use crate::lane::{Lane3D, ScoredLane};
use crate::network::Scale;
use crate::nn::{normal_tensor, Conv, ParamId, ParamStore, ResBlock, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub stp_channels: usize,
    pub stp_groups: usize,
    /// BEV feature map is `rows/downsample × cols/downsample` before the head.
    pub downsample: usize,
    pub head_channels: usize,
    pub embed_dim: usize,
    pub margin: f64,
    pub conf_threshold: f64,
    pub embed_threshold: f64,
    /// Weight of positive cells in the confidence cross-entropy.
    pub pos_weight: f64,
    pub stp_init: StpInit,
}

/// Starting point of the learned view projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StpInit {
    /// Bilinear sampling at the flat-ground projection of each BEV cell, plus
    /// a little noise.
    Ground,
    Random,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            stp_channels: 16,
            stp_groups: 2,
            downsample: 4,
            head_channels: 12,
            embed_dim: 4,
            margin: 1.0,
            conf_threshold: 0.5,
            embed_threshold: 0.5,
            pos_weight: 4.0,
            stp_init: StpInit::Ground,
        }
    }
}

impl HeadConfig {
    pub fn bev_feature_hw(&self, grid: &BevGrid) -> (usize, usize) {
        (grid.rows.div_ceil(self.downsample), grid.cols.div_ceil(self.downsample))
    }
}

#[derive(Debug, Clone)]
struct StpLevel {
    reduce: Conv,
    proj: ParamId,
}

/// Per-scale flatten-and-project view transformation, summed across scales,
/// followed by two residual blocks in BEV space.
#[derive(Debug, Clone)]
pub struct Stp {
    levels: BTreeMap<Scale, StpLevel>,
    bias: ParamId,
    blocks: [ResBlock; 2],
    groups: usize,
    bev_hw: (usize, usize),
}

impl Stp {
    /// `inputs` lists `(scale, channels, (h, w))` of every fused level consumed.
    /// `rig` is the camera the network sees; ground initialization needs it.
    pub fn new(
        store: &mut ParamStore,
        inputs: &[(Scale, usize, (usize, usize))],
        config: &HeadConfig,
        grid: &BevGrid,
        rig: Option<&CameraRig>,
        rng: &mut ChaCha8Rng,
    ) -> Stp {
        let bev_hw = config.bev_feature_hw(grid);
        let m = bev_hw.0 * bev_hw.1;
        let c = config.stp_channels;
        let mut levels = BTreeMap::new();
        for &(s, cin, (h, w)) in inputs {
            let name = format!("stp.{}", s.to_string().to_lowercase());
            let reduce = Conv::new(store, &format!("{name}.reduce"), cin, c, 1, 1, rng);
            let n = h * w;
            let std = (1.0 / (n * inputs.len()) as f64).sqrt();
            let mut init = normal_tensor(&[config.stp_groups, n, m], std, rng);
            if let (StpInit::Ground, Some(rig)) = (config.stp_init, rig) {
                let ground = ground_sampling(rig, grid, config.downsample, s.factor(), (h, w));
                let k = 1.0 / inputs.len() as f64;
                for g in 0..config.stp_groups {
                    let block = &mut init.data[g * n * m..(g + 1) * n * m];
                    for (b, x) in block.iter_mut().zip(&ground) {
                        *b = 0.1 * *b + k * x;
                    }
                }
            }
            let proj = store.register(format!("{name}.proj"), init);
            levels.insert(s, StpLevel { reduce, proj });
        }
        let bias = store.register("stp.bev_bias", Tensor::zeros(&[c, bev_hw.0, bev_hw.1]));
        let blocks = [
            ResBlock::new(store, "stp.block0", c, rng),
            ResBlock::new(store, "stp.block1", c, rng),
        ];
        Stp {
            levels,
            bias,
            blocks,
            groups: config.stp_groups,
            bev_hw,
        }
    }

    pub fn scales(&self) -> Vec<Scale> {
        self.levels.keys().copied().collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: &BTreeMap<Scale, Var>) -> Result<Var> {
        let mut acc = tape.param(store, self.bias);
        for (s, level) in &self.levels {
            let x = *fused
                .get(s)
                .ok_or_else(|| Error::config("scales", format!("spatial transformation needs the {s} level")))?;
            let r = level.reduce.forward(tape, store, x);
            let r = tape.relu(r);
            let p = tape.param(store, level.proj);
            let b = tape.project(r, p, self.groups, self.bev_hw);
            acc = tape.add(acc, b);
        }
        let mut x = tape.relu(acc);
        for b in &self.blocks {
            x = b.forward(tape, store, x);
        }
        Ok(x)
    }
}

/// `n × m` matrix (FV cells × BEV feature cells) of bilinear weights that
/// sample an `h × w` feature map, `factor` pixels per cell, at the flat-ground
/// projection of every BEV feature cell center. Cells that fall outside the
/// image keep zero columns.
pub fn ground_sampling(
    rig: &CameraRig,
    grid: &BevGrid,
    downsample: usize,
    factor: usize,
    (h, w): (usize, usize),
) -> Vec<f64> {
    let bh = grid.rows.div_ceil(downsample);
    let bw = grid.cols.div_ceil(downsample);
    let m = bh * bw;
    let mut p = vec![0.0; h * w * m];
    let (dx, dy) = grid.cell_size;
    for i in 0..bh {
        for j in 0..bw {
            let y = grid.y_range.0 + (i * downsample) as f64 * dy + 0.5 * downsample as f64 * dy;
            let x = grid.x_range.0 + (j * downsample) as f64 * dx + 0.5 * downsample as f64 * dx;
            let Some((u, v)) = rig.project(&Vector3::new(x, y, 0.0)) else {
                continue;
            };
            let fu = u / factor as f64 - 0.5;
            let fv = v / factor as f64 - 0.5;
            if fu < -0.5 || fv < -0.5 || fu > w as f64 - 0.5 || fv > h as f64 - 0.5 {
                continue;
            }
            let fu = fu.clamp(0.0, (w - 1) as f64);
            let fv = fv.clamp(0.0, (h - 1) as f64);
            let (u0, v0) = (fu.floor() as usize, fv.floor() as usize);
            let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
            let (a, b) = (fu - u0 as f64, fv - v0 as f64);
            let col = i * bw + j;
            for (vv, uu, wt) in [
                (v0, u0, (1.0 - a) * (1.0 - b)),
                (v0, u1, a * (1.0 - b)),
                (v1, u0, (1.0 - a) * b),
                (v1, u1, a * b),
            ] {
                p[(vv * w + uu) * m + col] += wt;
            }
        }
    }
    p
}

/// Head outputs as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub conf_logit: Var,
    pub confidence: Var,
    pub embedding: Var,
    pub offset: Var,
    pub height: Var,
}

#[derive(Debug, Clone)]
pub struct Head {
    hidden: Conv,
    out: Conv,
    embed_dim: usize,
    rows: usize,
    cols: usize,
}

impl Head {
    pub fn new(store: &mut ParamStore, config: &HeadConfig, grid: &BevGrid, rng: &mut ChaCha8Rng) -> Head {
        let hidden = Conv::new(store, "head.hidden", config.stp_channels, config.head_channels, 3, 1, rng);
        let out = Conv::with_gain(store, "head.out", config.head_channels, 3 + config.embed_dim, 1, 1, 0.5, rng);
        // start with low confidence everywhere
        store.get_mut(out.bias).data[0] = -2.0;
        Head {
            hidden,
            out,
            embed_dim: config.embed_dim,
            rows: grid.rows,
            cols: grid.cols,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bev: Var) -> HeadVars {
        let up = tape.resize(bev, self.rows, self.cols);
        let h = self.hidden.forward(tape, store, up);
        let h = tape.relu(h);
        let o = self.out.forward(tape, store, h);
        let e = self.embed_dim;
        let conf_logit = tape.slice_channels(o, 0, 1);
        let confidence = tape.sigmoid(conf_logit);
        let embedding = tape.slice_channels(o, 1, e);
        let raw_off = tape.slice_channels(o, 1 + e, 1);
        let t = tape.tanh(raw_off);
        let offset = tape.scale(t, 0.5);
        let height = tape.slice_channels(o, 2 + e, 1);
        HeadVars {
            conf_logit,
            confidence,
            embedding,
            offset,
            height,
        }
    }
}

/// Per-cell head rasters over the BEV grid (row-major, row 0 nearest).
#[derive(Debug, Clone, PartialEq)]
pub struct BevPrediction {
    pub rows: usize,
    pub cols: usize,
    pub embed_dim: usize,
    pub confidence: Vec<f64>,
    /// `embed_dim × rows × cols`.
    pub embedding: Vec<f64>,
    /// Lateral offset from the cell center in cell units, in `[-0.5, 0.5]`.
    pub x_offset: Vec<f64>,
    /// Road-frame `z` in meters.
    pub height: Vec<f64>,
}

impl BevPrediction {
    pub fn from_vars(tape: &Tape, vars: &HeadVars) -> BevPrediction {
        let (e, rows, cols) = tape.value(vars.embedding).chw();
        BevPrediction {
            rows,
            cols,
            embed_dim: e,
            confidence: tape.value(vars.confidence).data.clone(),
            embedding: tape.value(vars.embedding).data.clone(),
            x_offset: tape.value(vars.offset).data.clone(),
            height: tape.value(vars.height).data.clone(),
        }
    }

    pub fn zeros(rows: usize, cols: usize, embed_dim: usize) -> BevPrediction {
        let n = rows * cols;
        BevPrediction {
            rows,
            cols,
            embed_dim,
            confidence: vec![0.0; n],
            embedding: vec![0.0; embed_dim * n],
            x_offset: vec![0.0; n],
            height: vec![0.0; n],
        }
    }

    pub fn embedding_at(&self, cell: usize) -> Vec<f64> {
        let n = self.rows * self.cols;
        (0..self.embed_dim).map(|k| self.embedding[k * n + cell]).collect()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.rows * self.cols;
        self.confidence.len() == n
            && self.x_offset.len() == n
            && self.height.len() == n
            && self.embedding.len() == n * self.embed_dim
            && self.confidence.iter().all(|c| (0.0..=1.0).contains(c))
            && self.x_offset.iter().all(|o| (-0.5..=0.5).contains(o))
            && self.embedding.iter().chain(&self.height).all(|x| x.is_finite())
    }
}

/// Ground-truth rasters on the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRasters {
    pub rows: usize,
    pub cols: usize,
    pub confidence: Vec<f64>,
    pub offset: Vec<f64>,
    pub height: Vec<f64>,
    /// Lane index per positive cell, `-1` elsewhere.
    pub instance: Vec<i32>,
}

impl GtRasters {
    pub fn empty(rows: usize, cols: usize) -> GtRasters {
        let n = rows * cols;
        GtRasters {
            rows,
            cols,
            confidence: vec![0.0; n],
            offset: vec![0.0; n],
            height: vec![0.0; n],
            instance: vec![-1; n],
        }
    }

    pub fn positives(&self) -> usize {
        self.instance.iter().filter(|&&i| i >= 0).count()
    }
}

/// Loss values plus gradients with respect to the head outputs
/// (confidence logit, offset, height, embedding).
#[derive(Debug, Clone)]
pub struct HeadLosses {
    pub confidence: f64,
    pub offset: f64,
    pub height: f64,
    pub embedding: f64,
    pub no_positive_cells: bool,
    pub grad_logit: Vec<f64>,
    pub grad_offset: Vec<f64>,
    pub grad_height: Vec<f64>,
    pub grad_embedding: Vec<f64>,
}

fn ln_clamped(p: f64) -> f64 {
    p.clamp(1e-300, 1.0).ln()
}

pub fn head_losses(pred: &BevPrediction, gt: &GtRasters, config: &HeadConfig) -> Result<HeadLosses> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    let n = pred.rows * pred.cols;
    let w = config.pos_weight;
    let mut bce = 0.0;
    let mut grad_logit = vec![0.0; n];
    for i in 0..n {
        let (p, y) = (pred.confidence[i], gt.confidence[i]);
        bce -= w * y * ln_clamped(p) + (1.0 - y) * ln_clamped(1.0 - p);
        grad_logit[i] = ((1.0 - y) * p - w * y * (1.0 - p)) / n as f64;
    }
    let mut out = HeadLosses {
        confidence: bce / n as f64,
        offset: 0.0,
        height: 0.0,
        embedding: 0.0,
        no_positive_cells: false,
        grad_logit,
        grad_offset: vec![0.0; n],
        grad_height: vec![0.0; n],
        grad_embedding: vec![0.0; n * pred.embed_dim],
    };
    let pos: Vec<usize> = (0..n).filter(|&i| gt.instance[i] >= 0).collect();
    if pos.is_empty() {
        out.no_positive_cells = true;
        return Ok(out);
    }
    let np = pos.len() as f64;
    for &i in &pos {
        let d = pred.x_offset[i] - gt.offset[i];
        out.offset += d.abs();
        out.grad_offset[i] = d.signum() * (d != 0.0) as u8 as f64 / np;
        let d = pred.height[i] - gt.height[i];
        out.height += d.abs();
        out.grad_height[i] = d.signum() * (d != 0.0) as u8 as f64 / np;
    }
    out.offset /= np;
    out.height /= np;
    embedding_loss(pred, gt, &pos, config.margin, &mut out);
    Ok(out)
}

/// Pull each lane's embeddings to their mean, push lane means at least
/// `margin` apart.
fn embedding_loss(pred: &BevPrediction, gt: &GtRasters, pos: &[usize], margin: f64, out: &mut HeadLosses) {
    let e = pred.embed_dim;
    let n = pred.rows * pred.cols;
    let mut members: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for &i in pos {
        members.entry(gt.instance[i]).or_default().push(i);
    }
    let k = members.len() as f64;
    let means: Vec<Vec<f64>> = members
        .values()
        .map(|cells| {
            let mut m = vec![0.0; e];
            for &i in cells {
                for (d, md) in m.iter_mut().enumerate() {
                    *md += pred.embedding[d * n + i];
                }
            }
            m.iter_mut().for_each(|x| *x /= cells.len() as f64);
            m
        })
        .collect();
    let mut pull = 0.0;
    for (cells, mean) in members.values().zip(&means) {
        let nk = cells.len() as f64;
        for &i in cells {
            for d in 0..e {
                let diff = pred.embedding[d * n + i] - mean[d];
                pull += diff * diff / (nk * k);
                out.grad_embedding[d * n + i] += 2.0 * diff / (nk * k);
            }
        }
    }
    let mut push = 0.0;
    let lanes: Vec<&Vec<usize>> = members.values().collect();
    if lanes.len() >= 2 {
        let pairs = (lanes.len() * (lanes.len() - 1) / 2) as f64;
        for a in 0..lanes.len() {
            for b in a + 1..lanes.len() {
                let dist = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let h = margin - dist;
                if h <= 0.0 {
                    continue;
                }
                push += h * h / pairs;
                // d/dμa of h² = -2h (μa − μb)/dist
                let scale = -2.0 * h / (pairs * dist.max(1e-12));
                for d in 0..e {
                    let g = scale * (means[a][d] - means[b][d]);
                    for &i in lanes[a] {
                        out.grad_embedding[d * n + i] += g / lanes[a].len() as f64;
                    }
                    for &i in lanes[b] {
                        out.grad_embedding[d * n + i] -= g / lanes[b].len() as f64;
                    }
                }
            }
        }
    }
    out.embedding = pull + push;
}

/// Weighted head-loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadLossVars {
    pub confidence: Var,
    pub offset: Var,
    pub height: Var,
    pub embedding: Var,
}

pub fn head_loss_nodes(
    tape: &mut Tape,
    vars: &HeadVars,
    gt: &GtRasters,
    config: &HeadConfig,
) -> Result<(HeadLossVars, HeadLosses)> {
    let pred = BevPrediction::from_vars(tape, vars);
    let l = head_losses(&pred, gt, config)?;
    let shape1 = vec![1, pred.rows, pred.cols];
    let t = |data: &Vec<f64>, shape: &Vec<usize>| Tensor {
        shape: shape.clone(),
        data: data.clone(),
    };
    let confidence = tape.scalar(l.confidence, vec![(vars.conf_logit, t(&l.grad_logit, &shape1))]);
    let offset = tape.scalar(l.offset, vec![(vars.offset, t(&l.grad_offset, &shape1))]);
    let height = tape.scalar(l.height, vec![(vars.height, t(&l.grad_height, &shape1))]);
    let eshape = vec![pred.embed_dim, pred.rows, pred.cols];
    let embedding = tape.scalar(l.embedding, vec![(vars.embedding, t(&l.grad_embedding, &eshape))]);
    Ok((
        HeadLossVars {
            confidence,
            offset,
            height,
            embedding,
        },
        l,
    ))
}

/// Group confident cells into instances by greedy embedding linkage.
///
/// Cells above `conf_threshold` are visited by descending confidence (ties
/// by ascending cell index); each joins the cluster with the nearest mean
/// embedding if that distance is below `embed_threshold`, otherwise it
/// starts a new cluster. Returns cell indices per cluster.
pub fn cluster_cells(pred: &BevPrediction, conf_threshold: f64, embed_threshold: f64) -> Vec<Vec<usize>> {
    let n = pred.rows * pred.cols;
    let mut cells: Vec<usize> = (0..n).filter(|&i| pred.confidence[i] > conf_threshold).collect();
    cells.sort_by(|&a, &b| pred.confidence[b].total_cmp(&pred.confidence[a]).then(a.cmp(&b)));
    let mut clusters: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for i in cells {
        let emb = pred.embedding_at(i);
        let best = clusters
            .iter()
            .enumerate()
            .map(|(k, (_, mean))| {
                let d2: f64 = mean.iter().zip(&emb).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d2.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match best {
            Some((k, d)) if d < embed_threshold => {
                let (members, mean) = &mut clusters[k];
                members.push(i);
                let m = members.len() as f64;
                for (mu, x) in mean.iter_mut().zip(&emb) {
                    *mu += (x - *mu) / m;
                }
            }
            _ => clusters.push((vec![i], emb)),
        }
    }
    clusters.into_iter().map(|(m, _)| m).collect()
}

/// A decoded lane with the cells it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLane {
    pub lane: Lane3D,
    /// Mean confidence of the per-row keypoints.
    pub score: f64,
    pub cells: Vec<usize>,
}

impl DecodedLane {
    pub fn scored(&self) -> ScoredLane {
        ScoredLane {
            lane: self.lane.clone(),
            score: self.score,
        }
    }
}

/// Turn head rasters into lane instances.
pub fn decode_instances(
    pred: &BevPrediction,
    conf_threshold: f64,
    embed_threshold: f64,
    grid: &BevGrid,
) -> Vec<DecodedLane> {
    let mut out = Vec::new();
    for cells in cluster_cells(pred, conf_threshold, embed_threshold) {
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &cells {
            let (r, c) = (i / pred.cols, i % pred.cols);
            match best.get(&r) {
                Some(&j) => {
                    let (pc, pj) = (pred.confidence[i], pred.confidence[j]);
                    if pc > pj || (pc == pj && c < j % pred.cols) {
                        best.insert(r, i);
                    }
                }
                None => {
                    best.insert(r, i);
                }
            }
        }
        if best.len() < 2 {
            continue;
        }
        let points: Vec<[f64; 3]> = best
            .iter()
            .map(|(&r, &i)| {
                let c = i % pred.cols;
                [
                    grid.cell_center_x(c) + pred.x_offset[i] * grid.cell_size.0,
                    grid.row_center_y(r),
                    pred.height[i],
                ]
            })
            .collect();
        let score = best.values().map(|&i| pred.confidence[i]).sum::<f64>() / best.len() as f64;
        if let Ok(lane) = Lane3D::new(points, None) {
            out.push(DecodedLane { lane, score, cells });
        }
    }
    out
}
