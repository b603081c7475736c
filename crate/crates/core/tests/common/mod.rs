//! Checks shared by the acceptance target and the regular integration tests.
//! Each returns an `Outcome` instead of panicking so the acceptance runner can
//! report every criterion.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use depth3dlane::bevhead::{head_loss_nodes, GtRasters, Head, HeadConfig, Stp};
use depth3dlane::config::{RunConfig, TrainConfig};
use depth3dlane::crf::{build_lane_region, crf_energy, mean_field_refine, mean_field_trace, CrfConfig, CrfProblem};
use depth3dlane::data::{generate_scene, parse_apollo, parse_openlane, rasterize_gt, SceneConfig, APOLLO_IMAGE_SIZE};
use depth3dlane::distill::{
    distillation_loss, distillation_loss_node, prepare_teacher, record_teacher_features, Student, SyntheticTeacher,
};
use depth3dlane::geometry::{ground_homography, warp_to_virtual, BevGrid, CameraRig};
use depth3dlane::lane::{Lane3D, ScoredLane};
use depth3dlane::metrics::{evaluate, match_lanes, pair_cost, resample_lane, EvalConfig, Frame};
use depth3dlane::model::Model;
use depth3dlane::network::{depth_loss_node, Backbone, BackboneConfig, Hdah, Mode, Scale};
use depth3dlane::nn::gradcheck::{central_difference, relative_error, sample_indices};
use depth3dlane::nn::{normal_tensor, ParamStore, Tape, Tensor, Var};
use depth3dlane::raster::Raster;
use depth3dlane::train::{train, TrainSample};
use depth3dlane::Error;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(ok: bool, detail: impl Into<String>) -> Self {
        Outcome {
            ok,
            detail: detail.into(),
        }
    }
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

fn random_rig(r: &mut ChaCha8Rng) -> CameraRig {
    let f = r.random_range(250.0..1200.0);
    let (h, w) = (r.random_range(200..800), r.random_range(300..1200));
    CameraRig::from_params(
        f,
        f * r.random_range(0.95..1.05),
        w as f64 * r.random_range(0.4..0.6),
        h as f64 * r.random_range(0.4..0.6),
        (h, w),
        r.random_range(-3.0..3.0),
        r.random_range(0.5..12.0),
        r.random_range(-5.0..5.0),
        [r.random_range(-0.5..0.5), r.random_range(-1.0..1.0), r.random_range(1.0..2.5)],
    )
    .unwrap()
}

/// Ground hit of the pixel ray by marching in 0.25 m steps and bisecting;
/// independent of the closed-form intersection.
fn march_to_ground(rig: &CameraRig, u: f64, v: f64) -> Option<Vector3<f64>> {
    let origin = *rig.translation();
    let d = rig.pixel_ray(u, v).normalize();
    if d.z >= -1e-6 {
        return None;
    }
    let mut t0 = 0.0;
    loop {
        let t1 = t0 + 0.25;
        if (origin + d * t1).z <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (origin + d * mid).z > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            return Some(origin + d * (0.5 * (lo + hi)));
        }
        t0 = t1;
        if t0 > 400.0 {
            return None;
        }
    }
}

pub fn geometry_oracles() -> Outcome {
    let t = Instant::now();
    let mut r = rng(11);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..50 {
        let (src, dst) = (random_rig(&mut r), random_rig(&mut r));
        let h = ground_homography(&src, &dst);
        let (sh, sw) = src.image_size();
        for _ in 0..40 {
            let (u, v) = (r.random_range(0.0..sw as f64), r.random_range(0.0..sh as f64));
            let Some(p) = march_to_ground(&src, u, v) else { continue };
            let Some((ou, ov)) = dst.project(&p) else { continue };
            let q = h * Vector3::new(u, v, 1.0);
            let err = (q.x / q.z - ou).hypot(q.y / q.z - ov);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let grid = BevGrid::new((-10.0, 10.0), (3.0, 103.0), (0.5, 0.5)).unwrap();
    let mut round_trip = true;
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let p = grid.cell_to_road(row, col);
            round_trip &= grid.road_to_cell(p.x, p.y) == Some((row, col));
        }
    }
    let rig = CameraRig::desk_default();
    let copy = rig.to_config().build().unwrap();
    let img = Raster::from_fn(3, 256, 512, |c, v, u| ((c * 7 + v * 3 + u) % 255) as f64 / 255.0);
    let identity = warp_to_virtual(&img, &rig, &copy).unwrap().data == img.data;
    let elapsed = t.elapsed();
    let ok = worst < 1e-6 && checked > 500 && round_trip && identity && elapsed < Duration::from_secs(10);
    Outcome::new(
        ok,
        format!(
            "homography max err {worst:.2e} px over {checked} points (< 1e-6); BEV cell round trip {round_trip}; identity warp no-op {identity}; {:.2} s (< 10 s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- gradients

/// Max relative error between tape gradients and central differences for
/// sampled coordinates of every parameter tensor and every leaf input.
fn grad_check(store: &mut ParamStore, leaves: &[Tensor], build: &dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Var, per_tensor: usize) -> (f64, String) {
    // zero biases over ReLU-zeroed inputs sit exactly on a kink
    let mut r = rng(99);
    for t in 0..store.len() {
        let id = depth3dlane::nn::ParamId(t);
        for x in store.get_mut(id).data.iter_mut() {
            *x += r.random_range(-0.05..0.05);
        }
    }
    let store = &*store;
    let eval = |store: &ParamStore, leaves: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let l = build(&mut tape, store, &vars);
        tape.value(l).data[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let loss = build(&mut tape, store, &vars);
    let grads = tape.backward(loss);
    let leaf_grads: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(v, l)| grads.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(&l.shape)))
        .collect();
    let dense = grads.into_dense(store);
    // central differences at this step carry ~1e-10 of round-off, so
    // gradients below the floor are compared in absolute terms
    let step = 1e-6;
    let floor = 1e-6;
    let (mut worst, mut at) = (0.0f64, String::new());
    for (k, leaf) in leaves.iter().enumerate() {
        let mut d = leaf.data.clone();
        for i in sample_indices(d.len(), per_tensor) {
            let n = central_difference(&mut d, i, step, |x| {
                let mut ls = leaves.to_vec();
                ls[k].data.copy_from_slice(x);
                eval(store, &ls)
            });
            let e = relative_error(leaf_grads[k].data[i], n, floor);
            if e > worst {
                (worst, at) = (e, format!("input{k}[{i}] {:.3e} vs {n:.3e}", leaf_grads[k].data[i]));
            }
        }
    }
    for (pid, name, t) in store.iter() {
        let mut d = t.data.clone();
        for i in sample_indices(d.len(), per_tensor) {
            let n = central_difference(&mut d, i, step, |x| {
                let mut s = store.clone();
                s.get_mut(pid).data.copy_from_slice(x);
                eval(&s, leaves)
            });
            let e = relative_error(dense[pid.0].data[i], n, floor);
            if e > worst {
                (worst, at) = (e, format!("{name}[{i}] {:.3e} vs {n:.3e}", dense[pid.0].data[i]));
            }
        }
    }
    (worst, at)
}

/// Fixed random linear functional of a variable, as a scalar node.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let t = tape.value(v).clone();
    let w = normal_tensor(&t.shape, 1.0, &mut rng(seed));
    let value = t.data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
    tape.scalar(value, vec![(v, w)])
}

fn tiny_grid() -> BevGrid {
    BevGrid::new((-2.0, 2.0), (3.0, 11.0), (0.5, 0.5)).unwrap()
}

fn tiny_head_config() -> HeadConfig {
    HeadConfig {
        stp_channels: 4,
        stp_groups: 2,
        head_channels: 5,
        ..HeadConfig::default()
    }
}

pub fn gradient_components() -> Vec<(&'static str, f64, String)> {
    let mut out = Vec::new();

    // depth-aware head: backbone pyramid → encoder taps → decoder depth
    {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let bc = BackboneConfig { channels: [3, 3, 3, 3, 3] };
        let backbone = Backbone::new(&mut store, &bc, Scale::S32, &mut r);
        let hdah = Hdah::new(&mut store, &bc, Scale::S32, &mut r);
        let image = normal_tensor(&[3, 32, 64], 0.5, &mut r);
        let target: Vec<f64> = (0..32 * 64).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let valid: Vec<bool> = (0..32 * 64).map(|i| i % 7 != 0).collect();
        let build = |tape: &mut Tape, store: &ParamStore, v: &[Var]| {
            let pyr = backbone.forward(tape, store, v[0]).unwrap();
            let (depth, taps) = hdah.forward(tape, store, &pyr, (32, 64), Mode::Train).unwrap();
            let (dl, _) = depth_loss_node(tape, depth.unwrap(), &target, &valid).unwrap();
            let p = probe(tape, taps.get(Scale::S32).unwrap(), 3);
            tape.weighted_sum(&[(dl, 1.0), (p, 0.1)])
        };
        let (e, at) = grad_check(&mut store, &[image], &build, 20);
        out.push(("depth-aware head path", e, at));
    }

    // student projection with the distillation loss on top
    {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let st = Student::new(&mut store, Scale::S32, 3, 4, &mut r);
        let x = normal_tensor(&[3, 4, 6], 1.0, &mut r);
        let teacher = Raster::from_vec(4, 2, 3, normal_tensor(&[4, 2, 3], 1.0, &mut r).data).unwrap();
        let build = |tape: &mut Tape, store: &ParamStore, v: &[Var]| {
            let s = st.forward(tape, store, v[0]);
            distillation_loss_node(tape, s, &teacher).unwrap().0
        };
        let (e, at) = grad_check(&mut store, &[x], &build, 20);
        out.push(("student modules", e, at));
    }

    // spatial transformation over two levels
    {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let cfg = tiny_head_config();
        let stp = Stp::new(&mut store, &[(Scale::S32, 3, (4, 6)), (Scale::S64, 3, (2, 3))], &cfg, &tiny_grid(), None, &mut r);
        let a = normal_tensor(&[3, 4, 6], 1.0, &mut r);
        let b = normal_tensor(&[3, 2, 3], 1.0, &mut r);
        let build = |tape: &mut Tape, store: &ParamStore, v: &[Var]| {
            let fused = BTreeMap::from([(Scale::S32, v[0]), (Scale::S64, v[1])]);
            let y = stp.forward(tape, store, &fused).unwrap();
            probe(tape, y, 5)
        };
        let (e, at) = grad_check(&mut store, &[a, b], &build, 20);
        out.push(("spatial transformation", e, at));
    }

    // head and its four losses
    {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let cfg = tiny_head_config();
        let grid = tiny_grid();
        let head = Head::new(&mut store, &cfg, &grid, &mut r);
        let lanes = [
            Lane3D::new(vec![[-1.2, 3.0, 0.1], [-0.9, 11.0, 0.4]], None).unwrap(),
            Lane3D::new(vec![[1.1, 3.0, 0.0], [1.4, 11.0, -0.2]], None).unwrap(),
        ];
        let gt: GtRasters = rasterize_gt(&lanes, &grid);
        let bev = normal_tensor(&[4, 4, 2], 1.0, &mut r);
        let build = |tape: &mut Tape, store: &ParamStore, v: &[Var]| {
            let vars = head.forward(tape, store, v[0]);
            let (l, _) = head_loss_nodes(tape, &vars, &gt, &cfg).unwrap();
            tape.weighted_sum(&[(l.confidence, 1.0), (l.offset, 0.7), (l.height, 0.5), (l.embedding, 0.3)])
        };
        let (e, at) = grad_check(&mut store, &[bev], &build, 20);
        out.push(("head losses", e, at));
    }

    // distillation loss with respect to the student map alone
    {
        let mut r = rng(5);
        let s = normal_tensor(&[4, 3, 5], 1.0, &mut r);
        let teacher = Raster::from_vec(4, 6, 10, normal_tensor(&[4, 6, 10], 2.0, &mut r).data).unwrap();
        let mut store = ParamStore::new();
        let build = |tape: &mut Tape, _: &ParamStore, v: &[Var]| distillation_loss_node(tape, v[0], &teacher).unwrap().0;
        let (e, at) = grad_check(&mut store, &[s], &build, 60);
        out.push(("distillation loss", e, at));
    }
    out
}

pub fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let comps = gradient_components();
    let elapsed = t.elapsed();
    let ok = comps.iter().all(|c| c.1 < 1e-3) && elapsed < Duration::from_secs(120);
    let parts: Vec<String> = comps.iter().map(|(n, e, at)| format!("{n} {e:.1e} ({at})")).collect();
    Outcome::new(ok, format!("max rel err < 1e-3: {}; {:.1} s (< 120 s)", parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- CRF

/// Random problem over a `rows × cols` raster with every cell in the region.
pub fn random_crf_problem(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> CrfProblem {
    let n = rows * cols;
    let p: Vec<f64> = (0..n).map(|_| r.random_range(0.02..0.98)).collect();
    let color = Raster::from_vec(3, rows, cols, (0..3 * n).map(|_| r.random_range(0.0..0.2)).collect()).unwrap();
    let depth = Raster::from_vec(1, rows, cols, (0..n).map(|_| r.random_range(0.0..0.3)).collect()).unwrap();
    let region: Vec<usize> = (0..n).collect();
    CrfProblem::new(&p, color, depth, region, (0, 0)).unwrap()
}

fn random_crf_config(r: &mut ChaCha8Rng) -> CrfConfig {
    CrfConfig {
        w1: r.random_range(0.5..1.5),
        w2: r.random_range(0.0..1.5),
        w3: r.random_range(0.0..1.5),
        iterations: 10,
        neighborhood: if r.random_bool(0.5) { 4 } else { 8 },
        ..CrfConfig::default()
    }
}

/// Independent energy: explicit neighbor offsets and the contrast-sensitive
/// Potts weight written out again.
fn reference_energy(labels: &[bool], pb: &CrfProblem, cfg: &CrfConfig) -> f64 {
    let (rows, cols) = (pb.rows, pb.cols);
    let n = rows * cols;
    let mut e = 0.0;
    for (k, &i) in pb.region.iter().enumerate() {
        let p = pb.unary_prob[i];
        e += cfg.w1 * if labels[k] { -p.ln() } else { -(1.0 - p).ln() };
    }
    let offs: Vec<(isize, isize)> = if cfg.neighborhood == 4 {
        vec![(0, 1), (1, 0)]
    } else {
        vec![(0, 1), (1, -1), (1, 0), (1, 1)]
    };
    let idx: BTreeMap<usize, usize> = pb.region.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    for (&i, &k) in &idx {
        let (r0, c0) = ((i / cols) as isize, (i % cols) as isize);
        for &(dr, dc) in &offs {
            let (r1, c1) = (r0 + dr, c0 + dc);
            if r1 < 0 || c1 < 0 || r1 >= rows as isize || c1 >= cols as isize {
                continue;
            }
            let j = r1 as usize * cols + c1 as usize;
            let Some(&m) = idx.get(&j) else { continue };
            if labels[k] == labels[m] {
                continue;
            }
            let dc2: f64 = (0..3).map(|ch| (pb.color.data[ch * n + i] - pb.color.data[ch * n + j]).powi(2)).sum();
            let dd = pb.depth.data[i] - pb.depth.data[j];
            e += cfg.w2 * (-dc2 / (2.0 * cfg.sigma_color.powi(2))).exp()
                + cfg.w3 * (-dd * dd / (2.0 * cfg.sigma_depth.powi(2))).exp();
        }
    }
    e
}

pub fn crf_suite() -> Outcome {
    let t = Instant::now();
    let mut r = rng(21);
    // (a) no pairwise weight → unaries exactly
    let mut unary_exact = true;
    for _ in 0..100 {
        let pb = random_crf_problem(&mut r, 3, 4);
        let cfg = CrfConfig {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            ..random_crf_config(&mut r)
        };
        let out = mean_field_refine(&pb, &pb.unary_prob, &cfg);
        unary_exact &= out == pb.unary_prob;
    }
    // (b) monotone free energy; (c) argmax energy vs unary argmax
    let (mut monotone, mut max_rise) = (0, f64::NEG_INFINITY);
    let (mut not_worse, mut energy_mismatch) = (0, 0.0f64);
    for _ in 0..100 {
        let (rows, cols) = [(3, 4), (2, 6), (4, 3), (2, 5), (3, 3)][r.random_range(0..5)];
        let pb = random_crf_problem(&mut r, rows, cols);
        let cfg = random_crf_config(&mut r);
        let (q, f) = mean_field_trace(&pb, &cfg);
        let rise = f.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        max_rise = max_rise.max(rise);
        if rise <= 1e-9 {
            monotone += 1;
        }
        let m = pb.region.len();
        for code in 0..(1u32 << m) {
            let labels: Vec<bool> = (0..m).map(|k| code >> k & 1 == 1).collect();
            energy_mismatch = energy_mismatch.max((crf_energy(&labels, &pb, &cfg) - reference_energy(&labels, &pb, &cfg)).abs());
        }
        let refined: Vec<bool> = q.iter().map(|&x| x > 0.5).collect();
        let unary: Vec<bool> = pb.region.iter().map(|&i| pb.unary_prob[i] > 0.5).collect();
        if reference_energy(&refined, &pb, &cfg) <= reference_energy(&unary, &pb, &cfg) + 1e-12 {
            not_worse += 1;
        }
    }
    // (d) a one-cell gap in a uniform lane
    let (rows, cols, lane_col, gap_row) = (12, 7, 3, 6);
    let mut p = vec![0.05; rows * cols];
    for row in 0..rows {
        p[row * cols + lane_col] = if row == gap_row { 0.3 } else { 0.9 };
    }
    let color = Raster::from_fn(3, rows, cols, |_, _, c| if c == lane_col { 0.9 } else { 0.35 });
    let depth = Raster::filled(1, rows, cols, 0.5);
    let cfg = RunConfig::load(Some(Path::new(&config_path("overfit.toml"))), &[]).unwrap().crf;
    let region = build_lane_region(&p, rows, cols, (0, lane_col), &cfg);
    let pb = CrfProblem::new(&p, color, depth, region, (0, lane_col)).unwrap();
    let out = mean_field_refine(&pb, &p, &cfg);
    let gi = gap_row * cols + lane_col;
    let gap_gain = out[gi] > p[gi];
    // reported only: the untuned defaults on the same lane
    let d = CrfConfig::default();
    let region = build_lane_region(&p, rows, cols, (0, lane_col), &d);
    let pd = CrfProblem::new(&p, pb.color.clone(), pb.depth.clone(), region, (0, lane_col)).unwrap();
    let with_defaults = mean_field_refine(&pd, &p, &d)[gi];
    let elapsed = t.elapsed();
    let ok = unary_exact
        && monotone == 100
        && not_worse >= 95
        && energy_mismatch < 1e-9
        && gap_gain
        && elapsed < Duration::from_secs(60);
    Outcome::new(
        ok,
        format!(
            "(a) zero pairwise = unaries {unary_exact}; (b) monotone {monotone}/100 (max rise {max_rise:.1e}, tol 1e-9); (c) refined <= unary argmax energy {not_worse}/100 (>= 95), enumerated energies agree to {energy_mismatch:.1e}; (d) gap {:.3} -> {:.3} (untuned defaults: {:.3}); {:.2} s (< 60 s)",
            p[gi],
            out[gi],
            with_defaults,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn lane_from_fn(f: impl Fn(f64) -> (f64, f64), ys: &[f64]) -> Lane3D {
    Lane3D::new(ys.iter().map(|&y| { let (x, z) = f(y); [x, y, z] }).collect(), None).unwrap()
}

/// Max-cardinality, then min-cost matching by enumerating every injective
/// assignment of predictions to ground truth or nothing.
fn brute_force_matching(costs: &[Vec<Option<f64>>], ng: usize) -> (usize, f64) {
    fn go(i: usize, costs: &[Vec<Option<f64>>], used: &mut Vec<bool>, count: usize, cost: f64, best: &mut (usize, f64)) {
        if i == costs.len() {
            if count > best.0 || (count == best.0 && cost < best.1) {
                *best = (count, cost);
            }
            return;
        }
        go(i + 1, costs, used, count, cost, best);
        for j in 0..used.len() {
            if let (false, Some(c)) = (used[j], costs[i][j]) {
                used[j] = true;
                go(i + 1, costs, used, count + 1, cost + c, best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, costs, &mut vec![false; ng], 0, 0.0, &mut best);
    best
}

pub fn metrics_oracle() -> Outcome {
    let cfg = EvalConfig::default();
    let mut r = rng(31);
    let ys: Vec<f64> = (0..=20).map(|k| 3.0 + 5.0 * k as f64).collect();
    let (mut agree, mut total) = (0, 0);
    for _ in 0..400 {
        let (np, ng) = (r.random_range(0..=5), r.random_range(0..=5));
        let gts: Vec<Lane3D> = (0..ng)
            .map(|k| {
                let x0 = -6.0 + 3.0 * k as f64 + r.random_range(-0.3..0.3);
                lane_from_fn(|y| (x0 + 1e-4 * y * y, 0.01 * y), &ys)
            })
            .collect();
        let preds: Vec<Lane3D> = (0..np)
            .map(|_| {
                let x0 = r.random_range(-7.0..7.0);
                let start = r.random_range(0..10);
                lane_from_fn(|y| (x0 + 1e-4 * y * y, 0.01 * y + 0.1), &ys[start..])
            })
            .collect();
        let rp: Vec<_> = preds.iter().map(|l| resample_lane(l, &cfg.y_samples)).collect();
        let rg: Vec<_> = gts.iter().map(|l| resample_lane(l, &cfg.y_samples)).collect();
        let costs: Vec<Vec<Option<f64>>> = rp.iter().map(|p| rg.iter().map(|g| pair_cost(p, g, &cfg)).collect()).collect();
        let (count, cost) = brute_force_matching(&costs, ng);
        let m = match_lanes(&preds, &gts, &cfg);
        total += 1;
        if m.tp() == count && (m.total_cost() - cost).abs() < 1e-9 {
            agree += 1;
        }
    }
    // perturbations with exact expected errors
    let gt = lane_from_fn(|y| (1.0 + 0.002 * y, 0.0), &ys);
    let shifted = lane_from_fn(|y| (1.1 + 0.002 * y, 0.0), &ys);
    let split = lane_from_fn(|y| (1.0 + 0.002 * y + if y < 40.0 { 0.1 } else { 0.3 }, if y < 40.0 { -0.2 } else { 0.05 }), &ys);
    let frame = |p: &Lane3D| Frame {
        id: "f".into(),
        preds: vec![ScoredLane {
            lane: p.clone(),
            score: 1.0,
        }],
        gts: vec![gt.clone()],
    };
    let a = evaluate(&[frame(&shifted)], &cfg).unwrap();
    let b = evaluate(&[frame(&split)], &cfg).unwrap();
    let near = |v: Option<f64>, want: f64| v.is_some_and(|v| (v - want).abs() <= 1e-12);
    let shift_ok = near(a.errors.x_err_near, 0.1) && near(a.errors.x_err_far, 0.1) && near(a.errors.z_err_near, 0.0);
    let split_ok = near(b.errors.x_err_near, 0.1)
        && near(b.errors.x_err_far, 0.3)
        && near(b.errors.z_err_near, 0.2)
        && near(b.errors.z_err_far, 0.05);
    // predictions equal to ground truth over several scenes
    let scene = SceneConfig::default();
    let frames: Vec<Frame> = (0..4)
        .map(|i| {
            let s = generate_scene(&scene, i).unwrap();
            Frame {
                id: s.id.clone(),
                preds: s.lanes.iter().map(|l| ScoredLane { lane: l.clone(), score: 0.9 }).collect(),
                gts: s.lanes,
            }
        })
        .collect();
    let same = evaluate(&frames, &cfg).unwrap();
    let perfect = same.f1 == 1.0 && same.ap == 1.0;
    let ok = agree == total && shift_ok && split_ok && perfect;
    Outcome::new(
        ok,
        format!(
            "matching = brute force on {agree}/{total} instances <= 5x5; dx=0.1 -> x-err near {:.12}, far {:.12}; split case near/far x {:?}/{:?} z {:?}/{:?}; preds=gts F1 {} AP {}",
            a.errors.x_err_near.unwrap_or(f64::NAN),
            a.errors.x_err_far.unwrap_or(f64::NAN),
            b.errors.x_err_near,
            b.errors.x_err_far,
            b.errors.z_err_near,
            b.errors.z_err_far,
            same.f1,
            same.ap
        ),
    )
}

// ---------------------------------------------------------------- distillation

fn small_run() -> RunConfig {
    let rig = CameraRig::desk_default().resized(64, 128).unwrap().to_config();
    let mut run = RunConfig::default();
    run.model.virtual_rig = rig.clone();
    run.data.scene.rig = rig;
    run.data.scene.supersample = 1;
    run.train = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    run
}

fn train_small(run: &RunConfig, scenes: &[depth3dlane::data::Sample]) -> Model {
    let mut model = Model::new(&run.model, run.seed).unwrap();
    let teacher = SyntheticTeacher::new(run.model.teacher.seed, run.model.teacher.channels);
    let samples: Vec<TrainSample> = scenes
        .iter()
        .map(|s| TrainSample::new(&model, &s.id, &s.image, Some(&s.depth), &s.lanes, &s.rig, Some(&teacher)).unwrap())
        .collect();
    train(&mut model, &samples, &run.train, run.seed, |_| {}).unwrap();
    model
}

pub fn distillation_determinism(dir: &Path) -> Outcome {
    let run = small_run();
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(&run.data.scene, i).unwrap()).collect();
    let images: Vec<Raster> = scenes.iter().map(|s| s.image.clone()).collect();
    let a = record_teacher_features(&images, &SyntheticTeacher::new(17, 16), &dir.join("a.bin")).unwrap();
    let b = record_teacher_features(&images, &SyntheticTeacher::new(17, 16), &dir.join("b.bin")).unwrap();
    let archives_equal = a.to_bytes() == b.to_bytes()
        && std::fs::read(dir.join("a.bin")).unwrap() == std::fs::read(dir.join("b.bin")).unwrap();

    let teacher = Raster::from_fn(16, 8, 16, |c, v, u| ((c * 31 + v * 7 + u * 3) % 17) as f64 * 0.25 - 1.0);
    let (target, _) = prepare_teacher(&teacher, 4, 8);
    let fixed = Tensor::from_vec(&[16, 4, 8], target).unwrap();
    let zero_loss = distillation_loss(&fixed, &teacher).unwrap().value;

    let mut w0 = run.clone();
    w0.train.weights.distill = 0.0;
    let mut off = run.clone();
    off.train.distill_loss_on = false;
    let m0 = train_small(&w0, &scenes);
    let m_off = train_small(&off, &scenes);
    let m_on = train_small(&run, &scenes);
    let bitwise = m0.store().tensors() == m_off.store().tensors();
    let fused = m0.store().iter().any(|(_, n, _)| n.starts_with("student"));
    let differs = m_on.store().tensors() != m_off.store().tensors();
    let ok = archives_equal && zero_loss == 0.0 && bitwise && fused && differs;
    Outcome::new(
        ok,
        format!(
            "archives identical {archives_equal} ({} entries); loss at fixed point {zero_loss:e}; weight-0 run bitwise = loss-disabled run {bitwise} (fusion active {fused}; weight-1 run differs {differs})",
            a.len()
        ),
    )
}

// ---------------------------------------------------------------- parsers

/// (fixture, OpenLane?, expected line, expected key)
pub const MALFORMED: &[(&str, bool, usize, Option<&str>)] = &[
    ("openlane_truncated.json", true, 6, None),
    ("openlane_missing_extrinsic.json", true, 4, Some("extrinsic")),
    ("openlane_bad_xyz.json", true, 5, Some("xyz")),
    ("openlane_visibility_mismatch.json", true, 6, Some("visibility")),
    ("openlane_wrong_type.json", true, 2, None),
    ("apollo_bad_line.jsonl", false, 2, None),
    ("apollo_visibility_shape.jsonl", false, 3, Some("laneLines_visibility")),
    ("apollo_missing_height.jsonl", false, 1, Some("cam_height")),
];

fn pts(l: &Lane3D) -> Vec<[f64; 3]> {
    l.points().to_vec()
}

/// Exact field recovery for the well-formed fixtures.
pub fn good_fixture_failures() -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            bad.push(what.to_string());
        }
    };
    let a = parse_openlane(&fixture("openlane_frame.json")).unwrap();
    check(a.lanes.len() == 2 && a.skipped == 1, "openlane lane count");
    check(pts(&a.lanes[0]) == vec![[-1.75, 11.5, 0.0], [-1.75, 21.5, 0.0], [-2.0, 31.5, 0.25]], "openlane lane 0");
    check(a.lanes[0].category() == Some(1), "openlane category");
    check(pts(&a.lanes[1]) == vec![[1.5, 11.5, 0.0], [1.625, 21.5, 0.0], [1.75, 31.5, 0.0]], "openlane lane 1");
    check(a.rig.image_size() == (1280, 1920), "openlane size");
    check((a.rig.camera_height() - 1.5).abs() < 1e-12, "openlane height");
    let proj = a.rig.project(&Vector3::new(1.0, 11.5, 0.5)).unwrap();
    check((proj.0 - 1060.0).abs() < 1e-9 && (proj.1 - 740.0).abs() < 1e-9, "openlane projection");
    let f = parse_apollo(&fixture("apollo_frames.jsonl")).unwrap();
    check(f.len() == 2, "apollo frame count");
    check(pts(&f[0].lanes[0]) == vec![[-1.75, 5.0, 0.0], [-1.75, 10.0, 0.125], [-1.5, 20.0, 0.25]], "apollo lane 0");
    check(pts(&f[0].lanes[1]) == vec![[1.75, 5.0, 0.0], [1.75, 20.0, 0.25]], "apollo lane 1");
    check(f[0].rig.image_size() == APOLLO_IMAGE_SIZE, "apollo size");
    let k = f[0].rig.intrinsics();
    check([k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]] == [2015.0, 2015.0, 960.0, 540.0], "apollo intrinsics");
    let (_, v) = f[0].rig.project(&Vector3::new(0.0, 1e9, 1.5)).unwrap();
    check((v - (540.0 - 2015.0 * 0.0625f64.tan())).abs() < 1e-3, "apollo pitch");
    check(pts(&f[1].lanes[0]) == vec![[0.5, 3.0, 0.0], [0.5, 9.0, 0.0]] && f[1].skipped == 1, "apollo visibility");
    check((f[1].rig.camera_height() - 1.75).abs() < 1e-12, "apollo height");
    bad
}

/// Every malformed fixture must fail with a parse error at the expected line.
pub fn malformed_fixture_failures() -> Vec<String> {
    let mut bad = Vec::new();
    for &(name, openlane, line, key) in MALFORMED {
        let text = fixture(name);
        let err = if openlane {
            parse_openlane(&text).err()
        } else {
            parse_apollo(&text).err()
        };
        let Some(err) = err else {
            bad.push(format!("{name}: parsed"));
            continue;
        };
        let Error::Parse { key: k, location, .. } = &err else {
            bad.push(format!("{name}: not a parse error: {err}"));
            continue;
        };
        let line_ok = location.line == line || (name.contains("truncated") && location.line >= line);
        let line_start: usize = text.split_inclusive('\n').take(location.line - 1).map(str::len).sum();
        let column_ok = location.column == location.offset + 1 - line_start.min(location.offset + 1);
        let key_ok = key.is_none_or(|key| k.as_deref() == Some(key));
        let shown = err.to_string().contains(&format!("line {}", location.line));
        if !(line_ok && column_ok && key_ok && shown) {
            bad.push(format!("{name}: {err} (key {k:?})"));
        }
    }
    bad
}

pub fn parser_suite() -> Outcome {
    let good = good_fixture_failures();
    let bad = malformed_fixture_failures();
    Outcome::new(
        good.is_empty() && bad.is_empty(),
        format!(
            "2 well-formed fixtures, exact fields ({}); {} malformed fixtures fail with located errors ({})",
            if good.is_empty() { "ok".to_string() } else { good.join("; ") },
            MALFORMED.len(),
            if bad.is_empty() { "ok".to_string() } else { bad.join("; ") }
        ),
    )
}

// ---------------------------------------------------------------- end to end

/// Run one CLI command in-process against `workspace`; returns its JSON line.
pub fn cli(workspace: &Path, args: &[&str]) -> depth3dlane::Result<serde_json::Value> {
    use clap::Parser;
    let mut argv = vec!["depth3dlane", "--workspace", workspace.to_str().unwrap()];
    argv.extend_from_slice(args);
    let parsed = depth3dlane::cli::Cli::try_parse_from(&argv).expect("valid arguments");
    let mut out = Vec::new();
    depth3dlane::cli::run(parsed, &mut out)?;
    Ok(serde_json::from_slice(&out).expect("one JSON line"))
}

pub fn config_path(name: &str) -> String {
    repo_root().join("configs").join(name).to_str().unwrap().to_string()
}

/// Largest |z| over all lane points and largest deviation of a lane from
/// its chord in x, over a split.
fn scene_shape(dir: &Path) -> (f64, f64) {
    let split = depth3dlane::data::load_split(dir).unwrap();
    let (mut z, mut bend) = (0.0f64, 0.0f64);
    for e in &split {
        for l in &e.lanes {
            let p = l.points();
            let (a, b) = (p[0], p[p.len() - 1]);
            for q in p {
                z = z.max(q[2].abs());
                let t = (q[1] - a[1]) / (b[1] - a[1]);
                bend = bend.max((q[0] - (a[0] + t * (b[0] - a[0]))).abs());
            }
        }
    }
    (z, bend)
}

pub fn overfit(workspace: &Path) -> Outcome {
    let cfg = config_path("overfit.toml");
    let t = Instant::now();
    let run = || -> depth3dlane::Result<(serde_json::Value, serde_json::Value)> {
        cli(workspace, &["--config", &cfg, "gen-data", "--split", "train"])?;
        let tr = cli(workspace, &["--config", &cfg, "train"])?;
        let ev = cli(workspace, &["--config", &cfg, "eval", "--data", "data/train", "--out", "eval_train.json"])?;
        Ok((tr, ev))
    };
    let (tr, ev) = match run() {
        Ok(v) => v,
        Err(e) => return Outcome::new(false, format!("pipeline failed: {e}")),
    };
    let elapsed = t.elapsed();
    let full: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(workspace.join("eval_train.json")).unwrap()).unwrap();
    let f1 = ev["f1"].as_f64().unwrap_or(0.0);
    let z = full["z_err"].as_f64().unwrap_or(f64::INFINITY);
    let run = RunConfig::load(Some(Path::new(&cfg)), &[]).unwrap();
    let amp = run.data.scene.slope_amplitude.1;
    let (max_z, bend) = scene_shape(&workspace.join("data/train"));
    let (h, w) = run.model.input_hw();
    let shape_ok = run.data.train_count == 32
        && (h, w) == (256, 512)
        && run.model.hdah_on
        && run.model.distill_on
        && run.model.crf_on
        && amp <= 2.0
        && max_z > 0.1
        && max_z <= 2.0
        && bend > 0.2;
    let ok = shape_ok && f1 >= 0.90 && z <= 0.15 && elapsed <= Duration::from_secs(900);
    Outcome::new(
        ok,
        format!(
            "{} scenes at {h}x{w}, max |z| {max_z:.2} m (amplitude cap {amp} m), max bend {bend:.2} m; {} steps, loss {:.3} -> {:.3}; train-set F {f1:.3} (>= 0.90), P {:.3}, R {:.3}, z-err {z:.3} m (<= 0.15); {:.0} s (<= 900 s, 1 core)",
            run.data.train_count,
            tr["steps"],
            tr["first_loss"].as_f64().unwrap_or(f64::NAN),
            tr["final_loss"].as_f64().unwrap_or(f64::NAN),
            ev["precision"].as_f64().unwrap_or(0.0),
            ev["recall"].as_f64().unwrap_or(0.0),
            elapsed.as_secs_f64()
        ),
    )
}

pub fn ablation(workspace: &Path) -> Outcome {
    let cfg = config_path("ablation.toml");
    let t = Instant::now();
    let run = || -> depth3dlane::Result<()> {
        cli(workspace, &["--config", &cfg, "gen-data", "--split", "train"])?;
        cli(workspace, &["--config", &cfg, "gen-data", "--split", "val"])?;
        cli(workspace, &["--config", &cfg, "ablate", "--out", "ablation"])?;
        Ok(())
    };
    if let Err(e) = run() {
        return Outcome::new(false, format!("ablate failed: {e}"));
    }
    let tables: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(workspace.join("ablation/tables.json")).unwrap()).unwrap();
    let md = std::fs::read_to_string(workspace.join("ablation/tables.md")).unwrap();
    let rows = |t: &str| -> Vec<(String, f64)> {
        tables[t]
            .as_array()
            .map(|a| {
                a.iter()
                    .map(|r| (r["variant"]["name"].as_str().unwrap().to_string(), r["f1"].as_f64().unwrap()))
                    .collect()
            })
            .unwrap_or_default()
    };
    let scales = rows("scales");
    let comps = rows("components");
    let names = |r: &[(String, f64)]| r.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    let structure = names(&scales) == ["S8", "S16", "S32", "S64", "S128", "S32+S64", "S32+S64+S128"]
        && names(&comps) == ["H", "F", "H+F", "H+C", "F+C", "H+F+C"]
        && md.matches("\n| S").count() == 7
        && md.matches("|---|").count() >= 2;
    let worst_single = scales.iter().take(5).map(|r| r.1).fold(f64::INFINITY, f64::min);
    let pair = scales.iter().find(|r| r.0 == "S32+S64").map_or(f64::NAN, |r| r.1);
    let ok = structure && pair >= worst_single - 0.05;
    let fmt = |r: &[(String, f64)]| r.iter().map(|(n, f)| format!("{n} {f:.3}")).collect::<Vec<_>>().join(", ");
    Outcome::new(
        ok,
        format!(
            "structure ok {structure}; scales [{}]; components [{}]; S32+S64 F {pair:.3} >= worst single {worst_single:.3} - 0.05; {:.0} s",
            fmt(&scales),
            fmt(&comps),
            t.elapsed().as_secs_f64()
        ),
    )
}
