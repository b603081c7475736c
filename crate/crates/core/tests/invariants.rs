use std::collections::{BTreeSet, VecDeque};

use depth3dlane::crf::{build_lane_region, mean_field_trace, CrfConfig, CrfProblem};
use depth3dlane::lane::{Lane3D, ScoredLane};
use depth3dlane::metrics::{evaluate, match_lanes, EvalConfig, Frame};
use depth3dlane::raster::Raster;
use proptest::prelude::*;

fn lane(x0: f64, slope: f64, z: f64, y0: f64, y1: f64) -> Lane3D {
    let n = 12;
    let pts = (0..n)
        .map(|k| {
            let y = y0 + (y1 - y0) * k as f64 / (n - 1) as f64;
            [x0 + slope * y, y, z * y / 100.0]
        })
        .collect();
    Lane3D::new(pts, None).unwrap()
}

fn lanes_strategy(max: usize) -> impl Strategy<Value = Vec<Lane3D>> {
    prop::collection::vec((-8.0..8.0f64, -0.02..0.02f64, -1.0..1.0f64, 3.0..30.0f64, 50.0..103.0f64), 0..=max)
        .prop_map(|v| v.into_iter().map(|(x, s, z, a, b)| lane(x, s, z, a, b)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f1_is_consistent_with_counts(preds in lanes_strategy(4), gts in lanes_strategy(4), score in 0.05..1.0f64) {
        let cfg = EvalConfig::default();
        let frame = Frame {
            id: "f".into(),
            preds: preds.iter().map(|l| ScoredLane { lane: l.clone(), score }).collect(),
            gts: gts.clone(),
        };
        let r = evaluate(&[frame], &cfg).unwrap();
        prop_assert_eq!(r.tp + r.fp, preds.len());
        prop_assert_eq!(r.tp + r.fn_, gts.len());
        let p = if r.tp + r.fp == 0 { 1.0 } else { r.tp as f64 / (r.tp + r.fp) as f64 };
        let rc = if r.tp + r.fn_ == 0 { 1.0 } else { r.tp as f64 / (r.tp + r.fn_) as f64 };
        prop_assert!((r.precision - p).abs() < 1e-12 && (r.recall - rc).abs() < 1e-12);
        let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        prop_assert!((r.f1 - f).abs() < 1e-12);
        for e in [r.errors.x_err_near, r.errors.x_err_far, r.errors.z_err_near, r.errors.z_err_far, r.z_err].into_iter().flatten() {
            prop_assert!(e.is_finite() && e >= 0.0);
        }
    }

    #[test]
    fn matching_is_symmetric(preds in lanes_strategy(5), gts in lanes_strategy(5)) {
        let cfg = EvalConfig::default();
        let a = match_lanes(&preds, &gts, &cfg);
        let b = match_lanes(&gts, &preds, &cfg);
        prop_assert_eq!(a.tp(), b.tp());
        prop_assert!((a.total_cost() - b.total_cost()).abs() < 1e-9);
        let used: BTreeSet<usize> = a.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(used.len(), a.pairs.len());
    }

    #[test]
    fn unordered_points_come_back_sorted(ys in prop::collection::btree_set(0u32..2000, 2..20), seed in any::<u64>()) {
        let mut pts: Vec<[f64; 3]> = ys.iter().map(|&y| [y as f64 * 0.1, y as f64 * 0.05, 0.0]).collect();
        let k = (seed as usize) % pts.len();
        pts.rotate_left(k);
        let l = Lane3D::from_unordered(pts, None).unwrap();
        prop_assert!(l.points().windows(2).all(|w| w[0][1] < w[1][1]));
    }

    #[test]
    fn region_is_connected_and_holds_baseline(
        probs in prop::collection::vec(0.0..1.0f64, 48),
        r0 in 0usize..6, c0 in 0usize..8, eight in any::<bool>(),
    ) {
        let (rows, cols) = (6, 8);
        let cfg = CrfConfig { neighborhood: if eight { 8 } else { 4 }, ..CrfConfig::default() };
        let region = build_lane_region(&probs, rows, cols, (r0, c0), &cfg);
        let start = r0 * cols + c0;
        prop_assert!(region.contains(&start));
        let set: BTreeSet<usize> = region.iter().copied().collect();
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = ((i / cols) as i64, (i % cols) as i64);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    let j = (rr * cols as i64 + cc) as usize;
                    if set.contains(&j) && seen.insert(j) {
                        queue.push_back(j);
                    }
                }
            }
        }
        prop_assert_eq!(seen.len(), set.len());
    }

    #[test]
    fn free_energy_never_rises(
        probs in prop::collection::vec(0.01..0.99f64, 20),
        colors in prop::collection::vec(0.0..1.0f64, 60),
        depths in prop::collection::vec(0.0..1.0f64, 20),
        w2 in 0.0..2.0f64, w3 in 0.0..2.0f64, eight in any::<bool>(),
    ) {
        let (rows, cols) = (4, 5);
        let p = CrfProblem::new(
            &probs,
            Raster::from_vec(3, rows, cols, colors).unwrap(),
            Raster::from_vec(1, rows, cols, depths).unwrap(),
            (0..rows * cols).collect(),
            (0, 0),
        ).unwrap();
        let cfg = CrfConfig { w2, w3, iterations: 8, neighborhood: if eight { 8 } else { 4 }, ..CrfConfig::default() };
        let (q, f) = mean_field_trace(&p, &cfg);
        prop_assert!(q.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", f);
    }
}
