//! Inference with optional CRF refinement, and dataset evaluation.

use std::time::Instant;

use crate::bevhead::{decode_instances, BevPrediction, DecodedLane};
use crate::crf::{refine_all_lanes, CrfConfig};
use crate::error::Result;
use crate::geometry::{warp_fv_raster_to_bev, CameraRig};
use crate::lane::Lane3D;
use crate::metrics::{evaluate, EvalConfig, EvalResult, Frame};
use crate::model::{to_virtual_view, Model, StageTimes};
use crate::network::Mode;
use crate::nn::Tape;
use crate::raster::Raster;

#[derive(Debug, Clone)]
pub struct Inference {
    pub lanes: Vec<DecodedLane>,
    pub prediction: BevPrediction,
    pub times: StageTimes,
}

/// Detect lanes in one image taken with `rig`. With `crf` set, each decoded
/// instance is refined before the final decode. The CRF depth feature is
/// `depth` (same camera as `image`) when given, else the depth decoder's
/// output when the model has one, else zero.
pub fn infer(
    model: &Model,
    image: &Raster,
    depth: Option<&Raster>,
    rig: &CameraRig,
    crf: Option<&CrfConfig>,
) -> Result<Inference> {
    let virt = model.virtual_rig();
    let given = if crf.is_some() { depth } else { None };
    let (view, given) = to_virtual_view(image, given, rig, virt)?;
    let mut times = StageTimes::default();
    let mut tape = Tape::inference();
    let want_depth = crf.is_some() && given.is_none() && model.config().hdah_on;
    let mode = if want_depth { Mode::Train } else { Mode::Inference };
    let fwd = model.forward_timed(&mut tape, &view, mode, &mut times)?;
    let mut prediction = BevPrediction::from_vars(&tape, &fwd.head);
    let hc = &model.config().head;
    if let Some(cfg) = crf {
        let t0 = Instant::now();
        let grid = model.grid();
        let color = warp_fv_raster_to_bev(&view, virt, grid)?.raster;
        let depth = match (given, fwd.depth) {
            (Some((d, _)), _) => {
                let r = Raster::from_vec(1, view.height, view.width, d)?;
                warp_fv_raster_to_bev(&r, virt, grid)?.raster
            }
            (None, Some(d)) => {
                let t = tape.value(d);
                let r = Raster::from_vec(1, t.shape[1], t.shape[2], t.data.clone())?;
                warp_fv_raster_to_bev(&r, virt, grid)?.raster
            }
            (None, None) => Raster::zeros(1, grid.rows, grid.cols),
        };
        prediction = refine_all_lanes(&prediction, &color, &depth, hc.conf_threshold, hc.embed_threshold, cfg)?;
        times.crf += t0.elapsed();
    }
    let lanes = decode_instances(&prediction, hc.conf_threshold, hc.embed_threshold, model.grid());
    Ok(Inference {
        lanes,
        prediction,
        times,
    })
}

/// One labelled image.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub image: &'a Raster,
    pub rig: &'a CameraRig,
    /// Depth raster for the CRF, same camera as `image`.
    pub depth: Option<&'a Raster>,
    pub lanes: &'a [Lane3D],
}

/// Run inference on every item and score the pooled detections.
pub fn evaluate_model(
    model: &Model,
    items: &[EvalItem<'_>],
    crf: Option<&CrfConfig>,
    eval: &EvalConfig,
) -> Result<(EvalResult, StageTimes)> {
    let mut frames = Vec::with_capacity(items.len());
    let mut times = StageTimes::default();
    for it in items {
        let out = infer(model, it.image, it.depth, it.rig, crf)?;
        times.backbone += out.times.backbone;
        times.stp += out.times.stp;
        times.head += out.times.head;
        times.crf += out.times.crf;
        frames.push(Frame {
            id: it.id.to_string(),
            preds: out.lanes.iter().map(DecodedLane::scored).collect(),
            gts: it.lanes.to_vec(),
        });
    }
    Ok((evaluate(&frames, eval)?, times))
}
