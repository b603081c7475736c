//! Scale-set and component ablations over one train/val split pair.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::data::SplitEntry;
use crate::error::Result;
use crate::model::{teacher_source, Model};
use crate::network::{format_scales, Scale};
use crate::pipeline::{evaluate_model, EvalItem};
use crate::train::{train, TrainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub scales: Vec<Scale>,
    pub hdah: bool,
    pub distill: bool,
    pub crf: bool,
}

impl Variant {
    fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            scales: self.scales.clone(),
            hdah_on: self.hdah,
            distill_on: self.distill,
            crf_on: self.crf,
            ..base.clone()
        }
    }

    fn training_key(&self) -> (Vec<Scale>, bool, bool) {
        (self.scales.clone(), self.hdah, self.distill)
    }
}

/// Scale-set rows; HDAH, distillation and CRF on.
pub fn scale_variants() -> Vec<Variant> {
    use Scale::*;
    [
        vec![S8],
        vec![S16],
        vec![S32],
        vec![S64],
        vec![S128],
        vec![S32, S64],
        vec![S32, S64, S128],
    ]
    .into_iter()
    .map(|scales| Variant {
        name: format_scales(&scales),
        scales,
        hdah: true,
        distill: true,
        crf: true,
    })
    .collect()
}

/// Component rows at S32+S64: H = depth-aware head, F = distilled-feature
/// fusion, C = CRF.
pub fn component_variants() -> Vec<Variant> {
    [
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ]
    .into_iter()
    .map(|(hdah, distill, crf)| {
        let name = [(hdah, "H"), (distill, "F"), (crf, "C")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect::<Vec<_>>()
            .join("+");
        Variant {
            name,
            scales: vec![Scale::S32, Scale::S64],
            hdah,
            distill,
            crf,
        }
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub x_err_near: Option<f64>,
    pub x_err_far: Option<f64>,
    pub z_err_near: Option<f64>,
    pub z_err_far: Option<f64>,
    pub final_loss: f64,
}

/// Train every distinct (scales, H, F) combination once and evaluate each
/// variant on `val`. Variants differing only in C share a model.
pub fn run_ablation(
    variants: &[Variant],
    run: &RunConfig,
    train_split: &[SplitEntry],
    val_split: &[SplitEntry],
    root: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut trained: BTreeMap<(Vec<Scale>, bool, bool), (Model, f64)> = BTreeMap::new();
    let items: Vec<EvalItem<'_>> = val_split
        .iter()
        .map(|e| EvalItem {
            id: &e.name,
            image: &e.image,
            rig: &e.rig,
            depth: Some(&e.depth),
            lanes: &e.lanes,
        })
        .collect();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let key = v.training_key();
        if !trained.contains_key(&key) {
            let mc = v.model_config(&run.model);
            let mut model = Model::new(&mc, run.seed)?;
            let teacher = if mc.distill_on {
                Some(teacher_source(&mc, root)?)
            } else {
                None
            };
            let samples = train_split
                .iter()
                .map(|e| {
                    TrainSample::new(&model, &e.name, &e.image, Some(&e.depth), &e.lanes, &e.rig, teacher.as_deref())
                })
                .collect::<Result<Vec<_>>>()?;
            let report = train(&mut model, &samples, &run.train, run.seed, |_| {})?;
            let loss = report.final_loss().unwrap_or(f64::NAN);
            trained.insert(key.clone(), (model, loss));
        }
        let (model, final_loss) = &trained[&key];
        let crf = v.crf.then_some(&run.crf);
        let (r, _) = evaluate_model(model, &items, crf, &run.eval)?;
        let row = AblationRow {
            variant: v.clone(),
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            ap: r.ap,
            x_err_near: r.errors.x_err_near,
            x_err_far: r.errors.x_err_far,
            z_err_near: r.errors.z_err_near,
            z_err_far: r.errors.z_err_far,
            final_loss: *final_loss,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Markdown table of `rows`.
pub fn render_table(title: &str, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "### {title}\n\n| variant | F | P | R | AP | x near | x far | z near | z far |\n|---|---|---|---|---|---|---|---|---|\n"
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} | {} | {} |\n",
            r.variant.name,
            r.f1,
            r.precision,
            r.recall,
            r.ap,
            opt(r.x_err_near),
            opt(r.x_err_far),
            opt(r.z_err_near),
            opt(r.z_err_far)
        ));
    }
    s
}
