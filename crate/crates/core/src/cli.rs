//! Command-line front end. Every relative path resolves against `--workspace`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::ablation::{component_variants, render_table, run_ablation, scale_variants, AblationRow};
use crate::config::RunConfig;
use crate::data::{
    generate_scene, load_split, read_lane_set, save_split, write_lane_set, LaneSetFile, SplitEntry,
};
use crate::distill::{record_teacher_features, SyntheticTeacher};
use crate::error::{with_path, Error, Result};
use crate::geometry::RigConfig;
use crate::lane::ScoredLane;
use crate::metrics::{evaluate, Frame};
use crate::model::{teacher_source, to_virtual_view, Model, StageTimes};
use crate::pipeline::{evaluate_model, infer, EvalItem};
use crate::plot::plot_lanes;
use crate::raster::Raster;
use crate::train::{deterministic_mode, train, TrainSample};

#[derive(Debug, Parser)]
#[command(name = "depth3dlane", version, about = "Monocular 3D lane detection")]
pub struct Cli {
    /// Root that relative paths resolve against.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic split.
    GenData {
        #[arg(long, default_value = "train")]
        split: String,
        /// Defaults to `data.train_count` / `data.val_count`.
        #[arg(long)]
        count: Option<usize>,
        /// First scene index; `val` defaults to `data.train_count`.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write `model.ckpt` and `train_log.jsonl`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against a split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of `<name>.lanes.json` predictions instead of a model.
        #[arg(long, conflicts_with = "model")]
        preds: Option<PathBuf>,
        #[arg(long)]
        no_crf: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect lanes in one image or every image of a split.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "data")]
        image: Option<PathBuf>,
        /// Camera of `--image`; defaults to the model's virtual camera.
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long, conflicts_with = "image")]
        data: Option<PathBuf>,
        /// Lane-set file for `--image`, directory for `--data`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_crf: bool,
        /// Print mean per-stage latency.
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Scale-set and component tables.
    Ablate {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Which tables: `scales`, `components`.
        #[arg(long, value_delimiter = ',', default_value = "scales,components")]
        tables: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record teacher features for a split into an archive.
    RecordTeacher {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw lane sets as a top view plus a side profile.
    Plot {
        #[arg(long)]
        lanes: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    root: PathBuf,
    run: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn or(&self, p: &Option<PathBuf>, default: impl AsRef<Path>) -> PathBuf {
        match p {
            Some(p) => self.path(p),
            None => self.path(default.as_ref()),
        }
    }

    fn data(&self, split: &str) -> PathBuf {
        self.run.paths.data_dir.join(split)
    }

    fn out(&self) -> &Path {
        &self.run.paths.out_dir
    }
}

/// Run the parsed command, writing one JSON summary line to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let config = cli.config.as_ref().map(|c| {
        if c.is_absolute() {
            c.clone()
        } else {
            cli.workspace.join(c)
        }
    });
    let ctx = Ctx {
        run: RunConfig::load(config.as_deref(), &cli.overrides)?,
        root: cli.workspace,
    };
    let summary = match cli.command {
        Command::GenData {
            split,
            count,
            start,
            out,
        } => gen_data(&ctx, &split, count, start, &out)?,
        Command::Train { data, out } => train_cmd(&ctx, &data, &out)?,
        Command::Eval {
            data,
            model,
            preds,
            no_crf,
            out,
        } => eval_cmd(&ctx, &data, &model, &preds, no_crf, &out)?,
        Command::Infer {
            model,
            image,
            rig,
            data,
            out,
            no_crf,
            timing,
            repeat,
        } => infer_cmd(&ctx, &model, &image, &rig, &data, &out, no_crf, timing, repeat)?,
        Command::Ablate { train, val, tables, out } => ablate_cmd(&ctx, &train, &val, &tables, &out)?,
        Command::RecordTeacher { data, out } => record_cmd(&ctx, &data, &out)?,
        Command::Plot { lanes, gt, out } => {
            let pred = read_lane_set(&ctx.path(&lanes))?.lanes;
            let gt = gt.map(|g| read_lane_set(&ctx.path(&g))).transpose()?.map(|s| s.lanes);
            let out = ctx.path(&out);
            plot_lanes(&pred, gt.as_deref(), &ctx.run.model.grid.build()?)?.save_png(&out)?;
            json!({"plot": out})
        }
    };
    writeln!(stdout, "{summary}")?;
    Ok(())
}

/// Format an error as the single line the binary prints.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: {}: {}", e.kind(), msg)
}

fn gen_data(
    ctx: &Ctx,
    split: &str,
    count: Option<usize>,
    start: Option<usize>,
    out: &Option<PathBuf>,
) -> Result<serde_json::Value> {
    let d = &ctx.run.data;
    let count = match (count, split) {
        (Some(c), _) => c,
        (None, "train") => d.train_count,
        (None, "val") => d.val_count,
        (None, _) => return Err(Error::config("data.count", format!("split `{split}` needs --count"))),
    };
    let start = start.unwrap_or(if split == "val" { d.train_count } else { 0 });
    let dir = ctx.or(out, ctx.data(split));
    let entries = (start..start + count)
        .map(|i| generate_scene(&d.scene, i as u64).map(|s| SplitEntry::from_sample(format!("{i:05}"), &s)))
        .collect::<Result<Vec<_>>>()?;
    save_split(&dir, &entries)?;
    Ok(json!({"split": split, "count": count, "start": start, "dir": dir}))
}

fn training_samples(model: &Model, ctx: &Ctx, split: &[SplitEntry]) -> Result<Vec<TrainSample>> {
    let mc = model.config();
    let teacher = if mc.distill_on {
        Some(teacher_source(mc, &ctx.root)?)
    } else {
        None
    };
    split
        .iter()
        .map(|e| TrainSample::new(model, &e.name, &e.image, Some(&e.depth), &e.lanes, &e.rig, teacher.as_deref()))
        .collect()
}

fn train_cmd(ctx: &Ctx, data: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<serde_json::Value> {
    let split = load_split(&ctx.or(data, ctx.data("train")))?;
    let out = ctx.or(out, ctx.out());
    with_path(&out, std::fs::create_dir_all(&out))?;
    let mut model = Model::new(&ctx.run.model, ctx.run.seed)?;
    let samples = training_samples(&model, ctx, &split)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = with_path(&log_path, std::fs::File::create(&log_path))?;
    let mut io_err = None;
    let report = train(&mut model, &samples, &ctx.run.train, ctx.run.seed, |l| {
        let line = serde_json::to_string(l).expect("logs serialize");
        log::info!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::File { path: log_path, source: e });
    }
    model.save(&out.join("model.ckpt"))?;
    let cfg_path = out.join("config.toml");
    with_path(&cfg_path, std::fs::write(&cfg_path, ctx.run.to_toml()))?;
    Ok(json!({
        "steps": report.steps,
        "first_loss": report.first_loss(),
        "final_loss": report.final_loss(),
        "checkpoint": out.join("model.ckpt"),
    }))
}

fn load_model(ctx: &Ctx, model: &Option<PathBuf>) -> Result<Model> {
    Model::load(&ctx.or(model, ctx.out().join("model.ckpt")))
}

fn eval_cmd(
    ctx: &Ctx,
    data: &Option<PathBuf>,
    model: &Option<PathBuf>,
    preds: &Option<PathBuf>,
    no_crf: bool,
    out: &Option<PathBuf>,
) -> Result<serde_json::Value> {
    let split = load_split(&ctx.or(data, ctx.data("val")))?;
    let result = match preds {
        Some(dir) => {
            let dir = ctx.path(dir);
            let frames = split
                .iter()
                .map(|e| {
                    let set = read_lane_set(&dir.join(format!("{}.lanes.json", e.name)))?;
                    Ok(Frame {
                        id: e.name.clone(),
                        preds: set.scored(),
                        gts: e.lanes.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate(&frames, &ctx.run.eval)?
        }
        None => {
            let model = load_model(ctx, model)?;
            let crf = (model.config().crf_on && !no_crf).then_some(&ctx.run.crf);
            let items: Vec<_> = split
                .iter()
                .map(|e| EvalItem {
                    id: &e.name,
                    image: &e.image,
                    rig: &e.rig,
                    depth: Some(&e.depth),
                    lanes: &e.lanes,
                })
                .collect();
            evaluate_model(&model, &items, crf, &ctx.run.eval)?.0
        }
    };
    if let Some(o) = out {
        let o = ctx.path(o);
        with_path(&o, std::fs::write(&o, result.to_json()))?;
    }
    Ok(json!({
        "f1": result.f1,
        "precision": result.precision,
        "recall": result.recall,
        "ap": result.ap,
        "x_err_near": result.errors.x_err_near,
        "x_err_far": result.errors.x_err_far,
        "z_err_near": result.errors.z_err_near,
        "z_err_far": result.errors.z_err_far,
        "tp": result.tp,
        "fp": result.fp,
        "fn": result.fn_,
    }))
}

fn ms(d: Duration, n: usize) -> f64 {
    d.as_secs_f64() * 1e3 / n.max(1) as f64
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    ctx: &Ctx,
    model: &Option<PathBuf>,
    image: &Option<PathBuf>,
    rig: &Option<PathBuf>,
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    no_crf: bool,
    timing: bool,
    repeat: usize,
) -> Result<serde_json::Value> {
    let model = load_model(ctx, model)?;
    let crf = (model.config().crf_on && !no_crf).then_some(&ctx.run.crf);
    type Input = (String, Raster, Option<Raster>, crate::geometry::CameraRig);
    let inputs: Vec<Input> = match (image, data) {
        (Some(img), _) => {
            let r = match rig {
                Some(p) => {
                    let p = ctx.path(p);
                    RigConfig::from_toml(&with_path(&p, std::fs::read_to_string(&p))?)?.build()?
                }
                None => model.virtual_rig().clone(),
            };
            vec![("image".into(), Raster::load_rgb(&ctx.path(img))?, None, r)]
        }
        (None, Some(d)) => load_split(&ctx.path(d))?
            .into_iter()
            .map(|e| (e.name, e.image, Some(e.depth), e.rig))
            .collect(),
        (None, None) => return Err(Error::config("infer", "give --image or --data")),
    };
    let mut times = StageTimes::default();
    let mut runs = 0;
    let mut written = Vec::new();
    for (name, img, depth, r) in &inputs {
        let mut last = None;
        for _ in 0..repeat.max(1) {
            let o = infer(&model, img, depth.as_ref(), r, crf)?;
            times.backbone += o.times.backbone;
            times.stp += o.times.stp;
            times.head += o.times.head;
            times.crf += o.times.crf;
            runs += 1;
            last = Some(o);
        }
        let lanes: Vec<ScoredLane> = last.expect("at least one run").lanes.iter().map(|l| l.scored()).collect();
        let set = LaneSetFile::from_scored(&lanes);
        let path = match (out, data) {
            (Some(o), None) => ctx.path(o),
            (Some(o), Some(_)) => ctx.path(o).join(format!("{name}.lanes.json")),
            (None, None) => ctx.path(ctx.out()).join("infer.lanes.json"),
            (None, Some(_)) => ctx.path(ctx.out()).join("preds").join(format!("{name}.lanes.json")),
        };
        if let Some(parent) = path.parent() {
            with_path(parent, std::fs::create_dir_all(parent))?;
        }
        write_lane_set(&set, &path)?;
        written.push(path);
    }
    let mut v = json!({"frames": inputs.len(), "written": written.len()});
    if inputs.len() == 1 {
        v["lanes"] = json!(written[0]);
    }
    if timing {
        let total = times.backbone + times.stp + times.head + times.crf;
        v["timing_ms"] = json!({
            "runs": runs,
            "backbone": ms(times.backbone, runs),
            "stp": ms(times.stp, runs),
            "head": ms(times.head, runs),
            "crf": ms(times.crf, runs),
            "total": ms(total, runs),
        });
    }
    Ok(v)
}

fn ablate_cmd(
    ctx: &Ctx,
    train: &Option<PathBuf>,
    val: &Option<PathBuf>,
    tables: &[String],
    out: &Option<PathBuf>,
) -> Result<serde_json::Value> {
    let train_split = load_split(&ctx.or(train, ctx.data("train")))?;
    let val_split = load_split(&ctx.or(val, ctx.data("val")))?;
    let out = ctx.or(out, ctx.out().join("ablation"));
    with_path(&out, std::fs::create_dir_all(&out))?;
    let mut variants = Vec::new();
    let mut sections = Vec::new();
    for t in tables {
        let vs = match t.as_str() {
            "scales" => scale_variants(),
            "components" => component_variants(),
            other => return Err(Error::config("tables", format!("unknown table `{other}`"))),
        };
        sections.push((t.clone(), vs.len()));
        variants.extend(vs);
    }
    let rows = run_ablation(&variants, &ctx.run, &train_split, &val_split, &ctx.root, |r| {
        log::info!("{} F={:.3}", r.variant.name, r.f1)
    })?;
    let mut md = String::new();
    let mut at = 0;
    let mut by_table = serde_json::Map::new();
    for (name, n) in sections {
        let part: &[AblationRow] = &rows[at..at + n];
        at += n;
        let title = if name == "scales" {
            "Scale sets (H+F+C)"
        } else {
            "Components at S32+S64"
        };
        md.push_str(&render_table(title, part));
        md.push('\n');
        by_table.insert(name, json!(part));
    }
    let md_path = out.join("tables.md");
    with_path(&md_path, std::fs::write(&md_path, &md))?;
    let js_path = out.join("tables.json");
    let text = serde_json::to_string_pretty(&by_table).expect("rows serialize");
    with_path(&js_path, std::fs::write(&js_path, text))?;
    Ok(json!({"rows": rows.len(), "tables": md_path, "json": js_path}))
}

fn record_cmd(ctx: &Ctx, data: &Option<PathBuf>, out: &Path) -> Result<serde_json::Value> {
    let split = load_split(&ctx.or(data, ctx.data("train")))?;
    let mc = &ctx.run.model;
    let virt = mc.virtual_rig.build()?;
    let images = split
        .iter()
        .map(|e| to_virtual_view(&e.image, None, &e.rig, &virt).map(|v| v.0))
        .collect::<Result<Vec<_>>>()?;
    let teacher = SyntheticTeacher::new(mc.teacher.seed, mc.teacher.channels);
    let out = ctx.path(out);
    let archive = record_teacher_features(&images, &teacher, &out)?;
    Ok(json!({"entries": archive.len(), "archive": out, "deterministic": deterministic_mode()}))
}
