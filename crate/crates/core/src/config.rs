//! Run configuration: one TOML document (with `include = [...]` support)
//! covering model toggles, training, CRF, evaluation, data and paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bevhead::HeadConfig;
use crate::crf::CrfConfig;
use crate::data::SceneConfig;
use crate::error::{with_path, Error, Result};
use crate::geometry::{BevGrid, CameraRig, RigConfig};
use crate::metrics::EvalConfig;
use crate::network::{format_scales, parse_scales, BackboneConfig, Scale};

mod scales_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Scale], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_scales(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Scale>, D::Error> {
        let s = String::deserialize(d)?;
        parse_scales(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell_size: (f64, f64),
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = BevGrid::default();
        GridConfig {
            x_range: g.x_range,
            y_range: g.y_range,
            cell_size: g.cell_size,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<BevGrid> {
        BevGrid::new(self.x_range, self.y_range, self.cell_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// `synthetic` or `archive`.
    pub kind: String,
    pub seed: u64,
    pub channels: usize,
    /// Recorded-feature archive, relative to the workspace root.
    pub archive: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: "synthetic".into(),
            seed: 17,
            channels: 16,
            archive: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Levels fed to the spatial transformation (and distilled when enabled).
    #[serde(with = "scales_serde")]
    pub scales: Vec<Scale>,
    pub hdah_on: bool,
    pub distill_on: bool,
    pub crf_on: bool,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub grid: GridConfig,
    pub teacher: TeacherConfig,
    /// Virtual camera the network sees; fixes the input resolution.
    pub virtual_rig: RigConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: vec![Scale::S32, Scale::S64],
            hdah_on: true,
            distill_on: true,
            crf_on: true,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            grid: GridConfig::default(),
            teacher: TeacherConfig::default(),
            virtual_rig: CameraRig::desk_default().to_config(),
        }
    }
}

impl ModelConfig {
    pub fn input_hw(&self) -> (usize, usize) {
        (self.virtual_rig.image_height, self.virtual_rig.image_width)
    }

    /// Deepest level the backbone must produce.
    pub fn deepest(&self) -> Scale {
        *self.scales.iter().max().expect("validated scales are non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("model.scales", "at least one scale is required"));
        }
        self.virtual_rig.build()?;
        let (h, w) = self.input_hw();
        let f = self.deepest().factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(
                "model.virtual_rig",
                format!("input {h}x{w} is not divisible by {f}"),
            ));
        }
        self.grid.build()?;
        if self.backbone.channels.contains(&0) {
            return Err(Error::config("model.backbone.channels", "channel counts must be positive"));
        }
        let hc = &self.head;
        if hc.stp_channels == 0 || hc.stp_groups == 0 || hc.stp_channels % hc.stp_groups != 0 {
            return Err(Error::config("model.head.stp_groups", "must divide stp_channels"));
        }
        if hc.downsample == 0 || hc.embed_dim == 0 || hc.head_channels == 0 {
            return Err(Error::config("model.head", "sizes must be positive"));
        }
        if !(hc.conf_threshold > 0.0 && hc.conf_threshold < 1.0) {
            return Err(Error::config("model.head.conf_threshold", "must lie in (0, 1)"));
        }
        if !(hc.embed_threshold > 0.0 && hc.margin > 0.0 && hc.pos_weight > 0.0) {
            return Err(Error::config("model.head.embed_threshold", "thresholds and weights must be positive"));
        }
        match self.teacher.kind.as_str() {
            "synthetic" => {
                if self.teacher.channels == 0 {
                    return Err(Error::config("model.teacher.channels", "must be positive"));
                }
                if self.distill_on && (h % 32 != 0 || w % 32 != 0) {
                    return Err(Error::config("model.teacher", "synthetic teacher needs sides divisible by 32"));
                }
            }
            "archive" => {
                if self.teacher.archive.is_none() {
                    return Err(Error::config("model.teacher.archive", "archive teacher needs a path"));
                }
            }
            other => {
                return Err(Error::config(
                    "model.teacher.kind",
                    format!("unknown teacher `{other}` (expected synthetic or archive)"),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub confidence: f64,
    pub offset: f64,
    pub height: f64,
    pub embedding: f64,
    pub depth: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            confidence: 1.0,
            offset: 1.0,
            height: 1.0,
            embedding: 1.0,
            depth: 1.0,
            distill: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; cosine decay from `lr`.
    pub lr_final: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Compute the distillation loss (fusion stays active either way).
    pub distill_loss_on: bool,
    pub log_every: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 2,
            lr: 2e-3,
            lr_final: 1e-4,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            distill_loss_on: true,
            log_every: 1,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr_final >= 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        let w = &self.weights;
        for (k, v) in [
            ("train.weights.confidence", w.confidence),
            ("train.weights.offset", w.offset),
            ("train.weights.height", w.height),
            ("train.weights.embedding", w.embedding),
            ("train.weights.depth", w.depth),
            ("train.weights.distill", w.distill),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            train_count: 32,
            val_count: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub crf: CrfConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        self.eval.validate()?;
        self.data.scene.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(text, e))?;
        from_table(table)
    }

    /// Load a file, resolving includes and then applying `key.path=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => load_table(p, 0)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let offset = e.span().map_or(0, |s| s.start);
    Error::Parse {
        key: None,
        location: crate::data::location_at(text, offset),
        message: e.message().to_string(),
    }
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().trim().to_string()))
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > 16 {
        return Err(Error::config("include", format!("include nesting too deep at {}", path.display())));
    }
    let text = with_path(path, std::fs::read_to_string(path))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&text, e))?;
    let includes = match table.remove("include") {
        None => vec![],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(Error::config("include", "entries must be strings")),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(toml::Value::String(s)) => vec![s],
        Some(_) => return Err(Error::config("include", "must be a string or an array of strings")),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&dir.join(inc), depth + 1)?);
    }
    merge(&mut merged, table);
    Ok(merged)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply `a.b.c=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
