//! Full network assembly, the composite training loss, and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevhead::{head_loss_nodes, BevPrediction, GtRasters, Head, HeadVars, Stp};
use crate::config::{LossWeights, ModelConfig};
use crate::distill::{
    distillation_loss_node, fuse, teacher_tag, FileTeacher, Student, SyntheticTeacher, TeacherFeatureSource,
    TeacherFeatures,
};
use crate::error::{with_path, Error, Result};
use crate::geometry::{warp_to_virtual, BevGrid, CameraRig};
use crate::network::{depth_loss_node, Backbone, Hdah, Mode, Scale};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::raster::Raster;

/// Tape variables of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub head: HeadVars,
    pub depth: Option<Var>,
    pub students: BTreeMap<Scale, Var>,
    pub bev: Var,
}

/// Wall time per stage of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub backbone: Duration,
    pub stp: Duration,
    pub head: Duration,
    pub crf: Duration,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    backbone: Backbone,
    hdah: Option<Hdah>,
    students: BTreeMap<Scale, Student>,
    stp: Stp,
    head: Head,
    grid: BevGrid,
    virtual_rig: CameraRig,
}

impl Model {
    /// Fresh weights; initialization is a pure function of `(config, seed)`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let deepest = config.deepest();
        let bc = &config.backbone;
        let backbone = Backbone::new(&mut store, bc, deepest, &mut rng);
        let hdah = config.hdah_on.then(|| Hdah::new(&mut store, bc, deepest, &mut rng));
        let teacher_ch = config.teacher.channels;
        let mut students = BTreeMap::new();
        if config.distill_on {
            for &s in &config.scales {
                students.insert(s, Student::new(&mut store, s, bc.channels(s), teacher_ch, &mut rng));
            }
        }
        let (h, w) = config.input_hw();
        let inputs: Vec<(Scale, usize, (usize, usize))> = config
            .scales
            .iter()
            .map(|&s| {
                let extra = if config.distill_on { teacher_ch } else { 0 };
                (s, bc.channels(s) + extra, (h / s.factor(), w / s.factor()))
            })
            .collect();
        let grid = config.grid.build()?;
        let virtual_rig = config.virtual_rig.build()?;
        let stp = Stp::new(&mut store, &inputs, &config.head, &grid, Some(&virtual_rig), &mut rng);
        let head = Head::new(&mut store, &config.head, &grid, &mut rng);
        Ok(Model {
            config: config.clone(),
            seed,
            store,
            backbone,
            hdah,
            students,
            stp,
            head,
            grid,
            virtual_rig,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn virtual_rig(&self) -> &CameraRig {
        &self.virtual_rig
    }

    /// Run the network on an image already in the virtual camera's view.
    pub fn forward(&self, tape: &mut Tape, image: &Raster, mode: Mode) -> Result<Forward> {
        let mut times = StageTimes::default();
        self.forward_timed(tape, image, mode, &mut times)
    }

    pub fn forward_timed(&self, tape: &mut Tape, image: &Raster, mode: Mode, times: &mut StageTimes) -> Result<Forward> {
        let (h, w) = self.config.input_hw();
        if image.dims() != (3, h, w) {
            return Err(Error::shape(format!(
                "network input must be 3x{h}x{w}, got {:?}",
                image.dims()
            )));
        }
        let t0 = Instant::now();
        let x = tape.leaf(Tensor::from_vec(&[3, h, w], image.data.clone())?);
        let pyramid = self.backbone.forward(tape, &self.store, x)?;
        let (depth, levels) = match &self.hdah {
            Some(hd) => hd.forward(tape, &self.store, &pyramid, (h, w), mode)?,
            None => (None, pyramid),
        };
        let mut fused = BTreeMap::new();
        let mut students = BTreeMap::new();
        for &s in &self.config.scales {
            let level = levels.get(s)?;
            let f = match self.students.get(&s) {
                Some(st) => {
                    let d = st.forward(tape, &self.store, level);
                    students.insert(s, d);
                    fuse(tape, level, d)?
                }
                None => level,
            };
            fused.insert(s, f);
        }
        let t1 = Instant::now();
        let bev = self.stp.forward(tape, &self.store, &fused)?;
        let t2 = Instant::now();
        let head = self.head.forward(tape, &self.store, bev);
        let t3 = Instant::now();
        times.backbone += t1 - t0;
        times.stp += t2 - t1;
        times.head += t3 - t2;
        Ok(Forward {
            head,
            depth,
            students,
            bev,
        })
    }

    /// Head rasters for an image in the virtual view, without recording gradients.
    pub fn predict(&self, image: &Raster) -> Result<(BevPrediction, StageTimes)> {
        let mut tape = Tape::inference();
        let mut times = StageTimes::default();
        let f = self.forward_timed(&mut tape, image, Mode::Inference, &mut times)?;
        Ok((BevPrediction::from_vars(&tape, &f.head), times))
    }

    /// Composite training loss recorded on `tape`. Terms with weight 0 are
    /// evaluated for logging but kept out of the optimized sum.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        targets: &Targets,
        weights: &LossWeights,
        distill_loss_on: bool,
    ) -> Result<(Var, LossBreakdown)> {
        let (lv, hl) = head_loss_nodes(tape, &fwd.head, &targets.gt, &self.config.head)?;
        let mut b = LossBreakdown {
            confidence: hl.confidence,
            offset: hl.offset,
            height: hl.height,
            embedding: hl.embedding,
            no_positive_cells: hl.no_positive_cells,
            ..Default::default()
        };
        let mut terms = vec![
            (lv.confidence, weights.confidence),
            (lv.offset, weights.offset),
            (lv.height, weights.height),
            (lv.embedding, weights.embedding),
        ];
        if let (Some(d), Some((target, valid))) = (fwd.depth, &targets.depth) {
            let (node, dl) = depth_loss_node(tape, d, target, valid)?;
            b.depth = Some(dl.value);
            terms.push((node, weights.depth));
        }
        if distill_loss_on && !fwd.students.is_empty() {
            let teacher = targets
                .teacher
                .as_ref()
                .ok_or_else(|| Error::config("model.teacher", "distillation loss needs teacher features"))?;
            let k = fwd.students.len() as f64;
            let mut sum = 0.0;
            for (&s, &v) in &fwd.students {
                let (node, dl) = distillation_loss_node(tape, v, teacher.get(teacher_tag(s))?)?;
                sum += dl.value;
                terms.push((node, weights.distill / k));
            }
            b.distill = Some(sum / k);
        }
        terms.retain(|t| t.1 != 0.0);
        b.total = terms.iter().map(|&(v, w)| w * tape.value(v).data[0]).sum();
        let total = tape.weighted_sum(&terms);
        Ok((total, b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint_bytes(&self.config, self.seed, &self.store);
        with_path(path, std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = with_path(path, std::fs::read(path))?;
        let (config, seed, entries) = parse_checkpoint(&bytes)?;
        let mut model = Model::new(&config, seed)?;
        model.store.load_named(entries)?;
        Ok(model)
    }
}

/// Supervision for one sample.
#[derive(Debug, Clone)]
pub struct Targets {
    pub gt: GtRasters,
    /// Normalized inverse depth and validity, in the virtual view.
    pub depth: Option<(Vec<f64>, Vec<bool>)>,
    pub teacher: Option<TeacherFeatures>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub confidence: f64,
    pub offset: f64,
    pub height: f64,
    pub embedding: f64,
    pub depth: Option<f64>,
    pub distill: Option<f64>,
    pub no_positive_cells: bool,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown, scale: f64) {
        self.total += scale * o.total;
        self.confidence += scale * o.confidence;
        self.offset += scale * o.offset;
        self.height += scale * o.height;
        self.embedding += scale * o.embedding;
        if let Some(d) = o.depth {
            *self.depth.get_or_insert(0.0) += scale * d;
        }
        if let Some(d) = o.distill {
            *self.distill.get_or_insert(0.0) += scale * d;
        }
        self.no_positive_cells |= o.no_positive_cells;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.confidence, self.offset, self.height, self.embedding]
            .iter()
            .chain(self.depth.iter())
            .chain(self.distill.iter())
            .all(|x| x.is_finite())
    }
}

/// Warp an image (and optionally its depth) from `rig` into the virtual
/// view. The validity mask marks virtual pixels that see the source image.
pub fn to_virtual_view(
    image: &Raster,
    depth: Option<&Raster>,
    rig: &CameraRig,
    virt: &CameraRig,
) -> Result<(Raster, Option<(Vec<f64>, Vec<bool>)>)> {
    let img = warp_to_virtual(image, rig, virt)?;
    let depth = match depth {
        None => None,
        Some(d) => {
            let wd = warp_to_virtual(d, rig, virt)?;
            let valid = if rig == virt {
                vec![true; wd.data.len()]
            } else {
                let ones = Raster::filled(1, image.height, image.width, 1.0);
                let m = warp_to_virtual(&ones, rig, virt)?;
                m.data.iter().map(|&x| x > 1.0 - 1e-9).collect()
            };
            Some((wd.data, valid))
        }
    };
    Ok((img, depth))
}

/// Teacher named by the model config; archive paths resolve against `root`.
pub fn teacher_source(config: &ModelConfig, root: &Path) -> Result<Box<dyn TeacherFeatureSource>> {
    match config.teacher.kind.as_str() {
        "synthetic" => Ok(Box::new(SyntheticTeacher::new(config.teacher.seed, config.teacher.channels))),
        "archive" => {
            let p = config
                .teacher
                .archive
                .as_ref()
                .ok_or_else(|| Error::config("model.teacher.archive", "missing path"))?;
            Ok(Box::new(FileTeacher::open(&root.join(p))?))
        }
        other => Err(Error::config("model.teacher.kind", format!("unknown teacher `{other}`"))),
    }
}

const CKPT_MAGIC: &[u8; 8] = b"D3LCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    seed: u64,
    model: ModelConfig,
}

/// Byte layout (little-endian): magic `D3LCKPT\0`, version u32, TOML header
/// length u32 + UTF-8 TOML (`seed`, `[model]`), tensor count u32, then per
/// tensor: name length u16, name, rank u8, dims u32×rank, f64 values.
fn checkpoint_bytes(config: &ModelConfig, seed: u64, store: &ParamStore) -> Vec<u8> {
    let header = toml::to_string(&CheckpointHeader {
        seed,
        model: config.clone(),
    })
    .expect("model configs serialize");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

type CheckpointParts = (ModelConfig, u64, Vec<(String, Tensor)>);

fn parse_checkpoint(bytes: &[u8]) -> Result<CheckpointParts> {
    let mut r = Reader(bytes);
    if r.take(8, "magic")? != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(n, "header")?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: CheckpointHeader =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {}", e.message())))?;
    let count = r.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| r.u32("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8, &name)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        entries.push((name.clone(), Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?));
    }
    if !r.0.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.0.len())));
    }
    Ok((header.model, header.seed, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            virtual_rig: CameraRig::desk_default().resized(128, 256).unwrap().to_config(),
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let cfg = tiny_config();
        let m = Model::new(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.store().tensors(), m.store().tensors());
        // corrupt a shape: same config, different width
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Model::load(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn forward_shapes_and_inference_has_no_depth() {
        let cfg = tiny_config();
        let m = Model::new(&cfg, 1).unwrap();
        let img = Raster::filled(3, 128, 256, 0.5);
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &img, Mode::Train).unwrap();
        assert_eq!(tape.value(f.depth.unwrap()).shape, vec![1, 128, 256]);
        assert_eq!(tape.value(f.head.confidence).shape, vec![1, 200, 40]);
        assert_eq!(f.students.len(), 2);
        let (pred, _) = m.predict(&img).unwrap();
        assert!(pred.is_valid());
        let (pred2, _) = m.predict(&img).unwrap();
        assert_eq!(pred, pred2);
    }
}
