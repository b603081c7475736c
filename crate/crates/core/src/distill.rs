//! Depth-prior distillation: teacher feature sources, the recorded-feature
//! archive, student projection modules, the distillation loss and
//! channel-concatenation fusion.
//!
//! Students at `S8/S16/S32` learn the teacher's `layer17` tap, students at
//! `S64/S128` its `layer23` tap.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{with_path, Error, Result};
use crate::network::Scale;
use crate::nn::{normal_tensor, Conv, ParamStore, Tape, Tensor, Var};
use crate::raster::Raster;

pub const LAYER17: &str = "layer17";
pub const LAYER23: &str = "layer23";

/// Teacher tap a student at `scale` is trained against.
pub fn teacher_tag(scale: Scale) -> &'static str {
    match scale {
        Scale::S8 | Scale::S16 | Scale::S32 => LAYER17,
        Scale::S64 | Scale::S128 => LAYER23,
    }
}

pub type ContentHash = [u8; 32];

/// SHA-256 of an image's dimensions and raw values.
pub fn content_hash(image: &Raster) -> ContentHash {
    let mut h = Sha256::new();
    h.update(image.to_le_bytes());
    h.finalize().into()
}

/// Tagged teacher feature maps for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherFeatures {
    pub maps: BTreeMap<String, Raster>,
}

impl TeacherFeatures {
    pub fn get(&self, tag: &str) -> Result<&Raster> {
        self.maps
            .get(tag)
            .ok_or_else(|| Error::Archive(format!("teacher features lack tap `{tag}`")))
    }
}

/// Anything that can produce teacher features for an image.
pub trait TeacherFeatureSource: Send + Sync {
    fn features(&self, image: &Raster) -> Result<TeacherFeatures>;

    /// `(tag, channels)` of every tap this source yields.
    fn taps(&self) -> Vec<(String, usize)>;
}

/// Deterministic stand-in teacher: seeded random linear projections of
/// average-pooled image patches, squashed with `tanh`.
///
/// `layer17` lives at 1/16 resolution, `layer23` at 1/32; each cell sees
/// a 4×4 block of the image pooled to 1/4 (resp. 1/8).
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    channels: usize,
    w17: Tensor,
    w23: Tensor,
}

impl SyntheticTeacher {
    pub fn new(seed: u64, channels: usize) -> SyntheticTeacher {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e55);
        let std = 2.0 / 48f64.sqrt();
        SyntheticTeacher {
            channels,
            w17: normal_tensor(&[channels, 49], std, &mut rng),
            w23: normal_tensor(&[channels, 49], std, &mut rng),
        }
    }

    fn tap(&self, image: &Raster, pool: usize, weights: &Tensor) -> Raster {
        let (h, w) = (image.height / pool, image.width / pool);
        let pooled = Raster::from_fn(3, h, w, |c, v, u| {
            let mut s = 0.0;
            for dv in 0..pool {
                for du in 0..pool {
                    s += image.get(c, v * pool + dv, u * pool + du);
                }
            }
            s / (pool * pool) as f64
        });
        let (oh, ow) = (h / 4, w / 4);
        let mut out = Raster::zeros(self.channels, oh, ow);
        let mut patch = [0.0; 49];
        for v in 0..oh {
            for u in 0..ow {
                let mut k = 0;
                for c in 0..3 {
                    for dv in 0..4 {
                        for du in 0..4 {
                            patch[k] = pooled.get(c, v * 4 + dv, u * 4 + du) - 0.5;
                            k += 1;
                        }
                    }
                }
                patch[48] = 1.0;
                for ch in 0..self.channels {
                    let row = &weights.data[ch * 49..(ch + 1) * 49];
                    let a: f64 = row.iter().zip(&patch).map(|(x, y)| x * y).sum();
                    out.set(ch, v, u, a.tanh());
                }
            }
        }
        out
    }
}

impl TeacherFeatureSource for SyntheticTeacher {
    fn features(&self, image: &Raster) -> Result<TeacherFeatures> {
        if image.channels != 3 || image.height % 32 != 0 || image.width % 32 != 0 {
            return Err(Error::shape(format!(
                "synthetic teacher needs a 3-channel image with sides divisible by 32, got {:?}",
                image.dims()
            )));
        }
        let mut maps = BTreeMap::new();
        maps.insert(LAYER17.to_string(), self.tap(image, 4, &self.w17));
        maps.insert(LAYER23.to_string(), self.tap(image, 8, &self.w23));
        Ok(TeacherFeatures { maps })
    }

    fn taps(&self) -> Vec<(String, usize)> {
        vec![(LAYER17.into(), self.channels), (LAYER23.into(), self.channels)]
    }
}

const ARCHIVE_MAGIC: &[u8; 8] = b"D3LTFEAT";
const ARCHIVE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Recorded teacher features keyed by image content hash.
///
/// Byte layout (all integers little-endian):
///
/// ```text
/// magic    8 bytes   "D3LTFEAT"
/// version  u32       1
/// count    u32       number of entries
/// entry × count, sorted by (hash, tag):
///   hash     32 bytes  SHA-256 content hash of the image
///   tag_len  u16
///   tag      tag_len bytes, UTF-8
///   dtype    u8        1 = f32, 2 = f64
///   shape    3 × u32   channels, height, width
///   data     channels·height·width values, channel-major
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherArchive {
    entries: BTreeMap<ContentHash, TeacherFeatures>,
}

impl TeacherArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hashes(&self) -> impl Iterator<Item = &ContentHash> {
        self.entries.keys()
    }

    pub fn get(&self, hash: &ContentHash) -> Option<&TeacherFeatures> {
        self.entries.get(hash)
    }

    /// Insert features for `hash`; re-inserting identical features is a
    /// no-op, differing features under the same hash are an error.
    pub fn insert(&mut self, hash: ContentHash, features: TeacherFeatures) -> Result<()> {
        if let Some(prev) = self.entries.get(&hash) {
            if *prev != features {
                return Err(Error::Archive(format!(
                    "hash collision: entry {} already holds different features",
                    hex::encode(hash)
                )));
            }
            return Ok(());
        }
        self.entries.insert(hash, features);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let count: usize = self.entries.values().map(|f| f.maps.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (hash, feats) in &self.entries {
            for (tag, map) in &feats.maps {
                out.extend_from_slice(hash);
                out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
                out.extend_from_slice(tag.as_bytes());
                out.push(DTYPE_F64);
                for d in [map.channels, map.height, map.width] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for x in &map.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TeacherArchive> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Archive("not a teacher feature archive (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let count = read_u32(&mut r, "count")?;
        let mut archive = TeacherArchive::new();
        for i in 0..count {
            let mut hash = [0u8; 32];
            read_exact(&mut r, &mut hash, "entry hash")?;
            let mut b2 = [0u8; 2];
            read_exact(&mut r, &mut b2, "tag length")?;
            let mut tag = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(&mut r, &mut tag, "tag")?;
            let tag = String::from_utf8(tag).map_err(|_| Error::Archive(format!("entry {i}: tag is not UTF-8")))?;
            let mut dtype = [0u8; 1];
            read_exact(&mut r, &mut dtype, "dtype")?;
            let c = read_u32(&mut r, "shape")? as usize;
            let h = read_u32(&mut r, "shape")? as usize;
            let w = read_u32(&mut r, "shape")? as usize;
            let n = c * h * w;
            let data = match dtype[0] {
                DTYPE_F64 => {
                    let mut buf = vec![0u8; n * 8];
                    read_exact(&mut r, &mut buf, "data")?;
                    buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
                }
                DTYPE_F32 => {
                    let mut buf = vec![0u8; n * 4];
                    read_exact(&mut r, &mut buf, "data")?;
                    buf.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                        .collect()
                }
                d => return Err(Error::Archive(format!("entry {i}: unknown dtype {d}"))),
            };
            let map = Raster::from_vec(c, h, w, data)?;
            let entry = archive.entries.entry(hash).or_default();
            if entry.maps.insert(tag.clone(), map).is_some() {
                return Err(Error::Archive(format!("entry {i}: duplicate tag `{tag}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Archive(format!("{} trailing bytes after last entry", r.len())));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = with_path(path, std::fs::File::create(path))?;
        with_path(path, f.write_all(&self.to_bytes()))
    }

    pub fn load(path: &Path) -> Result<TeacherArchive> {
        let mut bytes = Vec::new();
        let mut f = with_path(path, std::fs::File::open(path))?;
        with_path(path, f.read_to_end(&mut bytes))?;
        TeacherArchive::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Archive(format!("truncated archive while reading {what}")));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Teacher backed by a recorded archive.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    archive: TeacherArchive,
}

impl FileTeacher {
    pub fn new(archive: TeacherArchive) -> Self {
        FileTeacher { archive }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(FileTeacher::new(TeacherArchive::load(path)?))
    }
}

impl TeacherFeatureSource for FileTeacher {
    fn features(&self, image: &Raster) -> Result<TeacherFeatures> {
        let h = content_hash(image);
        self.archive
            .get(&h)
            .cloned()
            .ok_or_else(|| Error::Archive(format!("no recorded features for image {}", hex::encode(h))))
    }

    fn taps(&self) -> Vec<(String, usize)> {
        self.archive
            .entries
            .values()
            .next()
            .map(|f| f.maps.iter().map(|(t, m)| (t.clone(), m.channels)).collect())
            .unwrap_or_default()
    }
}

/// Query `adapter` for every image and write the resulting archive.
pub fn record_teacher_features(
    images: &[Raster],
    adapter: &dyn TeacherFeatureSource,
    output: &Path,
) -> Result<TeacherArchive> {
    let mut archive = TeacherArchive::new();
    for img in images {
        let feats = adapter.features(img)?;
        for tag in [LAYER17, LAYER23] {
            feats.get(tag)?;
        }
        archive.insert(content_hash(img), feats)?;
    }
    archive.save(output)?;
    Ok(archive)
}

/// Student projection: two 3×3 convolutions with a residual connection and a
/// 1×1 projection to the teacher's channel count.
#[derive(Debug, Clone)]
pub struct Student {
    pub scale: Scale,
    a: Conv,
    b: Conv,
    proj: Conv,
    out_channels: usize,
}

impl Student {
    pub fn new(store: &mut ParamStore, scale: Scale, in_channels: usize, teacher_channels: usize, rng: &mut ChaCha8Rng) -> Student {
        let name = format!("student.{}", scale.to_string().to_lowercase());
        Student {
            scale,
            a: Conv::new(store, &format!("{name}.a"), in_channels, in_channels, 3, 1, rng),
            b: Conv::with_gain(store, &format!("{name}.b"), in_channels, in_channels, 3, 1, 0.5, rng),
            proj: Conv::new(store, &format!("{name}.proj"), in_channels, teacher_channels, 1, 1, rng),
            out_channels: teacher_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.a.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.b.forward(tape, store, h);
        let r = tape.add(x, h);
        let r = tape.relu(r);
        self.proj.forward(tape, store, r)
    }
}

/// Run the student for `pyramid[scale]`.
pub fn student_forward(
    tape: &mut Tape,
    store: &ParamStore,
    student: &Student,
    pyramid: &crate::network::FeaturePyramid,
) -> Result<Var> {
    let x = pyramid.get(student.scale)?;
    Ok(student.forward(tape, store, x))
}

#[derive(Debug, Clone)]
pub struct DistillLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// The teacher map had zero variance; plain MSE against it was used.
    pub degenerate_teacher: bool,
}

/// Resize the teacher map to the student's spatial size and standardize it
/// to zero mean and unit variance over all elements.
pub fn prepare_teacher(teacher: &Raster, height: usize, width: usize) -> (Vec<f64>, bool) {
    let t = teacher.resize_bilinear(height, width);
    let n = t.data.len() as f64;
    let mean = t.data.iter().sum::<f64>() / n;
    let var = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 1e-12 {
        log::warn!("teacher map has zero variance; distilling against raw values");
        return (t.data, true);
    }
    let sd = var.sqrt();
    (t.data.iter().map(|x| (x - mean) / sd).collect(), false)
}

/// Mean squared error between a student map and the standardized teacher.
pub fn distillation_loss(student: &Tensor, teacher: &Raster) -> Result<DistillLoss> {
    let (c, h, w) = student.chw();
    if teacher.channels != c {
        return Err(Error::shape(format!(
            "student has {c} channels, teacher tap has {}",
            teacher.channels
        )));
    }
    let (target, degenerate) = prepare_teacher(teacher, h, w);
    Ok(mse_against(&student.data, &target, degenerate))
}

pub(crate) fn mse_against(student: &[f64], target: &[f64], degenerate: bool) -> DistillLoss {
    let n = student.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(target) {
        let d = s - t;
        value += d * d;
        grad.push(2.0 * d / n);
    }
    DistillLoss {
        value: value / n,
        grad,
        degenerate_teacher: degenerate,
    }
}

/// Record the distillation loss of `student` on the tape.
pub fn distillation_loss_node(tape: &mut Tape, student: Var, teacher: &Raster) -> Result<(Var, DistillLoss)> {
    let loss = distillation_loss(tape.value(student), teacher)?;
    let g = Tensor {
        shape: tape.value(student).shape.clone(),
        data: loss.grad.clone(),
    };
    Ok((tape.scalar(loss.value, vec![(student, g)]), loss))
}

/// Channel concatenation `[pyramid_level ; distilled]`.
pub fn fuse(tape: &mut Tape, pyramid_level: Var, distilled: Var) -> Result<Var> {
    let (_, h, w) = tape.value(pyramid_level).chw();
    let (_, hd, wd) = tape.value(distilled).chw();
    if (h, w) != (hd, wd) {
        return Err(Error::shape(format!(
            "fuse: pyramid level is {h}x{w}, distilled map is {hd}x{wd}"
        )));
    }
    Ok(tape.concat(pyramid_level, distilled))
}
