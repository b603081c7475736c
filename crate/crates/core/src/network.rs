//! Front-view backbone and the hierarchical depth-aware head.
//!
//! The backbone patchifies the image straight to 1/8 resolution and then
//! halves the resolution once per stage, producing the `S8 … S128`
//! pyramid. The depth-aware head mirrors those stages with an encoder whose
//! taps feed the rest of the network in every mode, and an auxiliary U-Net
//! decoder that reconstructs a full-resolution inverse-depth map. The
//! decoder only runs when the caller asks for training outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore, ResBlock, Tape, Tensor, Var};

/// Downsampling tag of a front-view feature level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    S8,
    S16,
    S32,
    S64,
    S128,
}

impl Scale {
    pub const ALL: [Scale; 5] = [Scale::S8, Scale::S16, Scale::S32, Scale::S64, Scale::S128];

    pub fn factor(self) -> usize {
        match self {
            Scale::S8 => 8,
            Scale::S16 => 16,
            Scale::S32 => 32,
            Scale::S64 => 64,
            Scale::S128 => 128,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.factor())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scale> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S8" => Ok(Scale::S8),
            "S16" => Ok(Scale::S16),
            "S32" => Ok(Scale::S32),
            "S64" => Ok(Scale::S64),
            "S128" => Ok(Scale::S128),
            other => Err(Error::config("scale", format!("unknown scale tag `{other}`"))),
        }
    }
}

/// Parse a `+`-separated scale combination such as `S32+S64`.
pub fn parse_scales(s: &str) -> Result<Vec<Scale>> {
    let mut out: Vec<Scale> = s.split('+').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn format_scales(scales: &[Scale]) -> String {
    scales.iter().map(Scale::to_string).collect::<Vec<_>>().join("+")
}

/// Multi-scale front-view features, as tape variables.
#[derive(Debug, Clone, Default)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<Scale, Var>,
}

impl FeaturePyramid {
    pub fn get(&self, s: Scale) -> Result<Var> {
        self.levels
            .get(&s)
            .copied()
            .ok_or_else(|| Error::config("scales", format!("pyramid has no {s} level")))
    }

    pub fn tags(&self) -> Vec<Scale> {
        self.levels.keys().copied().collect()
    }

    pub fn deepest(&self) -> Option<Scale> {
        self.levels.keys().next_back().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of `S8, S16, S32, S64, S128`.
    pub channels: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [16, 24, 32, 32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn channels(&self, s: Scale) -> usize {
        self.channels[s.index()]
    }
}

/// Small residual network: patchify stem to `S8`, then one strided stage
/// per further level, each followed by a residual block.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    deepest: Scale,
    stem: Conv,
    stem_block: ResBlock,
    stages: Vec<(Conv, ResBlock)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, deepest: Scale, rng: &mut ChaCha8Rng) -> Backbone {
        let c = &config.channels;
        let stem = Conv::with_pad(store, "backbone.stem", 3, c[0], 8, 8, 0, rng);
        let stem_block = ResBlock::new(store, "backbone.s8", c[0], rng);
        let stages = (1..=deepest.index())
            .map(|i| {
                let name = format!("backbone.{}", Scale::ALL[i].to_string().to_lowercase());
                (
                    Conv::new(store, &format!("{name}.down"), c[i - 1], c[i], 3, 2, rng),
                    ResBlock::new(store, &format!("{name}.block"), c[i], rng),
                )
            })
            .collect();
        Backbone {
            config: config.clone(),
            deepest,
            stem,
            stem_block,
            stages,
        }
    }

    pub fn deepest(&self) -> Scale {
        self.deepest
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.deepest.factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {f} (deepest level {})",
                self.deepest
            )));
        }
        Ok(())
    }

    /// Run the backbone on a `3×H×W` image variable; returns every level up
    /// to the deepest configured one.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = tape.value(image).chw();
        if c != 3 {
            return Err(Error::shape(format!("backbone expects 3 channels, got {c}")));
        }
        self.check_input(h, w)?;
        let mut pyr = FeaturePyramid::default();
        let x = self.stem.forward(tape, store, image);
        let x = tape.relu(x);
        let mut x = self.stem_block.forward(tape, store, x);
        pyr.levels.insert(Scale::S8, x);
        for (i, (down, block)) in self.stages.iter().enumerate() {
            let y = down.forward(tape, store, x);
            let y = tape.relu(y);
            x = block.forward(tape, store, y);
            pyr.levels.insert(Scale::ALL[i + 1], x);
        }
        Ok(pyr)
    }
}

/// Whether auxiliary training-only branches are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Encoder–decoder depth head over the backbone pyramid.
#[derive(Debug, Clone)]
pub struct Hdah {
    lateral: Vec<Conv>,
    down: Vec<Conv>,
    // decoder, deepest first: fuse(upsampled, skip) at each shallower level
    fuse: Vec<Conv>,
    up_s4: Conv,
    up_s2: Conv,
    out: Conv,
    deepest: Scale,
}

const DECODER_S4: usize = 4;

impl Hdah {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, deepest: Scale, rng: &mut ChaCha8Rng) -> Hdah {
        let levels = deepest.index() + 1;
        let c = &config.channels;
        let lateral = (0..levels)
            .map(|i| Conv::new(store, &format!("hdah.enc.lateral{}", Scale::ALL[i].factor()), c[i], c[i], 1, 1, rng))
            .collect();
        let down = (1..levels)
            .map(|i| Conv::new(store, &format!("hdah.enc.down{}", Scale::ALL[i].factor()), c[i - 1], c[i], 3, 2, rng))
            .collect();
        let fuse = (0..levels - 1)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("hdah.dec.fuse{}", Scale::ALL[i].factor()),
                    c[i + 1] + c[i],
                    c[i],
                    3,
                    1,
                    rng,
                )
            })
            .collect();
        Hdah {
            lateral,
            down,
            fuse,
            up_s4: Conv::new(store, "hdah.dec.s4", c[0], DECODER_S4, 1, 1, rng),
            up_s2: Conv::new(store, "hdah.dec.s2", DECODER_S4, DECODER_S4, 3, 1, rng),
            out: Conv::new(store, "hdah.dec.out", DECODER_S4, 1, 1, 1, rng),
            deepest,
        }
    }

    /// Encoder taps for every pyramid level, plus (training only) the
    /// decoded `1×H×W` depth map in `[0, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        image_hw: (usize, usize),
        mode: Mode,
    ) -> Result<(Option<Var>, FeaturePyramid)> {
        let mut taps = FeaturePyramid::default();
        let mut prev: Option<Var> = None;
        for i in 0..=self.deepest.index() {
            let s = Scale::ALL[i];
            let f = pyramid.get(s)?;
            let mut t = self.lateral[i].forward(tape, store, f);
            if let Some(p) = prev {
                let d = self.down[i - 1].forward(tape, store, p);
                t = tape.add(t, d);
            }
            let t = tape.relu(t);
            taps.levels.insert(s, t);
            prev = Some(t);
        }
        if mode == Mode::Inference {
            return Ok((None, taps));
        }
        let mut x = taps.get(self.deepest)?;
        for i in (0..self.deepest.index()).rev() {
            let skip = taps.get(Scale::ALL[i])?;
            let (_, h, w) = tape.value(skip).chw();
            let up = tape.resize(x, h, w);
            let cat = tape.concat(up, skip);
            let y = self.fuse[i].forward(tape, store, cat);
            x = tape.relu(y);
        }
        let (h, w) = image_hw;
        let up = tape.resize(x, h / 4, w / 4);
        let y = self.up_s4.forward(tape, store, up);
        let y = tape.relu(y);
        let up = tape.resize(y, h / 2, w / 2);
        let y = self.up_s2.forward(tape, store, up);
        let y = tape.relu(y);
        let up = tape.resize(y, h, w);
        let y = self.out.forward(tape, store, up);
        Ok((Some(tape.sigmoid(y)), taps))
    }
}

/// L1 loss between predicted and target normalized inverse depth over the
/// valid mask, with its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct DepthLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the mask selected no pixel; the loss is then 0.
    pub empty_mask: bool,
}

pub fn depth_supervision_loss(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<DepthLoss> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::shape(format!(
            "depth loss: prediction {}, target {}, mask {}",
            pred.len(),
            target.len(),
            valid.len()
        )));
    }
    let n = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; pred.len()];
    if n == 0 {
        log::warn!("depth supervision mask is empty; loss set to 0");
        return Ok(DepthLoss {
            value: 0.0,
            grad,
            empty_mask: true,
        });
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if valid[i] {
            let d = pred[i] - target[i];
            sum += d.abs();
            grad[i] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok(DepthLoss {
        value: sum * inv,
        grad,
        empty_mask: false,
    })
}

/// Record the depth loss on the tape as a scalar node.
pub fn depth_loss_node(tape: &mut Tape, pred: Var, target: &[f64], valid: &[bool]) -> Result<(Var, DepthLoss)> {
    let shape = tape.value(pred).shape.clone();
    let loss = depth_supervision_loss(&tape.value(pred).data, target, valid)?;
    let g = Tensor {
        shape,
        data: loss.grad.clone(),
    };
    Ok((tape.scalar(loss.value, vec![(pred, g)]), loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(deepest: Scale) -> (ParamStore, Backbone, Hdah) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig::default();
        let b = Backbone::new(&mut store, &cfg, deepest, &mut rng);
        let h = Hdah::new(&mut store, &cfg, deepest, &mut rng);
        (store, b, h)
    }

    #[test]
    fn pyramid_shapes() {
        let (store, b, _) = build(Scale::S64);
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::filled(&[3, 256, 512], 0.5));
        let p = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(p.get(Scale::S32).unwrap()).shape, vec![32, 8, 16]);
        assert_eq!(tape.value(p.get(Scale::S64).unwrap()).shape, vec![32, 4, 8]);
        assert!(p.get(Scale::S128).is_err());
    }

    #[test]
    fn non_divisible_input_is_a_shape_error() {
        let (store, b, _) = build(Scale::S128);
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(&[3, 200, 512]));
        assert!(matches!(b.forward(&mut tape, &store, x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_gives_finite_features_and_is_deterministic() {
        let (store, b, h) = build(Scale::S128);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(&[3, 256, 512]));
            let p = b.forward(&mut tape, &store, x).unwrap();
            let (d, taps) = h.forward(&mut tape, &store, &p, (256, 512), Mode::Train).unwrap();
            let mut all: Vec<f64> = Vec::new();
            for v in p.levels.values().chain(taps.levels.values()) {
                all.extend(&tape.value(*v).data);
            }
            all.extend(&tape.value(d.unwrap()).data);
            all
        };
        let a = run();
        assert!(a.iter().all(|x| x.is_finite()));
        let b2 = run();
        assert!(a.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn inference_mode_skips_decoder_and_keeps_taps() {
        let (store, b, h) = build(Scale::S64);
        let img = Tensor::from_vec(&[3, 128, 256], (0..3 * 128 * 256).map(|i| ((i * 31) % 97) as f64 / 97.0).collect()).unwrap();
        let mut t1 = Tape::new();
        let x = t1.leaf(img.clone());
        let p = b.forward(&mut t1, &store, x).unwrap();
        let (d, taps_train) = h.forward(&mut t1, &store, &p, (128, 256), Mode::Train).unwrap();
        let d = d.unwrap();
        assert_eq!(t1.value(d).shape, vec![1, 128, 256]);
        assert!(t1.value(d).data.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut t2 = Tape::inference();
        let x = t2.leaf(img);
        let p2 = b.forward(&mut t2, &store, x).unwrap();
        let before = t2.len();
        let (none, taps_inf) = h.forward(&mut t2, &store, &p2, (128, 256), Mode::Inference).unwrap();
        assert!(none.is_none());
        // encoder only: lateral, down, add and relu nodes; no decoder resize/conv nodes
        let levels = Scale::S64.index() + 1;
        let expected = levels * 4 + (levels - 1) * 4;
        assert_eq!(t2.len() - before, expected);
        for s in taps_train.tags() {
            let a = &t1.value(taps_train.get(s).unwrap()).data;
            let b = &t2.value(taps_inf.get(s).unwrap()).data;
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn depth_loss_fixed_points() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let mask = vec![true; 50];
        assert_eq!(depth_supervision_loss(&t, &t, &mask).unwrap().value, 0.0);
        let p: Vec<f64> = t.iter().map(|x| x + 0.1).collect();
        assert!((depth_supervision_loss(&p, &t, &mask).unwrap().value - 0.1).abs() < 1e-12);
        let l = depth_supervision_loss(&p, &t, &[false; 50]).unwrap();
        assert!(l.empty_mask);
        assert_eq!(l.value, 0.0);
        assert!(depth_supervision_loss(&p, &t[..10], &mask).is_err());
    }

    #[test]
    fn depth_loss_matches_scalar_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (17, 23);
        let p: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let m: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < 0.7).collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..h {
            for c in 0..w {
                if m[r * w + c] {
                    sum += (p[r * w + c] - t[r * w + c]).abs();
                    n += 1;
                }
            }
        }
        let got = depth_supervision_loss(&p, &t, &m).unwrap().value;
        assert!((got - sum / n as f64).abs() < 1e-12);
    }
}
