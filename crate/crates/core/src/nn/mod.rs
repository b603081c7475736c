//! Minimal CPU tensor engine: f64 tensors, a reverse-mode tape, named
//! parameters and Adam.

mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{normal_tensor, uniform_tensor, Adam, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand_chacha::ChaCha8Rng;

/// A convolution layer: parameter handles plus stride/padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Conv {
        let (weight, bias) = store.conv(name, cin, cout, k, rng);
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Convolution with explicit padding (e.g. a patchifying `k = stride` stem).
    #[allow(clippy::too_many_arguments)]
    pub fn with_pad(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let (weight, bias) = store.conv(name, cin, cout, k, rng);
        Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Conv {
        let (weight, bias) = store.conv_scaled(name, cin, cout, k, gain, rng);
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `relu(x + conv(relu(conv(x))))`.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub a: Conv,
    pub b: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> ResBlock {
        ResBlock {
            a: Conv::new(store, &format!("{name}.a"), channels, channels, 3, 1, rng),
            b: Conv::with_gain(store, &format!("{name}.b"), channels, channels, 3, 1, 0.5, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.a.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.b.forward(tape, store, h);
        let s = tape.add(x, h);
        tape.relu(s)
    }
}
