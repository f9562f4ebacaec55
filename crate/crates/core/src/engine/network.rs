//! Stacked convolutional-LSTM encoder, skip-connected decoder and flow head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{level_extents, EngineConfig};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Tape, Tensor, Var};

const KERNEL: usize = 3;
const PAD: usize = 1;
/// Image, moving tumor mask, fixed image, fixed tumor mask.
pub(crate) const INPUT_CHANNELS: usize = 4;

/// Gate kernels of one convolutional LSTM level, gates stacked in the order
/// forget, input, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClstmParams<T> {
    /// `[4C, C_in, 3, 3, 3]`
    pub w_x: T,
    /// `[4C, C, 3, 3, 3]`
    pub w_h: T,
    /// `[4C]`
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: T,
    pub bias: T,
}

/// Model parameters, generic so the same layout can hold plain tensors or
/// their tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub encoder: Vec<ClstmParams<T>>,
    /// Stride-2 convolution after each encoder level.
    pub down: Vec<ConvParams<T>>,
    /// Decoder layers, deepest first.
    pub decoder: Vec<ConvParams<T>>,
    pub head: ConvParams<T>,
}

pub type NetworkParams = Network<Tensor>;

impl<T> Network<T> {
    /// Parameters in a fixed order (encoder, down, decoder, head).
    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for e in &self.encoder {
            out.extend([&e.w_x, &e.w_h, &e.bias]);
        }
        for c in self.down.iter().chain(&self.decoder).chain([&self.head]) {
            out.extend([&c.weight, &c.bias]);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for e in &mut self.encoder {
            out.extend([&mut e.w_x, &mut e.w_h, &mut e.bias]);
        }
        for c in self
            .down
            .iter_mut()
            .chain(&mut self.decoder)
            .chain([&mut self.head])
        {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Network<U> {
        let conv = |c: &ConvParams<T>, f: &mut dyn FnMut(&T) -> U| ConvParams {
            weight: f(&c.weight),
            bias: f(&c.bias),
        };
        Network {
            encoder: self
                .encoder
                .iter()
                .map(|e| ClstmParams {
                    w_x: f(&e.w_x),
                    w_h: f(&e.w_h),
                    bias: f(&e.bias),
                })
                .collect(),
            down: self.down.iter().map(|c| conv(c, &mut f)).collect(),
            decoder: self.decoder.iter().map(|c| conv(c, &mut f)).collect(),
            head: conv(&self.head, &mut f),
        }
    }

    fn from_flat_iter(cfg: &EngineConfig, it: &mut impl Iterator<Item = T>) -> Network<T> {
        let mut next = || it.next().expect("enough parameters");
        let encoder = (0..cfg.levels)
            .map(|_| ClstmParams {
                w_x: next(),
                w_h: next(),
                bias: next(),
            })
            .collect();
        let mut conv = || ConvParams {
            weight: next(),
            bias: next(),
        };
        let down = (0..cfg.levels).map(|_| conv()).collect();
        let decoder = (0..decoder_layers(cfg)).map(|_| conv()).collect();
        let head = conv();
        Network {
            encoder,
            down,
            decoder,
            head,
        }
    }
}

/// Number of decoder layers before the flow head.
fn decoder_layers(cfg: &EngineConfig) -> usize {
    if cfg.half_res_flow {
        cfg.levels - 1
    } else {
        cfg.levels
    }
}

fn kernel_shape(out: usize, inp: usize) -> Vec<usize> {
    vec![out, inp, KERNEL, KERNEL, KERNEL]
}

impl NetworkParams {
    /// Parameter shapes in [`Network::flat`] order.
    pub fn shapes(cfg: &EngineConfig) -> Vec<Vec<usize>> {
        let ch = &cfg.channels;
        let mut shapes = Vec::new();
        for l in 0..cfg.levels {
            let cin = if l == 0 { INPUT_CHANNELS } else { ch[l - 1] };
            shapes.push(kernel_shape(4 * ch[l], cin));
            shapes.push(kernel_shape(4 * ch[l], ch[l]));
            shapes.push(vec![4 * ch[l]]);
        }
        for &c in ch.iter() {
            shapes.push(kernel_shape(c, c));
            shapes.push(vec![c]);
        }
        let mut prev = ch[cfg.levels - 1];
        let stop = cfg.levels - decoder_layers(cfg);
        for l in (stop..cfg.levels).rev() {
            shapes.push(kernel_shape(ch[l], prev + ch[l]));
            shapes.push(vec![ch[l]]);
            prev = ch[l];
        }
        shapes.push(kernel_shape(3, prev));
        shapes.push(vec![3]);
        shapes
    }

    /// Seeded initialization: uniform fan-in scaled kernels, zero biases
    /// except a forget-gate bias of 1, and an all-zero flow head so the
    /// untrained model predicts zero velocity.
    pub fn init(cfg: &EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let slope = cfg.leaky_slope as f64;
        let relu_gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let shapes = Self::shapes(cfg);
        let n_enc = 3 * cfg.levels;
        let head_start = shapes.len() - 2;
        let tensors = shapes.into_iter().enumerate().map(|(idx, shape)| {
            if shape.len() == 1 {
                let mut b = Tensor::zeros(shape.clone());
                if idx < n_enc && idx % 3 == 2 {
                    let c = shape[0] / 4;
                    b.data_mut()[..c].iter_mut().for_each(|x| *x = 1.0);
                }
                return b;
            }
            if idx >= head_start {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let gain = if idx < n_enc { 1.0 } else { relu_gain };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            Tensor::new(shape, data).unwrap()
        });
        Ok(Self::from_flat_iter(
            cfg,
            &mut tensors.collect::<Vec<_>>().into_iter(),
        ))
    }

    /// Rebuild from tensors in [`Network::flat`] order, checking shapes.
    pub fn from_flat(cfg: &EngineConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::shapes(cfg);
        if shapes.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {i}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    location: format!("parameter {i}"),
                });
            }
        }
        Ok(Self::from_flat_iter(cfg, &mut tensors.into_iter()))
    }

    /// Register every tensor as a trainable tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Network<Var<'t>> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Register every tensor as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Network<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn parameter_count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }
}

/// Hidden and cell state of one level; `None` is the zero state.
#[derive(Clone, Copy, Default)]
pub struct ClstmState<'t> {
    pub h: Option<Var<'t>>,
    pub c: Option<Var<'t>>,
}

/// One convolutional LSTM update:
///
/// ```text
/// f = sig(Wxf*x + Whf*h + bf)    i = sig(Wxi*x + Whi*h + bi)
/// g = tanh(Wxg*x + Whg*h + bg)   o = sig(Wxo*x + Who*h + bo)
/// c' = f.c + i.g                 h' = o.tanh(c')
/// ```
///
/// Returns `(h', c')`.
pub fn clstm_step<'t>(
    x: Var<'t>,
    state: ClstmState<'t>,
    p: &ClstmParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let c4 = p.bias.shape()[0];
    if !c4.is_multiple_of(4) {
        return Err(Error::dim(
            "clstm_step",
            format!("bias length {c4} not divisible by 4"),
        ));
    }
    let ch = c4 / 4;
    let mut gates = x.conv3d(p.w_x, 1, PAD)?;
    if let Some(h) = state.h {
        gates = gates.add(h.conv3d(p.w_h, 1, PAD)?)?;
    }
    let gates = gates.add_channel_bias(p.bias)?;
    let f = gates.slice_channels(0, ch)?.sigmoid();
    let i = gates.slice_channels(ch, ch)?.sigmoid();
    let g = gates.slice_channels(2 * ch, ch)?.tanh();
    let o = gates.slice_channels(3 * ch, ch)?.sigmoid();
    let mut c = i.mul(g)?;
    if let Some(c_prev) = state.c {
        c = f.mul(c_prev)?.add(c)?;
    }
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}

fn conv_layer<'t>(x: Var<'t>, p: &ConvParams<Var<'t>>, stride: usize) -> Result<Var<'t>> {
    x.conv3d(p.weight, stride, PAD)?.add_channel_bias(p.bias)
}

fn check_finite(v: Var<'_>, step: usize, location: impl FnOnce() -> String) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            location: location(),
        })
    }
}

impl<'t> Network<Var<'t>> {
    /// One recurrent step: encode `input` (`[4, D, H, W]`), update the
    /// per-level states in place and decode a full-resolution velocity.
    pub fn step(
        &self,
        cfg: &EngineConfig,
        input: Var<'t>,
        states: &mut [ClstmState<'t>],
        step: usize,
    ) -> Result<Var<'t>> {
        let extents = input.value().spatial()?;
        let ext = level_extents(extents, cfg.levels);
        let mut x = input;
        let mut hidden = Vec::with_capacity(cfg.levels);
        for (l, (enc, down)) in self.encoder.iter().zip(&self.down).enumerate() {
            let (h, c) = clstm_step(x, states[l], enc)?;
            check_finite(c, step, || format!("encoder level {l}"))?;
            states[l] = ClstmState {
                h: Some(h),
                c: Some(c),
            };
            hidden.push(h);
            x = conv_layer(h, down, 2)?.leaky_relu(cfg.leaky_slope);
        }
        let stop = cfg.levels - self.decoder.len();
        for (dec, l) in self.decoder.iter().zip((stop..cfg.levels).rev()) {
            let up = x.upsample2x(Some(ext[l]))?;
            let cat = concat_channels(input.tape(), &[up, hidden[l]])?;
            x = conv_layer(cat, dec, 1)?.leaky_relu(cfg.leaky_slope);
            check_finite(x, step, || format!("decoder level {l}"))?;
        }
        let mut v = conv_layer(x, &self.head, 1)?;
        if stop > 0 {
            v = v.upsample2x(Some(extents))?;
        }
        check_finite(v, step, || "velocity head".to_string())?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EngineConfig {
        EngineConfig {
            levels: 2,
            channels: vec![2, 3],
            ..Default::default()
        }
    }

    #[test]
    fn shapes_follow_channels() {
        let cfg = EngineConfig::default();
        let p = NetworkParams::init(&cfg).unwrap();
        assert_eq!(p.encoder[0].w_x.shape(), &[32, 4, 3, 3, 3]);
        assert_eq!(p.encoder[3].w_h.shape(), &[128, 32, 3, 3, 3]);
        assert_eq!(p.decoder.len(), 3);
        assert_eq!(p.decoder[0].weight.shape(), &[32, 64, 3, 3, 3]);
        assert_eq!(p.decoder[1].weight.shape(), &[16, 48, 3, 3, 3]);
        assert_eq!(p.decoder[2].weight.shape(), &[16, 32, 3, 3, 3]);
        assert_eq!(p.head.weight.shape(), &[3, 16, 3, 3, 3]);
        assert!(p.head.weight.data().iter().all(|&x| x == 0.0));
        let flat: Vec<Tensor> = p.flat().into_iter().cloned().collect();
        assert_eq!(NetworkParams::from_flat(&cfg, flat).unwrap(), p);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_cfg();
        assert_eq!(
            NetworkParams::init(&cfg).unwrap(),
            NetworkParams::init(&cfg).unwrap()
        );
        let other = EngineConfig {
            seed: 1,
            ..small_cfg()
        };
        assert_ne!(
            NetworkParams::init(&cfg).unwrap(),
            NetworkParams::init(&other).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_state() {
        let tape = Tape::new();
        let p = ClstmParams {
            w_x: tape.param(Tensor::zeros([4, 1, 3, 3, 3])),
            w_h: tape.param(Tensor::zeros([4, 1, 3, 3, 3])),
            bias: tape.param(Tensor::zeros([4])),
        };
        let x = tape.constant(Tensor::full([1, 4, 4, 4], 0.7));
        let (h, c) = clstm_step(x, ClstmState::default(), &p).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_predicts_zero_velocity_at_odd_extents() {
        let cfg = EngineConfig::default();
        let p = NetworkParams::init(&cfg).unwrap();
        let tape = Tape::new();
        let net = p.bind_frozen(&tape);
        let input = tape.constant(Tensor::full([4, 9, 10, 7], 0.5));
        let mut states = vec![ClstmState::default(); cfg.levels];
        let v = net.step(&cfg, input, &mut states, 1).unwrap();
        assert_eq!(v.shape(), vec![3, 9, 10, 7]);
        assert!(v.value().data().iter().all(|&x| x == 0.0));
        assert!(states.iter().all(|s| s.h.is_some()));
    }

    #[test]
    fn full_resolution_head_variant() {
        let cfg = EngineConfig {
            half_res_flow: false,
            ..small_cfg()
        };
        let p = NetworkParams::init(&cfg).unwrap();
        assert_eq!(p.decoder.len(), 2);
        let tape = Tape::new();
        let net = p.bind_frozen(&tape);
        let mut states = vec![ClstmState::default(); cfg.levels];
        let v = net
            .step(
                &cfg,
                tape.constant(Tensor::full([4, 6, 5, 4], 0.1)),
                &mut states,
                1,
            )
            .unwrap();
        assert_eq!(v.shape(), vec![3, 6, 5, 4]);
    }
}
