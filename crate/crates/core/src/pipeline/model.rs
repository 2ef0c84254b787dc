//! Backbone (stem + four strided stages with plain CSP units), a PAN-style
//! neck of four fusion units and decoupled per-level heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, BACKBONE_STRIDES};
use crate::cspok::{cspok_block, CspokConfig, CspokParams};
use crate::error::Result;
use crate::spd::{spd_conv, SpdConfig, SpdParams};
use crate::tensor::{Conv2dSpec, Shape, Tape, Tensor, Var};

/// Prior probability the classification bias starts at.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Conv<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Conv<U> {
        Conv {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Downsample<T> {
    Strided(Conv<T>),
    Spd(SpdParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub cls_hidden: Conv<T>,
    pub cls_out: Conv<T>,
    pub reg_hidden: Conv<T>,
    pub reg_out: Conv<T>,
}

/// All learnable tensors (or their tape handles).
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub stem: Conv<T>,
    /// Downsampling into P2..P5.
    pub down: Vec<Downsample<T>>,
    /// Backbone CSP units at P2..P5.
    pub stages: Vec<CspokParams<T>>,
    pub td4: CspokParams<T>,
    pub td3: CspokParams<T>,
    pub bu4_down: Conv<T>,
    pub bu4: CspokParams<T>,
    pub bu5_down: Conv<T>,
    pub bu5: CspokParams<T>,
    pub heads: Vec<Head<T>>,
}

impl<T> Network<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Network<U> {
        let head = |h: &Head<T>, f: &mut dyn FnMut(&T) -> U| Head {
            cls_hidden: h.cls_hidden.map(&mut *f),
            cls_out: h.cls_out.map(&mut *f),
            reg_hidden: h.reg_hidden.map(&mut *f),
            reg_out: h.reg_out.map(&mut *f),
        };
        Network {
            stem: self.stem.map(&mut f),
            down: self
                .down
                .iter()
                .map(|d| match d {
                    Downsample::Strided(c) => Downsample::Strided(c.map(&mut f)),
                    Downsample::Spd(p) => Downsample::Spd(p.map(&mut f)),
                })
                .collect(),
            stages: self.stages.iter().map(|s| s.map(&mut f)).collect(),
            td4: self.td4.map(&mut f),
            td3: self.td3.map(&mut f),
            bu4_down: self.bu4_down.map(&mut f),
            bu4: self.bu4.map(&mut f),
            bu5_down: self.bu5_down.map(&mut f),
            bu5: self.bu5.map(&mut f),
            heads: self.heads.iter().map(|h| head(h, &mut f)).collect(),
        }
    }

    /// Parameters with dotted names, in the same order `map` visits them.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        fn push_conv<'a, T>(out: &mut Vec<(String, &'a T)>, name: &str, c: &'a Conv<T>) {
            out.push((format!("{name}.weight"), &c.weight));
            out.push((format!("{name}.bias"), &c.bias));
        }
        fn push_csp<'a, T>(out: &mut Vec<(String, &'a T)>, name: &str, c: &'a CspokParams<T>) {
            out.extend(c.named().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        push_conv(&mut out, "stem", &self.stem);
        for (i, d) in self.down.iter().enumerate() {
            let name = format!("down{}", i + 2);
            match d {
                Downsample::Strided(c) => push_conv(&mut out, &name, c),
                Downsample::Spd(p) => {
                    out.push((format!("{name}.spd.weight"), &p.weight));
                    out.push((format!("{name}.spd.bias"), &p.bias));
                }
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            push_csp(&mut out, &format!("stage{}", i + 2), s);
        }
        push_csp(&mut out, "td4", &self.td4);
        push_csp(&mut out, "td3", &self.td3);
        push_conv(&mut out, "bu4_down", &self.bu4_down);
        push_csp(&mut out, "bu4", &self.bu4);
        push_conv(&mut out, "bu5_down", &self.bu5_down);
        push_csp(&mut out, "bu5", &self.bu5);
        for (i, h) in self.heads.iter().enumerate() {
            push_conv(&mut out, &format!("head{i}.cls_hidden"), &h.cls_hidden);
            push_conv(&mut out, &format!("head{i}.cls_out"), &h.cls_out);
            push_conv(&mut out, &format!("head{i}.reg_hidden"), &h.reg_hidden);
            push_conv(&mut out, &format!("head{i}.reg_out"), &h.reg_out);
        }
        out
    }
}

impl Network<Tensor> {
    pub fn register(&self, tape: &mut Tape) -> Network<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flat copies in `named` order.
    pub fn flatten(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Inverse of [`Network::flatten`].
    pub fn with_flat(&self, flat: Vec<Tensor>) -> Network<Tensor> {
        let mut it = flat.into_iter();
        self.map(|_| it.next().expect("flat parameter list too short"))
    }
}

/// Block configurations derived from a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub down_spd: Vec<Option<SpdConfig>>,
    pub stages: Vec<CspokConfig>,
    pub td4: CspokConfig,
    pub td3: CspokConfig,
    pub bu4: CspokConfig,
    pub bu5: CspokConfig,
    /// Neck output channels at strides 8, 16, 32.
    pub level_channels: [usize; 3],
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let [_, _, w3, w4, w5] = config.widths;
        let down_spd = (2..=5)
            .map(|stage| {
                (config.spd_enabled && stage == config.spd_stage).then(|| {
                    let cin = config.widths[stage - 2];
                    let cout = config.widths[stage - 1];
                    SpdConfig {
                        kernel: config.spd_kernel,
                        ..SpdConfig::new(cin, cout)
                    }
                })
            })
            .collect();
        let plain = |cin: usize, cout: usize| CspokConfig {
            okm: None,
            ..CspokConfig::new(cin, cout)
        };
        let fuse = |cin: usize, cout: usize| CspokConfig {
            okm: config.cspok_enabled.then_some(config.okm),
            ..CspokConfig::new(cin, cout)
        };
        let layout = Layout {
            down_spd,
            stages: config.widths[1..].iter().map(|&w| plain(w, w)).collect(),
            td4: fuse(w5 + w4, w4),
            td3: fuse(w4 + w3, w3),
            bu4: fuse(w3 + w4, w4),
            bu5: fuse(w4 + w5, w5),
            level_channels: [w3, w4, w5],
        };
        for c in layout.stages.iter().chain([&layout.td4, &layout.td3, &layout.bu4, &layout.bu5]) {
            c.validate()?;
        }
        Ok(layout)
    }

    fn level_index(stride: usize) -> usize {
        BACKBONE_STRIDES.iter().position(|&s| s == stride).expect("validated stride")
    }
}

/// A built network: configuration, derived layout and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Network<Tensor>,
}

/// Raw head maps of one level: logits `[N, K, H, W]`, box offsets `[N, 4, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelOutput<T> {
    pub stride: usize,
    pub cls: T,
    pub reg: T,
}

/// FNV-1a, used to give every component its own RNG stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

fn he_conv(cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> Conv<Tensor> {
    let bound = (6.0 / (cin * k * k) as f64).sqrt();
    Conv {
        weight: Tensor::uniform([cout, cin, k, k], -bound, bound, rng),
        bias: Tensor::zeros([1, cout, 1, 1]),
    }
}

fn zero_conv(cout: usize, cin: usize, bias: f64) -> Conv<Tensor> {
    Conv {
        weight: Tensor::zeros([cout, cin, 1, 1]),
        bias: Tensor::full([1, cout, 1, 1], bias),
    }
}

/// Builds the network for `config`; initialisation depends only on
/// `config.seed` and each component's name.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    let layout = Layout::new(config)?;
    let seed = config.seed;
    let w = config.widths;
    let stem = he_conv(w[0], config.in_channels, 3, &mut component_rng(seed, "stem"));
    let down = layout
        .down_spd
        .iter()
        .enumerate()
        .map(|(i, spd)| {
            let mut rng = component_rng(seed, &format!("down{}", i + 2));
            match spd {
                Some(cfg) => Downsample::Spd(SpdParams::init(cfg, &mut rng)),
                None => Downsample::Strided(he_conv(w[i + 1], w[i], 3, &mut rng)),
            }
        })
        .collect();
    let csp = |name: &str, cfg: &CspokConfig| CspokParams::init(cfg, &mut component_rng(seed, name));
    let stages = layout
        .stages
        .iter()
        .enumerate()
        .map(|(i, c)| csp(&format!("stage{}", i + 2), c))
        .collect::<Result<Vec<_>>>()?;
    let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    let hidden = config.head_hidden;
    let heads = config
        .strides
        .iter()
        .map(|&s| {
            let cin = layout.level_channels[Layout::level_index(s)];
            let mut rng = component_rng(seed, &format!("head_s{s}"));
            Head {
                cls_hidden: he_conv(hidden, cin, 3, &mut rng),
                cls_out: zero_conv(config.num_classes, hidden, prior),
                reg_hidden: he_conv(hidden, cin, 3, &mut rng),
                reg_out: zero_conv(4, hidden, 0.0),
            }
        })
        .collect();
    let params = Network {
        stem,
        down,
        stages,
        td4: csp("td4", &layout.td4)?,
        td3: csp("td3", &layout.td3)?,
        bu4_down: he_conv(w[2], w[2], 3, &mut component_rng(seed, "bu4_down")),
        bu4: csp("bu4", &layout.bu4)?,
        bu5_down: he_conv(w[3], w[3], 3, &mut component_rng(seed, "bu5_down")),
        bu5: csp("bu5", &layout.bu5)?,
        heads,
    };
    Ok(Model {
        config: config.clone(),
        layout,
        params,
    })
}

fn conv_act(tape: &mut Tape, x: Var, c: &Conv<Var>, stride: usize) -> Result<Var> {
    let k = tape.shape(c.weight).h;
    let y = tape.conv2d(x, c.weight, Some(c.bias), Conv2dSpec::new(stride, k / 2))?;
    Ok(tape.silu(y))
}

fn conv_linear(tape: &mut Tape, x: Var, c: &Conv<Var>) -> Result<Var> {
    tape.conv2d(x, c.weight, Some(c.bias), Conv2dSpec::new(1, 0))
}

fn fuse(tape: &mut Tape, parts: &[Var], cfg: &CspokConfig, p: &CspokParams<Var>) -> Result<Var> {
    let x = tape.concat_channels(parts)?;
    Ok(cspok_block(tape, x, cfg, p)?.output)
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.config.in_channels, self.config.input_size, self.config.input_size)
    }

    /// Forward pass on registered parameters; one output per head stride.
    pub fn forward(&self, tape: &mut Tape, input: Var, params: &Network<Var>) -> Result<Vec<LevelOutput<Var>>> {
        let shape = tape.shape(input);
        let expected = self.input_shape(shape.n);
        if shape != expected {
            return Err(crate::Error::Dimension(format!("model expects input {expected}, got {shape}")));
        }
        let mut x = conv_act(tape, input, &params.stem, 2)?;
        let mut feats = Vec::with_capacity(4);
        for (i, (down, stage)) in params.down.iter().zip(&params.stages).enumerate() {
            x = match (down, &self.layout.down_spd[i]) {
                (Downsample::Spd(p), Some(cfg)) => {
                    let y = spd_conv(tape, x, cfg, p)?;
                    tape.silu(y)
                }
                (Downsample::Strided(c), None) => conv_act(tape, x, c, 2)?,
                _ => return Err(crate::Error::Config("downsampling parameters do not match layout".into())),
            };
            x = cspok_block(tape, x, &self.layout.stages[i], stage)?.output;
            feats.push(x);
        }
        let (p3, p4, p5) = (feats[1], feats[2], feats[3]);
        let up5 = tape.upsample_nearest(p5, 2)?;
        let n4 = fuse(tape, &[up5, p4], &self.layout.td4, &params.td4)?;
        let up4 = tape.upsample_nearest(n4, 2)?;
        let o3 = fuse(tape, &[up4, p3], &self.layout.td3, &params.td3)?;
        let d3 = conv_act(tape, o3, &params.bu4_down, 2)?;
        let o4 = fuse(tape, &[d3, n4], &self.layout.bu4, &params.bu4)?;
        let d4 = conv_act(tape, o4, &params.bu5_down, 2)?;
        let o5 = fuse(tape, &[d4, p5], &self.layout.bu5, &params.bu5)?;
        let levels = [o3, o4, o5];
        self.config
            .strides
            .iter()
            .zip(&params.heads)
            .map(|(&stride, head)| {
                let f = levels[Layout::level_index(stride)];
                let ch = conv_act(tape, f, &head.cls_hidden, 1)?;
                let cls = conv_linear(tape, ch, &head.cls_out)?;
                let rh = conv_act(tape, f, &head.reg_hidden, 1)?;
                let reg = conv_linear(tape, rh, &head.reg_out)?;
                Ok(LevelOutput { stride, cls, reg })
            })
            .collect()
    }

    /// Forward pass returning plain tensors.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<LevelOutput<Tensor>>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let params = self.params.register(&mut tape);
        let out = self.forward(&mut tape, x, &params)?;
        Ok(out
            .into_iter()
            .map(|l| LevelOutput {
                stride: l.stride,
                cls: tape.value(l.cls).clone(),
                reg: tape.value(l.reg).clone(),
            })
            .collect())
    }
}
