//! Cross-stage split/merge fusion with an omni-kernel operator.
//!
//! The input is split along channels into a bypass part and a processed
//! part. The processed part goes through a convolution and then [`okm`]; the
//! two parts are concatenated (bypass first) and mixed by a 1x1 convolution.
//!
//! [`okm`] is a shape-preserving sum of three depthwise branches plus a
//! residual, added in the fixed order local, horizontal strip, vertical
//! strip, global, residual:
//!
//! - local: `k_l x k_l` depthwise convolution;
//! - strips: `1 x k_s` and `k_s x 1` depthwise convolutions;
//! - global: `x * sigmoid(W_g . avgpool(x) + b_g)`, then a per-channel scale.
//!
//! The branch output weights (local, strips and the global per-channel
//! scale) start at zero, so a freshly initialised operator is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkmConfig {
    pub local_kernel: usize,
    pub strip_kernel: usize,
    pub global: bool,
    pub residual: bool,
}

impl Default for OkmConfig {
    fn default() -> Self {
        OkmConfig {
            local_kernel: 3,
            strip_kernel: 7,
            global: true,
            residual: true,
        }
    }
}

impl OkmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("local_kernel", self.local_kernel), ("strip_kernel", self.strip_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("okm {name} must be odd, got {k}")));
            }
        }
        Ok(())
    }

    fn check_extent(&self, shape: Shape) -> Result<()> {
        for k in [self.local_kernel, self.strip_kernel] {
            let pad = k / 2;
            if shape.h + 2 * pad < k || shape.w + 2 * pad < k {
                return Err(Error::Config(format!(
                    "okm kernel {k} larger than padded extent of {}x{}",
                    shape.h, shape.w
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the global branch.
#[derive(Debug, Clone, PartialEq)]
pub struct OkmGlobal<T> {
    /// `[C, C, 1, 1]` gate projection on the pooled descriptor.
    pub gate_w: T,
    pub gate_b: T,
    /// `[C, 1, 1, 1]` depthwise scale applied to the gated features.
    pub scale_w: T,
    pub scale_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OkmParams<T> {
    pub local_w: T,
    pub local_b: T,
    pub strip_h_w: T,
    pub strip_h_b: T,
    pub strip_v_w: T,
    pub strip_v_b: T,
    pub global: Option<OkmGlobal<T>>,
}

impl<T> OkmParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> OkmParams<U> {
        OkmParams {
            local_w: f(&self.local_w),
            local_b: f(&self.local_b),
            strip_h_w: f(&self.strip_h_w),
            strip_h_b: f(&self.strip_h_b),
            strip_v_w: f(&self.strip_v_w),
            strip_v_b: f(&self.strip_v_b),
            global: self.global.as_ref().map(|g| OkmGlobal {
                gate_w: f(&g.gate_w),
                gate_b: f(&g.gate_b),
                scale_w: f(&g.scale_w),
                scale_b: f(&g.scale_b),
            }),
        }
    }

    /// Parameters in a fixed order, paired with stable names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![
            ("local_w", &self.local_w),
            ("local_b", &self.local_b),
            ("strip_h_w", &self.strip_h_w),
            ("strip_h_b", &self.strip_h_b),
            ("strip_v_w", &self.strip_v_w),
            ("strip_v_b", &self.strip_v_b),
        ];
        if let Some(g) = &self.global {
            out.extend([
                ("gate_w", &g.gate_w),
                ("gate_b", &g.gate_b),
                ("scale_w", &g.scale_w),
                ("scale_b", &g.scale_b),
            ]);
        }
        out
    }
}

fn bias(c: usize) -> Tensor {
    Tensor::zeros([1, c, 1, 1])
}

fn he(shape: impl Into<Shape>, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let bound = (6.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl OkmParams<Tensor> {
    /// Shapes for `channels` channels; every weight produced by `fill`.
    fn build(channels: usize, config: &OkmConfig, mut fill: impl FnMut(&str, Shape) -> Tensor) -> Self {
        let (kl, ks, c) = (config.local_kernel, config.strip_kernel, channels);
        OkmParams {
            local_w: fill("local_w", Shape::new(c, 1, kl, kl)),
            local_b: bias(c),
            strip_h_w: fill("strip_h_w", Shape::new(c, 1, 1, ks)),
            strip_h_b: bias(c),
            strip_v_w: fill("strip_v_w", Shape::new(c, 1, ks, 1)),
            strip_v_b: bias(c),
            global: config.global.then(|| OkmGlobal {
                gate_w: fill("gate_w", Shape::new(c, c, 1, 1)),
                gate_b: bias(c),
                scale_w: fill("scale_w", Shape::new(c, 1, 1, 1)),
                scale_b: bias(c),
            }),
        }
    }

    /// Zero branch outputs, random gate projection: the identity map when
    /// the residual is on.
    pub fn init(channels: usize, config: &OkmConfig, rng: &mut impl Rng) -> Self {
        Self::build(channels, config, |name, s| {
            if name == "gate_w" {
                he(s, rng)
            } else {
                Tensor::zeros(s)
            }
        })
    }

    /// Every weight and bias random; used for gradient checks.
    pub fn random(channels: usize, config: &OkmConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::build(channels, config, |_, s| Tensor::uniform(s, -0.5, 0.5, rng));
        for b in [&mut p.local_b, &mut p.strip_h_b, &mut p.strip_v_b] {
            *b = Tensor::uniform(b.shape(), -0.2, 0.2, rng);
        }
        if let Some(g) = &mut p.global {
            g.gate_b = Tensor::uniform(g.gate_b.shape(), -0.2, 0.2, rng);
            g.scale_b = Tensor::uniform(g.scale_b.shape(), -0.2, 0.2, rng);
        }
        p
    }

    pub fn register(&self, tape: &mut Tape) -> OkmParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }
}

fn depthwise(tape: &mut Tape, x: Var, w: Var, b: Var, kh: usize, kw: usize) -> Result<Var> {
    let c = tape.shape(x).c;
    tape.conv2d(x, w, Some(b), Conv2dSpec::same(kh, kw).with_groups(c))
}

/// Shape-preserving omni-kernel operator.
pub fn okm(tape: &mut Tape, input: Var, config: &OkmConfig, params: &OkmParams<Var>) -> Result<Var> {
    config.validate()?;
    let shape = tape.shape(input);
    config.check_extent(shape)?;
    if config.global != params.global.is_some() {
        return Err(Error::Config(
            "okm global flag does not match supplied parameters".into(),
        ));
    }
    let (kl, ks) = (config.local_kernel, config.strip_kernel);
    let local = depthwise(tape, input, params.local_w, params.local_b, kl, kl)?;
    let strip_h = depthwise(tape, input, params.strip_h_w, params.strip_h_b, 1, ks)?;
    let strip_v = depthwise(tape, input, params.strip_v_w, params.strip_v_b, ks, 1)?;
    let mut acc = tape.add(local, strip_h)?;
    acc = tape.add(acc, strip_v)?;
    if let Some(g) = &params.global {
        let pooled = tape.global_avg_pool(input)?;
        let logits = tape.conv2d(pooled, g.gate_w, Some(g.gate_b), Conv2dSpec::new(1, 0))?;
        let gate = tape.sigmoid(logits);
        let gated = tape.channel_scale(input, gate)?;
        let global = depthwise(tape, gated, g.scale_w, g.scale_b, 1, 1)?;
        acc = tape.add(acc, global)?;
    }
    if config.residual {
        acc = tape.add(acc, input)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CspokConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Fraction of input channels routed to the processed branch.
    pub split_ratio: f64,
    /// Odd kernel of the convolution ahead of the omni-kernel operator.
    pub conv_kernel: usize,
    /// Apply SiLU after the inner and merge convolutions.
    pub activation: bool,
    /// `None` gives a plain cross-stage block with no omni-kernel operator.
    pub okm: Option<OkmConfig>,
}

impl CspokConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        CspokConfig {
            in_channels,
            out_channels,
            split_ratio: 0.5,
            conv_kernel: 3,
            activation: true,
            okm: Some(OkmConfig::default()),
        }
    }

    /// `(bypass, processed)` channel counts.
    pub fn split(&self) -> Result<(usize, usize)> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must be in (0, 1), got {}",
                self.split_ratio
            )));
        }
        let processed = (self.in_channels as f64 * self.split_ratio).round() as usize;
        let bypass = self.in_channels.saturating_sub(processed);
        if processed == 0 || bypass == 0 {
            return Err(Error::Config(format!(
                "split_ratio {} leaves an empty branch for {} channels",
                self.split_ratio, self.in_channels
            )));
        }
        Ok((bypass, processed))
    }

    pub fn validate(&self) -> Result<()> {
        self.split()?;
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if let Some(o) = &self.okm {
            o.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspokParams<T> {
    pub conv_w: T,
    pub conv_b: T,
    pub okm: Option<OkmParams<T>>,
    pub merge_w: T,
    pub merge_b: T,
}

impl<T> CspokParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> CspokParams<U> {
        CspokParams {
            conv_w: f(&self.conv_w),
            conv_b: f(&self.conv_b),
            okm: self.okm.as_ref().map(|o| o.map(&mut f)),
            merge_w: f(&self.merge_w),
            merge_b: f(&self.merge_b),
        }
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("conv_w".to_string(), &self.conv_w), ("conv_b".to_string(), &self.conv_b)];
        if let Some(o) = &self.okm {
            out.extend(o.named().into_iter().map(|(n, t)| (format!("okm.{n}"), t)));
        }
        out.push(("merge_w".into(), &self.merge_w));
        out.push(("merge_b".into(), &self.merge_b));
        out
    }
}

impl CspokParams<Tensor> {
    /// He-uniform convolutions with the omni-kernel branches zeroed.
    pub fn init(config: &CspokConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (_, c2) = config.split()?;
        let k = config.conv_kernel;
        Ok(CspokParams {
            conv_w: he([c2, c2, k, k], rng),
            conv_b: bias(c2),
            okm: config.okm.as_ref().map(|o| OkmParams::init(c2, o, rng)),
            merge_w: he([config.out_channels, config.in_channels, 1, 1], rng),
            merge_b: bias(config.out_channels),
        })
    }

    /// Identity convolutions and zeroed omni-kernel branches. Requires
    /// `in_channels == out_channels`.
    pub fn identity(config: &CspokConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if config.in_channels != config.out_channels {
            return Err(Error::Config("identity block needs in_channels == out_channels".into()));
        }
        let (_, c2) = config.split()?;
        let k = config.conv_kernel;
        let centre = k / 2;
        let conv_shape = Shape::new(c2, c2, k, k);
        let conv_w = Tensor::from_fn(conv_shape, |i| {
            let kx = i % k;
            let ky = (i / k) % k;
            let ci = (i / (k * k)) % c2;
            let o = i / (k * k * c2);
            if o == ci && ky == centre && kx == centre {
                1.0
            } else {
                0.0
            }
        });
        let c = config.in_channels;
        let merge_w = Tensor::from_fn([c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        Ok(CspokParams {
            conv_w,
            conv_b: bias(c2),
            okm: config.okm.as_ref().map(|o| OkmParams::init(c2, o, rng)),
            merge_w,
            merge_b: bias(c),
        })
    }

    /// Every parameter random, including the omni-kernel branches.
    pub fn random(config: &CspokConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (_, c2) = config.split()?;
        let k = config.conv_kernel;
        Ok(CspokParams {
            conv_w: Tensor::uniform([c2, c2, k, k], -0.4, 0.4, rng),
            conv_b: Tensor::uniform([1, c2, 1, 1], -0.2, 0.2, rng),
            okm: config.okm.as_ref().map(|o| OkmParams::random(c2, o, rng)),
            merge_w: Tensor::uniform([config.out_channels, config.in_channels, 1, 1], -0.4, 0.4, rng),
            merge_b: Tensor::uniform([1, config.out_channels, 1, 1], -0.2, 0.2, rng),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> CspokParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }
}

/// Handles to the interesting intermediates of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CspokOutput {
    pub output: Var,
    /// Concatenation `[bypass, processed]` ahead of the merge convolution.
    pub merged: Var,
    pub bypass: Var,
}

pub fn cspok_block(
    tape: &mut Tape,
    input: Var,
    config: &CspokConfig,
    params: &CspokParams<Var>,
) -> Result<CspokOutput> {
    config.validate()?;
    let c = tape.shape(input).c;
    if c != config.in_channels {
        return Err(Error::Dimension(format!(
            "cspok_block: input has {c} channels, config expects {}",
            config.in_channels
        )));
    }
    let (c1, c2) = config.split()?;
    let parts = tape.split_channels(input, &[c1, c2])?;
    let (bypass, processed) = (parts[0], parts[1]);
    let k = config.conv_kernel;
    let mut p = tape.conv2d(processed, params.conv_w, Some(params.conv_b), Conv2dSpec::same(k, k))?;
    if config.activation {
        p = tape.silu(p);
    }
    match (&config.okm, &params.okm) {
        (Some(oc), Some(op)) => p = okm(tape, p, oc, op)?,
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "cspok okm config does not match supplied parameters".into(),
            ))
        }
    }
    let merged = tape.concat_channels(&[bypass, p])?;
    let mut output = tape.conv2d(merged, params.merge_w, Some(params.merge_b), Conv2dSpec::new(1, 0))?;
    if config.activation {
        output = tape.silu(output);
    }
    Ok(CspokOutput { output, merged, bypass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_branches_make_okm_identity() {
        let mut r = rng(1);
        let cfg = OkmConfig::default();
        let x0 = Tensor::uniform([2, 4, 8, 8], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let p = OkmParams::init(4, &cfg, &mut r).register(&mut t);
        let y = okm(&mut t, x, &cfg, &p).unwrap();
        assert!(t.value(y).bit_eq(&x0));
    }

    #[test]
    fn okm_preserves_shape_for_small_maps() {
        let mut r = rng(2);
        for (h, w) in [(1, 1), (4, 4), (3, 9)] {
            for global in [true, false] {
                let cfg = OkmConfig { global, ..OkmConfig::default() };
                let mut t = Tape::new();
                let x = t.leaf(Tensor::uniform([1, 3, h, w], -1.0, 1.0, &mut r));
                let p = OkmParams::random(3, &cfg, &mut r).register(&mut t);
                let y = okm(&mut t, x, &cfg, &p).unwrap();
                assert_eq!(t.shape(y), Shape::new(1, 3, h, w));
            }
        }
    }

    #[test]
    fn okm_rejects_even_kernels_and_mismatched_global() {
        let mut r = rng(3);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 2, 4, 4]));
        let even = OkmConfig { strip_kernel: 6, ..OkmConfig::default() };
        let p = OkmParams::init(2, &OkmConfig::default(), &mut r).register(&mut t);
        assert!(matches!(okm(&mut t, x, &even, &p), Err(Error::Config(_))));
        let no_global = OkmConfig { global: false, ..OkmConfig::default() };
        assert!(matches!(okm(&mut t, x, &no_global, &p), Err(Error::Config(_))));
    }

    #[test]
    fn identity_block_is_identity() {
        let mut r = rng(4);
        let cfg = CspokConfig { activation: false, ..CspokConfig::new(4, 4) };
        let x0 = Tensor::uniform([1, 4, 6, 6], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let p = CspokParams::identity(&cfg, &mut r).unwrap().register(&mut t);
        let out = cspok_block(&mut t, x, &cfg, &p).unwrap();
        assert!(t.value(out.output).bit_eq(&x0));
    }

    #[test]
    fn bypass_carries_first_half_untouched() {
        let mut r = rng(5);
        let cfg = CspokConfig::new(4, 6);
        let x0 = Tensor::new([1, 4, 1, 1], vec![0.3, -1.7, 2.5, 9.0]).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(x0);
        let p = CspokParams::random(&cfg, &mut r).unwrap().register(&mut t);
        let out = cspok_block(&mut t, x, &cfg, &p).unwrap();
        assert_eq!(t.value(out.bypass).data(), &[0.3, -1.7]);
        let merged = t.value(out.merged);
        assert_eq!(&merged.data()[..2], &[0.3, -1.7]);
        assert_eq!(t.shape(out.output), Shape::new(1, 6, 1, 1));
    }

    #[test]
    fn split_ratio_validation() {
        for ratio in [0.0, 1.0, 0.1] {
            let cfg = CspokConfig { split_ratio: ratio, ..CspokConfig::new(4, 4) };
            assert!(cfg.validate().is_err(), "ratio {ratio}");
        }
        let cfg = CspokConfig { split_ratio: 0.25, ..CspokConfig::new(8, 8) };
        assert_eq!(cfg.split().unwrap(), (6, 2));
    }

    #[test]
    fn plain_block_without_okm_matches_zero_initialised_okm() {
        let mut r = rng(6);
        let with = CspokConfig::new(6, 5);
        let without = CspokConfig { okm: None, ..with };
        let pw = CspokParams::init(&with, &mut r).unwrap();
        let pn = CspokParams { okm: None, ..pw.clone() };
        let x0 = Tensor::uniform([1, 6, 5, 5], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.leaf(x0);
        let (pw, pn) = (pw.register(&mut t), pn.register(&mut t));
        let a = cspok_block(&mut t, x, &with, &pw).unwrap();
        let b = cspok_block(&mut t, x, &without, &pn).unwrap();
        assert!(t.value(a.output).bit_eq(t.value(b.output)));
    }
}
