//! Space-to-depth downsampling followed by a non-strided convolution.
//!
//! For scale `s`, output channel block `i * s + j` holds the sub-map
//! `X[i::s, j::s]`; within a block the source channel order is kept. With
//! `s = 2` the block order is `f00, f01, f10, f11`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Conv2dSpec, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpdConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd kernel size of the stride-1 convolution; 1 by default.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    1
}

impl SpdConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        SpdConfig {
            scale: 2,
            in_channels,
            out_channels,
            kernel: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::Config(format!("spd scale must be >= 2, got {}", self.scale)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("spd channel counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("spd kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn folded_channels(&self) -> usize {
        self.scale * self.scale * self.in_channels
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.folded_channels(), self.kernel, self.kernel)
    }
}

/// Convolution parameters of an SPD block, generic over storage so the same
/// struct carries tensors, tape handles or parameter indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> SpdParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SpdParams<U> {
        SpdParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl SpdParams<Tensor> {
    /// He-uniform weights, zero bias.
    pub fn init(config: &SpdConfig, rng: &mut impl Rng) -> Self {
        let ws = config.weight_shape();
        let bound = (6.0 / (ws.c * ws.h * ws.w) as f64).sqrt();
        SpdParams {
            weight: Tensor::uniform(ws, -bound, bound, rng),
            bias: Tensor::zeros([1, config.out_channels, 1, 1]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> SpdParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }
}

/// Pure tensor form of [`space_to_depth`].
pub fn space_to_depth_tensor(input: &Tensor, scale: usize) -> Result<Tensor> {
    kernels::space_to_depth(input, scale)
}

/// Pure tensor form of [`depth_to_space`].
pub fn depth_to_space_tensor(input: &Tensor, scale: usize) -> Result<Tensor> {
    kernels::depth_to_space(input, scale)
}

/// `[N, C, H, W] -> [N, s*s*C, H/s, W/s]`; errors name the indivisible axis.
pub fn space_to_depth(tape: &mut Tape, input: Var, scale: usize) -> Result<Var> {
    tape.space_to_depth(input, scale)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(tape: &mut Tape, input: Var, scale: usize) -> Result<Var> {
    tape.depth_to_space(input, scale)
}

/// Space-to-depth then a stride-1 "same" convolution to `out_channels`.
pub fn spd_conv(tape: &mut Tape, input: Var, config: &SpdConfig, params: &SpdParams<Var>) -> Result<Var> {
    config.validate()?;
    let c = tape.shape(input).c;
    if c != config.in_channels {
        return Err(Error::Dimension(format!(
            "spd_conv: input has {c} channels, config expects {}",
            config.in_channels
        )));
    }
    let folded = tape.space_to_depth(input, config.scale)?;
    tape.conv2d(
        folded,
        params.weight,
        Some(params.bias),
        Conv2dSpec::same(config.kernel, config.kernel),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq(shape: impl Into<Shape>) -> Tensor {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn two_by_two_folds_in_block_order() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space_to_depth_tensor(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(depth_to_space_tensor(&y, 2).unwrap(), x);
    }

    #[test]
    fn four_by_four_sub_maps() {
        // Hand slicing of 0..15: f00 = X[0::2, 0::2], f01 = X[0::2, 1::2], ...
        let y = space_to_depth_tensor(&seq([1, 1, 4, 4]), 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2));
        let blocks: Vec<&[f64]> = y.data().chunks(4).collect();
        assert_eq!(blocks[0], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(blocks[1], &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(blocks[2], &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(blocks[3], &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn shape_law_and_block_major_channel_order() {
        let x = seq([2, 3, 8, 8]);
        let y = space_to_depth_tensor(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 12, 4, 4));
        // channel 4 = block 1 (f01), source channel 1
        assert_eq!(y.at(1, 4, 2, 3), x.at(1, 1, 4, 7));
        // channel 11 = block 3 (f11), source channel 2
        assert_eq!(y.at(0, 11, 1, 0), x.at(0, 2, 3, 1));
    }

    #[test]
    fn scale_one_is_identity() {
        let x = seq([1, 2, 3, 5]);
        assert_eq!(depth_to_space_tensor(&x, 1).unwrap(), x);
        assert_eq!(space_to_depth_tensor(&x, 1).unwrap(), x);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let x = seq([1, 6, 2, 2]);
        assert!(matches!(depth_to_space_tensor(&x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_conv_reproduces_space_to_depth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = SpdConfig::new(1, 4);
        let x0 = Tensor::uniform([2, 1, 6, 6], -1.0, 1.0, &mut rng);
        let params = SpdParams {
            weight: Tensor::from_fn(cfg.weight_shape(), |i| if i % 5 == 0 { 1.0 } else { 0.0 }),
            bias: Tensor::zeros([1, 4, 1, 1]),
        };
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let p = params.register(&mut t);
        let y = spd_conv(&mut t, x, &cfg, &p).unwrap();
        assert!(t.value(y).bit_eq(&space_to_depth_tensor(&x0, 2).unwrap()));
    }

    #[test]
    fn spd_conv_shape_law() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for kernel in [1, 3] {
            let cfg = SpdConfig { kernel, ..SpdConfig::new(3, 5) };
            let mut t = Tape::new();
            let x = t.leaf(Tensor::uniform([2, 3, 8, 8], -1.0, 1.0, &mut rng));
            let p = SpdParams::init(&cfg, &mut rng).register(&mut t);
            let y = spd_conv(&mut t, x, &cfg, &p).unwrap();
            assert_eq!(t.shape(y), Shape::new(2, 5, 4, 4));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SpdConfig { scale: 1, ..SpdConfig::new(1, 1) }.validate().is_err());
        assert!(SpdConfig { kernel: 2, ..SpdConfig::new(1, 1) }.validate().is_err());
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 2, 4, 4]));
        let cfg = SpdConfig::new(3, 1);
        let p = SpdParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).register(&mut t);
        assert!(matches!(spd_conv(&mut t, x, &cfg, &p), Err(Error::Dimension(_))));
    }
}
