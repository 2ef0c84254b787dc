//! Randomised finite-difference suites for every differentiable block.
//!
//! Each instance draws fresh shapes, parameters and inputs, projects the
//! block output onto a random direction so the checked function is a
//! scalar, and compares the tape gradient to central differences with
//! respect to either the input or one parameter tensor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::Bbox;
use crate::cspok::{cspok_block, okm, CspokConfig, CspokParams, OkmConfig, OkmParams};
use crate::error::{Error, Result};
use crate::losses::{ciou_loss_tape, varifocal_loss, VflParams};
use crate::pipeline::{build_model, build_targets, detection_loss_with_targets, single_target_dataset, ModelConfig};
use crate::spd::{spd_conv, SpdConfig, SpdParams};
use crate::tensor::{grad_check_coords, Conv2dSpec, GradReport, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Conv,
    Spd,
    Okm,
    Cspok,
    Vfl,
    Ciou,
    E2e,
}

impl Block {
    pub const ALL: [Block; 7] = [Block::Conv, Block::Spd, Block::Okm, Block::Cspok, Block::Vfl, Block::Ciou, Block::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Block::Conv => "conv",
            Block::Spd => "spd",
            Block::Okm => "okm",
            Block::Cspok => "cspok",
            Block::Vfl => "vfl",
            Block::Ciou => "ciou",
            Block::E2e => "e2e",
        }
    }

    /// Parses a block name; `all` yields every block.
    pub fn parse_list(s: &str) -> Result<Vec<Block>> {
        if s == "all" {
            return Ok(Block::ALL.to_vec());
        }
        s.split(',')
            .map(|part| {
                Block::ALL
                    .iter()
                    .copied()
                    .find(|b| b.name() == part.trim())
                    .ok_or_else(|| Error::Usage(format!("unknown block {part:?}; expected one of conv, spd, okm, cspok, vfl, ciou, e2e, all")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub block: Block,
    pub instances: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    /// Instances whose checked gradient was identically zero.
    pub trivial: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checked coordinates: all of them up to `limit`, else a random sample.
fn coords(len: usize, limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len > limit {
        all.shuffle(rng);
        all.truncate(limit);
        all.sort_unstable();
    }
    all
}

fn project(tape: &mut Tape, out: Var, direction: &Tensor) -> Result<Var> {
    let d = tape.leaf(direction.clone());
    let m = tape.mul(out, d)?;
    Ok(tape.sum(m))
}

/// A block under test: named tensors plus a forward taking their tape handles.
struct Instance {
    tensors: Vec<Tensor>,
    forward: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

impl Instance {
    /// Checks the gradient with respect to `tensors[target]`.
    fn check(&self, target: usize, epsilon: f64, tolerance: f64, rng: &mut impl Rng) -> Result<GradReport> {
        let mut probe = Tape::new();
        let vars: Vec<Var> = self.tensors.iter().map(|t| probe.leaf(t.clone())).collect();
        let out = (self.forward)(&mut probe, &vars)?;
        let direction = Tensor::uniform(probe.shape(out), -1.0, 1.0, rng);
        let picked = coords(self.tensors[target].len(), 24, rng);
        let f = |tape: &mut Tape, x: Var| {
            let vars: Vec<Var> = self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == target { x } else { tape.leaf(t.clone()) })
                .collect();
            let out = (self.forward)(tape, &vars)?;
            project(tape, out, &direction)
        };
        grad_check_coords(f, &self.tensors[target], epsilon, tolerance, &picked)
    }
}

fn conv_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let groups = *[1usize, 2].choose(rng).unwrap();
    let cin = groups * rng.gen_range(1..=2);
    let cout = groups * rng.gen_range(1..=2);
    let (kh, kw) = *[(1, 1), (3, 3), (1, 3), (3, 1), (5, 5)].choose(rng).unwrap();
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(kh.max(3)..=7);
    let w = rng.gen_range(kw.max(3)..=7);
    let spec = Conv2dSpec {
        stride,
        pad_h: kh / 2,
        pad_w: kw / 2,
        groups,
    };
    let tensors = vec![
        Tensor::uniform([rng.gen_range(1..=2), cin, h, w], -1.0, 1.0, rng),
        Tensor::uniform([cout, cin / groups, kh, kw], -0.5, 0.5, rng),
        Tensor::uniform([1, cout, 1, 1], -0.5, 0.5, rng),
    ];
    let target = rng.gen_range(0..3);
    (
        Instance {
            tensors,
            forward: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
        },
        target,
    )
}

fn spd_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let scale = *[2usize, 2, 4].choose(rng).unwrap();
    let cin = rng.gen_range(1..=2);
    let cfg = SpdConfig {
        scale,
        kernel: *[1usize, 3].choose(rng).unwrap(),
        ..SpdConfig::new(cin, rng.gen_range(1..=3))
    };
    let h = scale * rng.gen_range(1..=3);
    let w = scale * rng.gen_range(1..=3);
    let p = SpdParams::init(&cfg, rng);
    let tensors = vec![
        Tensor::uniform([1, cin, h, w], -1.0, 1.0, rng),
        p.weight,
        Tensor::uniform(p.bias.shape(), -0.5, 0.5, rng),
    ];
    let target = rng.gen_range(0..2);
    (
        Instance {
            tensors,
            forward: Box::new(move |t, v| {
                spd_conv(
                    t,
                    v[0],
                    &cfg,
                    &SpdParams {
                        weight: v[1],
                        bias: v[2],
                    },
                )
            }),
        },
        target,
    )
}

fn okm_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let c = rng.gen_range(1..=3);
    let cfg = OkmConfig {
        local_kernel: *[1usize, 3].choose(rng).unwrap(),
        strip_kernel: *[3usize, 5, 7].choose(rng).unwrap(),
        global: rng.gen_bool(0.8),
        residual: rng.gen_bool(0.5),
    };
    let params = OkmParams::random(c, &cfg, rng);
    let named: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = vec![Tensor::uniform([1, c, rng.gen_range(2..=6), rng.gen_range(2..=6)], -1.0, 1.0, rng)];
    tensors.extend(named);
    let target = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..tensors.len()) };
    (
        Instance {
            tensors,
            forward: Box::new(move |t, v| {
                let mut it = v[1..].iter().copied();
                let p = params.map(|_| it.next().expect("okm parameter count"));
                okm(t, v[0], &cfg, &p)
            }),
        },
        target,
    )
}

fn cspok_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let cin = rng.gen_range(2..=4);
    let cfg = CspokConfig {
        okm: if rng.gen_bool(0.8) {
            Some(OkmConfig {
                strip_kernel: *[3usize, 5].choose(rng).unwrap(),
                ..OkmConfig::default()
            })
        } else {
            None
        },
        ..CspokConfig::new(cin, rng.gen_range(1..=3))
    };
    let params = CspokParams::random(&cfg, rng).expect("valid random cspok config");
    let named: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = vec![Tensor::uniform([1, cin, rng.gen_range(3..=5), rng.gen_range(3..=5)], -1.0, 1.0, rng)];
    tensors.extend(named);
    let target = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..tensors.len()) };
    (
        Instance {
            tensors,
            forward: Box::new(move |t, v| {
                let mut it = v[1..].iter().copied();
                let p = params.map(|_| it.next().expect("cspok parameter count"));
                Ok(cspok_block(t, v[0], &cfg, &p)?.output)
            }),
        },
        target,
    )
}

fn vfl_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let n = rng.gen_range(4..=24);
    let q: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.05..1.0) }).collect();
    // logits kept away from the clamp region
    let logits = Tensor::uniform([1, 1, 1, n], -3.0, 3.0, rng);
    let params = VflParams::default();
    (
        Instance {
            tensors: vec![logits],
            forward: Box::new(move |t, v| {
                let p = t.sigmoid(v[0]);
                let l = varifocal_loss(t, p, &q, &params)?;
                Ok(t.scale(l, 1.0))
            }),
        },
        0,
    )
}

/// Boxes whose corresponding edges differ by at least `gap`, so no min/max
/// in the loss sits at a tie.
fn separated_box(rng: &mut impl Rng, other: Option<&Bbox>, gap: f64) -> Bbox {
    loop {
        let x0 = rng.gen_range(0.0..20.0);
        let y0 = rng.gen_range(0.0..20.0);
        let b = Bbox::new(x0, y0, x0 + rng.gen_range(2.0..15.0), y0 + rng.gen_range(2.0..15.0));
        let ok = other.is_none_or(|o| {
            let edges = [b.x_min, b.y_min, b.x_max, b.y_max, b.x_min, b.y_min];
            let oth = [o.x_min, o.y_min, o.x_max, o.y_max, o.x_max, o.y_max];
            edges.iter().zip(&oth).all(|(a, c)| (a - c).abs() > gap)
                && (b.x_max - o.x_min).abs() > gap
                && (b.y_max - o.y_min).abs() > gap
        });
        if ok {
            return b;
        }
    }
}

fn ciou_instance(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let k = rng.gen_range(1..=4);
    let gts: Vec<Bbox> = (0..k).map(|_| separated_box(rng, None, 0.0)).collect();
    let preds: Vec<f64> = gts.iter().flat_map(|g| separated_box(rng, Some(g), 1e-2).to_array()).collect();
    (
        Instance {
            tensors: vec![Tensor::new([1, 1, 1, 4 * k], preds).expect("box tensor")],
            forward: Box::new(move |t, v| ciou_loss_tape(t, v[0], &gts)),
        },
        0,
    )
}

/// Whole-detector loss on one 64x64 image with respect to a random slice of
/// one random parameter tensor; the assignment is frozen at the start point.
fn e2e_check(rng: &mut ChaCha8Rng, epsilon: f64, tolerance: f64) -> Result<GradReport> {
    let cfg = ModelConfig {
        input_size: 64,
        spd_enabled: rng.gen_bool(0.5),
        cspok_enabled: rng.gen_bool(0.5),
        cls_loss: *[crate::pipeline::ClsLoss::Vfl, crate::pipeline::ClsLoss::Bce, crate::pipeline::ClsLoss::Focal]
            .choose(rng)
            .unwrap(),
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg)?;
    // random head outputs so gradients reach the whole network
    let mut flat = model.params.flatten();
    for (t, (name, _)) in flat.iter_mut().zip(model.params.named()) {
        if name.contains("_out.") {
            *t = Tensor::uniform(t.shape(), -0.3, 0.3, rng);
        }
    }
    model.params = model.params.with_flat(flat);
    let side = rng.gen_range(10.0..40.0);
    let x0 = rng.gen_range(0.0..(64.0 - side));
    let y0 = rng.gen_range(0.0..(64.0 - side));
    let data = single_target_dataset(64, Bbox::new(x0, y0, x0 + side, y0 + side * 0.8), cfg.num_classes, rng.gen())?;
    let image = data.batch_tensor(&[0], 64)?;
    let gts = vec![data.targets(0)];
    let targets = build_targets(&model, &model.predict(&image)?, &gts)?;
    let names = model.params.named();
    let which = rng.gen_range(0..names.len());
    let base = model.params.flatten();
    let picked = coords(base[which].len(), 6, rng);
    let f = |tape: &mut Tape, x: Var| {
        let img = tape.leaf(image.clone());
        let mut i = 0;
        let params = model.params.map(|t| {
            let v = if i == which { x } else { tape.leaf(t.clone()) };
            i += 1;
            v
        });
        Ok(detection_loss_with_targets(&model, tape, img, &params, &targets)?.total)
    };
    grad_check_coords(f, &base[which], epsilon, tolerance, &picked)
}

/// Runs `instances` random checks of `block`.
pub fn run_suite(block: Block, instances: usize, seed: u64, epsilon: f64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (block as u64).wrapping_mul(0x9e37_79b9));
    let mut passed = 0;
    let (mut worst, mut worst_instance, mut trivial) = (0.0_f64, 0, 0);
    for i in 0..instances {
        let report = match block {
            Block::E2e => e2e_check(&mut rng, epsilon, tolerance)?,
            _ => {
                let (inst, target) = match block {
                    Block::Conv => conv_instance(&mut rng),
                    Block::Spd => spd_instance(&mut rng),
                    Block::Okm => okm_instance(&mut rng),
                    Block::Cspok => cspok_instance(&mut rng),
                    Block::Vfl => vfl_instance(&mut rng),
                    Block::Ciou => ciou_instance(&mut rng),
                    Block::E2e => unreachable!(),
                };
                inst.check(target, epsilon, tolerance, &mut rng)?
            }
        };
        if report.pass {
            passed += 1;
        }
        if report.max_abs_grad == 0.0 {
            trivial += 1;
        }
        if report.max_rel_err > worst || i == 0 {
            worst = report.max_rel_err;
            worst_instance = i;
        }
    }
    Ok(SuiteReport {
        block,
        instances,
        passed,
        max_rel_err: worst,
        worst_instance,
        trivial,
        tolerance,
        pass: passed == instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_names_parse() {
        assert_eq!(Block::parse_list("all").unwrap().len(), 7);
        assert_eq!(Block::parse_list("spd,vfl").unwrap(), vec![Block::Spd, Block::Vfl]);
        assert!(Block::parse_list("bn").is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for b in [Block::Conv, Block::Spd, Block::Vfl, Block::Ciou] {
            let r = run_suite(b, 5, 1, DEFAULT_EPSILON, DEFAULT_TOLERANCE).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
