use super::kernels::{self, Conv2dSpec};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Relu,
    Scale(f64),
}

/// Local gradient of a custom op: given the output gradient and the parent
/// values, return one gradient per parent (same order and shapes).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ChannelScale {
        input: Var,
        gate: Var,
    },
    GlobalAvgPool(Var),
    SpaceToDepth {
        input: Var,
        scale: usize,
    },
    DepthToSpace {
        input: Var,
        scale: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sum(Var),
    Custom {
        parents: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation. Node order is recording order, so
/// reverse iteration is a valid reverse topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, spec }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow_channels(self.value(input), start, len)?;
        Ok(self.push(out, Op::Narrow { input, start }))
    }

    /// Splits along channels into consecutive pieces of the given sizes.
    pub fn split_channels(&mut self, input: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.shape(input).c;
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::Dimension(format!(
                "split_channels: sizes {sizes:?} must be positive and sum to {c}"
            )));
        }
        if sizes.len() == 1 {
            return Ok(vec![input]);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow_channels(input, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn unary(&mut self, input: Var, kind: Unary) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => sigmoid(v),
                Unary::Silu => v * sigmoid(v),
                Unary::Relu => v.max(0.0),
                Unary::Scale(s) => v * s,
            })
            .collect();
        let out = Tensor::new(x.shape(), data).expect("unary preserves shape");
        self.push(out, Op::Unary { input, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every `(n, c)` plane of `input` by `gate[n, c, 0, 0]`.
    pub fn channel_scale(&mut self, input: Var, gate: Var) -> Result<Var> {
        let out = kernels::channel_scale(self.value(input), self.value(gate))?;
        Ok(self.push(out, Op::ChannelScale { input, gate }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn space_to_depth(&mut self, input: Var, scale: usize) -> Result<Var> {
        let out = kernels::space_to_depth(self.value(input), scale)?;
        Ok(self.push(out, Op::SpaceToDepth { input, scale }))
    }

    pub fn depth_to_space(&mut self, input: Var, scale: usize) -> Result<Var> {
        let out = kernels::depth_to_space(self.value(input), scale)?;
        Ok(self.push(out, Op::DepthToSpace { input, scale }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(input), factor)?;
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// Records an op whose forward value the caller already computed.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `root`. The tape is not modified, so
    /// calling this repeatedly yields identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {root_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, pg) in self.local_grads(node, &g) {
                accumulate(&mut grads[parent.0], pg);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, spec } => {
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *spec);
                let mut out = vec![(*input, gx), (*weight, gw)];
                if let Some(b) = bias {
                    out.push((*b, Tensor::new(self.shape(*b), gb).expect("bias grad shape")));
                }
                out
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.shape(p).c;
                        let piece = kernels::narrow_channels(g, start, len).expect("concat grad slice");
                        start += len;
                        debug_assert!(start <= s.c);
                        (p, piece)
                    })
                    .collect()
            }
            Op::Narrow { input, start } => {
                let is = self.shape(*input);
                let gs = g.shape();
                let mut gx = vec![0.0; is.numel()];
                for n in 0..is.n {
                    let dst = is.offset(n, *start, 0, 0);
                    let src = gs.offset(n, 0, 0, 0);
                    let len = gs.c * gs.plane();
                    gx[dst..dst + len].copy_from_slice(&g.data()[src..src + len]);
                }
                vec![(*input, Tensor::new(is, gx).expect("narrow grad shape"))]
            }
            Op::Unary { input, kind } => {
                let x = self.value(*input);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| match kind {
                        Unary::Sigmoid => gv * yv * (1.0 - yv),
                        Unary::Silu => {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        }
                        Unary::Relu => {
                            if xv > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        Unary::Scale(s) => gv * s,
                    })
                    .collect();
                vec![(*input, Tensor::new(x.shape(), data).expect("unary grad shape"))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                vec![
                    (*a, Tensor::new(av.shape(), ga).expect("mul grad")),
                    (*b, Tensor::new(bv.shape(), gb).expect("mul grad")),
                ]
            }
            Op::ChannelScale { input, gate } => {
                let x = self.value(*input);
                let gt = self.value(*gate);
                let plane = x.shape().plane();
                let gx = kernels::channel_scale(g, gt).expect("channel scale grad");
                let ggate = g
                    .data()
                    .chunks_exact(plane)
                    .zip(x.data().chunks_exact(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                vec![
                    (*input, gx),
                    (*gate, Tensor::new(gt.shape(), ggate).expect("gate grad")),
                ]
            }
            Op::GlobalAvgPool(input) => {
                let is = self.shape(*input);
                let inv = 1.0 / is.plane() as f64;
                let mut gx = Vec::with_capacity(is.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, is.plane()));
                }
                vec![(*input, Tensor::new(is, gx).expect("pool grad"))]
            }
            Op::SpaceToDepth { input, scale } => {
                vec![(*input, kernels::depth_to_space(g, *scale).expect("s2d grad"))]
            }
            Op::DepthToSpace { input, scale } => {
                vec![(*input, kernels::space_to_depth(g, *scale).expect("d2s grad"))]
            }
            Op::Upsample { input, factor } => {
                vec![(*input, kernels::upsample_nearest_backward(g, self.shape(*input), *factor))]
            }
            Op::Sum(input) => {
                let gv = g.data()[0];
                vec![(*input, Tensor::full(self.shape(*input), gv))]
            }
            Op::Custom { parents, backward } => {
                let values: Vec<&Tensor> = parents.iter().map(|&p| self.value(p)).collect();
                let pgs = backward(g, &values);
                assert_eq!(pgs.len(), parents.len(), "custom backward returned wrong arity");
                parents.iter().copied().zip(pgs).collect()
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`]: one gradient per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zero when `v` does not
    /// contribute to the root.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
