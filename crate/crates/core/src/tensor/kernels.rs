//! Forward and backward kernels on plain tensors. The tape calls into these;
//! they never see a graph.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Stride, padding and grouping of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            pad_h: padding,
            pad_w: padding,
            groups: 1,
        }
    }

    /// Stride 1 with "same" padding for an odd `kh x kw` kernel.
    pub const fn same(kh: usize, kw: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            pad_h: kh / 2,
            pad_w: kw / 2,
            groups: 1,
        }
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

pub(crate) fn conv2d_output_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    spec: Conv2dSpec,
) -> Result<Shape> {
    if spec.stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    if spec.groups == 0 || !input.c.is_multiple_of(spec.groups) || !weight.n.is_multiple_of(spec.groups) {
        return Err(Error::Dimension(format!(
            "groups={} must divide input channels {} and output channels {}",
            spec.groups, input.c, weight.n
        )));
    }
    if input.c / spec.groups != weight.c {
        return Err(Error::Dimension(format!(
            "conv2d: input has {} channels ({} per group), weight {} expects {} per group",
            input.c,
            input.c / spec.groups,
            weight,
            weight.c
        )));
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(Error::Dimension(format!(
                "conv2d: bias has {} values, weight has {} output channels",
                b.numel(),
                weight.n
            )));
        }
    }
    let ph = input.h + 2 * spec.pad_h;
    let pw = input.w + 2 * spec.pad_w;
    if ph < weight.h || pw < weight.w {
        return Err(Error::Config(format!(
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            weight.h, weight.w, ph, pw
        )));
    }
    let oh = (ph - weight.h) / spec.stride + 1;
    let ow = (pw - weight.w) / spec.stride + 1;
    Ok(Shape::new(input.n, weight.n, oh, ow))
}

/// Valid output range `[lo, hi)` for one kernel tap: output positions whose
/// input coordinate `o * stride + tap - pad` lies inside `[0, extent)`.
#[inline]
fn tap_range(tap: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    // o * stride + tap >= pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // o * stride + tap - pad <= extent - 1
    let limit = extent + pad;
    let hi = if tap >= limit {
        0
    } else {
        ((limit - 1 - tap) / stride + 1).min(out_extent)
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    let os = conv2d_output_shape(is, ws, bias.map(Tensor::shape), spec)?;
    let mut out = vec![0.0; os.numel()];
    let cin_g = ws.c;
    let cout_g = ws.n / spec.groups;
    let x = input.data();
    let w = weight.data();
    for n in 0..is.n {
        for o in 0..ws.n {
            let g = o / cout_g;
            let plane = &mut out[os.offset(n, o, 0, 0)..][..os.plane()];
            let b = bias.map_or(0.0, |b| b.data()[o]);
            plane.iter_mut().for_each(|v| *v = b);
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                let src = &x[is.offset(n, c, 0, 0)..][..is.plane()];
                for ky in 0..ws.h {
                    let (y0, y1) = tap_range(ky, spec.pad_h, spec.stride, is.h, os.h);
                    for kx in 0..ws.w {
                        let wv = w[ws.offset(o, ci, ky, kx)];
                        let (x0, x1) = tap_range(kx, spec.pad_w, spec.stride, is.w, os.w);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * spec.stride + ky - spec.pad_h;
                            let row = &src[iy * is.w..][..is.w];
                            let orow = &mut plane[oy * os.w..][..os.w];
                            if spec.stride == 1 {
                                let ix0 = x0 + kx - spec.pad_w;
                                for (ov, iv) in orow[x0..x1].iter_mut().zip(&row[ix0..]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * row[ox * spec.stride + kx - spec.pad_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
) -> (Tensor, Tensor, Vec<f64>) {
    let is = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let cin_g = ws.c;
    let cout_g = ws.n / spec.groups;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; is.numel()];
    let mut gw = vec![0.0; ws.numel()];
    let mut gb = vec![0.0; ws.n];

    for n in 0..is.n {
        for o in 0..ws.n {
            let g = o / cout_g;
            let gplane = &go[os.offset(n, o, 0, 0)..][..os.plane()];
            gb[o] += gplane.iter().sum::<f64>();
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                let src = &x[is.offset(n, c, 0, 0)..][..is.plane()];
                let dst = &mut gx[is.offset(n, c, 0, 0)..][..is.plane()];
                for ky in 0..ws.h {
                    let (y0, y1) = tap_range(ky, spec.pad_h, spec.stride, is.h, os.h);
                    for kx in 0..ws.w {
                        let widx = ws.offset(o, ci, ky, kx);
                        let wv = w[widx];
                        let (x0, x1) = tap_range(kx, spec.pad_w, spec.stride, is.w, os.w);
                        if x0 == x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * spec.stride + ky - spec.pad_h;
                            let grow = &gplane[oy * os.w..][..os.w];
                            let row = &src[iy * is.w..][..is.w];
                            let drow = &mut dst[iy * is.w..][..is.w];
                            if spec.stride == 1 {
                                let ix0 = x0 + kx - spec.pad_w;
                                for ((gv, iv), dv) in
                                    grow[x0..x1].iter().zip(&row[ix0..]).zip(&mut drow[ix0..])
                                {
                                    acc += gv * iv;
                                    *dv += gv * wv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * spec.stride + kx - spec.pad_w;
                                    acc += grow[ox] * row[ix];
                                    drow[ix] += grow[ox] * wv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(is, gx).expect("input grad shape"),
        Tensor::new(ws, gw).expect("weight grad shape"),
        gb,
    )
}

pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels: empty list".into()))?
        .shape();
    let mut c = 0;
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Dimension(format!(
                "concat_channels: part {i} has shape {s}, expected N={} H={} W={}",
                first.n, first.h, first.w
            )));
        }
        c += s.c;
    }
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for p in parts {
            let s = p.shape();
            let chunk = s.c * s.plane();
            out.extend_from_slice(&p.data()[n * chunk..][..chunk]);
        }
    }
    Tensor::new(os, out)
}

/// Channels `[start, start + len)` of `input`.
pub(crate) fn narrow_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::Dimension(format!(
            "narrow_channels: range {start}..{} out of {} channels",
            start + len,
            s.c
        )));
    }
    let os = Shape::new(s.n, len, s.h, s.w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        out.extend_from_slice(&input.data()[s.offset(n, start, 0, 0)..][..len * s.plane()]);
    }
    Tensor::new(os, out)
}

pub(crate) fn space_to_depth(input: &Tensor, scale: usize) -> Result<Tensor> {
    let s = input.shape();
    if scale == 0 {
        return Err(Error::Config("space_to_depth: scale must be positive".into()));
    }
    if !s.h.is_multiple_of(scale) {
        return Err(Error::Dimension(format!(
            "space_to_depth: height {} not divisible by scale {scale}",
            s.h
        )));
    }
    if !s.w.is_multiple_of(scale) {
        return Err(Error::Dimension(format!(
            "space_to_depth: width {} not divisible by scale {scale}",
            s.w
        )));
    }
    let os = Shape::new(s.n, s.c * scale * scale, s.h / scale, s.w / scale);
    let mut out = vec![0.0; os.numel()];
    let x = input.data();
    for n in 0..s.n {
        for i in 0..scale {
            for j in 0..scale {
                let block = i * scale + j;
                for c in 0..s.c {
                    let oc = block * s.c + c;
                    for y in 0..os.h {
                        for xo in 0..os.w {
                            out[os.offset(n, oc, y, xo)] = x[s.offset(n, c, y * scale + i, xo * scale + j)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn depth_to_space(input: &Tensor, scale: usize) -> Result<Tensor> {
    let s = input.shape();
    if scale == 0 {
        return Err(Error::Config("depth_to_space: scale must be positive".into()));
    }
    let blocks = scale * scale;
    if !s.c.is_multiple_of(blocks) {
        return Err(Error::Dimension(format!(
            "depth_to_space: channels {} not divisible by scale^2 = {blocks}",
            s.c
        )));
    }
    let c_out = s.c / blocks;
    let os = Shape::new(s.n, c_out, s.h * scale, s.w * scale);
    let mut out = vec![0.0; os.numel()];
    let x = input.data();
    for n in 0..s.n {
        for i in 0..scale {
            for j in 0..scale {
                let block = i * scale + j;
                for c in 0..c_out {
                    let ic = block * c_out + c;
                    for y in 0..s.h {
                        for xi in 0..s.w {
                            out[os.offset(n, c, y * scale + i, xi * scale + j)] = x[s.offset(n, ic, y, xi)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::Dimension(format!("global_avg_pool: empty spatial extent {s}")));
    }
    let inv = 1.0 / s.plane() as f64;
    let out = input
        .data()
        .chunks_exact(s.plane())
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), out)
}

pub(crate) fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let s = input.shape();
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = vec![0.0; os.numel()];
    for nc in 0..s.n * s.c {
        let src = &input.data()[nc * s.plane()..][..s.plane()];
        let dst = &mut out[nc * os.plane()..][..os.plane()];
        for y in 0..os.h {
            for x in 0..os.w {
                dst[y * os.w + x] = src[(y / factor) * s.w + x / factor];
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn upsample_nearest_backward(grad_out: &Tensor, input: Shape, factor: usize) -> Tensor {
    let os = grad_out.shape();
    let mut gx = vec![0.0; input.numel()];
    for nc in 0..input.n * input.c {
        let src = &grad_out.data()[nc * os.plane()..][..os.plane()];
        let dst = &mut gx[nc * input.plane()..][..input.plane()];
        for y in 0..os.h {
            for x in 0..os.w {
                dst[(y / factor) * input.w + x / factor] += src[y * os.w + x];
            }
        }
    }
    Tensor::new(input, gx).expect("upsample grad shape")
}

/// `input * gate` where `gate` is `[N, C, 1, 1]` broadcast over space.
pub(crate) fn channel_scale(input: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    let g = gate.shape();
    if g != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::Dimension(format!(
            "channel_scale: gate {g} does not broadcast onto {s}"
        )));
    }
    let mut out = input.data().to_vec();
    for (plane, gv) in out.chunks_exact_mut(s.plane()).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= gv);
    }
    Tensor::new(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference convolution: explicit bounds checks, no tap ranges.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &[f64], spec: Conv2dSpec) -> Tensor {
        let is = x.shape();
        let ws = w.shape();
        let os = conv2d_output_shape(is, ws, None, spec).unwrap();
        let cout_g = ws.n / spec.groups;
        Tensor::from_fn(os, |idx| {
            let xo = idx % os.w;
            let yo = (idx / os.w) % os.h;
            let o = (idx / os.plane()) % os.c;
            let n = idx / (os.c * os.plane());
            let g = o / cout_g;
            let mut acc = b[o];
            for ci in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (yo * spec.stride + ky) as isize - spec.pad_h as isize;
                        let ix = (xo * spec.stride + kx) as isize - spec.pad_w as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                            acc += w.at(o, ci, ky, kx) * x.at(n, g * ws.c + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_reference_across_specs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (Shape::new(2, 4, 7, 6), Shape::new(6, 4, 3, 3), Conv2dSpec::new(1, 1)),
            (Shape::new(1, 4, 8, 8), Shape::new(4, 4, 3, 3), Conv2dSpec::new(2, 1)),
            (Shape::new(1, 4, 9, 8), Shape::new(4, 1, 1, 7), Conv2dSpec { stride: 1, pad_h: 0, pad_w: 3, groups: 4 }),
            (Shape::new(1, 6, 5, 5), Shape::new(4, 3, 7, 1), Conv2dSpec { stride: 2, pad_h: 3, pad_w: 0, groups: 2 }),
            (Shape::new(1, 2, 3, 3), Shape::new(2, 2, 3, 3), Conv2dSpec::new(3, 0)),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::uniform(xs, -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(ws, -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..ws.n).map(|i| i as f64 * 0.1).collect();
            let bt = Tensor::new([1, ws.n, 1, 1], b.clone()).unwrap();
            let fast = conv2d_forward(&x, &w, Some(&bt), spec).unwrap();
            let slow = conv_reference(&x, &w, &b, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, r) in fast.data().iter().zip(slow.data()) {
                assert!((a - r).abs() < 1e-12, "{a} vs {r} for {spec:?}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 0)), Err(Error::Dimension(_))));
        let w = Tensor::zeros([2, 3, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn space_to_depth_names_offending_axis() {
        let x = Tensor::zeros([1, 1, 4, 6]);
        let err = space_to_depth(&x, 4).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
        let x = Tensor::zeros([1, 1, 3, 4]);
        let err = space_to_depth(&x, 2).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn tap_range_covers_exactly_the_valid_outputs() {
        for extent in 1..8 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for k in 1..6 {
                        if extent + 2 * pad < k {
                            continue;
                        }
                        let out = (extent + 2 * pad - k) / stride + 1;
                        for tap in 0..k {
                            let (lo, hi) = tap_range(tap, pad, stride, extent, out);
                            for o in 0..out {
                                let i = (o * stride + tap) as isize - pad as isize;
                                let valid = i >= 0 && (i as usize) < extent;
                                assert_eq!(valid, (lo..hi).contains(&o));
                            }
                        }
                    }
                }
            }
        }
    }
}
