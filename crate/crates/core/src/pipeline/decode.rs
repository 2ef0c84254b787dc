//! Box decoding and per-class greedy NMS.
//!
//! A point at stride `s` with raw offsets `(l, t, r, b)` decodes to
//! `(cx - s*softplus(l), cy - s*softplus(t), cx + s*softplus(r), cy + s*softplus(b))`.

use std::cmp::Ordering;

use super::model::LevelOutput;
use crate::boxes::{iou_unchecked, Bbox};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn decode_one(raw: [f64; 4], cx: f64, cy: f64, stride: f64) -> Bbox {
    Bbox::new(
        cx - stride * softplus(raw[0]),
        cy - stride * softplus(raw[1]),
        cx + stride * softplus(raw[2]),
        cy + stride * softplus(raw[3]),
    )
}

/// Decoded boxes of image `n` of one level, row-major.
pub fn decode_level(reg: &Tensor, stride: usize, n: usize) -> Vec<Bbox> {
    let s = reg.shape();
    let mut out = Vec::with_capacity(s.plane());
    let st = stride as f64;
    for y in 0..s.h {
        for x in 0..s.w {
            let raw = [0, 1, 2, 3].map(|c| reg.at(n, c, y, x));
            out.push(decode_one(raw, (x as f64 + 0.5) * st, (y as f64 + 0.5) * st, st));
        }
    }
    out
}

/// Decoded boxes of image `n`, all levels concatenated.
pub fn decode_boxes(levels: &[LevelOutput<Tensor>], n: usize) -> Vec<Bbox> {
    levels.iter().flat_map(|l| decode_level(&l.reg, l.stride, n)).collect()
}

/// Differentiable decode of selected points of image `n`; `points` are
/// row-major indices into the level. Output is `[1, 1, 1, 4 * points.len()]`
/// of corner coordinates.
pub fn decode_points(tape: &mut Tape, reg: Var, stride: usize, n: usize, points: &[usize]) -> Result<Var> {
    let value = tape.value(reg);
    let s = value.shape();
    if s.c != 4 || n >= s.n {
        return Err(Error::Dimension(format!("decode_points: bad regression map {s} for image {n}")));
    }
    if let Some(p) = points.iter().find(|&&p| p >= s.plane()) {
        return Err(Error::Dimension(format!("decode_points: point {p} outside {}x{}", s.h, s.w)));
    }
    let st = stride as f64;
    let mut coords = Vec::with_capacity(4 * points.len());
    // derivative of each output coordinate with respect to its raw input
    let mut slopes = Vec::with_capacity(4 * points.len());
    for &p in points {
        let (y, x) = (p / s.w, p % s.w);
        let raw = [0, 1, 2, 3].map(|c| value.at(n, c, y, x));
        let b = decode_one(raw, (x as f64 + 0.5) * st, (y as f64 + 0.5) * st, st);
        coords.extend(b.to_array());
        for (c, r) in raw.iter().enumerate() {
            let sign = if c < 2 { -1.0 } else { 1.0 };
            slopes.push(sign * st * stable_sigmoid(*r));
        }
    }
    let k = coords.len();
    let points = points.to_vec();
    Ok(tape.custom(
        &[reg],
        Tensor::new([1, 1, 1, k], coords)?,
        Box::new(move |g, _| {
            let mut grad = Tensor::zeros(s);
            for (i, &p) in points.iter().enumerate() {
                let (y, x) = (p / s.w, p % s.w);
                for c in 0..4 {
                    grad.data_mut()[s.offset(n, c, y, x)] += g.data()[4 * i + c] * slopes[4 * i + c];
                }
            }
            vec![grad]
        }),
    ))
}

/// A scored box before suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Bbox,
    pub score: f64,
    /// Position in image order, used to break score ties.
    pub order: usize,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.order.cmp(&b.order))
}

/// Greedy NMS per (image, category). Returns indices of kept candidates sorted
/// by descending score, ties by ascending `order`.
pub fn nms(candidates: &[Candidate], iou_threshold: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| rank(&candidates[a], &candidates[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in idx {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &candidates[k];
            o.image_id == c.image_id && o.category_id == c.category_id && iou_unchecked(&o.bbox, &c.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Per-image cap after suppression.
    pub max_dets: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_threshold: 0.001,
            iou_threshold: 0.6,
            max_dets: 100,
        }
    }
}

/// Scores, boxes and NMS for a batch. `image_ids[n]` labels image `n`;
/// class `k` is reported as `category_ids[k]`.
pub fn decode_and_nms(
    levels: &[LevelOutput<Tensor>],
    image_ids: &[u64],
    category_ids: &[u64],
    params: &DecodeParams,
) -> Result<Vec<crate::eval::Detection>> {
    for (name, t) in [("score_threshold", params.score_threshold), ("iou_threshold", params.iou_threshold)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("{name} must be in [0, 1], got {t}")));
        }
    }
    let mut out = Vec::new();
    for (n, &image_id) in image_ids.iter().enumerate() {
        let mut cands = Vec::new();
        let mut order = 0;
        for l in levels {
            let s = l.cls.shape();
            if s.c != category_ids.len() || n >= s.n {
                return Err(Error::Dimension(format!(
                    "classification map {s} does not match {} classes / image {n}",
                    category_ids.len()
                )));
            }
            let boxes = decode_level(&l.reg, l.stride, n);
            for (p, b) in boxes.iter().enumerate() {
                let (y, x) = (p / s.w, p % s.w);
                for (k, &cat) in category_ids.iter().enumerate() {
                    let score = stable_sigmoid(l.cls.at(n, k, y, x));
                    if score >= params.score_threshold {
                        cands.push(Candidate {
                            image_id,
                            category_id: cat,
                            bbox: *b,
                            score,
                            order,
                        });
                    }
                    order += 1;
                }
            }
        }
        let kept = nms(&cands, params.iou_threshold);
        out.extend(kept.into_iter().take(params.max_dets).map(|i| {
            let c = cands[i];
            crate::eval::Detection {
                image_id: c.image_id,
                category_id: c.category_id,
                bbox: c.bbox,
                score: c.score,
            }
        }));
    }
    // stable: equal scores keep image order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
