//! Shared helpers for the integration tests: a brute-force COCO evaluator
//! and generators of small detection problems.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use tinydet::eval::{BoxAnnotation, CocoCategory, Detection};
use tinydet::Bbox;

pub fn categories(n: u64) -> Vec<CocoCategory> {
    (1..=n)
        .map(|id| CocoCategory { id, name: format!("class{id}"), supercategory: None })
        .collect()
}

fn overlap(a: &Bbox, b: &Bbox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Same construction as numpy's `linspace` used by the reference COCO tools.
fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    let step = (stop - start) / (num - 1) as f64;
    let mut v: Vec<f64> = (0..num).map(|i| start + i as f64 * step).collect();
    v[num - 1] = stop;
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub map_50_95: f64,
    pub map_50: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Interpolated precision at each recall level: the best precision at any
/// rank whose recall reaches it.
fn integrate(hits: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in linspace(0.0, 1.0, 101) {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(None, |m: Option<f64>, p| {
            Some(m.map_or(p, |m| m.max(p)))
        });
        sum += best.unwrap_or(0.0);
    }
    sum / 101.0
}

/// Ranked hits for one class, threshold and area interval `[lo, hi)`.
fn class_hits(dets: &[Detection], gts: &[BoxAnnotation], class: u64, thr: f64, lo: f64, hi: f64) -> (Vec<bool>, usize) {
    let inside = |a: f64| a >= lo && a < hi;
    let images: BTreeSet<u64> = dets
        .iter()
        .filter(|d| d.category_id == class)
        .map(|d| d.image_id)
        .chain(gts.iter().filter(|g| g.category_id == class).map(|g| g.image_id))
        .collect();
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for img in images {
        let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.category_id == class && d.image_id == img).collect();
        // stable: equal scores keep input order
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        mine.truncate(100);
        let truth: Vec<&BoxAnnotation> = gts.iter().filter(|g| g.category_id == class && g.image_id == img).collect();
        num_gt += truth.iter().filter(|g| inside(g.area)).count();
        let mut used = vec![false; truth.len()];
        for d in mine {
            let pick = |ignored: bool| {
                let mut best: Option<(usize, f64)> = None;
                for (k, g) in truth.iter().enumerate() {
                    if used[k] || inside(g.area) == ignored {
                        continue;
                    }
                    let o = overlap(&d.bbox, &g.bbox);
                    if o >= thr && best.is_none_or(|(_, b)| o > b) {
                        best = Some((k, o));
                    }
                }
                best.map(|(k, _)| k)
            };
            match pick(false).or_else(|| pick(true)) {
                Some(k) => {
                    used[k] = true;
                    if inside(truth[k].area) {
                        pooled.push((d.score, true));
                    }
                }
                None => {
                    if inside(d.bbox.area()) {
                        pooled.push((d.score, false));
                    }
                }
            }
        }
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    (pooled.into_iter().map(|p| p.1).collect(), num_gt)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn oracle_evaluate(dets: &[Detection], gts: &[BoxAnnotation], classes: &[CocoCategory]) -> OracleResult {
    let thresholds = linspace(0.5, 0.95, 10);
    let buckets = [(0.0, f64::INFINITY), (0.0, 1024.0), (1024.0, 9216.0), (9216.0, f64::INFINITY)];
    let mut per_bucket: [Vec<f64>; 4] = Default::default();
    let mut at_50 = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in classes {
        for (bi, &(lo, hi)) in buckets.iter().enumerate() {
            let mut aps = Vec::new();
            let mut num_gt = 0;
            for (ti, &thr) in thresholds.iter().enumerate() {
                let (hits, n) = class_hits(dets, gts, c.id, thr, lo, hi);
                num_gt = n;
                if bi == 0 && ti == 0 {
                    let t = hits.iter().filter(|&&h| h).count();
                    tp += t;
                    fp += hits.len() - t;
                    fn_ += n - t;
                }
                if n > 0 {
                    aps.push(integrate(&hits, n));
                }
            }
            if num_gt > 0 {
                per_bucket[bi].push(aps.iter().sum::<f64>() / 10.0);
                if bi == 0 {
                    at_50.push(aps[0]);
                }
            }
        }
    }
    OracleResult {
        map_50_95: mean(&per_bucket[0]).unwrap_or(0.0),
        map_50: mean(&at_50).unwrap_or(0.0),
        ap_small: mean(&per_bucket[1]),
        ap_medium: mean(&per_bucket[2]),
        ap_large: mean(&per_bucket[3]),
        tp,
        fp,
        fn_,
    }
}

pub fn as_oracle(r: &tinydet::eval::EvalResult) -> OracleResult {
    OracleResult {
        map_50_95: r.map_50_95,
        map_50: r.map_50,
        ap_small: r.ap_small,
        ap_medium: r.ap_medium,
        ap_large: r.ap_large,
        tp: r.tp,
        fp: r.fp,
        fn_: r.fn_,
    }
}

/// GT anchor corners on a 40-pixel grid; the first two overlap each other.
const ANCHORS: [(f64, f64); 4] = [(0.0, 0.0), (5.0, 0.0), (40.0, 0.0), (0.0, 40.0)];

/// Detection shapes relative to a 10x10 GT: IoU 1, 0.82, 0.67, 0.54, 0.5 (half box), 0.33, 0.
const VARIANTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 10.0, 10.0),
    (1.0, 0.0, 11.0, 10.0),
    (2.0, 0.0, 12.0, 10.0),
    (3.0, 0.0, 13.0, 10.0),
    (0.0, 0.0, 10.0, 5.0),
    (5.0, 0.0, 15.0, 10.0),
    (20.0, 20.0, 30.0, 30.0),
];

/// `scale` multiplies every coordinate, moving the problem between size buckets.
pub fn gt_box(anchor: usize, scale: f64) -> Bbox {
    let (x, y) = ANCHORS[anchor];
    Bbox::new(x * scale, y * scale, (x + 10.0) * scale, (y + 10.0) * scale)
}

pub fn det_box(anchor: usize, variant: usize, scale: f64) -> Bbox {
    let (x, y) = ANCHORS[anchor];
    let (a, b, c, d) = VARIANTS[variant];
    Bbox::new((x + a) * scale, (y + b) * scale, (x + c) * scale, (y + d) * scale)
}

/// Score layouts for `n` detections: strictly decreasing, all tied, and
/// increasing with the first two tied.
pub fn score_patterns(n: usize) -> Vec<Vec<f64>> {
    let down: Vec<f64> = (0..n).map(|i| 0.9 - 0.1 * i as f64).collect();
    let tied = vec![0.5; n];
    let mut mixed: Vec<f64> = (0..n).map(|i| 0.2 + 0.1 * i as f64).collect();
    if n >= 2 {
        mixed[1] = mixed[0];
    }
    vec![down, tied, mixed]
}

/// Every single-image problem with `gt_count` GTs (anchor order) and up to
/// `max_dets` detections drawn from the variant palette, at three scales.
pub fn exhaustive_instances(gt_count: usize, max_dets: usize) -> Vec<(Vec<Detection>, Vec<BoxAnnotation>)> {
    let mut out = Vec::new();
    let choices: Vec<(usize, usize)> = (0..gt_count).flat_map(|a| (0..VARIANTS.len()).map(move |v| (a, v))).collect();
    for scale in [1.0, 4.0, 12.0] {
        let gts: Vec<BoxAnnotation> = (0..gt_count).map(|a| BoxAnnotation::new(1, 1, gt_box(a, scale))).collect();
        for n in 0..=max_dets {
            let mut idx = vec![0usize; n];
            loop {
                for scores in score_patterns(n) {
                    let dets = idx
                        .iter()
                        .zip(&scores)
                        .map(|(&c, &s)| {
                            let (a, v) = choices[c];
                            Detection { image_id: 1, category_id: 1, bbox: det_box(a, v, scale), score: s }
                        })
                        .collect();
                    out.push((dets, gts.clone()));
                }
                // odometer increment over the palette
                let mut k = 0;
                while k < n {
                    idx[k] += 1;
                    if idx[k] < choices.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
    }
    out
}

/// Random problem with at most `max_dets` detections and `max_gts` GTs
/// spread over two images and two classes, using palette shapes so IoUs
/// land on both sides of every threshold.
pub fn random_instance(rng: &mut impl Rng, max_dets: usize, max_gts: usize) -> (Vec<Detection>, Vec<BoxAnnotation>) {
    let scale = [1.0, 3.5, 4.0, 12.0][rng.gen_range(0..4)];
    let ngt = rng.gen_range(1..=max_gts);
    let gts: Vec<BoxAnnotation> = (0..ngt)
        .map(|_| {
            let anchor = rng.gen_range(0..ANCHORS.len());
            let mut b = BoxAnnotation::new(rng.gen_range(1..=2), rng.gen_range(1..=2), gt_box(anchor, scale));
            if rng.gen_bool(0.2) {
                b.area *= rng.gen_range(0.5..2.0);
            }
            b
        })
        .collect();
    let ndet = rng.gen_range(0..=max_dets);
    let dets = (0..ndet)
        .map(|_| {
            let (img, class, anchor) = if rng.gen_bool(0.8) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let a = ANCHORS.iter().position(|&(x, y)| x * scale == g.bbox.x_min && y * scale == g.bbox.y_min).unwrap();
                (g.image_id, g.category_id, a)
            } else {
                (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(0..ANCHORS.len()))
            };
            let score = (rng.gen_range(0..5) as f64) * 0.2 + 0.1;
            Detection {
                image_id: img,
                category_id: class,
                bbox: det_box(anchor, rng.gen_range(0..VARIANTS.len()), scale),
                score,
            }
        })
        .collect();
    (dets, gts)
}

/// Large random problem with continuous boxes and scores.
pub fn random_large_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<BoxAnnotation>) {
    let images = rng.gen_range(1..=8);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 1..=images {
        for _ in 0..rng.gen_range(0..30) {
            let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
            let (w, h) = (rng.gen_range(2.0..120.0), rng.gen_range(2.0..120.0));
            let gt = BoxAnnotation::new(img, rng.gen_range(1..=3), Bbox::new(x, y, x + w, y + h));
            for _ in 0..rng.gen_range(0..4) {
                let j = |r: &mut dyn rand::RngCore| (r.gen::<f64>() - 0.5) * 0.4;
                let b = Bbox::new(x + w * j(rng), y + h * j(rng), x + w * (1.0 + j(rng)), y + h * (1.0 + j(rng)));
                dets.push(Detection { image_id: img, category_id: gt.category_id, bbox: b, score: rng.gen() });
            }
            gts.push(gt);
        }
        for _ in 0..rng.gen_range(0..20) {
            let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
            let b = Bbox::new(x, y, x + rng.gen_range(1.0..60.0), y + rng.gen_range(1.0..60.0));
            dets.push(Detection { image_id: img, category_id: rng.gen_range(1..=3), bbox: b, score: rng.gen() });
        }
    }
    if gts.is_empty() {
        gts.push(BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0)));
    }
    (dets, gts)
}
