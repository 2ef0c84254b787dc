use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ap::average_precision;
use super::coco::CocoCategory;
use super::matching::{greedy_match, rank_by_score};
use super::types::{BoxAnnotation, Detection};
use crate::error::{Error, Result};

/// `0.50, 0.55, ..., 0.95`
pub fn iou_thresholds() -> [f64; 10] {
    let step = 0.45 / 9.0;
    let mut out = [0.0; 10];
    for (i, t) in out.iter_mut().enumerate() {
        *t = 0.5 + i as f64 * step;
    }
    out[9] = 0.95;
    out
}

/// Half-open area interval `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { min: 0.0, max: f64::INFINITY };
    pub const SMALL: AreaRange = AreaRange { min: 0.0, max: 1024.0 };
    pub const MEDIUM: AreaRange = AreaRange { min: 1024.0, max: 9216.0 };
    pub const LARGE: AreaRange = AreaRange { min: 9216.0, max: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    /// Per image and class, only the top-scoring detections count.
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { max_dets: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category_id: u64,
    pub name: String,
    pub num_gt: usize,
    pub ap_50_95: Option<f64>,
    pub ap_50: Option<f64>,
    pub ap_small: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map_50_95: f64,
    pub map_50: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_small: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap_large: Option<f64>,
    pub per_class: Vec<ClassAp>,
    /// Counts at IoU 0.5 over all sizes.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

impl EvalResult {
    /// Aligned table with one row per labelled result.
    pub fn table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a EvalResult)>) -> String {
        let rows: Vec<_> = rows.into_iter().collect();
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>9}  {:>8}\n",
            "model", "mAP.5:.95", "mAP.5", "AP_small", "AP_medium", "AP_large"
        );
        for (label, r) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>6}  {:>8}  {:>9}  {:>8}",
                label,
                fmt_metric(Some(r.map_50_95)),
                fmt_metric(Some(r.map_50)),
                fmt_metric(r.ap_small),
                fmt_metric(r.ap_medium),
                fmt_metric(r.ap_large),
            );
        }
        out
    }
}

/// Per-threshold APs of one class within one area range, or `None` when the
/// range holds no ground truth of that class.
struct ClassCurve {
    aps: Option<[f64; 10]>,
    tp50: usize,
    fp50: usize,
    fn50: usize,
}

struct Group<'a> {
    dets: Vec<&'a Detection>,
    gts: Vec<&'a BoxAnnotation>,
}

fn class_curve(groups: &[Group<'_>], range: AreaRange) -> ClassCurve {
    let thresholds = iou_thresholds();
    let num_gt: usize = groups
        .iter()
        .map(|g| g.gts.iter().filter(|a| range.contains(a.area)).count())
        .sum();
    let mut aps = [0.0; 10];
    let (mut tp50, mut fp50) = (0, 0);
    for (ti, &thr) in thresholds.iter().enumerate() {
        // (score, is_tp) for non-ignored detections, in image-then-rank order
        let mut pool: Vec<(f64, bool)> = Vec::new();
        for g in groups {
            let det_boxes: Vec<_> = g.dets.iter().map(|d| d.bbox).collect();
            let gt_boxes: Vec<_> = g.gts.iter().map(|a| a.bbox).collect();
            let ignore: Vec<bool> = g.gts.iter().map(|a| !range.contains(a.area)).collect();
            let found = greedy_match(&det_boxes, &gt_boxes, &ignore, thr);
            for (d, m) in g.dets.iter().zip(found) {
                let skip = match m {
                    Some(k) => ignore[k],
                    None => !range.contains(d.bbox.area()),
                };
                if !skip {
                    pool.push((d.score, m.is_some()));
                }
            }
        }
        let scores: Vec<f64> = pool.iter().map(|p| p.0).collect();
        let ranked: Vec<bool> = rank_by_score(&scores).into_iter().map(|i| pool[i].1).collect();
        if ti == 0 {
            tp50 = ranked.iter().filter(|&&h| h).count();
            fp50 = ranked.len() - tp50;
        }
        aps[ti] = average_precision(&ranked, num_gt).unwrap_or(0.0);
    }
    ClassCurve {
        aps: (num_gt > 0).then_some(aps),
        tp50,
        fp50,
        fn50: num_gt - tp50,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// COCO box evaluation with the default detection cap.
pub fn evaluate(dets: &[Detection], gts: &[BoxAnnotation], categories: &[CocoCategory]) -> Result<EvalResult> {
    evaluate_with(dets, gts, categories, &EvalParams::default())
}

pub fn evaluate_with(
    dets: &[Detection],
    gts: &[BoxAnnotation],
    categories: &[CocoCategory],
    params: &EvalParams,
) -> Result<EvalResult> {
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::Domain(format!("detection on image {} has non-finite score", d.image_id)));
    }
    let known: BTreeSet<u64> = categories.iter().map(|c| c.id).collect();
    if let Some(g) = gts.iter().find(|g| !known.contains(&g.category_id)) {
        return Err(Error::Domain(format!("ground truth uses unknown category {}", g.category_id)));
    }
    if gts.is_empty() {
        return Err(Error::Domain("no ground-truth boxes to evaluate".into()));
    }

    // (category, image) -> group, detections ranked and capped
    let mut by_key: BTreeMap<(u64, u64), Group<'_>> = BTreeMap::new();
    for g in gts {
        by_key
            .entry((g.category_id, g.image_id))
            .or_insert_with(|| Group { dets: vec![], gts: vec![] })
            .gts
            .push(g);
    }
    for d in dets.iter().filter(|d| known.contains(&d.category_id)) {
        by_key
            .entry((d.category_id, d.image_id))
            .or_insert_with(|| Group { dets: vec![], gts: vec![] })
            .dets
            .push(d);
    }
    let mut per_cat: BTreeMap<u64, Vec<Group<'_>>> = BTreeMap::new();
    for ((cat, _), mut group) in by_key {
        let scores: Vec<f64> = group.dets.iter().map(|d| d.score).collect();
        let order = rank_by_score(&scores);
        group.dets = order.into_iter().take(params.max_dets).map(|i| group.dets[i]).collect();
        per_cat.entry(cat).or_default().push(group);
    }

    let ranges = [AreaRange::ALL, AreaRange::SMALL, AreaRange::MEDIUM, AreaRange::LARGE];
    let mut bucket_aps: [Vec<f64>; 4] = Default::default();
    let mut ap50s = Vec::new();
    let mut per_class = Vec::with_capacity(categories.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for cat in categories {
        let groups = per_cat.get(&cat.id).map(Vec::as_slice).unwrap_or(&[]);
        let mut row = ClassAp {
            category_id: cat.id,
            name: cat.name.clone(),
            num_gt: groups.iter().map(|g| g.gts.len()).sum(),
            ap_50_95: None,
            ap_50: None,
            ap_small: None,
        };
        for (ri, &range) in ranges.iter().enumerate() {
            let curve = class_curve(groups, range);
            if ri == 0 {
                tp += curve.tp50;
                fp += curve.fp50;
                fn_ += curve.fn50;
            }
            let Some(aps) = curve.aps else { continue };
            let ap = aps.iter().sum::<f64>() / aps.len() as f64;
            bucket_aps[ri].push(ap);
            match ri {
                0 => {
                    row.ap_50_95 = Some(ap);
                    row.ap_50 = Some(aps[0]);
                    ap50s.push(aps[0]);
                }
                1 => row.ap_small = Some(ap),
                _ => {}
            }
        }
        per_class.push(row);
    }
    let [all, small, medium, large] = bucket_aps;
    Ok(EvalResult {
        map_50_95: mean(&all).unwrap_or(0.0),
        map_50: mean(&ap50s).unwrap_or(0.0),
        ap_small: mean(&small),
        ap_medium: mean(&medium),
        ap_large: mean(&large),
        per_class,
        tp,
        fp,
        fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Bbox;

    fn cats(n: u64) -> Vec<CocoCategory> {
        (1..=n)
            .map(|id| CocoCategory {
                id,
                name: format!("c{id}"),
                supercategory: None,
            })
            .collect()
    }

    fn perfect(gts: &[BoxAnnotation]) -> Vec<Detection> {
        gts.iter()
            .map(|g| Detection {
                image_id: g.image_id,
                category_id: g.category_id,
                bbox: g.bbox,
                score: 1.0,
            })
            .collect()
    }

    #[test]
    fn thresholds_are_the_coco_sweep() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        for w in t.windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![
            BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0)),
            BoxAnnotation::new(1, 2, Bbox::new(20.0, 20.0, 70.0, 70.0)),
            BoxAnnotation::new(2, 1, Bbox::new(0.0, 0.0, 120.0, 100.0)),
        ];
        let r = evaluate(&perfect(&gts), &gts, &cats(3)).unwrap();
        assert_eq!(r.map_50_95, 1.0);
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_medium, Some(1.0));
        assert_eq!(r.ap_large, Some(1.0));
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
        // class 3 has no GT and is excluded
        assert_eq!(r.per_class[2].ap_50_95, None);
    }

    #[test]
    fn tiny_gt_only_in_small_bucket() {
        let gts = vec![BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&perfect(&gts), &gts, &cats(1)).unwrap();
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_medium, None);
        assert_eq!(r.ap_large, None);
    }

    #[test]
    fn bucket_boundary_is_half_open() {
        let mut g = BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0));
        g.area = 1023.0;
        let r = evaluate(&perfect(&[g]), &[g], &cats(1)).unwrap();
        assert!(r.ap_small.is_some() && r.ap_medium.is_none());
        g.area = 1024.0;
        let r = evaluate(&perfect(&[g]), &[g], &cats(1)).unwrap();
        assert!(r.ap_small.is_none() && r.ap_medium.is_some());
    }

    #[test]
    fn detection_cap_applies_per_image_and_class() {
        let gt = BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0));
        let mut dets: Vec<Detection> = (0..5)
            .map(|i| Detection {
                image_id: 1,
                category_id: 1,
                bbox: Bbox::new(50.0, 50.0, 60.0, 60.0),
                score: 0.9 - i as f64 * 0.01,
            })
            .collect();
        dets.push(Detection { score: 0.1, ..perfect(&[gt])[0] });
        let capped = evaluate_with(&dets, &[gt], &cats(1), &EvalParams { max_dets: 5 }).unwrap();
        assert_eq!(capped.tp, 0);
        let full = evaluate(&dets, &[gt], &cats(1)).unwrap();
        assert_eq!(full.tp, 1);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert!(evaluate(&[], &[], &cats(1)).is_err());
    }

    #[test]
    fn table_marks_undefined_buckets() {
        let gts = vec![BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&perfect(&gts), &gts, &cats(1)).unwrap();
        let t = EvalResult::table([("baseline", &r)]);
        assert!(t.lines().nth(1).unwrap().contains(" -"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("ap_medium") && json.contains("\"fn\":0"));
    }
}
