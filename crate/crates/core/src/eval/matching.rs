use std::collections::BTreeMap;

use super::types::{BoxAnnotation, Detection};
use crate::boxes::iou_unchecked;

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionMatch {
    /// Index into the detection slice.
    pub detection: usize,
    /// Index into the ground-truth slice when matched.
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSummary {
    /// Detections in evaluation order: grouped per (image, class), score-descending within a group.
    pub matches: Vec<DetectionMatch>,
    pub unmatched_gts: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Indices of `scores` sorted by descending score; equal scores keep input order.
pub(crate) fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching inside one (image, class) group.
///
/// `dets` must already be in rank order. GTs flagged `ignore` are only taken
/// when no regular GT clears the threshold. Returns the GT index per detection.
pub(crate) fn greedy_match(
    dets: &[crate::boxes::Bbox],
    gts: &[crate::boxes::Bbox],
    gt_ignore: &[bool],
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    // Regular GTs first, ignored ones after, each kept in input order.
    let mut gt_order: Vec<usize> = (0..gts.len()).filter(|&g| !gt_ignore[g]).collect();
    gt_order.extend((0..gts.len()).filter(|&g| gt_ignore[g]));
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_order {
                if taken[g] {
                    continue;
                }
                if let Some((b, _)) = best {
                    if !gt_ignore[b] && gt_ignore[g] {
                        break;
                    }
                }
                let ov = iou_unchecked(d, &gts[g]);
                if ov < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, bo)| ov > bo) {
                    best = Some((g, ov));
                }
            }
            let hit = best.map(|(g, _)| g);
            if let Some(g) = hit {
                taken[g] = true;
            }
            hit
        })
        .collect()
}

/// Greedy COCO matching at one IoU threshold, per (image, class), with no
/// size filtering or detection cap.
pub fn match_detections(dets: &[Detection], gts: &[BoxAnnotation], iou_threshold: f64) -> MatchSummary {
    let mut groups: BTreeMap<(u64, u64), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.image_id, d.category_id)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        groups.entry((g.image_id, g.category_id)).or_default().1.push(i);
    }
    let mut matches = Vec::with_capacity(dets.len());
    let mut gt_hit = vec![false; gts.len()];
    for (det_idx, gt_idx) in groups.values() {
        let scores: Vec<f64> = det_idx.iter().map(|&i| dets[i].score).collect();
        let ranked: Vec<usize> = rank_by_score(&scores).into_iter().map(|k| det_idx[k]).collect();
        let det_boxes: Vec<_> = ranked.iter().map(|&i| dets[i].bbox).collect();
        let gt_boxes: Vec<_> = gt_idx.iter().map(|&i| gts[i].bbox).collect();
        let found = greedy_match(&det_boxes, &gt_boxes, &vec![false; gt_boxes.len()], iou_threshold);
        for (&d, m) in ranked.iter().zip(found) {
            let gt = m.map(|k| gt_idx[k]);
            if let Some(g) = gt {
                gt_hit[g] = true;
            }
            matches.push(DetectionMatch { detection: d, gt });
        }
    }
    let tp = matches.iter().filter(|m| m.gt.is_some()).count();
    let unmatched_gts: Vec<usize> = (0..gts.len()).filter(|&g| !gt_hit[g]).collect();
    MatchSummary {
        fp: matches.len() - tp,
        fn_: unmatched_gts.len(),
        tp,
        matches,
        unmatched_gts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Bbox;

    fn det(b: Bbox, score: f64) -> Detection {
        Detection {
            image_id: 1,
            category_id: 1,
            bbox: b,
            score,
        }
    }

    #[test]
    fn perfect_match() {
        let b = Bbox::new(0.0, 0.0, 10.0, 10.0);
        let s = match_detections(&[det(b, 0.9)], &[BoxAnnotation::new(1, 1, b)], 0.5);
        assert_eq!((s.tp, s.fp, s.fn_), (1, 0, 0));
    }

    #[test]
    fn below_threshold() {
        let gt = Bbox::new(0.0, 0.0, 10.0, 10.0);
        // 10x10 vs 10x4 inside: IoU 0.4.
        let d = Bbox::new(0.0, 0.0, 10.0, 4.0);
        assert!((iou_unchecked(&gt, &d) - 0.4).abs() < 1e-12);
        let s = match_detections(&[det(d, 0.9)], &[BoxAnnotation::new(1, 1, gt)], 0.5);
        assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));
    }

    #[test]
    fn higher_score_wins() {
        let gt = Bbox::new(0.0, 0.0, 10.0, 10.0);
        let far = Bbox::new(0.0, 0.0, 10.0, 9.0);
        // lower-score detection listed first to exercise internal sorting
        let s = match_detections(&[det(gt, 0.8), det(far, 0.9)], &[BoxAnnotation::new(1, 1, gt)], 0.5);
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 0));
        let tp = s.matches.iter().find(|m| m.gt.is_some()).unwrap();
        assert_eq!(tp.detection, 1);
    }

    #[test]
    fn classes_and_images_do_not_mix() {
        let b = Bbox::new(0.0, 0.0, 10.0, 10.0);
        let mut other = det(b, 0.9);
        other.category_id = 2;
        let mut elsewhere = det(b, 0.9);
        elsewhere.image_id = 2;
        let s = match_detections(&[other, elsewhere], &[BoxAnnotation::new(1, 1, b)], 0.5);
        assert_eq!((s.tp, s.fp, s.fn_), (0, 2, 1));
    }

    #[test]
    fn equal_iou_prefers_lower_gt_index() {
        let a = Bbox::new(0.0, 0.0, 10.0, 10.0);
        let b = Bbox::new(10.0, 0.0, 20.0, 10.0);
        let d = Bbox::new(5.0, 0.0, 15.0, 10.0);
        let m = greedy_match(&[d], &[a, b], &[false, false], 0.3);
        assert_eq!(m, vec![Some(0)]);
    }
}
