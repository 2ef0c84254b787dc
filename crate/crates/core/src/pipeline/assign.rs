//! Centre-based static assignment.
//!
//! Each ground truth is routed to one level by its longer side (the smallest
//! stride `s` with `max_side <= 4 s`, else the coarsest level) and claims the
//! grid cell containing its centre there. Collisions go to the smaller box.

use crate::boxes::{iou_unchecked, Bbox};

/// Grid of one head level; points are cell centres `((x + 0.5) s, (y + 0.5) s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGrid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, y: usize, x: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
    }
}

/// Grids for a square input, one per stride.
pub fn level_grids(input_size: usize, strides: &[usize]) -> Vec<LevelGrid> {
    strides
        .iter()
        .map(|&stride| LevelGrid {
            stride,
            height: input_size / stride,
            width: input_size / stride,
        })
        .collect()
}

/// A ground-truth box with a zero-based class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: Bbox,
    pub class: usize,
}

/// Target of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTarget {
    /// Index into the ground-truth list; `None` for negatives.
    pub gt: Option<usize>,
    pub class: usize,
    /// Target quality: IoU of the prediction with its ground truth, 0 for negatives.
    pub q: f64,
}

impl PointTarget {
    const NEGATIVE: PointTarget = PointTarget { gt: None, class: 0, q: 0.0 };

    pub fn is_positive(&self) -> bool {
        self.gt.is_some()
    }
}

/// Level index for a box of the given size.
pub fn level_for(bbox: &Bbox, levels: &[LevelGrid]) -> usize {
    let side = bbox.width().max(bbox.height());
    levels
        .iter()
        .position(|l| side <= 4.0 * l.stride as f64)
        .unwrap_or(levels.len() - 1)
}

/// One target per grid point, levels concatenated in order and each level in
/// row-major order. `preds` holds the decoded box of every point in the same
/// order.
pub fn assign_targets(levels: &[LevelGrid], gts: &[GtBox], preds: &[Bbox]) -> Vec<PointTarget> {
    let total: usize = levels.iter().map(LevelGrid::len).sum();
    assert_eq!(preds.len(), total, "one decoded prediction per grid point");
    let mut offsets = Vec::with_capacity(levels.len());
    let mut acc = 0;
    for l in levels {
        offsets.push(acc);
        acc += l.len();
    }
    let mut owner: Vec<Option<usize>> = vec![None; total];
    for (gi, gt) in gts.iter().enumerate() {
        let li = level_for(&gt.bbox, levels);
        let level = levels[li];
        let (cx, cy) = gt.bbox.center();
        let s = level.stride as f64;
        let x = ((cx / s).floor().max(0.0) as usize).min(level.width - 1);
        let y = ((cy / s).floor().max(0.0) as usize).min(level.height - 1);
        let idx = offsets[li] + y * level.width + x;
        let replace = match owner[idx] {
            None => true,
            Some(prev) => gt.bbox.area() < gts[prev].bbox.area(),
        };
        if replace {
            owner[idx] = Some(gi);
        }
    }
    owner
        .iter()
        .zip(preds)
        .map(|(o, pred)| match *o {
            Some(gi) => PointTarget {
                gt: Some(gi),
                class: gts[gi].class,
                q: iou_unchecked(pred, &gts[gi].bbox).clamp(0.0, 1.0),
            },
            None => PointTarget::NEGATIVE,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids() -> Vec<LevelGrid> {
        level_grids(128, &[8, 16, 32])
    }

    fn centers(levels: &[LevelGrid]) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (li, l) in levels.iter().enumerate() {
            for y in 0..l.height {
                for x in 0..l.width {
                    let (cx, cy) = l.center(y, x);
                    out.push((li, cx, cy));
                }
            }
        }
        out
    }

    fn preds_all(b: Bbox, n: usize) -> Vec<Bbox> {
        vec![b; n]
    }

    #[test]
    fn perfect_prediction_gives_unit_quality() {
        let l = grids();
        // centred on the stride-8 point (3, 2): (28, 20)
        let gt = Bbox::from_center(28.0, 20.0, 10.0, 10.0);
        let t = assign_targets(&l, &[GtBox { bbox: gt, class: 1 }], &preds_all(gt, 336));
        let pos: Vec<_> = t.iter().enumerate().filter(|(_, p)| p.is_positive()).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].0, 2 * 16 + 3);
        assert_eq!(pos[0].1.q, 1.0);
        assert_eq!(pos[0].1.class, 1);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let l = grids();
        let t = assign_targets(&l, &[], &preds_all(Bbox::new(0.0, 0.0, 1.0, 1.0), 336));
        assert!(t.iter().all(|p| p.q == 0.0 && !p.is_positive()));
    }

    #[test]
    fn quality_is_the_iou_with_the_prediction() {
        let l = grids();
        let gt = Bbox::new(0.0, 0.0, 10.0, 10.0);
        // 10x10 shifted by 5 in x and y: intersection 25, union 175.
        let pred = Bbox::new(5.0, 5.0, 15.0, 15.0);
        let t = assign_targets(&l, &[GtBox { bbox: gt, class: 0 }], &preds_all(pred, 336));
        let q = t.iter().find(|p| p.is_positive()).unwrap().q;
        assert!((q - 1.0 / 7.0).abs() < 1e-6, "{q}");
    }

    #[test]
    fn large_boxes_go_to_coarse_levels_and_positive_point_is_inside() {
        let l = grids();
        let pts = centers(&l);
        for (side, level) in [(20.0, 0), (50.0, 1), (100.0, 2)] {
            let gt = Bbox::from_center(61.0, 70.0, side, side * 0.8);
            let t = assign_targets(&l, &[GtBox { bbox: gt, class: 0 }], &preds_all(gt, 336));
            let (i, _) = t.iter().enumerate().find(|(_, p)| p.is_positive()).unwrap();
            assert_eq!(pts[i].0, level);
            assert!(gt.contains_point(pts[i].1, pts[i].2));
        }
    }

    #[test]
    fn collision_goes_to_smaller_box() {
        let l = grids();
        let big = Bbox::from_center(20.0, 20.0, 14.0, 14.0);
        let small = Bbox::from_center(21.0, 21.0, 8.0, 8.0);
        let gts = [GtBox { bbox: big, class: 0 }, GtBox { bbox: small, class: 2 }];
        let t = assign_targets(&l, &gts, &preds_all(small, 336));
        let pos: Vec<_> = t.iter().filter(|p| p.is_positive()).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(pos[0].gt, Some(1));
    }
}
