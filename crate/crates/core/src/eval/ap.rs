/// The 101 recall levels `0.00, 0.01, ..., 1.00`, computed as `i * 0.01`
/// with the last level pinned to exactly 1.
pub fn recall_thresholds() -> [f64; 101] {
    let mut out = [0.0; 101];
    for (i, r) in out.iter_mut().enumerate() {
        *r = i as f64 * 0.01;
    }
    out[100] = 1.0;
    out
}

/// 101-point interpolated AP of a ranked list of `true = TP`, `false = FP`.
/// `None` when there are no ground truths.
pub fn average_precision(ranked: &[bool], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_cases() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false], 1), Some(0.0));
        assert_eq!(average_precision(&[true, false], 1), Some(1.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn half_recall() {
        // recall 0.5 at precision 1: levels 0..=50 count.
        let ap = average_precision(&[true], 2).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn fp_then_tp() {
        // precision 0.5 at recall 1 everywhere after right-max.
        let ap = average_precision(&[false, true], 1).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
    }
}
