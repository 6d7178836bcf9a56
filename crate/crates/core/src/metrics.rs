//! Intersection-over-union evaluation over episodes.

use ndarray::Array1;
use serde::Serialize;
use std::collections::BTreeMap;

/// Per-episode IoU summary. `mean_iou` averages the evaluated foreground
/// classes (background excluded unless requested).
#[derive(Debug, Clone, Serialize)]
pub struct IoUReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    pub mean_iou: f64,
    /// Ground-truth point counts per class, pooled over the queries.
    pub support_counts: BTreeMap<u32, usize>,
}

/// IoU of one class: `|pred = c AND truth = c| / |pred = c OR truth = c|`,
/// defined as 1.0 when the union is empty.
pub fn iou(pred: &Array1<i32>, truth: &Array1<i32>, class: i32) -> f64 {
    assert_eq!(pred.len(), truth.len(), "pred/truth length mismatch");
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let in_p = p == class;
        let in_t = t == class;
        if in_p && in_t {
            intersection += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Pooled per-class IoU over all query clouds of an episode (one global
/// intersection/union per class, not a per-cloud macro average), averaged
/// over the foreground classes `1..=n_way`.
pub fn episode_miou(
    preds: &[Array1<i32>],
    truths: &[Array1<i32>],
    n_way: usize,
    include_background: bool,
) -> IoUReport {
    assert_eq!(preds.len(), truths.len(), "prediction/truth query counts");
    let classes: Vec<u32> = if include_background {
        (0..=n_way as u32).collect()
    } else {
        (1..=n_way as u32).collect()
    };
    let mut per_class_iou = BTreeMap::new();
    let mut support_counts = BTreeMap::new();
    for &class in &classes {
        let mut intersection = 0usize;
        let mut union = 0usize;
        let mut count = 0usize;
        for (pred, truth) in preds.iter().zip(truths) {
            assert_eq!(pred.len(), truth.len(), "query length mismatch");
            for (&p, &t) in pred.iter().zip(truth.iter()) {
                let in_p = p == class as i32;
                let in_t = t == class as i32;
                if in_p && in_t {
                    intersection += 1;
                }
                if in_p || in_t {
                    union += 1;
                }
                if in_t {
                    count += 1;
                }
            }
        }
        let value = if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        };
        per_class_iou.insert(class, value);
        support_counts.insert(class, count);
    }
    let mean_iou =
        per_class_iou.values().sum::<f64>() / per_class_iou.len().max(1) as f64;
    IoUReport {
        per_class_iou,
        mean_iou,
        support_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::Rng;

    #[test]
    fn perfect_prediction_is_one() {
        let truth = arr1(&[0, 1, 1, 2, 0]);
        assert_eq!(iou(&truth, &truth, 1), 1.0);
        assert_eq!(iou(&truth, &truth, 2), 1.0);
        let report = episode_miou(&[truth.clone()], &[truth], 2, false);
        assert_eq!(report.mean_iou, 1.0);
    }

    #[test]
    fn disjoint_nonempty_sets_are_zero() {
        let pred = arr1(&[1, 1, 0, 0]);
        let truth = arr1(&[0, 0, 1, 1]);
        assert_eq!(iou(&pred, &truth, 1), 0.0);
    }

    #[test]
    fn hand_counted_example() {
        let pred = arr1(&[1, 1, 0, 2]);
        let truth = arr1(&[1, 0, 0, 2]);
        // class 1: intersection {0}, union {0, 1}
        assert!((iou(&pred, &truth, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_union_convention() {
        let pred = arr1(&[0, 0]);
        let truth = arr1(&[0, 0]);
        assert_eq!(iou(&pred, &truth, 3), 1.0);
    }

    #[test]
    fn symmetry_in_pred_truth() {
        let mut rng = crate::seeds::rng(&[95]);
        for _ in 0..50 {
            let a = Array1::from_shape_fn(20, |_| rng.random_range(0..4));
            let b = Array1::from_shape_fn(20, |_| rng.random_range(0..4));
            for c in 0..4 {
                assert_eq!(iou(&a, &b, c), iou(&b, &a, c));
            }
        }
    }

    #[test]
    fn half_right_episode_is_half() {
        // class 1 perfect, class 2 fully wrong but nonempty both sides
        let truth = arr1(&[1, 1, 2, 2, 0]);
        let pred = arr1(&[1, 1, 0, 0, 2]);
        let report = episode_miou(&[pred], &[truth], 2, false);
        assert!((report.mean_iou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pooled_matches_confusion_matrix_oracle() {
        let mut rng = crate::seeds::rng(&[96]);
        let preds: Vec<Array1<i32>> = (0..3)
            .map(|_| Array1::from_shape_fn(30, |_| rng.random_range(0..3)))
            .collect();
        let truths: Vec<Array1<i32>> = (0..3)
            .map(|_| Array1::from_shape_fn(30, |_| rng.random_range(0..3)))
            .collect();
        let report = episode_miou(&preds, &truths, 2, false);
        // confusion-matrix oracle pooled over all points
        let mut confusion = [[0usize; 3]; 3];
        for (p, t) in preds.iter().zip(&truths) {
            for (&pi, &ti) in p.iter().zip(t.iter()) {
                confusion[ti as usize][pi as usize] += 1;
            }
        }
        for class in 1..=2usize {
            let tp = confusion[class][class];
            let fp: usize = (0..3).filter(|&r| r != class).map(|r| confusion[r][class]).sum();
            let fn_: usize = (0..3).filter(|&c| c != class).map(|c| confusion[class][c]).sum();
            let expect = if tp + fp + fn_ == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp + fn_) as f64
            };
            assert!((report.per_class_iou[&(class as u32)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_to_query_order_and_point_permutation() {
        let mut rng = crate::seeds::rng(&[97]);
        let preds: Vec<Array1<i32>> = (0..2)
            .map(|_| Array1::from_shape_fn(16, |_| rng.random_range(0..3)))
            .collect();
        let truths: Vec<Array1<i32>> = (0..2)
            .map(|_| Array1::from_shape_fn(16, |_| rng.random_range(0..3)))
            .collect();
        let base = episode_miou(&preds, &truths, 2, false);
        let swapped = episode_miou(
            &[preds[1].clone(), preds[0].clone()],
            &[truths[1].clone(), truths[0].clone()],
            2,
            false,
        );
        assert_eq!(base.mean_iou, swapped.mean_iou);
        let perm: Vec<usize> = (0..16).rev().collect();
        let permuted_pred = Array1::from_iter(perm.iter().map(|&i| preds[0][i]));
        let permuted_truth = Array1::from_iter(perm.iter().map(|&i| truths[0][i]));
        let permuted = episode_miou(
            &[permuted_pred, preds[1].clone()],
            &[permuted_truth, truths[1].clone()],
            2,
            false,
        );
        assert_eq!(base.mean_iou, permuted.mean_iou);
    }

    #[test]
    fn background_flag_includes_class_zero() {
        let truth = arr1(&[0, 1, 2]);
        let report = episode_miou(&[truth.clone()], &[truth], 2, true);
        assert_eq!(report.per_class_iou.len(), 3);
        assert!(report.per_class_iou.contains_key(&0));
    }
}
