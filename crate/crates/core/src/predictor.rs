//! Metric-based mask prediction: per-point distances to the task-specific
//! prototypes, a softmax over negative scaled distances, and argmax decoding.

use crate::autodiff::{Arr, Tape, Var};
use crate::error::ModelError;
use ndarray::{Array1, Array2, ArrayView1, IxDyn};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Near-zero-norm guard for the cosine distance.
pub const NORM_EPSILON: f64 = 1e-8;

static DEGENERATE_PAIRS: AtomicU64 = AtomicU64::new(0);

/// How many (point, prototype) pairs hit the near-zero-norm fallback since
/// the last reset. Dead features degrade to distance 1 instead of erroring,
/// so early training keeps moving; this counter makes it observable.
pub fn degenerate_pair_count() -> u64 {
    DEGENERATE_PAIRS.load(Ordering::Relaxed)
}

pub fn reset_degenerate_pair_count() {
    DEGENERATE_PAIRS.store(0, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Cosine,
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Amplification factor on distances inside the softmax.
    pub alpha: f64,
    pub distance: DistanceKind,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            distance: DistanceKind::Cosine,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.alpha <= 0.0 {
            return Err(ModelError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

/// `T x (N+1)` row-stochastic per-point class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub values: Array2<f64>,
}

impl MaskLogits {
    pub fn new(values: Array2<f64>) -> Result<Self, ModelError> {
        for row in values.rows() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ModelError::NonFinite { op: "mask_logits" });
            }
        }
        Ok(Self { values })
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }
}

/// `1 - cos(u, v)`, in `[0, 2]`. Degenerate norms (below [`NORM_EPSILON`])
/// yield the orthogonal-equivalent distance 1 and bump the warning counter.
pub fn cosine_distance(u: &ArrayView1<f64>, v: &ArrayView1<f64>) -> f64 {
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu <= NORM_EPSILON || nv <= NORM_EPSILON {
        DEGENERATE_PAIRS.fetch_add(1, Ordering::Relaxed);
        return 1.0;
    }
    1.0 - u.dot(v) / (nu * nv)
}

/// Differentiable mask-logit computation. Returns the row-stochastic
/// probabilities; degenerate (point, prototype) pairs contribute a constant
/// distance of 1 with zero gradient.
pub fn mask_logits_on(
    tape: &mut Tape,
    query_features: Var,
    prototypes: Var,
    cfg: &PredictorConfig,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let d = tape.shape(query_features)[1];
    if tape.shape(prototypes)[1] != d {
        return Err(ModelError::ShapeMismatch {
            op: "mask_logits",
            expected: format!("prototype dim {d}"),
            got: format!("{}", tape.shape(prototypes)[1]),
        });
    }
    let distances = match cfg.distance {
        DistanceKind::Cosine => cosine_distances_on(tape, query_features, prototypes),
        DistanceKind::SquaredEuclidean => squared_distances_on(tape, query_features, prototypes),
    };
    let scores = tape.scale(distances, -cfg.alpha);
    if !tape.all_finite(scores) {
        return Err(ModelError::NonFinite { op: "mask_logits" });
    }
    Ok(tape.softmax_rows(scores))
}

fn cosine_distances_on(tape: &mut Tape, features: Var, prototypes: Var) -> Var {
    let t = tape.shape(features)[0];
    let m = tape.shape(prototypes)[0];
    // norms with the degenerate pairs resolved eagerly from the values
    let f_val = tape.value(features).clone();
    let p_val = tape.value(prototypes).clone();
    let f_norms: Vec<f64> = (0..t)
        .map(|r| {
            (0..f_val.shape()[1])
                .map(|c| f_val[[r, c]] * f_val[[r, c]])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let p_norms: Vec<f64> = (0..m)
        .map(|r| {
            (0..p_val.shape()[1])
                .map(|c| p_val[[r, c]] * p_val[[r, c]])
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut degenerate = Arr::zeros(IxDyn(&[t, m]));
    let mut count = 0u64;
    for r in 0..t {
        for c in 0..m {
            if f_norms[r] <= NORM_EPSILON || p_norms[c] <= NORM_EPSILON {
                degenerate[[r, c]] = 1.0;
                count += 1;
            }
        }
    }
    if count > 0 {
        DEGENERATE_PAIRS.fetch_add(count, Ordering::Relaxed);
    }

    let pt = tape.t(prototypes);
    let dots = tape.matmul(features, pt); // T x (N+1)
    let fsq = tape.mul(features, features);
    let fsum = tape.sum_axis_keep(fsq, 1);
    let fsum = tape.clamp_min(fsum, NORM_EPSILON * NORM_EPSILON);
    let fnorm = tape.sqrt(fsum); // T x 1
    let psq = tape.mul(prototypes, prototypes);
    let psum = tape.sum_axis_keep(psq, 1);
    let psum = tape.clamp_min(psum, NORM_EPSILON * NORM_EPSILON);
    let pnorm = tape.sqrt(psum); // (N+1) x 1
    let pnorm_t = tape.t(pnorm); // 1 x (N+1)
    let denom = tape.matmul(fnorm, pnorm_t); // T x (N+1)
    let cos = tape.div(dots, denom);
    let ones = tape.constant(Arr::from_elem(IxDyn(&[t, m]), 1.0));
    let dist = tape.sub(ones, cos);
    if count == 0 {
        return dist;
    }
    // overwrite degenerate pairs with the constant distance 1
    let keep = tape.constant(degenerate.mapv(|x| 1.0 - x));
    let fallback = tape.constant(degenerate);
    let kept = tape.mul(dist, keep);
    tape.add(kept, fallback)
}

fn squared_distances_on(tape: &mut Tape, features: Var, prototypes: Var) -> Var {
    // ||f - p||^2 = ||f||^2 + ||p||^2 - 2 f.p
    let pt = tape.t(prototypes);
    let dots = tape.matmul(features, pt);
    let cross = tape.scale(dots, -2.0);
    let fsq = tape.mul(features, features);
    let fsum = tape.sum_axis_keep(fsq, 1); // T x 1
    let psq = tape.mul(prototypes, prototypes);
    let psum = tape.sum_axis_keep(psq, 1); // (N+1) x 1
    let psum_t = tape.t(psum); // 1 x (N+1)
    let partial = tape.add(cross, fsum);
    tape.add(partial, psum_t)
}

/// Plain mask-logit computation from concrete matrices.
pub fn mask_logits(
    query_features: &Array2<f64>,
    prototypes: &Array2<f64>,
    cfg: &PredictorConfig,
) -> Result<MaskLogits, ModelError> {
    let mut tape = Tape::new();
    let f = tape.constant(query_features.clone().into_dyn());
    let p = tape.constant(prototypes.clone().into_dyn());
    let probs = mask_logits_on(&mut tape, f, p, cfg)?;
    MaskLogits::new(
        tape.value(probs)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
    )
}

/// Per-point argmax over the `N+1` columns; ties break to the lowest index
/// (background-favoring), deterministic across platforms.
pub fn predict_mask(logits: &MaskLogits) -> Array1<i32> {
    let mut out = Array1::<i32>::zeros(logits.points());
    for (r, row) in logits.values.rows().into_iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_c = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                best_c = c;
            }
        }
        out[r] = best_c as i32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::Rng;

    fn rand2(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = crate::seeds::rng(&[seed]);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_distance_basic_values() {
        let u = arr1(&[1.0, 0.0]);
        let v = arr1(&[1.0, 1.0]);
        assert!(cosine_distance(&u.view(), &u.view()).abs() < 1e-12);
        let minus = u.mapv(|x| -x);
        assert!((cosine_distance(&u.view(), &minus.view()) - 2.0).abs() < 1e-12);
        let expect = 1.0 - 1.0 / 2.0f64.sqrt();
        assert!((cosine_distance(&u.view(), &v.view()) - expect).abs() < 1e-12);
    }

    #[test]
    fn degenerate_norm_counts_and_returns_one() {
        reset_degenerate_pair_count();
        let u = arr1(&[0.0, 0.0]);
        let v = arr1(&[1.0, 2.0]);
        assert_eq!(cosine_distance(&u.view(), &v.view()), 1.0);
        assert_eq!(degenerate_pair_count(), 1);
        reset_degenerate_pair_count();
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let f = rand2(81, 5, 3);
        let proto_row = rand2(82, 1, 3);
        let protos = Array2::from_shape_fn((3, 3), |(_, c)| proto_row[[0, c]]);
        let logits = mask_logits(&f, &protos, &PredictorConfig::default()).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                assert!((logits.values[[r, c]] - 1.0 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn large_alpha_concentrates_on_nearest() {
        // prototype 1 aligned with the feature, prototype 0 anti-aligned:
        // distance gap of 2 >= 0.5
        let f = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let protos = Array2::from_shape_vec((2, 2), vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        let cfg = PredictorConfig {
            alpha: 100.0,
            distance: DistanceKind::Cosine,
        };
        let logits = mask_logits(&f, &protos, &cfg).unwrap();
        assert!(logits.values[[0, 1]] > 0.99);
    }

    #[test]
    fn logits_match_exp_normalize_oracle() {
        let f = rand2(83, 3, 2);
        let protos = rand2(84, 3, 2);
        let cfg = PredictorConfig::default();
        let logits = mask_logits(&f, &protos, &cfg).unwrap();
        for r in 0..3 {
            let dists: Vec<f64> = (0..3)
                .map(|i| cosine_distance(&f.row(r), &protos.row(i)))
                .collect();
            let exps: Vec<f64> = dists.iter().map(|&d| (-cfg.alpha * d).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..3 {
                assert!((logits.values[[r, c]] - exps[c] / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_for_both_distances() {
        for kind in [DistanceKind::Cosine, DistanceKind::SquaredEuclidean] {
            let cfg = PredictorConfig {
                alpha: 1.0,
                distance: kind,
            };
            let f = rand2(85, 6, 4);
            let protos = rand2(86, 3, 4);
            let logits = mask_logits(&f, &protos, &cfg).unwrap();
            for r in 0..6 {
                assert!((logits.values.row(r).sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_ties_break_low_and_match_oracle() {
        let uniform = MaskLogits {
            values: Array2::from_elem((2, 3), 1.0 / 3.0),
        };
        let pred = predict_mask(&uniform);
        assert_eq!(pred[0], 0);
        assert_eq!(pred[1], 0);

        let mut rng = crate::seeds::rng(&[87]);
        let raw = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.01..1.0));
        let norm = {
            let mut m = raw.clone();
            for mut row in m.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            m
        };
        let logits = MaskLogits::new(norm.clone()).unwrap();
        let pred = predict_mask(&logits);
        for r in 0..5 {
            let mut best = 0usize;
            for c in 1..3 {
                if norm[[r, c]] > norm[[r, best]] {
                    best = c;
                }
            }
            assert_eq!(pred[r] as usize, best);
        }
    }

    #[test]
    fn alpha_invariant_argmax() {
        let f = rand2(88, 8, 3);
        let protos = rand2(89, 4, 3);
        let base = predict_mask(
            &mask_logits(&f, &protos, &PredictorConfig::default()).unwrap(),
        );
        for &alpha in &[0.1, 2.0, 17.0] {
            let cfg = PredictorConfig {
                alpha,
                distance: DistanceKind::Cosine,
            };
            let pred = predict_mask(&mask_logits(&f, &protos, &cfg).unwrap());
            assert_eq!(pred, base, "alpha={alpha}");
        }
    }

    #[test]
    fn degenerate_feature_rows_get_uniform_distance() {
        reset_degenerate_pair_count();
        let mut f = rand2(90, 3, 2);
        f.row_mut(1).fill(0.0);
        let protos = rand2(91, 3, 2);
        let logits = mask_logits(&f, &protos, &PredictorConfig::default()).unwrap();
        for c in 0..3 {
            assert!((logits.values[[1, c]] - 1.0 / 3.0).abs() < 1e-9);
        }
        assert_eq!(degenerate_pair_count(), 3);
        reset_degenerate_pair_count();
    }

    #[test]
    fn bad_alpha_rejected() {
        let f = rand2(92, 2, 2);
        let protos = rand2(93, 2, 2);
        let cfg = PredictorConfig {
            alpha: 0.0,
            distance: DistanceKind::Cosine,
        };
        assert!(matches!(
            mask_logits(&f, &protos, &cfg),
            Err(ModelError::BadAlpha(_))
        ));
    }
}
