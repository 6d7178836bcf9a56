//! Prototype decoder: L blocks of prototype rectification, prototype-to-query
//! attention with an FFN, and the prototype-distillation regularizer that
//! pulls each block's rectified set toward its post-attention counterpart.

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::params::{BoundParams, ParamStore};
use crate::prototypes::{PrototypeSet, PrototypeStage, PrototypeVars};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Number of decoder blocks L.
    pub num_blocks: usize,
    pub ffn_hidden: usize,
    /// Softmax temperature for the distillation distributions.
    pub distill_temperature: f64,
    /// Scale attention scores by `1/sqrt(d)`; turning this off restores the
    /// unscaled literal form.
    pub scale_scores: bool,
    /// Let gradients flow into the teacher prototypes instead of detaching.
    pub symmetric_distill: bool,
    /// Component toggles (all on for the full model).
    pub rectification: bool,
    pub p2q_attention: bool,
    pub distillation: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 1,
            ffn_hidden: 64,
            distill_temperature: 1.0,
            scale_scores: true,
            symmetric_distill: false,
            rectification: true,
            p2q_attention: true,
            distillation: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_blocks < 1 {
            return Err(ModelError::BadConfig("num_blocks must be >= 1".into()));
        }
        if self.ffn_hidden < 1 {
            return Err(ModelError::BadConfig("ffn_hidden must be >= 1".into()));
        }
        if self.distill_temperature <= 0.0 {
            return Err(ModelError::BadTemperature(self.distill_temperature));
        }
        Ok(())
    }
}

/// Per-block snapshots plus the accumulated distillation loss.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub blocks: Vec<TraceBlock>,
    pub distill_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TraceBlock {
    pub rectified: PrototypeSet,
    pub task_specific: PrototypeSet,
}

/// Encoded features of one episode, in episode-local class order.
pub struct EpisodeFeatures {
    /// `support[n-1][k]` is the `T x d` encoding of class `n`, shot `k`.
    pub support: Vec<Vec<Var>>,
    /// Encoded query clouds, one per query in episode order.
    pub queries: Vec<Var>,
}

impl EpisodeFeatures {
    pub fn n_way(&self) -> usize {
        self.support.len()
    }

    pub fn flat_support(&self) -> Vec<Var> {
        self.support.iter().flatten().copied().collect()
    }
}

/// Element-wise mean over all N*K support feature matrices.
pub fn support_set_representation_on(tape: &mut Tape, support: &[Var]) -> Var {
    tape.mean_of(support)
}

/// `A^i = softmax((f_q^i)^T f_s^*)`, a `d x d` row-stochastic matrix of
/// channel correspondences.
pub fn rectification_matrix_on(
    tape: &mut Tape,
    query_features: Var,
    support_repr: Var,
) -> Result<Var, ModelError> {
    let sq = tape.shape(query_features).to_vec();
    let ss = tape.shape(support_repr).to_vec();
    if sq != ss {
        return Err(ModelError::ShapeMismatch {
            op: "rectification_matrix",
            expected: format!("{sq:?}"),
            got: format!("{ss:?}"),
        });
    }
    let qt = tape.t(query_features);
    let product = tape.matmul(qt, support_repr);
    if !tape.all_finite(product) {
        return Err(ModelError::NonFinite {
            op: "rectification_matrix",
        });
    }
    Ok(tape.softmax_rows(product))
}

/// Residual rectification: output channel j adds `sum_m A[j, m] * p[m]`,
/// i.e. `p_hat = p + p A^T` with `p` a `1 x d` row vector.
pub fn rectify_on(tape: &mut Tape, prototype: Var, matrix: Var) -> Var {
    let at = tape.t(matrix);
    let mixed = tape.matmul(prototype, at);
    tape.add(prototype, mixed)
}

/// Query features assigned to prototype `i`: the class-matched query for
/// `i >= 1`, the mean over all N queries for the background index 0.
pub fn assign_query_to_prototype(
    tape: &mut Tape,
    queries: &[Var],
    n_way: usize,
    index: usize,
) -> Result<Var, ModelError> {
    if queries.len() != n_way {
        return Err(ModelError::QueryCountMismatch {
            queries: queries.len(),
            n_way,
        });
    }
    if index == 0 {
        Ok(tape.mean_of(queries))
    } else {
        Ok(queries[index - 1])
    }
}

/// Cross-attention from one prototype into the target query's points:
/// `softmax(QK^T) V + p_hat` with Q from the prototype and K, V from the
/// query features.
pub fn p2q_attention_on(
    tape: &mut Tape,
    prototype: Var,
    query_features: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    scale_scores: bool,
) -> Result<Var, ModelError> {
    let d = tape.shape(prototype)[1];
    if tape.shape(query_features)[1] != d {
        return Err(ModelError::ShapeMismatch {
            op: "p2q_attention",
            expected: format!("query dim {d}"),
            got: format!("{}", tape.shape(query_features)[1]),
        });
    }
    let q = tape.matmul(prototype, wq);
    let k = tape.matmul(query_features, wk);
    let v = tape.matmul(query_features, wv);
    let kt = tape.t(k);
    let mut scores = tape.matmul(q, kt);
    if scale_scores {
        scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    }
    if !tape.all_finite(scores) {
        return Err(ModelError::NonFinite { op: "p2q_attention" });
    }
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v);
    Ok(tape.add(ctx, prototype))
}

/// Two-layer position-wise network with a residual connection.
pub fn ffn_on(tape: &mut Tape, input: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul(input, w1);
    let h = tape.add(h, b1);
    let h = tape.leaky_relu(h, 0.0);
    let out = tape.matmul(h, w2);
    let out = tape.add(out, b2);
    tape.add(out, input)
}

/// KL distillation between prototype sets: each prototype becomes a
/// channel-softmax distribution at temperature tau; the loss is the mean
/// over prototypes of `KL(student || teacher)`. The teacher is detached
/// unless symmetric flow is requested.
pub fn distillation_loss_on(
    tape: &mut Tape,
    student: &PrototypeVars,
    teacher: &PrototypeVars,
    temperature: f64,
    symmetric: bool,
) -> Result<Var, ModelError> {
    if temperature <= 0.0 {
        return Err(ModelError::BadTemperature(temperature));
    }
    assert_eq!(
        student.rows.len(),
        teacher.rows.len(),
        "student/teacher prototype counts differ"
    );
    let s = student.stacked(tape);
    let t_raw = teacher.stacked(tape);
    let t = if symmetric { t_raw } else { tape.detach(t_raw) };
    let s_scaled = tape.scale(s, 1.0 / temperature);
    let t_scaled = tape.scale(t, 1.0 / temperature);
    let s_log = tape.log_softmax_rows(s_scaled);
    let t_log = tape.log_softmax_rows(t_scaled);
    let s_prob = tape.exp(s_log);
    let diff = tape.sub(s_log, t_log);
    let terms = tape.mul(s_prob, diff);
    let row_kl = tape.sum_axis_keep(terms, 1);
    Ok(tape.mean_all(row_kl))
}

/// Register decoder parameters for the given feature dimension.
pub fn init_params(cfg: &DecoderConfig, d: usize, store: &mut ParamStore, seed: u64) {
    for l in 0..cfg.num_blocks {
        for name in ["wq", "wk", "wv"] {
            store.init_uniform(&format!("decoder/block{l}/p2q/{name}"), &[d, d], d, seed);
        }
        store.init_uniform(
            &format!("decoder/block{l}/ffn/w1"),
            &[d, cfg.ffn_hidden],
            d,
            seed,
        );
        store.init_zeros(&format!("decoder/block{l}/ffn/b1"), &[1, cfg.ffn_hidden]);
        store.init_uniform(
            &format!("decoder/block{l}/ffn/w2"),
            &[cfg.ffn_hidden, d],
            cfg.ffn_hidden,
            seed,
        );
        store.init_zeros(&format!("decoder/block{l}/ffn/b2"), &[1, d]);
    }
}

/// Check that the store holds the decoder tensors this config needs.
pub fn validate_params(
    cfg: &DecoderConfig,
    d: usize,
    store: &ParamStore,
) -> Result<(), ModelError> {
    for l in 0..cfg.num_blocks {
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            (format!("decoder/block{l}/p2q/wq"), vec![d, d]),
            (format!("decoder/block{l}/p2q/wk"), vec![d, d]),
            (format!("decoder/block{l}/p2q/wv"), vec![d, d]),
            (format!("decoder/block{l}/ffn/w1"), vec![d, cfg.ffn_hidden]),
            (format!("decoder/block{l}/ffn/b1"), vec![1, cfg.ffn_hidden]),
            (format!("decoder/block{l}/ffn/w2"), vec![cfg.ffn_hidden, d]),
            (format!("decoder/block{l}/ffn/b2"), vec![1, d]),
        ];
        for (name, shape) in expected.drain(..) {
            if !store.contains(&name) {
                return Err(ModelError::ConfigWeightMismatch {
                    name,
                    reason: "is missing".into(),
                });
            }
            let got = store.get(&name).shape().to_vec();
            if got != shape {
                return Err(ModelError::ConfigWeightMismatch {
                    name,
                    reason: format!("has shape {got:?}, config expects {shape:?}"),
                });
            }
        }
    }
    Ok(())
}

/// Run the full decoder for one target query.
///
/// Block `l` rectifies the incoming set against the class-assigned query
/// features (identity when rectification is off), attends each prototype to
/// the target query's points and applies the FFN (skipped when attention is
/// off), and accumulates the block's distillation loss. When the episode's
/// query count differs from N (meta-test with arbitrary queries), every
/// prototype pairs with the target query's features instead.
pub fn decode_on(
    tape: &mut Tape,
    vanilla: &PrototypeVars,
    features: &EpisodeFeatures,
    target_query: usize,
    cfg: &DecoderConfig,
    bound: &BoundParams,
) -> Result<(PrototypeVars, Var, DecoderTrace), ModelError> {
    cfg.validate()?;
    let n = vanilla.n_way();
    if target_query >= features.queries.len() {
        return Err(ModelError::QueryCountMismatch {
            queries: features.queries.len(),
            n_way: n,
        });
    }
    let class_indexed = features.queries.len() == n;
    let flat = features.flat_support();
    let support_repr = support_set_representation_on(tape, &flat);
    let target = features.queries[target_query];
    let query_mean = if class_indexed {
        Some(tape.mean_of(&features.queries))
    } else {
        None
    };

    let mut current = vanilla.rows.clone();
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    let mut distill_terms = Vec::new();
    for l in 0..cfg.num_blocks {
        let rectified: Vec<Var> = if cfg.rectification {
            let mut rows = Vec::with_capacity(n + 1);
            for (i, &p) in current.iter().enumerate() {
                let assigned = if class_indexed {
                    if i == 0 {
                        query_mean.expect("query mean precomputed")
                    } else {
                        features.queries[i - 1]
                    }
                } else {
                    target
                };
                let a = rectification_matrix_on(tape, assigned, support_repr)?;
                rows.push(rectify_on(tape, p, a));
            }
            rows
        } else {
            current.clone()
        };
        let rect_set = PrototypeVars {
            rows: rectified.clone(),
            stage: PrototypeStage::Rectified,
        };

        let task: Vec<Var> = if cfg.p2q_attention {
            let wq = bound.var(&format!("decoder/block{l}/p2q/wq"));
            let wk = bound.var(&format!("decoder/block{l}/p2q/wk"));
            let wv = bound.var(&format!("decoder/block{l}/p2q/wv"));
            let w1 = bound.var(&format!("decoder/block{l}/ffn/w1"));
            let b1 = bound.var(&format!("decoder/block{l}/ffn/b1"));
            let w2 = bound.var(&format!("decoder/block{l}/ffn/w2"));
            let b2 = bound.var(&format!("decoder/block{l}/ffn/b2"));
            let mut rows = Vec::with_capacity(n + 1);
            for &p in &rectified {
                let attended =
                    p2q_attention_on(tape, p, target, wq, wk, wv, cfg.scale_scores)?;
                rows.push(ffn_on(tape, attended, w1, b1, w2, b2));
            }
            rows
        } else {
            rectified.clone()
        };
        let task_set = PrototypeVars {
            rows: task.clone(),
            stage: PrototypeStage::TaskSpecific,
        };

        if cfg.distillation {
            distill_terms.push(distillation_loss_on(
                tape,
                &rect_set,
                &task_set,
                cfg.distill_temperature,
                cfg.symmetric_distill,
            )?);
        }
        blocks.push(TraceBlock {
            rectified: rect_set.snapshot(tape, PrototypeStage::Rectified),
            task_specific: task_set.snapshot(tape, PrototypeStage::TaskSpecific),
        });
        current = task;
    }

    let distill = if distill_terms.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.mean_of(&distill_terms)
    };
    let trace = DecoderTrace {
        blocks,
        distill_loss: tape.scalar_value(distill),
    };
    Ok((
        PrototypeVars {
            rows: current,
            stage: PrototypeStage::TaskSpecific,
        },
        distill,
        trace,
    ))
}

/// Plain functional form of Eq-style rectification matrix computation.
pub fn rectification_matrix(
    query_features: &Array2<f64>,
    support_repr: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let q = tape.constant(query_features.clone().into_dyn());
    let s = tape.constant(support_repr.clone().into_dyn());
    let a = rectification_matrix_on(&mut tape, q, s)?;
    Ok(tape
        .value(a)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Plain functional rectification of a single prototype.
pub fn rectify(prototype: &Array1<f64>, matrix: &Array2<f64>) -> Array1<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(
        Array2::from_shape_fn((1, prototype.len()), |(_, c)| prototype[c]).into_dyn(),
    );
    let a = tape.constant(matrix.clone().into_dyn());
    let out = rectify_on(&mut tape, p, a);
    Array1::from_iter(tape.value(out).iter().copied())
}

/// Plain functional prototype-to-query attention.
#[allow(clippy::too_many_arguments)]
pub fn p2q_attention(
    prototype: &Array1<f64>,
    query_features: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    scale_scores: bool,
) -> Result<Array1<f64>, ModelError> {
    let mut tape = Tape::new();
    let p = tape.constant(
        Array2::from_shape_fn((1, prototype.len()), |(_, c)| prototype[c]).into_dyn(),
    );
    let f = tape.constant(query_features.clone().into_dyn());
    let q = tape.constant(wq.clone().into_dyn());
    let k = tape.constant(wk.clone().into_dyn());
    let v = tape.constant(wv.clone().into_dyn());
    let out = p2q_attention_on(&mut tape, p, f, q, k, v, scale_scores)?;
    Ok(Array1::from_iter(tape.value(out).iter().copied()))
}

/// Plain functional FFN with residual.
pub fn ffn(
    input: &Array1<f64>,
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
) -> Array1<f64> {
    let mut tape = Tape::new();
    let p =
        tape.constant(Array2::from_shape_fn((1, input.len()), |(_, c)| input[c]).into_dyn());
    let w1 = tape.constant(w1.clone().into_dyn());
    let b1 = tape.constant(b1.clone().into_dyn());
    let w2 = tape.constant(w2.clone().into_dyn());
    let b2 = tape.constant(b2.clone().into_dyn());
    let out = ffn_on(&mut tape, p, w1, b1, w2, b2);
    Array1::from_iter(tape.value(out).iter().copied())
}

/// Plain functional distillation loss between two prototype matrices.
pub fn distillation_loss(
    student: &Array2<f64>,
    teacher: &Array2<f64>,
    temperature: f64,
) -> Result<f64, ModelError> {
    if student.shape() != teacher.shape() {
        return Err(ModelError::ShapeMismatch {
            op: "distillation_loss",
            expected: format!("{:?}", student.shape()),
            got: format!("{:?}", teacher.shape()),
        });
    }
    let mut tape = Tape::new();
    let rows_s: Vec<Var> = (0..student.nrows())
        .map(|r| {
            tape.constant(
                Array2::from_shape_fn((1, student.ncols()), |(_, c)| student[[r, c]]).into_dyn(),
            )
        })
        .collect();
    let rows_t: Vec<Var> = (0..teacher.nrows())
        .map(|r| {
            tape.constant(
                Array2::from_shape_fn((1, teacher.ncols()), |(_, c)| teacher[[r, c]]).into_dyn(),
            )
        })
        .collect();
    let s = PrototypeVars {
        rows: rows_s,
        stage: PrototypeStage::Rectified,
    };
    let t = PrototypeVars {
        rows: rows_t,
        stage: PrototypeStage::TaskSpecific,
    };
    let loss = distillation_loss_on(&mut tape, &s, &t, temperature, false)?;
    Ok(tape.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    fn rand2(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = crate::seeds::rng(&[seed]);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand1(seed: u64, n: usize) -> Array1<f64> {
        let mut rng = crate::seeds::rng(&[seed]);
        Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn support_representation_is_elementwise_mean() {
        let a = rand2(41, 4, 3);
        let b = rand2(42, 4, 3);
        let c = rand2(43, 4, 3);
        let d = rand2(44, 4, 3);
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&a, &b, &c, &d]
            .iter()
            .map(|m| tape.constant((*m).clone().into_dyn()))
            .collect();
        let mean = support_set_representation_on(&mut tape, &vars);
        let expect = (&a + &b + &c + &d) / 4.0;
        let got = tape.value(mean).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!((&got - &expect).mapv(f64::abs).sum() < 1e-12);
        // mean of one is the identity
        let single = support_set_representation_on(&mut tape, &vars[..1].to_vec());
        let got1 = tape.value(single).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert!((&got1 - &a).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn rectification_matrix_d1_is_one() {
        let q = rand2(45, 5, 1);
        let s = rand2(46, 5, 1);
        let a = rectification_matrix(&q, &s).unwrap();
        assert_eq!(a.shape(), &[1, 1]);
        assert!((a[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rectification_matrix_rows_stochastic_and_matches_oracle() {
        let q = rand2(47, 4, 3);
        let s = rand2(48, 4, 3);
        let a = rectification_matrix(&q, &s).unwrap();
        for r in 0..3 {
            let sum: f64 = a.row(r).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(a.row(r).iter().all(|&x| x > 0.0 && x < 1.0));
        }
        // explicit matmul + softmax oracle
        let prod = q.t().dot(&s);
        for r in 0..3 {
            let mx = prod.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = prod.row(r).iter().map(|&x| (x - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..3 {
                assert!((a[[r, c]] - exps[c] / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rectify_d1_doubles() {
        let p = Array1::from_vec(vec![0.37]);
        let a = arr2(&[[1.0]]);
        let out = rectify(&p, &a);
        assert!((out[0] - 0.74).abs() < 1e-12);
    }

    #[test]
    fn rectify_with_identity_doubles_any_d() {
        let p = rand1(49, 4);
        let eye = Array2::from_shape_fn((4, 4), |(r, c)| if r == c { 1.0 } else { 0.0 });
        let out = rectify(&p, &eye);
        assert!((&out - &p.mapv(|x| 2.0 * x)).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn rectify_matches_matrix_vector_oracle() {
        let p = rand1(50, 3);
        let a = rand2(51, 3, 3);
        let out = rectify(&p, &a);
        for j in 0..3 {
            let mut expect = p[j];
            for m in 0..3 {
                expect += a[[j, m]] * p[m];
            }
            assert!((out[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn assign_query_mean_and_indexing() {
        let q1 = rand2(52, 4, 2);
        let q2 = rand2(53, 4, 2);
        let mut tape = Tape::new();
        let v1 = tape.constant(q1.clone().into_dyn());
        let v2 = tape.constant(q2.clone().into_dyn());
        let f0 = assign_query_to_prototype(&mut tape, &[v1, v2], 2, 0).unwrap();
        let got = tape.value(f0).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let expect = (&q1 + &q2) / 2.0;
        assert!((&got - &expect).mapv(f64::abs).sum() < 1e-12);
        let f2 = assign_query_to_prototype(&mut tape, &[v1, v2], 2, 2).unwrap();
        assert_eq!(f2, v2);
        let err = assign_query_to_prototype(&mut tape, &[v1], 2, 1).unwrap_err();
        assert!(matches!(err, ModelError::QueryCountMismatch { .. }));
    }

    #[test]
    fn p2q_single_key_is_value_plus_residual() {
        let p = rand1(54, 3);
        let f = rand2(55, 1, 3);
        let wq = rand2(56, 3, 3);
        let wk = rand2(57, 3, 3);
        let wv = rand2(58, 3, 3);
        let out = p2q_attention(&p, &f, &wq, &wk, &wv, true).unwrap();
        let v = f.dot(&wv);
        for c in 0..3 {
            assert!((out[c] - (v[[0, c]] + p[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn p2q_identical_rows_degenerate_convexity() {
        let p = rand1(59, 3);
        let row = rand1(60, 3);
        let f = Array2::from_shape_fn((5, 3), |(_, c)| row[c]);
        let wq = rand2(61, 3, 3);
        let wk = rand2(62, 3, 3);
        let wv = rand2(63, 3, 3);
        let out = p2q_attention(&p, &f, &wq, &wk, &wv, true).unwrap();
        let v_row = f.row(0).dot(&wv);
        for c in 0..3 {
            assert!((out[c] - (v_row[c] + p[c])).abs() < 1e-9);
        }
    }

    #[test]
    fn p2q_matches_dense_reference() {
        let p = rand1(64, 2);
        let f = rand2(65, 4, 2);
        let wq = rand2(66, 2, 2);
        let wk = rand2(67, 2, 2);
        let wv = rand2(68, 2, 2);
        for &scaled in &[true, false] {
            let out = p2q_attention(&p, &f, &wq, &wk, &wv, scaled).unwrap();
            let q = Array2::from_shape_fn((1, 2), |(_, c)| p[c]).dot(&wq);
            let k = f.dot(&wk);
            let v = f.dot(&wv);
            let mut scores: Vec<f64> = (0..4).map(|t| q.row(0).dot(&k.row(t))).collect();
            if scaled {
                scores.iter_mut().for_each(|s| *s /= (2.0f64).sqrt());
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..2 {
                let mut expect = p[c];
                for t in 0..4 {
                    expect += exps[t] / total * v[[t, c]];
                }
                assert!((out[c] - expect).abs() < 1e-9, "scaled={scaled}");
            }
        }
    }

    #[test]
    fn ffn_zero_weights_is_pure_residual() {
        let p = rand1(69, 4);
        let w1 = Array2::zeros((4, 3));
        let b1 = Array2::zeros((1, 3));
        let w2 = Array2::zeros((3, 4));
        let b2 = Array2::zeros((1, 4));
        let out = ffn(&p, &w1, &b1, &w2, &b2);
        assert!((&out - &p).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn ffn_matches_loop_oracle() {
        let p = rand1(70, 2);
        let w1 = rand2(71, 2, 3);
        let b1 = rand2(72, 1, 3);
        let w2 = rand2(73, 3, 2);
        let b2 = rand2(74, 1, 2);
        let out = ffn(&p, &w1, &b1, &w2, &b2);
        let mut hidden = [0.0; 3];
        for h in 0..3 {
            let mut pre = b1[[0, h]];
            for c in 0..2 {
                pre += p[c] * w1[[c, h]];
            }
            hidden[h] = pre.max(0.0);
        }
        for c in 0..2 {
            let mut expect = b2[[0, c]] + p[c];
            for h in 0..3 {
                expect += hidden[h] * w2[[h, c]];
            }
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn distillation_zero_at_identity_and_nonnegative() {
        let x = rand2(75, 3, 4);
        assert!(distillation_loss(&x, &x, 1.0).unwrap().abs() < 1e-12);
        for seed in 0..20 {
            let a = rand2(100 + seed, 3, 4);
            let b = rand2(200 + seed, 3, 4);
            assert!(distillation_loss(&a, &b, 0.7).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn distillation_matches_direct_kl_oracle() {
        let s = rand2(76, 2, 3);
        let t = rand2(77, 2, 3);
        let tau = 1.3;
        let loss = distillation_loss(&s, &t, tau).unwrap();
        let softmax = |row: Vec<f64>| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| ((x - mx) / 1.0).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let mut expect = 0.0;
        for r in 0..2 {
            let sp = softmax(s.row(r).iter().map(|&x| x / tau).collect());
            let tp = softmax(t.row(r).iter().map(|&x| x / tau).collect());
            for c in 0..3 {
                expect += sp[c] * (sp[c] / tp[c]).ln();
            }
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn bad_temperature_rejected() {
        let x = rand2(78, 2, 2);
        assert!(matches!(
            distillation_loss(&x, &x, 0.0),
            Err(ModelError::BadTemperature(_))
        ));
    }

    #[test]
    fn distillation_detaches_teacher_by_default() {
        let mut tape = Tape::new();
        let s_leaf = tape.leaf(rand2(79, 1, 3).into_dyn());
        let t_leaf = tape.leaf(rand2(80, 1, 3).into_dyn());
        let student = PrototypeVars {
            rows: vec![s_leaf],
            stage: PrototypeStage::Rectified,
        };
        let teacher = PrototypeVars {
            rows: vec![t_leaf],
            stage: PrototypeStage::TaskSpecific,
        };
        let loss = distillation_loss_on(&mut tape, &student, &teacher, 1.0, false).unwrap();
        let grads = tape.backward(loss);
        assert!(grads.get(s_leaf).is_some());
        assert!(grads.get(t_leaf).is_none(), "teacher must be detached");

        let loss_sym = distillation_loss_on(&mut tape, &student, &teacher, 1.0, true).unwrap();
        let grads_sym = tape.backward(loss_sym);
        assert!(grads_sym.get(t_leaf).is_some(), "symmetric flag flows to teacher");
    }
}
