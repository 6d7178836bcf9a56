//! Vanilla prototype construction: per-class masked average pooling over
//! support features plus the pooled background prototype.
//!
//! Shots whose mask selects nothing are excluded from the outer average
//! (the inner ratio would be 0/0); if every shot is empty that is an error,
//! surfaced back to the episode sampler's eligibility rule.

use crate::autodiff::{Arr, Tape, Var};
use crate::data::BinaryMask;
use crate::error::ModelError;
use ndarray::{Array1, Array2, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeStage {
    Vanilla,
    Rectified,
    TaskSpecific,
}

/// `(N+1) x d` prototype matrix; row 0 is the background prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Array2<f64>,
    pub stage: PrototypeStage,
}

impl PrototypeSet {
    pub fn n_way(&self) -> usize {
        self.vectors.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Tape-resident prototype set: one `1 x d` node per prototype.
#[derive(Debug, Clone)]
pub struct PrototypeVars {
    pub rows: Vec<Var>,
    pub stage: PrototypeStage,
}

impl PrototypeVars {
    pub fn n_way(&self) -> usize {
        self.rows.len() - 1
    }

    /// Stack the rows into one `(N+1) x d` node.
    pub fn stacked(&self, tape: &mut Tape) -> Var {
        tape.concat_rows(&self.rows)
    }

    /// Snapshot current values into a plain set.
    pub fn snapshot(&self, tape: &Tape, stage: PrototypeStage) -> PrototypeSet {
        let d = tape.shape(self.rows[0])[1];
        let mut vectors = Array2::<f64>::zeros((self.rows.len(), d));
        for (r, &v) in self.rows.iter().enumerate() {
            let val = tape.value(v);
            for c in 0..d {
                vectors[[r, c]] = val[[0, c]];
            }
        }
        PrototypeSet { vectors, stage }
    }
}

fn mask_column(mask: &BinaryMask) -> Arr {
    Arr::from_shape_fn(IxDyn(&[mask.len(), 1]), |ix| mask.values[ix[0]] as f64)
}

/// Masked average pooling for one class over its K support shots.
/// `features[k]` is the `T x d` encoding of shot `k`; `masks[k]` marks that
/// shot's class points.
pub fn class_prototype_on(
    tape: &mut Tape,
    features: &[Var],
    masks: &[&BinaryMask],
) -> Result<Var, ModelError> {
    assert_eq!(features.len(), masks.len(), "features/masks shot count");
    let mut shot_means = Vec::new();
    for (&f, m) in features.iter().zip(masks) {
        let t = tape.shape(f)[0];
        if m.len() != t {
            return Err(ModelError::ShapeMismatch {
                op: "class_prototype",
                expected: format!("mask length {t}"),
                got: format!("{}", m.len()),
            });
        }
        let count = m.ones_count();
        if count == 0 {
            continue;
        }
        let col = tape.constant(mask_column(m));
        let masked = tape.mul(f, col);
        let summed = tape.sum_axis_keep(masked, 0); // 1 x d
        shot_means.push(tape.scale(summed, 1.0 / count as f64));
    }
    if shot_means.is_empty() {
        return Err(ModelError::EmptyPrototype {
            class: 0,
            shots: features.len(),
        });
    }
    Ok(tape.mean_of(&shot_means))
}

/// Background prototype over all N*K shots: per shot, average the features
/// at mask-0 positions, then average across shots with nonempty background.
pub fn background_prototype_on(
    tape: &mut Tape,
    all_features: &[Vec<Var>],
    all_masks: &[Vec<&BinaryMask>],
) -> Result<Var, ModelError> {
    let mut shot_means = Vec::new();
    let mut shots = 0;
    for (feats, masks) in all_features.iter().zip(all_masks) {
        for (&f, m) in feats.iter().zip(masks) {
            shots += 1;
            let t = tape.shape(f)[0];
            assert_eq!(m.len(), t, "background mask length");
            let zeros = t - m.ones_count();
            if zeros == 0 {
                continue;
            }
            let inverted = BinaryMask::new(m.values.mapv(|v| 1 - v));
            let col = tape.constant(mask_column(&inverted));
            let masked = tape.mul(f, col);
            let summed = tape.sum_axis_keep(masked, 0); // 1 x d
            shot_means.push(tape.scale(summed, 1.0 / zeros as f64));
        }
    }
    if shot_means.is_empty() {
        return Err(ModelError::NoBackgroundPoints { shots });
    }
    Ok(tape.mean_of(&shot_means))
}

/// Assemble the vanilla prototype set: row 0 background, rows 1..=N classes.
pub fn build_prototype_set_on(
    tape: &mut Tape,
    support_features: &[Vec<Var>],
    support_masks: &[Vec<&BinaryMask>],
) -> Result<PrototypeVars, ModelError> {
    let n = support_features.len();
    assert!(n >= 1, "at least one class required");
    let background = background_prototype_on(tape, support_features, support_masks)?;
    let mut rows = vec![background];
    for (ci, (feats, masks)) in support_features.iter().zip(support_masks).enumerate() {
        let proto = class_prototype_on(tape, feats, masks).map_err(|e| match e {
            ModelError::EmptyPrototype { shots, .. } => ModelError::EmptyPrototype {
                class: ci + 1,
                shots,
            },
            other => other,
        })?;
        rows.push(proto);
    }
    Ok(PrototypeVars {
        rows,
        stage: PrototypeStage::Vanilla,
    })
}

fn to_row_vec(tape: &Tape, v: Var) -> Array1<f64> {
    let val = tape.value(v);
    Array1::from_iter(val.iter().copied())
}

/// Plain functional form of [`class_prototype_on`].
pub fn class_prototype(
    features: &[Array2<f64>],
    masks: &[BinaryMask],
) -> Result<Array1<f64>, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = features
        .iter()
        .map(|f| tape.constant(f.clone().into_dyn()))
        .collect();
    let mask_refs: Vec<&BinaryMask> = masks.iter().collect();
    let out = class_prototype_on(&mut tape, &vars, &mask_refs)?;
    Ok(to_row_vec(&tape, out))
}

/// Plain functional form of [`background_prototype_on`].
pub fn background_prototype(
    features: &[Vec<Array2<f64>>],
    masks: &[Vec<BinaryMask>],
) -> Result<Array1<f64>, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = features
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|f| tape.constant(f.clone().into_dyn()))
                .collect()
        })
        .collect();
    let mask_refs: Vec<Vec<&BinaryMask>> = masks
        .iter()
        .map(|class| class.iter().collect())
        .collect();
    let out = background_prototype_on(&mut tape, &vars, &mask_refs)?;
    Ok(to_row_vec(&tape, out))
}

/// Plain functional form of [`build_prototype_set_on`].
pub fn build_prototype_set(
    features: &[Vec<Array2<f64>>],
    masks: &[Vec<BinaryMask>],
) -> Result<PrototypeSet, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = features
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|f| tape.constant(f.clone().into_dyn()))
                .collect()
        })
        .collect();
    let mask_refs: Vec<Vec<&BinaryMask>> = masks
        .iter()
        .map(|class| class.iter().collect())
        .collect();
    let set = build_prototype_set_on(&mut tape, &vars, &mask_refs)?;
    Ok(set.snapshot(&tape, PrototypeStage::Vanilla))
}
