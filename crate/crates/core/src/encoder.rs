//! Per-point feature extraction: k-NN graph construction, an EdgeConv stack,
//! and a single-head self-attention layer producing `T x d` features.
//!
//! On the support path the binary mask zeroes the whole input row (coords
//! and extras) before anything else runs, so the graph and all downstream
//! features see the masked input.

use crate::autodiff::{Tape, Var};
use crate::data::{BinaryMask, LabeledPointCloud};
use crate::error::ModelError;
use crate::params::{BoundParams, ParamStore};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub k_neighbors: usize,
    pub edgeconv_channels: Vec<usize>,
    pub attention_dim: usize,
    pub output_dim: usize,
    /// Negative-side slope of the leaky rectifier.
    pub leaky_slope: f64,
    /// Recompute the neighbor graph in feature space for layers after the
    /// first (coordinate-space otherwise).
    pub feature_knn: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            edgeconv_channels: vec![32, 64, 64],
            attention_dim: 64,
            output_dim: 64,
            leaky_slope: 0.2,
            feature_knn: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.edgeconv_channels.is_empty() || self.edgeconv_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::BadConfig(
                "edgeconv_channels must be non-empty and positive".into(),
            ));
        }
        if self.attention_dim == 0 || self.output_dim == 0 || self.k_neighbors == 0 {
            return Err(ModelError::BadConfig(
                "encoder dims and k_neighbors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `T x d` per-point embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, ModelError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { op: "feature matrix" });
        }
        Ok(Self { values })
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Row `i` holds the `k` nearest points to point `i` by Euclidean distance,
/// excluding `i` itself, ties broken by lower index. Works on any row
/// dimensionality (coordinates or feature space).
pub fn knn_graph(points: &Array2<f64>, k: usize) -> Result<Array2<usize>, ModelError> {
    let t = points.nrows();
    if k >= t {
        return Err(ModelError::KTooLarge { k, t });
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite { op: "knn_graph" });
    }
    let mut out = Array2::<usize>::zeros((t, k));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(t - 1);
    for i in 0..t {
        cand.clear();
        let pi = points.row(i);
        for j in 0..t {
            if j == i {
                continue;
            }
            let mut d2 = 0.0;
            for (a, b) in pi.iter().zip(points.row(j)) {
                let diff = a - b;
                d2 += diff * diff;
            }
            cand.push((d2, j));
        }
        let by_dist_then_index =
            |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, by_dist_then_index);
        cand[..k].sort_unstable_by(by_dist_then_index);
        for (c, &(_, j)) in cand[..k].iter().enumerate() {
            out[[i, c]] = j;
        }
    }
    Ok(out)
}

/// One EdgeConv: per edge `(i, j)` form `concat(x_i, x_j - x_i)`, apply a
/// shared linear map and the leaky rectifier, then max-pool over each
/// point's `k` neighbors.
pub fn edge_conv_on(
    tape: &mut Tape,
    features: Var,
    neighbors: &Array2<usize>,
    weight: Var,
    bias: Var,
    slope: f64,
) -> Result<Var, ModelError> {
    let (t, c_in) = {
        let s = tape.shape(features);
        (s[0], s[1])
    };
    let w_shape = tape.shape(weight).to_vec();
    if w_shape[0] != 2 * c_in {
        return Err(ModelError::ShapeMismatch {
            op: "edge_conv",
            expected: format!("weight rows = {}", 2 * c_in),
            got: format!("{}", w_shape[0]),
        });
    }
    if neighbors.nrows() != t {
        return Err(ModelError::ShapeMismatch {
            op: "edge_conv",
            expected: format!("neighbors rows = {t}"),
            got: format!("{}", neighbors.nrows()),
        });
    }
    let k = neighbors.ncols();
    let mut idx_center = Vec::with_capacity(t * k);
    let mut idx_nbr = Vec::with_capacity(t * k);
    for i in 0..t {
        for c in 0..k {
            idx_center.push(i);
            idx_nbr.push(neighbors[[i, c]]);
        }
    }
    let xi = tape.gather_rows(features, idx_center);
    let xj = tape.gather_rows(features, idx_nbr);
    let diff = tape.sub(xj, xi);
    let edges = tape.concat_cols(xi, diff);
    let lin = tape.matmul(edges, weight);
    let lin = tape.add(lin, bias);
    let act = tape.leaky_relu(lin, slope);
    Ok(tape.group_max(act, k))
}

/// Single-head scaled dot-product self-attention with a residual
/// connection: `out = softmax(QK^T / sqrt(d)) V + x`.
pub fn self_attention_on(
    tape: &mut Tape,
    features: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var, ModelError> {
    let d = tape.shape(features)[1];
    if tape.shape(wq)[0] != d || tape.shape(wk)[0] != d || tape.shape(wv)[0] != d {
        return Err(ModelError::ShapeMismatch {
            op: "self_attention",
            expected: format!("weight rows = {d}"),
            got: "mismatched q/k/v".into(),
        });
    }
    let q = tape.matmul(features, wq);
    let k = tape.matmul(features, wk);
    let v = tape.matmul(features, wv);
    let kt = tape.t(k);
    let raw = tape.matmul(q, kt);
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    if !tape.all_finite(scores) {
        return Err(ModelError::NonFinite { op: "self_attention" });
    }
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v);
    let out = tape.add(ctx, features);
    if !tape.all_finite(out) {
        return Err(ModelError::NonFinite { op: "self_attention" });
    }
    Ok(out)
}

/// Register encoder parameters (uniform fan-in init) for the given config.
pub fn init_params(cfg: &EncoderConfig, extra_dim: usize, store: &mut ParamStore, seed: u64) {
    let mut c_in = 3 + extra_dim;
    for (i, &c_out) in cfg.edgeconv_channels.iter().enumerate() {
        store.init_uniform(
            &format!("encoder/edgeconv{i}/weight"),
            &[2 * c_in, c_out],
            2 * c_in,
            seed,
        );
        store.init_zeros(&format!("encoder/edgeconv{i}/bias"), &[1, c_out]);
        c_in = c_out;
    }
    store.init_uniform("encoder/proj/weight", &[c_in, cfg.output_dim], c_in, seed);
    store.init_zeros("encoder/proj/bias", &[1, cfg.output_dim]);
    let d = cfg.output_dim;
    store.init_uniform("encoder/attn/wq", &[d, cfg.attention_dim], d, seed);
    store.init_uniform("encoder/attn/wk", &[d, cfg.attention_dim], d, seed);
    store.init_uniform("encoder/attn/wv", &[d, d], d, seed);
}

/// Check that the store holds exactly the encoder tensors this config needs.
pub fn validate_params(
    cfg: &EncoderConfig,
    extra_dim: usize,
    store: &ParamStore,
) -> Result<(), ModelError> {
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    let mut c_in = 3 + extra_dim;
    for (i, &c_out) in cfg.edgeconv_channels.iter().enumerate() {
        expected.push((format!("encoder/edgeconv{i}/weight"), vec![2 * c_in, c_out]));
        expected.push((format!("encoder/edgeconv{i}/bias"), vec![1, c_out]));
        c_in = c_out;
    }
    expected.push(("encoder/proj/weight".into(), vec![c_in, cfg.output_dim]));
    expected.push(("encoder/proj/bias".into(), vec![1, cfg.output_dim]));
    let d = cfg.output_dim;
    expected.push(("encoder/attn/wq".into(), vec![d, cfg.attention_dim]));
    expected.push(("encoder/attn/wk".into(), vec![d, cfg.attention_dim]));
    expected.push(("encoder/attn/wv".into(), vec![d, d]));
    for (name, shape) in expected {
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
    Ok(())
}

/// Assemble the `T x (3 + f0)` input, zeroing whole rows where the mask is 0.
fn assemble_input(cloud: &LabeledPointCloud, mask: Option<&BinaryMask>) -> Array2<f64> {
    let t = cloud.len();
    let f0 = cloud.extra_dim();
    let mut input = Array2::<f64>::zeros((t, 3 + f0));
    for r in 0..t {
        let keep = mask.map_or(true, |m| m.values[r] == 1);
        if !keep {
            continue;
        }
        for c in 0..3 {
            input[[r, c]] = cloud.coords[[r, c]] as f64;
        }
        for c in 0..f0 {
            input[[r, 3 + c]] = cloud.extras[[r, c]] as f64;
        }
    }
    input
}

/// Differentiable encoder forward pass on an existing tape.
pub fn encode_on(
    tape: &mut Tape,
    cloud: &LabeledPointCloud,
    mask: Option<&BinaryMask>,
    cfg: &EncoderConfig,
    bound: &BoundParams,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let t = cloud.len();
    if cfg.k_neighbors >= t {
        return Err(ModelError::KTooLarge {
            k: cfg.k_neighbors,
            t,
        });
    }
    if let Some(m) = mask {
        if m.len() != t {
            return Err(ModelError::ShapeMismatch {
                op: "encode",
                expected: format!("mask length {t}"),
                got: format!("{}", m.len()),
            });
        }
    }
    let input = assemble_input(cloud, mask);
    let coords = input.slice(ndarray::s![.., ..3]).to_owned();
    let mut neighbors = knn_graph(&coords, cfg.k_neighbors)?;
    let mut h = tape.constant(input.into_dyn());
    for (i, _) in cfg.edgeconv_channels.iter().enumerate() {
        if cfg.feature_knn && i > 0 {
            let current = tape
                .value(h)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("edgeconv output is 2-d");
            neighbors = knn_graph(&current, cfg.k_neighbors)?;
        }
        let w = bound.var(&format!("encoder/edgeconv{i}/weight"));
        let b = bound.var(&format!("encoder/edgeconv{i}/bias"));
        h = edge_conv_on(tape, h, &neighbors, w, b, cfg.leaky_slope)?;
    }
    let pw = bound.var("encoder/proj/weight");
    let pb = bound.var("encoder/proj/bias");
    let lin = tape.matmul(h, pw);
    let lin = tape.add(lin, pb);
    let semantic = tape.leaky_relu(lin, cfg.leaky_slope);
    self_attention_on(
        tape,
        semantic,
        bound.var("encoder/attn/wq"),
        bound.var("encoder/attn/wk"),
        bound.var("encoder/attn/wv"),
    )
}

/// Inference entry point: encode one cloud with the stored weights.
pub fn encode(
    cloud: &LabeledPointCloud,
    mask: Option<&BinaryMask>,
    cfg: &EncoderConfig,
    store: &ParamStore,
) -> Result<FeatureMatrix, ModelError> {
    validate_params(cfg, cloud.extra_dim(), store)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, store);
    let out = encode_on(&mut tape, cloud, mask, cfg, &bound)?;
    let values = tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("encoder output is 2-d");
    FeatureMatrix::new(values)
}

/// Plain functional form of one EdgeConv, for callers outside a training
/// tape (tests, probes).
pub fn edge_conv(
    features: &Array2<f64>,
    neighbors: &Array2<usize>,
    weight: &Array2<f64>,
    bias: &Array2<f64>,
    slope: f64,
) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().into_dyn());
    let w = tape.constant(weight.clone().into_dyn());
    let b = tape.constant(bias.clone().into_dyn());
    let out = edge_conv_on(&mut tape, f, neighbors, w, b, slope)?;
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Plain functional form of the self-attention head.
pub fn self_attention(
    features: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone().into_dyn());
    let q = tape.constant(wq.clone().into_dyn());
    let k = tape.constant(wk.clone().into_dyn());
    let v = tape.constant(wv.clone().into_dyn());
    let out = self_attention_on(&mut tape, f, q, k, v)?;
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}
