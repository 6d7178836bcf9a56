//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! Every forward operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Values are computed eagerly; [`Tape::backward`] replays the tape in
//! reverse to accumulate gradients for any scalar output. Shape misuse is a
//! programming error and panics; contract-level failures (non-finite scores,
//! empty masks) are checked by the callers that own those contracts.

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn};

/// Dynamically shaped dense array of `f64`.
pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tape, &Arr) -> Vec<(Var, Arr)>>;

struct Node {
    value: Arr,
    back: Option<BackwardFn>,
    needs_grad: bool,
}

/// Append-only computation record. Nodes are topologically ordered by
/// construction, so one reverse sweep propagates all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

/// NumPy-style broadcast of two shapes (right-aligned).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` back down to `target` shape (inverse of broadcasting).
fn unbroadcast(mut grad: Arr, target: &[usize]) -> Arr {
    while grad.ndim() > target.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && grad.shape()[ax] != 1 {
            grad = grad.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    grad
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d array")
}

type Arr2Pair = (Arr, Arr);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// True if every entry of the node value is finite.
    pub fn all_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    fn push(&mut self, value: Arr, needs_grad: bool, back: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            back: if needs_grad { back } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: gradients are not propagated past it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable leaf (a parameter tensor).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, true, None)
    }

    /// Scalar constant of shape `[1]`.
    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[1]), x))
    }

    /// Cut the gradient flow: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Arr,
        back: impl Fn(&Tape, &Arr) -> Vec<(Var, Arr)> + 'static,
    ) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Some(Box::new(back)))
    }

    fn unary(
        &mut self,
        a: Var,
        value: Arr,
        back: impl Fn(&Tape, &Arr) -> Vec<(Var, Arr)> + 'static,
    ) -> Var {
        let needs = self.needs(a);
        self.push(value, needs, Some(Box::new(back)))
    }

    fn broadcast_values(&self, a: Var, b: Var) -> Arr2Pair {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let va = self.value(a);
        let vb = self.value(b);
        let ba = va
            .broadcast(IxDyn(&shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", va.shape()))
            .to_owned();
        let bb = vb
            .broadcast(IxDyn(&shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", vb.shape()))
            .to_owned();
        (ba, bb)
    }

    /// Element-wise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = self.broadcast_values(a, b);
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        self.binary(a, b, ba + bb, move |_t, g| {
            vec![
                (a, unbroadcast(g.clone(), &sa)),
                (b, unbroadcast(g.clone(), &sb)),
            ]
        })
    }

    /// Element-wise `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = self.broadcast_values(a, b);
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        self.binary(a, b, ba - bb, move |_t, g| {
            vec![
                (a, unbroadcast(g.clone(), &sa)),
                (b, unbroadcast(-g.clone(), &sb)),
            ]
        })
    }

    /// Element-wise `a * b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = self.broadcast_values(a, b);
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let value = &ba * &bb;
        self.binary(a, b, value, move |_t, g| {
            vec![
                (a, unbroadcast(g * &bb, &sa)),
                (b, unbroadcast(g * &ba, &sb)),
            ]
        })
    }

    /// Element-wise `a / b` with broadcasting.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ba, bb) = self.broadcast_values(a, b);
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let value = &ba / &bb;
        self.binary(a, b, value, move |_t, g| {
            let da = g / &bb;
            let db = -(g * &ba) / (&bb * &bb);
            vec![(a, unbroadcast(da, &sa)), (b, unbroadcast(db, &sb))]
        })
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dimensions differ: {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let value = va.dot(&vb).into_dyn();
        self.binary(a, b, value, move |t, g| {
            let g2 = as2(g);
            let va = as2(t.value(a));
            let vb = as2(t.value(b));
            let da = g2.dot(&vb.t()).into_dyn();
            let db = va.t().dot(&g2).into_dyn();
            vec![(a, da), (b, db)]
        })
    }

    /// 2-d transpose.
    pub fn t(&mut self, a: Var) -> Var {
        let value = as2(self.value(a)).t().to_owned().into_dyn();
        self.unary(a, value, move |_t, g| {
            vec![(a, as2(g).t().to_owned().into_dyn())]
        })
    }

    /// Gather rows of a 2-d array: `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = as2(self.value(a));
        let (rows, cols) = (va.nrows(), va.ncols());
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < rows, "gather index {i} out of range {rows}");
            out.row_mut(r).assign(&va.row(i));
        }
        self.unary(a, out.into_dyn(), move |_t, g| {
            let g2 = as2(g);
            let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = da.row_mut(i);
                row += &g2.row(r);
            }
            vec![(a, da.into_dyn())]
        })
    }

    /// Concatenate two 2-d arrays along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        let ca = va.ncols();
        let value = concatenate(Axis(1), &[va, vb]).expect("concat_cols shape mismatch");
        self.binary(a, b, value.into_dyn(), move |_t, g| {
            let g2 = as2(g);
            let da = g2.slice(ndarray::s![.., ..ca]).to_owned().into_dyn();
            let db = g2.slice(ndarray::s![.., ca..]).to_owned().into_dyn();
            vec![(a, da), (b, db)]
        })
    }

    /// Concatenate 2-d arrays along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let counts: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let parts: Vec<Var> = parts.to_vec();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            value.into_dyn(),
            needs,
            Some(Box::new(move |_t, g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(parts.len());
                let mut r0 = 0;
                for (&p, &n) in parts.iter().zip(&counts) {
                    out.push((p, g2.slice(ndarray::s![r0..r0 + n, ..]).to_owned().into_dyn()));
                    r0 += n;
                }
                out
            })),
        )
    }

    /// Leaky rectifier with the given negative-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.unary(a, value, move |t, g| {
            let mask = t.value(a).mapv(|x| if x >= 0.0 { 1.0 } else { slope });
            vec![(a, g * &mask)]
        })
    }

    /// Max over groups of `group` consecutive rows. Input `(m*group) x c`,
    /// output `m x c`. Ties resolve to the earliest row.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let va = as2(self.value(a));
        let (rows, cols) = (va.nrows(), va.ncols());
        assert!(group >= 1 && rows % group == 0, "group_max: bad grouping");
        let m = rows / group;
        let mut out = ndarray::Array2::<f64>::zeros((m, cols));
        let mut winners = vec![0usize; m * cols];
        for gi in 0..m {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = gi * group;
                for r in gi * group..(gi + 1) * group {
                    if va[[r, c]] > best {
                        best = va[[r, c]];
                        best_r = r;
                    }
                }
                out[[gi, c]] = best;
                winners[gi * cols + c] = best_r;
            }
        }
        self.unary(a, out.into_dyn(), move |_t, g| {
            let g2 = as2(g);
            let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
            for gi in 0..m {
                for c in 0..cols {
                    da[[winners[gi * cols + c], c]] += g2[[gi, c]];
                }
            }
            vec![(a, da.into_dyn())]
        })
    }

    /// Row-wise softmax of a 2-d array (numerically stabilized).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let mut out = va.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let out_id = Var(self.nodes.len());
        self.unary(a, out.into_dyn(), move |t, g| {
            let s = as2(t.value(out_id));
            let g2 = as2(g);
            let mut da = ndarray::Array2::<f64>::zeros(s.raw_dim());
            for r in 0..s.nrows() {
                let dot: f64 = g2.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                for c in 0..s.ncols() {
                    da[[r, c]] = (g2[[r, c]] - dot) * s[[r, c]];
                }
            }
            vec![(a, da.into_dyn())]
        })
    }

    /// Row-wise log-softmax of a 2-d array.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = as2(self.value(a));
        let mut out = va.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            row.mapv_inplace(|x| x - lse);
        }
        let out_id = Var(self.nodes.len());
        self.unary(a, out.into_dyn(), move |t, g| {
            let lsm = as2(t.value(out_id));
            let g2 = as2(g);
            let mut da = ndarray::Array2::<f64>::zeros(lsm.raw_dim());
            for r in 0..lsm.nrows() {
                let gsum: f64 = g2.row(r).sum();
                for c in 0..lsm.ncols() {
                    da[[r, c]] = g2[[r, c]] - lsm[[r, c]].exp() * gsum;
                }
            }
            vec![(a, da.into_dyn())]
        })
    }

    /// Sum over one axis, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let sa = self.shape(a).to_vec();
        self.unary(a, value, move |_t, g| {
            let da = g
                .broadcast(IxDyn(&sa))
                .expect("sum_axis_keep backward broadcast")
                .to_owned();
            vec![(a, da)]
        })
    }

    /// Sum of all entries, as a `[1]` array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let sa = self.shape(a).to_vec();
        self.unary(a, Arr::from_elem(IxDyn(&[1]), s), move |_t, g| {
            vec![(a, Arr::from_elem(IxDyn(&sa), g[[0]]))]
        })
    }

    /// Mean of all entries, as a `[1]` array.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, value, move |_t, g| vec![(a, g * c)])
    }

    /// Add a constant to every entry.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.unary(a, value, move |_t, g| vec![(a, g.clone())])
    }

    /// Element-wise square root.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let out_id = Var(self.nodes.len());
        self.unary(a, value, move |t, g| {
            let s = t.value(out_id);
            vec![(a, g * &s.mapv(|x| 0.5 / x))]
        })
    }

    /// Element-wise exponential.
    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let out_id = Var(self.nodes.len());
        self.unary(a, value, move |t, g| {
            vec![(a, g * t.value(out_id))]
        })
    }

    /// Element-wise `ln(max(x, eps))`; gradient is zero in the clamped region.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(eps).ln());
        self.unary(a, value, move |t, g| {
            let d = t.value(a).mapv(|x| if x > eps { 1.0 / x } else { 0.0 });
            vec![(a, g * &d)]
        })
    }

    /// Element-wise `max(x, c)`; gradient passes where `x >= c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(c));
        self.unary(a, value, move |t, g| {
            let d = t.value(a).mapv(|x| if x >= c { 1.0 } else { 0.0 });
            vec![(a, g * &d)]
        })
    }

    /// Pick one column per row of a 2-d array: `out[r, 0] = a[r, idx[r]]`.
    pub fn select_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = as2(self.value(a));
        let (rows, cols) = (va.nrows(), va.ncols());
        assert_eq!(idx.len(), rows, "select_per_row index length");
        let mut out = ndarray::Array2::<f64>::zeros((rows, 1));
        for (r, &c) in idx.iter().enumerate() {
            assert!(c < cols, "select_per_row column {c} out of range {cols}");
            out[[r, 0]] = va[[r, c]];
        }
        self.unary(a, out.into_dyn(), move |_t, g| {
            let g2 = as2(g);
            let mut da = ndarray::Array2::<f64>::zeros((rows, cols));
            for (r, &c) in idx.iter().enumerate() {
                da[[r, c]] = g2[[r, 0]];
            }
            vec![(a, da.into_dyn())]
        })
    }

    /// Mean of several same-shaped nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean_of nothing");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// Reverse sweep from a single-element root. Returns gradients for every
    /// node that needed them.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a single-element node"
        );
        let mut by_node: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        let root_shape = self.shape(root).to_vec();
        by_node[root.0] = Some(Arr::from_elem(IxDyn(&root_shape), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = by_node[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                for (parent, contrib) in back(self, &g) {
                    if !self.nodes[parent.0].needs_grad {
                        continue;
                    }
                    match &mut by_node[parent.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            by_node[i] = Some(g);
        }
        Grads { by_node }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut StdRng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar function of one array input.
    fn fd_grad(f: &dyn Fn(&Arr) -> f64, x: &Arr, step: f64) -> Arr {
        let mut g = Arr::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[&idx];
            xp[&idx] = orig + step;
            let fp = f(&xp);
            xp[&idx] = orig - step;
            let fm = f(&xp);
            xp[&idx] = orig;
            g[&idx] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn check_op(build: impl Fn(&mut Tape, Var) -> Var, x: &Arr, tol: f64) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = build(&mut tape, v);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let analytic = grads.get(v).expect("missing gradient").clone();

        let numeric = fd_grad(
            &|xx: &Arr| {
                let mut t = Tape::new();
                let v = t.leaf(xx.clone());
                let y = build(&mut t, v);
                let l = t.sum_all(y);
                t.scalar_value(l)
            },
            x,
            1e-6,
        );
        let num = (&analytic - &numeric).mapv(f64::abs).sum();
        let den = analytic.mapv(f64::abs).sum().max(numeric.mapv(f64::abs).sum()).max(1e-12);
        assert!(
            num / den < tol,
            "gradient mismatch: rel {} \nanalytic {analytic:?}\nnumeric {numeric:?}",
            num / den
        );
    }

    #[test]
    fn add_mul_div_broadcast_gradients() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[1, 4]);
        check_op(
            |t, v| {
                let c = t.constant(b.clone());
                let s = t.add(v, c);
                let m = t.mul(s, v);
                t.div(m, c)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn broadcast_gradient_flows_to_small_side() {
        let mut rng = StdRng::seed_from_u64(2);
        let big = rand_arr(&mut rng, &[3, 4]);
        let small = rand_arr(&mut rng, &[1, 4]);
        let mut tape = Tape::new();
        let s = tape.leaf(small.clone());
        let c = tape.constant(big.clone());
        let y = tape.mul(c, s);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let g = grads.get(s).unwrap();
        assert_eq!(g.shape(), &[1, 4]);
        let expected = big.sum_axis(Axis(0)).insert_axis(Axis(0));
        assert!((g - &expected).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn matmul_transpose_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_arr(&mut rng, &[3, 2]);
        let w = rand_arr(&mut rng, &[3, 4]);
        check_op(
            |t, v| {
                let w = t.constant(w.clone());
                let vt = t.t(v);
                t.matmul(vt, w)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn gather_concat_groupmax_gradients() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = rand_arr(&mut rng, &[5, 3]);
        let idx_center = vec![0usize, 0, 1, 1, 2, 2];
        let idx_nbr = vec![1usize, 2, 0, 3, 4, 0];
        check_op(
            |t, v| {
                let xi = t.gather_rows(v, idx_center.clone());
                let xj = t.gather_rows(v, idx_nbr.clone());
                let d = t.sub(xj, xi);
                let cat = t.concat_cols(xi, d);
                let act = t.leaky_relu(cat, 0.2);
                t.group_max(act, 2)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn softmax_logsoftmax_gradients() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_arr(&mut rng, &[4, 3]);
        // weight the outputs so the scalar is not constant in the input
        let w = rand_arr(&mut rng, &[4, 3]);
        check_op(
            |t, v| {
                let s = t.softmax_rows(v);
                let c = t.constant(w.clone());
                t.mul(s, c)
            },
            &x,
            1e-6,
        );
        check_op(|t, v| t.log_softmax_rows(v), &x, 1e-6);
    }

    #[test]
    fn reductions_and_pointwise_gradients() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = rand_arr(&mut rng, &[3, 3]).mapv(|v| v + 2.0); // keep sqrt/ln away from 0
        check_op(|t, v| t.sum_axis_keep(v, 1), &x, 1e-6);
        check_op(|t, v| t.sqrt(v), &x, 1e-6);
        check_op(|t, v| t.exp(v), &x, 1e-6);
        check_op(|t, v| t.ln_clamped(v, 1e-12), &x, 1e-6);
        check_op(|t, v| t.clamp_min(v, 2.5), &x, 1e-5);
        check_op(
            |t, v| {
                let s = t.scale(v, 1.7);
                t.add_scalar(s, 0.3)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn select_and_stack_gradients() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_arr(&mut rng, &[4, 3]);
        let idx = vec![2usize, 0, 1, 2];
        check_op(|t, v| t.select_per_row(v, idx.clone()), &x, 1e-6);
        check_op(
            |t, v| {
                let a = t.scale(v, 2.0);
                let b = t.scale(v, -1.0);
                t.concat_rows(&[a, b, v])
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let d = tape.detach(v);
        let y = tape.mul(v, d);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        // d(v * const)/dv = const = value of v
        let g = grads.get(v).unwrap();
        assert!((g - tape.value(d)).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn group_max_ties_route_to_first() {
        let x = arr2(&[[1.0], [1.0], [0.5], [2.0]]).into_dyn();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.group_max(v, 2);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let g = as2(grads.get(v).unwrap()).to_owned();
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[1, 0]], 0.0);
        assert_eq!(g[[2, 0]], 0.0);
        assert_eq!(g[[3, 0]], 1.0);
    }
}
