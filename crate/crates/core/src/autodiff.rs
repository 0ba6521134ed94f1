//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its nodes in execution
//! order. Since an operation can only reference nodes that already exist,
//! the record is topologically sorted by construction, and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! Trainers build a fresh tape per minibatch: parameters enter as leaves,
//! the objective is composed from the ops below, and the gradients of the
//! parameter leaves are read back from the returned [`Gradients`].
//!
//! ```
//! use mmd_repr::autodiff::Tape;
//! use mmd_repr::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
//! let loss = tape.sum(w).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[1.0, 1.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColumnSums(NodeId),
    SqDists(NodeId, NodeId),
    Mask(NodeId, Tensor),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SquaredError(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of a forward computation, consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// The gradient, or `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// The gradient, with unreachable nodes reported as zeros of the node's shape.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Input, constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds the `1 x c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(
                "add_row",
                format!(
                    "bias {}x{} for input {}x{}",
                    bv.rows(),
                    bv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            ));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, bias), "add_row")
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&mut self, x: NodeId, alpha: f64, beta: f64) -> Result<NodeId> {
        let v = self.value(x).map(|e| alpha * e + beta);
        self.push(v, Op::Affine(x, alpha), "affine")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), "square")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), "transpose")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(xv.mean());
        self.push(v, Op::Mean(x), "mean")
    }

    /// Sum over rows, `r x c -> 1 x c`.
    pub fn column_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).column_sums();
        self.push(v, Op::ColumnSums(x), "column_sums")
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dists(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).pairwise_sq_dists(self.value(b))?;
        self.push(v, Op::SqDists(a, b), "sq_dists")
    }

    /// Elementwise product with a constant mask; the mask is replayed on the
    /// backward pass.
    pub fn apply_mask(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let v = self.value(x).mul(&mask)?;
        self.push(v, Op::Mask(x, mask), "mask")
    }

    /// Inverted dropout. Each entry is zeroed with probability `rate` and the
    /// survivors are scaled by `1 / (1 - rate)`. Outside training, or with a
    /// zero rate, this is the identity and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let (r, c) = self.value(x).shape();
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.apply_mask(x, Tensor::from_vec(r, c, mask)?)
    }

    /// The mask recorded by [`Tape::dropout`] or [`Tape::apply_mask`], if `id` is such a node.
    pub fn mask_of(&self, id: NodeId) -> Option<&Tensor> {
        match &self.nodes[id.0].op {
            Op::Mask(_, m) => Some(m),
            _ => None,
        }
    }

    /// Mean over rows of `-ln p(label)`, with `p` the row softmax of `logits`
    /// clamped to `[1e-12, 1]` before the log.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Usage("cross-entropy of an empty batch".into()));
        }
        let mut probs = Tensor::zeros(n, k);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Data(format!(
                    "label {label} out of range for {k} classes (row {r})"
                )));
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            let log_p = row[label] - max - z.ln();
            total += -(log_p.max(1e-12f64.ln()));
        }
        let v = Tensor::scalar(total / n as f64);
        self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean over rows of `‖pred_i − target_i‖²`.
    pub fn squared_error(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(pred);
        let t = self.value(target);
        p.expect_same_shape(t, "squared_error")?;
        if p.rows() == 0 {
            return Err(Error::Usage("squared error of an empty batch".into()));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = Tensor::scalar(total / p.rows() as f64);
        self.push(v, Op::SquaredError(pred, target), "squared_error")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.mul(self.value(*b))?)?;
                    accumulate(&mut grads, *b, g.mul(self.value(*a))?)?;
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, *bias, g.column_sums())?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Affine(x, alpha) => {
                    accumulate(&mut grads, *x, g.scale(*alpha))?;
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(
                        self.value(*x),
                        "relu",
                        |gi, xi| {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        },
                    )?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, "sigmoid", |gi, s| gi * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Exp(x) => {
                    accumulate(&mut grads, *x, g.mul(&node.value)?)?;
                }
                Op::Square(x) => {
                    let dx = g.zip_map(self.value(*x), "square", |gi, xi| 2.0 * xi * gi)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose())?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.data()[0]))?;
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.data()[0] / n))?;
                }
                Op::ColumnSums(x) => {
                    let (r, c) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i).copy_from_slice(g.data());
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SqDists(a, b) => {
                    // D_ij = ‖a_i − b_j‖²
                    // dA = 2 (diag(G 1) A − G B), dB = 2 (diag(Gᵀ 1) B − Gᵀ A)
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let row_w = g.row_sums();
                    let col_w = g.column_sums();
                    let mut da = g.matmul(bv)?;
                    for i in 0..av.rows() {
                        let w = row_w.data()[i];
                        for (d, x) in da.row_mut(i).iter_mut().zip(av.row(i)) {
                            *d = 2.0 * (w * x - *d);
                        }
                    }
                    let mut db = g.t_matmul(av)?;
                    for j in 0..bv.rows() {
                        let w = col_w.data()[j];
                        for (d, y) in db.row_mut(j).iter_mut().zip(bv.row(j)) {
                            *d = 2.0 * (w * y - *d);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Mask(x, mask) => {
                    accumulate(&mut grads, *x, g.mul(mask)?)?;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len() as f64;
                    let scale = g.data()[0] / n;
                    let mut dx = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = dx.row_mut(r);
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dx)?;
                }
                Op::SquaredError(pred, target) => {
                    let n = self.value(*pred).rows() as f64;
                    let scale = 2.0 * g.data()[0] / n;
                    let diff = self.value(*pred).sub(self.value(*target))?.scale(scale);
                    accumulate(&mut grads, *target, diff.scale(-1.0))?;
                    accumulate(&mut grads, *pred, diff)?;
                }
            }
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central differences of `f` with respect to every entry of `inputs[which]`.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) -> Tensor {
        let h = 1e-5;
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = inputs
                .iter()
                .map(|t| tape.leaf(t.clone()).unwrap())
                .collect();
            let out = f(&mut tape, &ids);
            tape.value(out).item().unwrap()
        };
        let mut g = Tensor::zeros(inputs[which].rows(), inputs[which].cols());
        for k in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            g.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a.sub(b).unwrap().squared_norm().sqrt();
        let scale = a
            .squared_norm()
            .sqrt()
            .max(b.squared_norm().sqrt())
            .max(1e-12);
        diff / scale
    }

    fn check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId, tol: f64) {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = f(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let numeric = numeric_grad(inputs, i, f);
            let err = rel_err(&grads.wrt(*id), &numeric);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let w = random(3, 2, &mut rng);
        // weighted sum keeps the loss from being linear in a single direction
        check(
            &[a, b, w],
            &|t, ids| {
                let c = t.matmul(ids[0], ids[1]).unwrap();
                let m = t.mul(c, ids[2]).unwrap();
                t.sum(m).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_rows(&[[-1.5, 2.0, 0.0]]).unwrap())
            .unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data()[0], 0.25);
        let numeric = numeric_grad(&[Tensor::scalar(0.0)], 0, &|t, ids| {
            t.sigmoid(ids[0]).unwrap()
        });
        assert!((numeric.data()[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(3, 3, &mut rng);
        let b = random(3, 3, &mut rng);
        check(
            &[a, b],
            &|t, ids| {
                let s = t.sub(ids[0], ids[1]).unwrap();
                let e = t.exp(s).unwrap();
                let q = t.square(ids[1]).unwrap();
                let m = t.mul(e, q).unwrap();
                let sg = t.sigmoid(m).unwrap();
                let af = t.affine(sg, -3.0, 1.0).unwrap();
                let ad = t.add(af, ids[0]).unwrap();
                t.mean(ad).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn sq_dists_and_column_sums_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 3, &mut rng);
        let b = random(5, 3, &mut rng);
        check(
            &[a, b],
            &|t, ids| {
                let d = t.sq_dists(ids[0], ids[1]).unwrap();
                let k = t.scale(d, -0.7).unwrap();
                let k = t.exp(k).unwrap();
                let cs = t.column_sums(k).unwrap();
                let tr = t.transpose(cs).unwrap();
                let sq = t.square(tr).unwrap();
                t.sum(sq).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn losses_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(4, 3, &mut rng);
        let pred = random(4, 3, &mut rng);
        let target = random(4, 3, &mut rng);
        check(
            &[logits],
            &|t, ids| t.softmax_cross_entropy(ids[0], &[0, 2, 1, 2]).unwrap(),
            1e-6,
        );
        check(
            &[pred, target],
            &|t, ids| t.squared_error(ids[0], ids[1]).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(2, 10)).unwrap();
        let ce = tape.softmax_cross_entropy(uniform, &[3, 7]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let confident = tape
            .leaf(Tensor::from_rows(&[[60.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let ce = tape.softmax_cross_entropy(confident, &[0]).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-9);

        // clamped: p(label) ~ e^-200 reports -ln(1e-12)
        let wrong = tape
            .leaf(Tensor::from_rows(&[[200.0, 0.0]]).unwrap())
            .unwrap();
        let ce = tape.softmax_cross_entropy(wrong, &[1]).unwrap();
        assert!((tape.value(ce).item().unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);

        let bad = tape.softmax_cross_entropy(uniform, &[3, 10]);
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn squared_error_of_identical_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_rows(&[[0.3, -1.0], [2.0, 5.0]]).unwrap())
            .unwrap();
        let l = tape.squared_error(x, x).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn sum_of_weights_gives_ones_and_unused_gets_zero() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(Tensor::from_vec(2, 3, vec![0.1; 6]).unwrap())
            .unwrap();
        let unused = tape.leaf(Tensor::ones(4, 1)).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), Tensor::ones(2, 3));
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(4, 1));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::ones(2, 2)).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(4, 4)).unwrap();
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, &mut rng, true),
            Err(Error::Config(_))
        ));

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::ones(8, 8)).unwrap();
            let d = tape.dropout(x, 0.5, &mut rng, true).unwrap();
            tape.value(d).clone()
        };
        let a = run(9);
        assert_eq!(a, run(9));
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(100, 1000)).unwrap();
        for rate in [0.1, 0.5, 0.8] {
            let d = tape.dropout(x, rate, &mut rng, true).unwrap();
            let zeroed = tape.value(d).data().iter().filter(|&&v| v == 0.0).count();
            let frac = zeroed as f64 / 1e5;
            assert!((frac - rate).abs() < 0.01, "rate {rate}: {frac}");
        }
    }

    #[test]
    fn dropout_backward_replays_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(3, 5)).unwrap();
        let d = tape.dropout(x, 0.4, &mut rng, true).unwrap();
        let s = tape.sum(d).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.wrt(x), tape.mask_of(d).unwrap());
    }
}
