//! Reverse-mode automatic differentiation over a small fixed primitive set.
//!
//! A [`Tape`] is a Wengert list of matrix-valued nodes. Trainable parameters
//! enter as leaves, everything else is derived through the recorded ops, and
//! [`Tape::backward`] runs reverse accumulation from a scalar root back to
//! every leaf. One tape per training step; tapes are not shared across
//! threads.

use std::collections::HashMap;

use crate::error::{MeterError, Result};
use crate::nn::mlp::{Activation, MlpSpec};
use crate::nn::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Identifies one trainable matrix across tapes; assigned densely by trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    /// A·B
    MatMul(NodeId, NodeId),
    /// Aᵀ·B
    MatMulTA(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a column vector to every column of a matrix.
    AddBroadcastCol(NodeId, NodeId),
    Sub(NodeId, NodeId),
    ElemMul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    /// Sum of all entries, yielding 1×1.
    Sum(NodeId),
    Scale(NodeId, f64),
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(ParamId, NodeId)>,
}

/// Gradients of a scalar root with respect to every leaf on the tape.
pub struct Gradients {
    by_param: HashMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn wrt(&self, param: ParamId) -> &Matrix {
        &self.by_param[&param]
    }

    pub fn take(mut self, param: ParamId) -> Matrix {
        self.by_param.remove(&param).expect("unknown parameter")
    }

    pub fn into_map(self) -> HashMap<ParamId, Matrix> {
        self.by_param
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, param: ParamId, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push((param, id));
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_ta(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_ta(self.value(b));
        self.push(Op::MatMulTA(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_broadcast_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(col));
        assert_eq!(vb.shape(), (va.rows(), 1), "broadcast column shape");
        let mut v = va.clone();
        let cols = v.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i / cols];
        }
        self.push(Op::AddBroadcastCol(a, col), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elem_mul shapes");
        let mut v = va.clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb.data()) {
            *x *= *y;
        }
        self.push(Op::ElemMul(a, b), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.ln();
        }
        self.push(Op::Ln(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.clamp(lo, hi);
        }
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::column(&[s]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    /// Activation as recorded ops.
    pub fn activate(&mut self, a: NodeId, act: Activation) -> NodeId {
        match act {
            Activation::ReLU => self.relu(a),
            Activation::Identity => a,
        }
    }

    /// Reverse accumulation from a scalar root. Every leaf registered on the
    /// tape receives a gradient (zeros when the root does not depend on it).
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(MeterError::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::column(&[1.0]));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_tb(self.value(*b));
                    let gb = self.value(*a).matmul_ta(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTA(a, b) => {
                    let ga = self.value(*b).matmul_tb(&g);
                    let gb = self.value(*a).matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBroadcastCol(a, col) => {
                    let mut gc = Matrix::zeros(g.rows(), 1);
                    let cols = g.cols();
                    for (i, x) in g.data().iter().enumerate() {
                        gc.data_mut()[i / cols] += x;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *col, gc);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::ElemMul(a, b) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= *y;
                    }
                    let mut gb = g;
                    for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= *y;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                        *x *= *v;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x /= *v;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *v <= *lo || *v >= *hi {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for x in ga.data_mut() {
                        *x = s;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s));
                }
            }
        }

        let mut by_param: HashMap<ParamId, Matrix> = HashMap::new();
        for (param, node) in &self.leaves {
            let v = self.value(*node);
            let g = grads[node.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()));
            by_param
                .entry(*param)
                .and_modify(|acc| acc.add_assign(&g))
                .or_insert(g);
        }
        Ok(Gradients { by_param })
    }

    /// Recompute every node from the recorded inputs and compare bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        for node in &self.nodes {
            let recomputed = match &node.op {
                Op::Leaf | Op::Constant => continue,
                Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b)),
                Op::MatMulTA(a, b) => self.value(*a).matmul_ta(self.value(*b)),
                Op::Add(a, b) => self.value(*a).add(self.value(*b)),
                Op::AddBroadcastCol(a, col) => {
                    let mut v = self.value(*a).clone();
                    let cols = v.cols();
                    let b = self.value(*col);
                    for (i, x) in v.data_mut().iter_mut().enumerate() {
                        *x += b.data()[i / cols];
                    }
                    v
                }
                Op::Sub(a, b) => self.value(*a).sub(self.value(*b)),
                Op::ElemMul(a, b) => {
                    let mut v = self.value(*a).clone();
                    for (x, y) in v.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= *y;
                    }
                    v
                }
                Op::Relu(a) => {
                    let mut v = self.value(*a).clone();
                    for x in v.data_mut() {
                        if *x < 0.0 {
                            *x = 0.0;
                        }
                    }
                    v
                }
                Op::Exp(a) => {
                    let mut v = self.value(*a).clone();
                    for x in v.data_mut() {
                        *x = x.exp();
                    }
                    v
                }
                Op::Ln(a) => {
                    let mut v = self.value(*a).clone();
                    for x in v.data_mut() {
                        *x = x.ln();
                    }
                    v
                }
                Op::Clamp(a, lo, hi) => {
                    let mut v = self.value(*a).clone();
                    for x in v.data_mut() {
                        *x = x.clamp(*lo, *hi);
                    }
                    v
                }
                Op::Sum(a) => Matrix::column(&[self.value(*a).data().iter().sum()]),
                Op::Scale(a, s) => self.value(*a).scale(*s),
            };
            if recomputed != node.value {
                return false;
            }
        }
        true
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Registers every matrix of a parameter set as leaves, weight then bias per
/// layer, with dense param ids starting at `first`. Returns the layer node
/// pairs and the next free id.
pub fn register_layers(
    tape: &mut Tape,
    layers: &[(Matrix, Matrix)],
    first: usize,
) -> (Vec<(NodeId, NodeId)>, usize) {
    let mut nodes = Vec::with_capacity(layers.len());
    let mut id = first;
    for (w, b) in layers {
        let wn = tape.leaf(ParamId(id), w.clone());
        let bn = tape.leaf(ParamId(id + 1), b.clone());
        nodes.push((wn, bn));
        id += 2;
    }
    (nodes, id)
}

/// Dense MLP forward over tape nodes; `layers` are (weight, bias) node pairs.
/// `x` may be one column or a whole (d, batch) block; biases broadcast.
pub fn mlp_on_tape(
    tape: &mut Tape,
    layers: &[(NodeId, NodeId)],
    spec: &MlpSpec,
    x: NodeId,
) -> NodeId {
    let mut h = x;
    for (n, (w, b)) in layers.iter().enumerate() {
        let z = tape.matmul_ta(*w, h);
        let zb = tape.add_broadcast_col(z, *b);
        h = tape.activate(zb, spec.activations()[n]);
    }
    h
}

/// Mean squared error between a node and a constant target column.
pub fn mse_on_tape(tape: &mut Tape, y: NodeId, target: NodeId) -> NodeId {
    let n = tape.value(y).rows();
    let d = tape.sub(y, target);
    let sq = tape.elem_mul(d, d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::ParameterSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences for a scalar function of flat parameters.
    fn finite_diff(
        params: &[Matrix],
        f: &dyn Fn(&[Matrix]) -> f64,
        h: f64,
    ) -> Vec<Matrix> {
        let mut out = Vec::new();
        for pi in 0..params.len() {
            let mut g = Matrix::zeros(params[pi].rows(), params[pi].cols());
            for k in 0..params[pi].len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[k] -= h;
                g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn max_rel_err(analytic: &[Matrix], fd: &[Matrix]) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in analytic.iter().zip(fd) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let denom = x.abs().max(y.abs()).max(1e-4);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(ParamId(0), Matrix::identity(3));
        let _ = w;
        let c = tape.constant(Matrix::column(&[5.0]));
        let grads = tape.backward(c).unwrap();
        assert!(grads.wrt(ParamId(0)).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Matrix::column(&[1.0, 2.0]));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn half_squared_residual_matches_closed_form() {
        // loss = ½‖Wx − t‖² has gradient (Wx − t)xᵀ
        let w_val = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let x_val = Matrix::column(&[0.7, -1.1]);
        let t_val = Matrix::column(&[1.0, 2.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(ParamId(0), w_val.clone());
        let x = tape.constant(x_val.clone());
        let t = tape.constant(t_val.clone());
        let wx = tape.matmul(w, x);
        let r = tape.sub(wx, t);
        let sq = tape.elem_mul(r, r);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);

        let grads = tape.backward(loss).unwrap();
        let residual = w_val.matmul(&x_val).sub(&t_val);
        let expect = residual.matmul_tb(&x_val);
        for (g, e) in grads.wrt(ParamId(0)).data().iter().zip(expect.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::relu_hidden(vec![4, 6, 5, 4]).unwrap();
        let params = ParameterSet::init(&spec, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let flat: Vec<Matrix> = params.flat().into_iter().cloned().collect();

        let spec_c = spec.clone();
        let x_c = x.clone();
        let eval = move |ps: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let mut layer_nodes = Vec::new();
            for pair in ps.chunks(2) {
                let w = tape.constant(pair[0].clone());
                let b = tape.constant(pair[1].clone());
                layer_nodes.push((w, b));
            }
            let xn = tape.constant(Matrix::column(&x_c));
            let y = mlp_on_tape(&mut tape, &layer_nodes, &spec_c, xn);
            let t = tape.constant(Matrix::column(&x_c));
            let loss = mse_on_tape(&mut tape, y, t);
            tape.value(loss).get(0, 0)
        };

        let mut tape = Tape::new();
        let (nodes, _) = register_layers(&mut tape, params.layers(), 0);
        let xn = tape.constant(Matrix::column(&x));
        let y = mlp_on_tape(&mut tape, &nodes, &spec, xn);
        let t = tape.constant(Matrix::column(&x));
        let loss = mse_on_tape(&mut tape, y, t);
        let grads = tape.backward(loss).unwrap();

        let analytic: Vec<Matrix> = (0..flat.len())
            .map(|i| grads.wrt(ParamId(i)).clone())
            .collect();
        let fd = finite_diff(&flat, &eval, 1e-5);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "max relative error {err}");
        assert!(tape.replay_matches());
    }

    #[test]
    fn exp_ln_clamp_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = {
            let mut m = Matrix::zeros(2, 1);
            for v in m.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            m
        };
        let eval = |ps: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let l = tape.constant(ps[0].clone());
            let cl = tape.clamp(l, -30.0, 30.0);
            let alpha = tape.exp(cl);
            let total = tape.sum(alpha);
            let ln_total = tape.ln(total);
            let onehot = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
            let picked = tape.matmul(onehot, cl);
            tape.value(ln_total).get(0, 0) - tape.value(picked).get(0, 0)
        };

        let mut tape = Tape::new();
        let l = tape.leaf(ParamId(0), logits.clone());
        let cl = tape.clamp(l, -30.0, 30.0);
        let alpha = tape.exp(cl);
        let total = tape.sum(alpha);
        let ln_total = tape.ln(total);
        let onehot = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let picked = tape.matmul(onehot, cl);
        let loss = tape.sub(ln_total, picked);
        let grads = tape.backward(loss).unwrap();

        let fd = finite_diff(std::slice::from_ref(&logits), &eval, 1e-5);
        let err = max_rel_err(&[grads.wrt(ParamId(0)).clone()], &fd);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn shared_leaf_usage_accumulates() {
        // f = sum(W x) + sum(Wᵀ y): W appears on two paths
        let w_val = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf(ParamId(0), w_val);
        let x = tape.constant(Matrix::column(&[1.0, 1.0]));
        let y = tape.constant(Matrix::column(&[1.0, 1.0]));
        let p1 = tape.matmul(w, x);
        let p2 = tape.matmul_ta(w, y);
        let s1 = tape.sum(p1);
        let s2 = tape.sum(p2);
        let loss = tape.add(s1, s2);
        let grads = tape.backward(loss).unwrap();
        // d/dW sum(Wx) = 1·xᵀ (all ones), plus d/dW sum(Wᵀy) = y·1ᵀ (all ones)
        assert!(grads.wrt(ParamId(0)).data().iter().all(|v| *v == 2.0));
    }
}
