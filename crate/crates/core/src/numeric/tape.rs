//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Ops are recorded in execution order together with whatever they need for
//! the backward pass. [`GradTape::backward`] walks the record in exact reverse
//! order and accumulates into gradient buffers that exist only for leaves
//! registered with [`GradTape::param`]. Constants (frozen weights, inputs)
//! never get gradient storage, and any node that does not depend on a
//! trainable leaf is skipped entirely.

use std::borrow::Cow;

use super::matrix::{gemm, gemm_into_block, Matrix};
use super::ops::{gelu, gelu_grad};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside the tape (losses, injections).
pub trait CustomOp: Send + Sync {
    /// Gradients with respect to each input; `None` where `needs[i]` is false.
    fn backward(&self, grad_out: &Matrix, inputs: &[&Matrix], needs: &[bool])
        -> Vec<Option<Matrix>>;
}

enum Op<'a> {
    Leaf,
    /// Row gather from an embedding table.
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `a + 1·bias` with a `1×n` bias broadcast over rows.
    AddRow { a: NodeId, bias: NodeId },
    /// A `1×n` row repeated `rows` times.
    BroadcastRow { row: NodeId },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gelu { x: NodeId },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Matrix>,
    },
    /// `Σ cᵢ · xᵢ` over scalar (1×1) nodes.
    LinearCombination { terms: Vec<(NodeId, f64)> },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp + 'a>,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op<'a>,
    requires_grad: bool,
    trainable_leaf: bool,
}

/// Single-writer record of one forward computation.
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Matrix>>,
}

impl<'a> Default for GradTape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op<'a>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable_leaf: false,
        });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient buffer on backward.
    pub fn param(&mut self, m: &'a Matrix) -> NodeId {
        let id = self.push(Cow::Borrowed(m), Op::Leaf, true);
        self.nodes[id.0].trainable_leaf = true;
        id
    }

    /// Frozen leaf borrowed from the caller.
    pub fn constant(&mut self, m: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    /// Frozen leaf owned by the tape.
    pub fn constant_owned(&mut self, m: Matrix) -> NodeId {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add { a, b }, rg))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("(1, {})", va.cols()),
                format!("{:?}", vb.shape()),
            ));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Cow::Owned(out), Op::AddRow { a, bias }, rg))
    }

    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        let v = self.value(row);
        if v.rows() != 1 {
            return Err(Error::shape("broadcast_row", "1 row", v.rows()));
        }
        let mut out = Matrix::zeros(rows, v.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(v.data());
        }
        let rg = self.rg(&[row]);
        Ok(self.push(Cow::Owned(out), Op::BroadcastRow { row }, rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!("(1, {d})"),
                format!("{:?}/{:?}", vg.shape(), vb.shape()),
            ));
        }
        let mut xhat = Matrix::zeros(vx.rows(), d);
        let mut out = Matrix::zeros(vx.rows(), d);
        let mut rstd = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * vg.data()[c] + vb.data()[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Gelu { x }, rg)
    }

    /// Multi-head causal self-attention over `T×d` query/key/value matrices.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = vq.shape();
        if vk.shape() != (t, d) || vv.shape() != (t, d) || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("({t}, {d}) with d divisible by {heads}"),
                format!("{:?}/{:?}", vk.shape(), vv.shape()),
            ));
        }
        let (out, probs) = attention_forward(vq, vk, vv, heads);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(out),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn linear_combination(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, c) in terms {
            let v = self.value(id);
            if v.shape() != (1, 1) {
                return Err(Error::shape("linear_combination", "(1, 1)", format!("{:?}", v.shape())));
            }
            s += c * v.data()[0];
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Cow::Owned(Matrix::row_vector(vec![s])),
            Op::LinearCombination {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    pub fn custom(&mut self, inputs: &[NodeId], value: Matrix, op: Box<dyn CustomOp + 'a>) -> NodeId {
        let rg = self.rg(inputs);
        self.push(
            Cow::Owned(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Backpropagate from scalar node `loss`, accumulating into the gradient
    /// buffers of trainable leaves. Repeated calls add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    pub fn backward_seeded(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "(1, 1) loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::row_vector(vec![seed]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.trainable_leaf {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let nodes = &self.nodes;
            let need = |id: NodeId| nodes[id.0].requires_grad;
            let send = |id: NodeId, m: Matrix, grads: &mut Vec<Option<Matrix>>| match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&m),
                slot @ None => *slot = Some(m),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Gather { table, ids } => {
                    if need(*table) {
                        let t = &nodes[table.0].value;
                        let mut gt = Matrix::zeros(t.rows(), t.cols());
                        for (r, &id) in ids.iter().enumerate() {
                            for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                        send(*table, gt, &mut grads);
                    }
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if need(*a) {
                        let mut ga = Matrix::zeros(va.rows(), va.cols());
                        gemm(1.0, g.view(), vb.view().t(), 0.0, &mut ga);
                        send(*a, ga, &mut grads);
                    }
                    if need(*b) {
                        let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                        gemm(1.0, va.view().t(), g.view(), 0.0, &mut gb);
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        send(*a, g.clone(), &mut grads);
                    }
                    if need(*b) {
                        send(*b, g.clone(), &mut grads);
                    }
                }
                Op::AddRow { a, bias } => {
                    if need(*bias) {
                        send(*bias, column_sums(&g), &mut grads);
                    }
                    if need(*a) {
                        send(*a, g, &mut grads);
                    }
                }
                Op::BroadcastRow { row } => {
                    if need(*row) {
                        send(*row, column_sums(&g), &mut grads);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let vg = &nodes[gamma.0].value;
                    let d = xhat.cols();
                    if need(*gamma) {
                        let mut gg = Matrix::zeros(1, d);
                        for r in 0..g.rows() {
                            for c in 0..d {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        send(*gamma, gg, &mut grads);
                    }
                    if need(*beta) {
                        send(*beta, column_sums(&g), &mut grads);
                    }
                    if need(*x) {
                        let mut gx = Matrix::zeros(g.rows(), d);
                        let mut dxh = vec![0.0; d];
                        for r in 0..g.rows() {
                            let (gr, xr) = (g.row(r), xhat.row(r));
                            for c in 0..d {
                                dxh[c] = gr[c] * vg.data()[c];
                            }
                            let mean_d = dxh.iter().sum::<f64>() / d as f64;
                            let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            let out = gx.row_mut(r);
                            for c in 0..d {
                                out[c] = rstd[r] * (dxh[c] - mean_d - xr[c] * mean_dx);
                            }
                        }
                        send(*x, gx, &mut grads);
                    }
                }
                Op::Gelu { x } => {
                    if need(*x) {
                        let vx = &nodes[x.0].value;
                        let mut gx = g;
                        for (a, xv) in gx.data_mut().iter_mut().zip(vx.data()) {
                            *a *= gelu_grad(*xv);
                        }
                        send(*x, gx, &mut grads);
                    }
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (gq, gk, gv) = attention_backward(&g, vq, vk, vv, *heads, probs);
                    if need(*q) {
                        send(*q, gq, &mut grads);
                    }
                    if need(*k) {
                        send(*k, gk, &mut grads);
                    }
                    if need(*v) {
                        send(*v, gv, &mut grads);
                    }
                }
                Op::LinearCombination { terms } => {
                    let gs = g.data()[0];
                    for &(id, c) in terms {
                        if need(id) {
                            send(id, Matrix::row_vector(vec![gs * c]), &mut grads);
                        }
                    }
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|id| &*nodes[id.0].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&id| need(id)).collect();
                    let out = op.backward(&g, &vals, &needs);
                    for ((&id, gi), &n) in inputs.iter().zip(out).zip(&needs) {
                        if let (true, Some(gi)) = (n, gi) {
                            send(id, gi, &mut grads);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.leaf_grads[id.0].as_ref()
    }

    /// Number of gradient buffers currently held by the tape.
    pub fn gradient_buffer_count(&self) -> usize {
        self.leaf_grads.iter().filter(|g| g.is_some()).count()
    }

    /// Ids of all nodes holding a gradient buffer.
    pub fn nodes_with_gradients(&self) -> Vec<NodeId> {
        self.leaf_grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (a, b) in out.data_mut().iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
    out
}

/// Forward causal attention; returns the output and per-head probabilities.
pub(crate) fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let (t, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * dh;
        let mut s = Matrix::zeros(t, t);
        gemm(scale, q.col_block(c0, dh), k.col_block(c0, dh).t(), 0.0, &mut s);
        for i in 0..t {
            let row = s.row_mut(i);
            let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row[..=i].iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row[..=i].iter_mut() {
                *x /= sum;
            }
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm_into_block(1.0, s.view(), v.col_block(c0, dh), 0.0, &mut out, c0);
        probs.push(s);
    }
    (out, probs)
}

fn attention_backward(
    g: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let (t, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Matrix::zeros(t, d);
    let mut gk = Matrix::zeros(t, d);
    let mut gv = Matrix::zeros(t, d);
    let mut dp = Matrix::zeros(t, t);
    for (h, p) in probs.iter().enumerate() {
        let c0 = h * dh;
        // dV = Pᵀ dO
        gemm_into_block(1.0, p.view().t(), g.col_block(c0, dh), 0.0, &mut gv, c0);
        // dP = dO Vᵀ
        gemm(1.0, g.col_block(c0, dh), v.col_block(c0, dh).t(), 0.0, &mut dp);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..t {
            let pr = p.row(i);
            let dr = dp.row_mut(i);
            let inner: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - inner);
            }
            dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm_into_block(scale, dp.view(), k.col_block(c0, dh), 0.0, &mut gq, c0);
        gemm_into_block(scale, dp.view().t(), q.col_block(c0, dh), 0.0, &mut gk, c0);
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;

    fn seq(r: usize, c: usize, off: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|i| ((i as f64) * 0.61 + off).sin() * 0.8).collect()).unwrap()
    }

    /// Scalar probe: `Σ out ⊙ W` for a fixed random weighting `W`.
    struct Probe(Matrix);
    impl CustomOp for Probe {
        fn backward(&self, g: &Matrix, _inputs: &[&Matrix], _needs: &[bool]) -> Vec<Option<Matrix>> {
            let mut m = self.0.clone();
            m.scale(g.data()[0]);
            vec![Some(m)]
        }
    }

    fn probe<'a>(tape: &mut GradTape<'a>, x: NodeId, w: Matrix) -> NodeId {
        let s: f64 = tape.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        tape.custom(&[x], Matrix::row_vector(vec![s]), Box::new(Probe(w)))
    }

    /// Checks d(probe(f(params)))/d(params) against central differences.
    fn check<F>(shapes: &[(usize, usize)], build: F) -> f64
    where
        F: for<'t> Fn(&mut GradTape<'t>, &[NodeId]) -> NodeId,
    {
        let mut params: Vec<Matrix> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| seq(r, c, i as f64 * 1.3))
            .collect();
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let flat: Vec<f64> = params.iter().flat_map(|p| p.data().to_vec()).collect();
        let eval = |x: &[f64], params: &mut Vec<Matrix>| -> (f64, Vec<f64>) {
            let mut off = 0;
            for (p, &n) in params.iter_mut().zip(&sizes) {
                p.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let mut tape = GradTape::new();
            let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p)).collect();
            let out = build(&mut tape, &ids);
            let w = seq(tape.value(out).rows(), tape.value(out).cols(), 7.7);
            let loss = probe(&mut tape, out, w);
            let value = tape.scalar(loss);
            tape.backward(loss).unwrap();
            let grad = ids
                .iter()
                .flat_map(|&id| match tape.grad(id) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; tape.value(id).len()],
                })
                .collect();
            (value, grad)
        };
        grad_check(|x| eval(x, &mut params), &flat, 1e-5).unwrap().max_rel_error
    }

    #[test]
    fn matmul_add_gather_grads() {
        let err = check(&[(5, 3), (3, 4), (1, 4)], |t, p| {
            let g = t.gather(p[0], &[4, 0, 4, 2]).unwrap();
            let m = t.matmul(g, p[1]).unwrap();
            let b = t.add_row(m, p[2]).unwrap();
            let bb = t.broadcast_row(p[2], 4).unwrap();
            t.add(b, bb).unwrap()
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn layer_norm_and_gelu_grads() {
        let err = check(&[(4, 6), (1, 6), (1, 6)], |t, p| {
            let ln = t.layer_norm(p[0], p[1], p[2], 1e-5).unwrap();
            t.gelu(ln)
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn attention_grads() {
        let err = check(&[(5, 4), (5, 4), (5, 4)], |t, p| t.causal_attention(p[0], p[1], p[2], 2).unwrap());
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn attention_is_causal() {
        let q = seq(6, 4, 0.0);
        let k = seq(6, 4, 1.0);
        let v = seq(6, 4, 2.0);
        let (out, _) = attention_forward(&q, &k, &v, 2);
        let mut v2 = v.clone();
        v2.row_mut(5).iter_mut().for_each(|x| *x += 10.0);
        let mut k2 = k.clone();
        k2.row_mut(5).iter_mut().for_each(|x| *x -= 3.0);
        let (out2, _) = attention_forward(&q, &k2, &v2, 2);
        for r in 0..5 {
            assert_eq!(out.row(r), out2.row(r));
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient_storage() {
        let a = seq(3, 3, 0.0);
        let b = seq(3, 3, 1.0);
        let mut tape = GradTape::new();
        let pa = tape.param(&a);
        let cb = tape.constant(&b);
        let m = tape.matmul(pa, cb).unwrap();
        let loss = probe(&mut tape, m, seq(3, 3, 2.0));
        tape.backward(loss).unwrap();
        assert_eq!(tape.nodes_with_gradients(), vec![pa]);
        assert!(tape.grad(cb).is_none());
    }

    #[test]
    fn backward_accumulates_additively() {
        let a = seq(3, 4, 0.0);
        let b = seq(4, 2, 1.0);
        let build = |tape: &mut GradTape<'_>, pa: NodeId, cb: NodeId| {
            let m = tape.matmul(pa, cb).unwrap();
            let g = tape.gelu(m);
            let l1 = probe(tape, g, seq(3, 2, 3.0));
            let l2 = probe(tape, m, seq(3, 2, 5.0));
            (l1, l2)
        };
        let mut t1 = GradTape::new();
        let (pa, cb) = (t1.param(&a), t1.constant(&b));
        let (l1, l2) = build(&mut t1, pa, cb);
        t1.backward(l1).unwrap();
        t1.backward(l2).unwrap();

        let mut t2 = GradTape::new();
        let (pa2, cb2) = (t2.param(&a), t2.constant(&b));
        let (m1, m2) = build(&mut t2, pa2, cb2);
        let sum = t2.linear_combination(&[(m1, 1.0), (m2, 1.0)]).unwrap();
        t2.backward(sum).unwrap();

        for (x, y) in t1.grad(pa).unwrap().data().iter().zip(t2.grad(pa2).unwrap().data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
