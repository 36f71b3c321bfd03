//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation as a node. Nodes are only ever appended,
//! so iterating them backwards is a valid reverse topological order.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore, StoreId};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Constant,
    Param { store: StoreId, id: ParamId },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    ScaleBy { x: Var, s: Var, index: usize },
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SegmentMean { x: Var, segment: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { x: Var, index: Vec<Option<usize>> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<S> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-threaded recording context. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<S: Scalar = f64> {
    entries: Vec<(StoreId, ParamId, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Add every gradient that belongs to `store` into its parameters.
    pub fn apply_to(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (sid, pid, g) in &self.entries {
            if *sid == store.id() {
                store.accumulate_grad(*pid, g)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, store: StoreId, id: ParamId) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(s, p, _)| *s == store && *p == id).map(|(_, _, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn matrix_dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::dim(op, t.shape(), &[0, 0]))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf bound to a stored parameter. Frozen parameters never receive gradients.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param { store: store.id(), id }, p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_row")?;
        let rv = self.value(row);
        if rv.shape() != [1, n] {
            return Err(Error::dim("add_row", self.value(x).shape(), rv.shape()));
        }
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + rv.data()[j];
            }
        }
        let value = Tensor::new([m, n], out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let value = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    /// Multiply `x` by the single element `s[index]` of another node.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.value(s);
        if index >= sv.numel() {
            return Err(Error::dim("scale_by", sv.shape(), &[index]));
        }
        let k = sv.data()[index];
        let value = self.value(x).scale(k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy { x, s, index }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        matrix_dims(xv, "softmax_rows")?;
        let value = xv.softmax(1)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("mean", xv.shape(), &[1]));
        }
        let value = Tensor::scalar(xv.sum() / S::lit(xv.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean over the row axis: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.segment_mean(x, 0)
    }

    /// Mean over consecutive blocks of `segment` rows: `[b·segment × n] → [b × n]`.
    /// `segment == 0` means a single block covering all rows.
    pub fn segment_mean(&mut self, x: Var, segment: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = matrix_dims(xv, "segment_mean")?;
        let seg = if segment == 0 { m } else { segment };
        if seg == 0 || m % seg != 0 {
            return Err(Error::dim("segment_mean", xv.shape(), &[seg]));
        }
        let blocks = m / seg;
        let inv = S::lit(1.0 / seg as f64);
        let mut out = vec![S::zero(); blocks * n];
        for b in 0..blocks {
            for r in 0..seg {
                let row = xv.row(b * seg + r);
                for j in 0..n {
                    out[b * n + j] = out[b * n + j] + row[j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let value = Tensor::new([blocks, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SegmentMean { x, segment: seg }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new([m, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = matrix_dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, n], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out.flat[k] = x.flat[index[k]]`, or zero where `index[k]` is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let xv = self.value(x);
        let n = xv.numel();
        let mut out = Vec::with_capacity(index.len());
        for ix in &index {
            match *ix {
                Some(i) if i < n => out.push(xv.data()[i]),
                Some(i) => return Err(Error::dim("gather", xv.shape(), &[i])),
                None => out.push(S::zero()),
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = matrix_dims(lv, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if b == 0 {
            return Err(Error::Input("cross_entropy over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Domain(format!("label {bad} outside [0, {c})")));
        }
        let probs = lv.softmax(1)?;
        let mut total = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + (lse - row[y]);
        }
        let value = Tensor::scalar(total / S::lit(b as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every trainable
    /// parameter leaf reached; apply them with [`Gradients::apply_to`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if let Op::Param { store, id } = node.op {
                // a parameter read by several nodes gets one summed entry
                match out.entries.iter_mut().find(|(s, p, _)| *s == store && *p == id) {
                    Some((_, _, acc)) => *acc = acc.add(&g)?,
                    None => out.entries.push((store, id, g)),
                }
            }
        }
        out.entries.sort_by_key(|(_, id, _)| *id);
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-S::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*row) {
                    let (m, n) = g.dims2()?;
                    let mut dr = vec![S::zero(); n];
                    for i in 0..m {
                        for (d, &v) in dr.iter_mut().zip(g.row(i)) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new([1, n], dr)?)?;
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k))?,
            Op::ScaleBy { x, s, index } => {
                let sv = self.value(*s);
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.scale(sv.data()[*index]))?;
                }
                if self.rg(*s) {
                    let dot = g.mul(self.value(*x))?.sum();
                    let mut ds = Tensor::zeros(sv.shape().to_vec());
                    ds.data_mut()[*index] = dot;
                    self.accumulate(grads, *s, ds)?;
                }
            }
            Op::Relu(x) => {
                // subgradient 0 at 0
                let dx = g.zip_map(self.value(*x), "relu", |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new([m, n], dx)?)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(shape)?)?;
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item()? / S::lit(xv.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), gv))?;
            }
            Op::SegmentMean { x, segment } => {
                let (m, n) = self.value(*x).dims2()?;
                let inv = S::lit(1.0 / *segment as f64);
                let mut dx = vec![S::zero(); m * n];
                for r in 0..m {
                    let gr = g.row(r / segment);
                    for j in 0..n {
                        dx[r * n + j] = gr[j] * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new([m, n], dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let (m, _) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * c);
                        for i in 0..m {
                            dp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new([m, c], dp)?)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    if self.rg(p) {
                        let dp = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), dp)?)?;
                    }
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let d = dx.data_mut();
                for (k, ix) in index.iter().enumerate() {
                    if let Some(i) = *ix {
                        d[i] = d[i] + g.data()[k];
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let gv = g.item()?;
                let (b, c) = probs.dims2()?;
                let k = gv / S::lit(b as f64);
                let mut dl = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * c + y] = dl[i * c + y] - S::one();
                }
                dl.iter_mut().for_each(|v| *v = *v * k);
                self.accumulate(grads, *logits, Tensor::new([b, c], dl)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new([1, values.len()], values.to_vec()).unwrap(), true)
            .unwrap();
        (store, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (mut store, id) = store_with(&[0.5, -2.0, 3.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum(w);
        g.backward(loss).unwrap().apply_to(&mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_identity() {
        let (mut store, id) = store_with(&[0.5, -2.0, 3.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap().apply_to(&mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let (mut store, id) = store_with(&[1.0]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let loss = g.sum(w);
            g.backward(loss).unwrap().apply_to(&mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.data(), &[2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_rows(&[[50.0, -50.0]]).unwrap());
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!(g.value(ce).item().unwrap() < 1e-40);

        let l = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full([1, 2], 1.0), false).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn gather_scatters_back() {
        let (mut store, id) = store_with(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let picked = g.gather(w, vec![Some(0), Some(0), None, Some(2)], [4]).unwrap();
        assert_eq!(g.value(picked).data(), &[1.0, 1.0, 0.0, 3.0]);
        let loss = g.sum(picked);
        g.backward(loss).unwrap().apply_to(&mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn parameter_read_twice_gets_one_summed_gradient() {
        let (store, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let b = g.scale(b, 3.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(store.id(), id).unwrap().data(), &[4.0, 4.0]);
    }
}
