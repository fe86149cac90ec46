//! Reverse-mode automatic differentiation over 64-bit dense arrays.
//!
//! A [`Graph`] records every operation of a forward pass as a node on a tape.
//! Calling [`Graph::backward`] propagates gradients from a scalar output back
//! to every leaf, including named parameters bound from a
//! [`crate::nn::ParamStore`]. All arithmetic is f64; evaluation is
//! single-threaded and deterministic.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Log,
    Exp,
    Sqrt,
    Recip,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Matrix plus a row vector broadcast over rows.
    AddBias(NodeId, NodeId),
    /// Matrix times a scalar-valued node (shape [1]).
    ScaleBy(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Unary(UnaryKind, NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MaxAxis0(NodeId, Vec<usize>),
    StackRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Row(NodeId, usize),
    ColsSlice(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Concat1(Vec<NodeId>),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    NormalizeL2(NodeId),
    Dot(NodeId, NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    trainable: bool,
}

/// Tape of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn value2(&self, id: NodeId) -> Array2<f64> {
        self.nodes[id.0]
            .value
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("node is not a matrix")
    }

    pub fn value1(&self, id: NodeId) -> Array1<f64> {
        self.nodes[id.0]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("node is not a vector")
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0]]
    }

    /// Non-trainable input node.
    pub fn constant<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> NodeId {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(ndarray::arr1(&[v]))
    }

    /// Trainable leaf; gradients for it are collected by `name`.
    pub fn named_leaf(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].trainable = true;
        self.params.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    /// `m + bias` with `bias` (1D, len = columns of `m`) broadcast over rows.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let mat = self.value2(m);
        let b = self.value1(bias);
        let v = &mat + &b.broadcast((mat.nrows(), b.len())).unwrap();
        self.push(v.into_dyn(), Op::AddBias(m, bias))
    }

    /// Elementwise product of `a` with the scalar node `s` (shape [1]).
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = &self.nodes[a.0].value * sv;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value2(a);
        let bv = self.value2(b);
        let v = av.dot(&bv);
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value2(a).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    /// Row-wise softmax of a matrix (max-shifted for stability).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value2(a);
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| match kind {
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Log => x.ln(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Recip => 1.0 / x,
        });
        self.push(v, Op::Unary(kind, a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Log, a)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s = v.sum() / v.len() as f64;
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::MeanAll(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value2(a).sum_axis(Axis(axis));
        self.push(v.into_dyn(), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value2(a).mean_axis(Axis(axis)).unwrap();
        self.push(v.into_dyn(), Op::MeanAxis(a, axis))
    }

    /// Columnwise max over rows of a matrix; ties keep the lowest row index.
    pub fn max_axis0(&mut self, a: NodeId) -> NodeId {
        let m = self.value2(a);
        let mut arg = vec![0usize; m.ncols()];
        let mut out = Array1::from_elem(m.ncols(), f64::NEG_INFINITY);
        for (i, row) in m.rows().into_iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxAxis0(a, arg))
    }

    /// Stack 1D nodes of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty());
        let d = self.nodes[rows[0].0].value.len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            let v = self.value1(r);
            m.row_mut(i).assign(&v);
        }
        self.push(m.into_dyn(), Op::StackRows(rows.to_vec()))
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let m = self.value2(a);
        let mut out = Array2::zeros((indices.len(), m.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            out.row_mut(i).assign(&m.row(ix));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, indices.to_vec()))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let v = self.value2(a).row(i).to_owned();
        self.push(v.into_dyn(), Op::Row(a, i))
    }

    /// Columns [start, end) of a matrix.
    pub fn cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let m = self.value2(a);
        let v = m.slice(ndarray::s![.., start..end]).to_owned();
        self.push(v.into_dyn(), Op::ColsSlice(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<Array2<f64>> = parts.iter().map(|&p| self.value2(p)).collect();
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap();
        self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat1(&mut self, parts: &[NodeId]) -> NodeId {
        let vecs: Vec<Array1<f64>> = parts.iter().map(|&p| self.value1(p)).collect();
        let views: Vec<_> = vecs.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(v.into_dyn(), Op::Concat1(parts.to_vec()))
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let m = self.value2(x);
        let g = self.value1(gamma);
        let b = self.value1(beta);
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNormRows { x, gamma, beta })
    }

    /// L2-normalize a 1D vector; the zero vector maps to itself.
    pub fn normalize_l2(&mut self, a: NodeId) -> NodeId {
        let v = self.value1(a);
        let norm = v.dot(&v).sqrt();
        let out = if norm > 0.0 { &v / norm } else { v.clone() };
        self.push(out.into_dyn(), Op::NormalizeL2(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.value1(a).dot(&self.value1(b));
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::Dot(a, b))
    }

    /// Gradients of the scalar node `out` with respect to every node.
    ///
    /// Returns one gradient slot per node; untouched slots are `None`.
    pub fn backward(&self, out: NodeId) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(ArrayD::ones(IxDyn(&[1])));

        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Gradients for every named parameter, keyed by name.
    pub fn param_grads(
        &self,
        grads: &[Option<ArrayD<f64>>],
    ) -> std::collections::BTreeMap<String, ArrayD<f64>> {
        let mut out: std::collections::BTreeMap<String, ArrayD<f64>> =
            std::collections::BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| ArrayD::zeros(self.nodes[id.0].value.raw_dim()));
            // The same parameter may be registered as several leaves in one
            // graph; their gradients add.
            match out.get_mut(name) {
                Some(acc) => *acc += &g,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let add_to = |slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>| match slot {
            Some(acc) => *acc += &delta,
            None => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(&mut grads[a.0], g.clone());
                add_to(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                add_to(&mut grads[a.0], g.clone());
                add_to(&mut grads[b.0], -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(&mut grads[a.0], g * &self.nodes[b.0].value);
                add_to(&mut grads[b.0], g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => add_to(&mut grads[a.0], g * *c),
            Op::AddBias(m, bias) => {
                add_to(&mut grads[m.0], g.clone());
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                add_to(&mut grads[bias.0], g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::ScaleBy(a, s) => {
                let sv = self.nodes[s.0].value[[0]];
                add_to(&mut grads[a.0], g * sv);
                let ds = (g * &self.nodes[a.0].value).sum();
                add_to(&mut grads[s.0], ndarray::arr1(&[ds]).into_dyn());
            }
            Op::MatMul(a, b) => {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                add_to(&mut grads[a.0], g2.dot(&bv.t()).into_dyn());
                add_to(&mut grads[b.0], av.t().dot(&g2).into_dyn());
            }
            Op::Transpose(a) => {
                let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
                add_to(&mut grads[a.0], g2.t().to_owned().into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g2.row(r);
                    let dotp = gr.dot(&yr);
                    for c in 0..y.ncols() {
                        dx[[r, c]] = (gr[c] - dotp) * yr[c];
                    }
                }
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let dx = match kind {
                    UnaryKind::Sigmoid => y.mapv(|v| v * (1.0 - v)) * g,
                    UnaryKind::Relu => {
                        let m = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        m * g
                    }
                    UnaryKind::Log => g / x,
                    UnaryKind::Exp => y * g,
                    UnaryKind::Sqrt => g * &y.mapv(|v| if v > 0.0 { 0.5 / v } else { 0.0 }),
                    UnaryKind::Recip => -(y * y) * g,
                };
                add_to(&mut grads[a.0], dx);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let mask = x.mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                add_to(&mut grads[a.0], mask * g);
            }
            Op::SumAll(a) => {
                let gv = g[[0]];
                add_to(
                    &mut grads[a.0],
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv),
                );
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[[0]] / n;
                add_to(
                    &mut grads[a.0],
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv),
                );
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                for r in 0..shape[0] {
                    for c in 0..shape[1] {
                        dx[[r, c]] = if *axis == 0 { g1[c] } else { g1[r] };
                    }
                }
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = shape[*axis] as f64;
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                for r in 0..shape[0] {
                    for c in 0..shape[1] {
                        dx[[r, c]] = if *axis == 0 { g1[c] } else { g1[r] } / n;
                    }
                }
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::MaxAxis0(a, arg) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                for (j, &r) in arg.iter().enumerate() {
                    dx[[r, j]] = g1[j];
                }
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::StackRows(rows) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                for (r, &id) in rows.iter().enumerate() {
                    add_to(&mut grads[id.0], g2.row(r).to_owned().into_dyn());
                }
            }
            Op::GatherRows(a, indices) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                for (r, &ix) in indices.iter().enumerate() {
                    let mut dst = dx.row_mut(ix);
                    dst += &g2.row(r);
                }
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::Row(a, r) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                dx.row_mut(*r).assign(&g1);
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::ColsSlice(a, start, _end) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::zeros((shape[0], shape[1]));
                dx.slice_mut(ndarray::s![.., *start..*start + g2.ncols()])
                    .assign(&g2);
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let piece = g2.slice(ndarray::s![.., off..off + w]).to_owned();
                    add_to(&mut grads[p.0], piece.into_dyn());
                    off += w;
                }
            }
            Op::Concat1(parts) => {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.len();
                    let piece = g1.slice(ndarray::s![off..off + w]).to_owned();
                    add_to(&mut grads[p.0], piece.into_dyn());
                    off += w;
                }
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xm = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let d = xm.ncols() as f64;
                let mut dx = Array2::zeros(xm.raw_dim());
                let mut dgamma = Array1::zeros(xm.ncols());
                let mut dbeta = Array1::zeros(xm.ncols());
                for r in 0..xm.nrows() {
                    let row = xm.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Array1<f64> = row.mapv(|v| (v - mean) * inv);
                    let gr = g2.row(r);
                    for c in 0..xm.ncols() {
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let dxhat: Array1<f64> =
                        (0..xm.ncols()).map(|c| gr[c] * gv[c]).collect();
                    let m1 = dxhat.sum() / d;
                    let m2 = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d;
                    for c in 0..xm.ncols() {
                        dx[[r, c]] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                add_to(&mut grads[x.0], dx.into_dyn());
                add_to(&mut grads[gamma.0], dgamma.into_dyn());
                add_to(&mut grads[beta.0], dbeta.into_dyn());
            }
            Op::NormalizeL2(a) => {
                let x = self.nodes[a.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let norm = x.dot(&x).sqrt();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let dx = if norm > 0.0 {
                    let y = self.nodes[i].value.view().into_dimensionality::<Ix1>().unwrap();
                    let proj = g1.dot(&y);
                    (0..x.len())
                        .map(|c| (g1[c] - y[c] * proj) / norm)
                        .collect::<Array1<f64>>()
                } else {
                    Array1::zeros(x.len())
                };
                add_to(&mut grads[a.0], dx.into_dyn());
            }
            Op::Dot(a, b) => {
                let gv = g[[0]];
                add_to(&mut grads[a.0], &self.nodes[b.0].value * gv);
                add_to(&mut grads[b.0], &self.nodes[a.0].value * gv);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
