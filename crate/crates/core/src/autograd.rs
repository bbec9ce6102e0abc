//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] walks the record in reverse and accumulates the
//! gradient of a scalar node with respect to every node that depends on a
//! parameter. Forward values are computed with the `numkit` kernels, so the
//! same graph serves inference (just never call `backward`).
//!
//! Shape errors inside the graph are programming errors and panic; public
//! entry points validate their inputs before building a graph.

use std::sync::Arc;

use crate::numkit::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A constant sparse linear map over rows: `out[i] = Σ w · in[j]` for every
/// `(j, w)` in `rows[i]`. Pooling, fixed-grid upsampling and patch cropping
/// are all expressed this way.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    /// `k × k` average pooling of an `h × w` grid.
    pub fn avgpool(h: usize, w: usize, k: usize) -> Self {
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut rows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut taps = Vec::with_capacity(k * k);
                for dy in 0..k {
                    for dx in 0..k {
                        taps.push(((oy * k + dy) * w + ox * k + dx, norm));
                    }
                }
                rows.push(taps);
            }
        }
        Self { n_in: h * w, rows }
    }

    /// Bilinear sampling of an `h × w` grid at fixed points.
    pub fn bilinear(h: usize, w: usize, pts: &[(f64, f64)]) -> Self {
        let rows = pts
            .iter()
            .map(|&(x, y)| {
                numkit::bilinear_taps(h, w, x, y)
                    .into_iter()
                    .filter(|&(_, wgt)| wgt != 0.0)
                    .collect()
            })
            .collect();
        Self { n_in: h * w, rows }
    }

    /// Bilinear 2× upsampling of an `h × w` grid.
    pub fn upsample2x(h: usize, w: usize) -> Self {
        let mut pts = Vec::with_capacity(4 * h * w);
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                pts.push((numkit::upsample_src_coord(ox), numkit::upsample_src_coord(oy)));
            }
        }
        Self::bilinear(h, w, &pts)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        assert_eq!(x.rows(), self.n_in, "row map expects {} rows, got {}", self.n_in, x.rows());
        let mut out = vec![0.0; self.rows.len() * c];
        for (i, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            for &(j, wgt) in taps {
                for (d, &v) in dst.iter_mut().zip(x.row(j)) {
                    *d += wgt * v;
                }
            }
        }
        Tensor::new(vec![self.rows.len(), c], out).expect("row map output")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    ScaleBy(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Silu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<usize>),
    Map(NodeId, Arc<RowMap>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: NodeId, k: NodeId, stride: usize, pad: usize },
    Bilinear { src: NodeId, pts: NodeId },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.len(), b.len(), "elementwise op on {:?} and {:?}", a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("elementwise")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("map")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = map(self.value(a), |x| x * s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = map(self.value(a), |x| x + s);
        self.derived(v, Op::Offset(a), &[a])
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a scalar node");
        let k = self.scalar_value(s);
        let v = map(self.value(a), |x| x * k);
        self.derived(v, Op::ScaleBy(a, s), &[a, s])
    }

    /// Adds the length-`C` vector `b` to every row of `a`.
    pub fn add_row_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let c = av.cols();
        assert_eq!(bv.len(), c, "bias length {} vs {} columns", bv.len(), c);
        let mut v = av.clone();
        for row in v.data_mut().chunks_mut(c) {
            for (x, &bb) in row.iter_mut().zip(bv.data()) {
                *x += bb;
            }
        }
        self.derived(v, Op::AddRowBias(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = numkit::matmul(self.value(a), self.value(b)).expect("matmul");
        self.derived(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = numkit::matmul_nt(self.value(a), self.value(b)).expect("matmul_nt");
        self.derived(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose2().expect("transpose");
        self.derived(v, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = numkit::softmax_rows(self.value(a));
        self.derived(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::exp);
        self.derived(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::ln);
        self.derived(v, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * x);
        self.derived(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::sqrt);
        self.derived(v, Op::Sqrt(a), &[a])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * sigmoid(x));
        self.derived(v, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.derived(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Columns `start..end` of a row-major matrix view.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = self.value(a);
        let c = t.cols();
        assert!(start < end && end <= c, "slice {start}..{end} of {c} columns");
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let v = Tensor::new(vec![t.rows(), end - start], data).expect("slice");
        self.derived(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], data).expect("concat_cols");
        self.derived(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        let v = Tensor::new(vec![rows, cols], data).expect("concat_rows");
        self.derived(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data).expect("gather_rows");
        self.derived(v, Op::GatherRows(a, idx), &[a])
    }

    /// Picks individual elements by flat index into a length-`n` vector.
    pub fn gather_elems(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(a);
        let data = idx.iter().map(|&i| t.data()[i]).collect::<Vec<_>>();
        let v = Tensor::new(vec![idx.len()], data).expect("gather_elems");
        self.derived(v, Op::GatherElems(a, idx), &[a])
    }

    pub fn row_map(&mut self, a: NodeId, m: Arc<RowMap>) -> NodeId {
        let v = m.apply(self.value(a));
        self.derived(v, Op::Map(a, m), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let t = self.value(x);
        let c = t.cols();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        assert!(g.len() == c && b.len() == c, "layer_norm parameter length");
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.len()];
        for (r, src) in t.data().chunks(c).enumerate() {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + numkit::LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for i in 0..c {
                let xh = (src[i] - mean) * rs;
                xhat[r * c + i] = xh;
                out[r * c + i] = xh * g[i] + b[i];
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("layer_norm");
        self.derived(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = numkit::conv2d(self.value(x), self.value(k), stride, pad).expect("conv2d");
        self.derived(v, Op::Conv2d { x, k, stride, pad }, &[x, k])
    }

    /// Samples an `[H, W, C]` node at the `[N, 2]` node of `(x, y)` points;
    /// differentiable in both the source and the coordinates.
    pub fn bilinear(&mut self, src: NodeId, pts: NodeId) -> NodeId {
        let p = self.value(pts);
        assert_eq!(p.cols(), 2, "points must be [N, 2]");
        let coords: Vec<(f64, f64)> = (0..p.rows()).map(|i| (p.get2(i, 0), p.get2(i, 1))).collect();
        let v = numkit::bilinear_sample(self.value(src), &coords).expect("bilinear");
        self.derived(v, Op::Bilinear { src, pts }, &[src, pts])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).clone().reshape(shape).expect("reshape");
        self.derived(v, Op::Reshape(a), &[a])
    }

    /// Gradient of the scalar node `root` with respect to every
    /// parameter-dependent node.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(g.reshape(&shape).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_with(g, bv, |x, y| x * y));
                self.accumulate(grads, *b, zip_with(g, av, |x, y| x * y));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, map(g, |x| x * s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = self.scalar_value(*s);
                let av = self.value(*a);
                let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *a, map(g, |x| x * k));
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::AddRowBias(a, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, Tensor::new(vec![c], gb).unwrap());
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g2 = as_matrix(g, out);
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, numkit::matmul_nt(&g2, bv).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    let at = av.transpose2().unwrap();
                    self.accumulate(grads, *b, numkit::matmul(&at, &g2).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g2 = as_matrix(g, out);
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, numkit::matmul(&g2, bv).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    let gt = g2.transpose2().unwrap();
                    self.accumulate(grads, *b, numkit::matmul(&gt, av).unwrap());
                }
            }
            Op::Transpose(a) => {
                let g2 = as_matrix(g, out);
                self.accumulate(grads, *a, g2.transpose2().unwrap());
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; out.len()];
                for ((y, gy), dst) in
                    out.data().chunks(c).zip(g.data().chunks(c)).zip(ga.chunks_mut(c))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        dst[k] = y[k] * (gy[k] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), ga).unwrap());
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_with(g, out, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_with(g, self.value(*a), |x, y| x / y)),
            Op::Square(a) => {
                self.accumulate(grads, *a, zip_with(g, self.value(*a), |x, y| 2.0 * x * y))
            }
            Op::Sqrt(a) => self.accumulate(
                grads,
                *a,
                zip_with(g, out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }),
            ),
            Op::Silu(a) => self.accumulate(
                grads,
                *a,
                zip_with(g, self.value(*a), |x, v| {
                    let s = sigmoid(v);
                    x * s * (1.0 + v * (1.0 - s))
                }),
            ),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0] / t.len() as f64));
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (c, w) = (src.cols(), g.cols());
                let mut ga = vec![0.0; src.len()];
                for r in 0..src.rows() {
                    ga[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.cols();
                    let mut gp = Vec::with_capacity(t.len());
                    for r in 0..t.rows() {
                        gp.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    self.accumulate(grads, *p, Tensor::new(t.shape().to_vec(), gp).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let n = t.len();
                    let gp = g.data()[off..off + n].to_vec();
                    off += n;
                    self.accumulate(grads, *p, Tensor::new(t.shape().to_vec(), gp).unwrap());
                }
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![0.0; src.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in ga[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).unwrap());
            }
            Op::GatherElems(a, idx) => {
                let src = self.value(*a);
                let mut ga = vec![0.0; src.len()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g.data()[k];
                }
                self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).unwrap());
            }
            Op::Map(a, m) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![0.0; src.len()];
                for (r, taps) in m.rows.iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    for &(j, wgt) in taps {
                        for (d, v) in ga[j * c..(j + 1) * c].iter_mut().zip(gr) {
                            *d += wgt * v;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(src.shape().to_vec(), ga).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for k in 0..c {
                        ggain[k] += gr[k] * xh[k];
                        gbias[k] += gr[k];
                        let gy = gr[k] * gv[k];
                        m1 += gy;
                        m2 += gy * xh[k];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for k in 0..c {
                        gx[r * c + k] = rstd[r] * (gr[k] * gv[k] - m1 - xh[k] * m2);
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, gx).unwrap());
                self.accumulate(grads, *gain, Tensor::new(vec![c], ggain).unwrap());
                self.accumulate(grads, *bias, Tensor::new(vec![c], gbias).unwrap());
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (gx, gk) = conv2d_backward(self.value(*x), self.value(*k), g, *stride, *pad);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::Bilinear { src, pts } => {
                let (gs, gp) = bilinear_backward(self.value(*src), self.value(*pts), g);
                self.accumulate(grads, *src, gs);
                self.accumulate(grads, *pts, gp);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).unwrap());
            }
        }
    }
}

fn as_matrix(g: &Tensor, like: &Tensor) -> Tensor {
    g.clone().reshape(like.shape()).expect("matrix gradient")
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g.data()[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        let krow = &k.data()[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let gkrow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            gkrow[co] += xv * go[co];
                            acc += krow[co] * go[co];
                        }
                        gx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(k.shape().to_vec(), gk).unwrap(),
    )
}

fn bilinear_backward(src: &Tensor, pts: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut gs = vec![0.0; src.len()];
    let mut gp = vec![0.0; pts.len()];
    for n in 0..pts.rows() {
        let (x, y) = (pts.get2(n, 0), pts.get2(n, 1));
        let gn = &g.data()[n * c..(n + 1) * c];
        let taps = numkit::bilinear_taps(h, w, x, y);
        for &(idx, wgt) in &taps {
            for (d, v) in gs[idx * c..(idx + 1) * c].iter_mut().zip(gn) {
                *d += wgt * v;
            }
        }
        let in_x = x > 0.0 && x < (w - 1) as f64;
        let in_y = y > 0.0 && y < (h - 1) as f64;
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let fx = xc - xc.floor();
        let fy = yc - yc.floor();
        let [(i00, _), (i01, _), (i10, _), (i11, _)] = taps;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for ch in 0..c {
            let v00 = src.data()[i00 * c + ch];
            let v01 = src.data()[i01 * c + ch];
            let v10 = src.data()[i10 * c + ch];
            let v11 = src.data()[i11 * c + ch];
            dx += gn[ch] * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            dy += gn[ch] * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if in_x {
            gp[2 * n] = dx;
        }
        if in_y {
            gp[2 * n + 1] = dy;
        }
    }
    (
        Tensor::new(src.shape().to_vec(), gs).unwrap(),
        Tensor::new(pts.shape().to_vec(), gp).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every element of `inputs`,
    /// compared with the tape gradient.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &ids);
        let grads = g.backward(root);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<_> = ins.iter().map(|t| g.param(t.clone())).collect();
            let r = f(&mut g, &ids);
            g.scalar_value(r)
        };
        let eps = 1e-6;
        for (n, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[n].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = grads.get(ids[n]).map_or(0.0, |t| t.data()[e]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {n} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        check(vec![a, b], |g, x| {
            let s = g.mul(x[0], x[1]);
            let e = g.exp(s);
            let d = g.sub(e, x[0]);
            let q = g.square(d);
            let l = g.silu(q);
            let o = g.offset(l, 2.0);
            let lg = g.log(o);
            let sq = g.sqrt(o);
            let t = g.add(lg, sq);
            g.mean(t)
        });
    }

    #[test]
    fn matrix_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let c = rand_tensor(&mut rng, &[2, 4]);
        let bias = rand_tensor(&mut rng, &[5]);
        let s = Tensor::scalar(0.7);
        check(vec![a, b, c, bias, s], |g, x| {
            let ab = g.matmul(x[0], x[1]);
            let ab = g.add_row_bias(ab, x[3]);
            let ac = g.matmul_nt(x[0], x[2]);
            let act = g.transpose(ac);
            let sm = g.softmax_rows(act);
            let sc = g.scale_by(sm, x[4]);
            let left = g.slice_cols(ab, 1, 4);
            let cat = g.concat_cols(&[left, x[0]]);
            let rows = g.gather_rows(cat, vec![2, 0, 2]);
            let r2 = g.concat_rows(&[rows, cat]);
            let el = g.gather_elems(sc, vec![0, 5, 5, 3]);
            let s1 = g.sum(r2);
            let sq = g.square(el);
            let s2 = g.sum(sq);
            let t = g.scale(s2, 3.0);
            g.add(s1, t)
        });
    }

    #[test]
    fn norm_conv_map_bilinear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 6, 3]);
        let k = rand_tensor(&mut rng, &[3, 3, 3, 2]);
        let gain = rand_tensor(&mut rng, &[2]);
        let bias = rand_tensor(&mut rng, &[2]);
        let pts = Tensor::new(vec![3, 2], vec![0.3, 1.7, 2.2, 0.4, 1.6, 2.5]).unwrap();
        check(vec![x, k, gain, bias, pts], |g, v| {
            let c = g.conv2d(v[0], v[1], 2, 1);
            let shape = g.value(c).shape().to_vec();
            let flat = g.reshape(c, &[shape[0] * shape[1], shape[2]]);
            let n = g.layer_norm(flat, v[2], v[3]);
            let up = g.row_map(n, Arc::new(RowMap::upsample2x(shape[0], shape[1])));
            let img = g.reshape(up, &[shape[0] * 2, shape[1] * 2, shape[2]]);
            let s = g.bilinear(img, v[4]);
            let pool = g.row_map(up, Arc::new(RowMap::avgpool(shape[0] * 2, shape[1] * 2, 2)));
            let q = g.square(s);
            let a = g.sum(q);
            let p2 = g.silu(pool);
            let b = g.sum(p2);
            g.add(a, b)
        });
    }

    #[test]
    fn row_maps_match_numkit_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[4, 6, 3]);
        let flat = x.clone().reshape(&[24, 3]).unwrap();
        let pooled = RowMap::avgpool(4, 6, 2).apply(&flat);
        let expect = numkit::avgpool2d(&x, 2).unwrap();
        for (a, b) in pooled.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let up = RowMap::upsample2x(4, 6).apply(&flat);
        assert_eq!(up.data(), numkit::upsample2x(&x).unwrap().data());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let m = g.mul(c, p);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    }
}
