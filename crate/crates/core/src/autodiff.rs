//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The op set is exactly what the toy transformer and the toy convolutional
//! network need: batched linear maps, attention primitives, layer/batch
//! normalization, convolution via im2col, and a fused softmax cross-entropy
//! head. Values are `f64` so central finite differences can resolve gradients
//! well below the 1e-4 relative-error bar used by the test suite.
//!
//! Shapes follow one convention: sequence activations are `[B, L, d]`,
//! convolutional activations are `[B, C, H, W]`. Parameters are inserted as
//! leaves; after `backward` the caller reads their gradients by `NodeId`.

use ndarray::{arr0, concatenate, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, Ix4, Slice};

/// Index of a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

enum Op {
    Leaf,
    /// `y = x @ w (+ b)` over the flattened leading dimensions of `x`.
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    /// `[B, L, d] + [L, d]`, broadcast over the batch.
    AddTokens { x: NodeId, t: NodeId },
    /// Per-channel affine along the last axis: `y = x * gamma + beta`.
    AffineChannels { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Per-channel affine along axis 1 of `[B, C, H, W]`.
    AffineChannelsNchw { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Prepend `rows: [p, d]` to every sequence in `x: [B, L, d]`.
    ConcatTokens { rows: NodeId, x: NodeId },
    /// Keep tokens `start..start+len` along axis 1.
    SliceTokens { x: NodeId, start: usize, len: usize },
    /// Read one token: `[B, L, d] -> [B, d]`.
    SelectToken { x: NodeId, index: usize },
    /// Slice along the last axis.
    ColSlice { x: NodeId, start: usize, len: usize },
    /// Concatenate along the last axis.
    ColConcat { parts: Vec<NodeId> },
    /// Per-batch `a[b] @ b[b]`: `[B, L, K] x [B, K, M] -> [B, L, M]`.
    BatMul { a: NodeId, b: NodeId },
    /// Per-batch `a[b] @ b[b]^T`: `[B, L, K] x [B, M, K] -> [B, L, M]`.
    BatMulT { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Softmax along the last axis; the node value doubles as the cache.
    SoftmaxLast { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: ArrayD<f64>, rstd: Vec<f64> },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, cols: Vec<Array2<f64>>, out_hw: (usize, usize) },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: ArrayD<f64>, rstd: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, mean: Array1<f64>, var: Array1<f64>, eps: f64 },
    GlobalAvgPool { x: NodeId },
    /// Mean softmax cross-entropy over `[B, C]` logits; caches probabilities.
    CrossEntropyMean { logits: NodeId, labels: Vec<usize>, probs: Array2<f64> },
    /// Scalar `sum(x * weights)`; used as a generic loss head in checks.
    WeightedSum { x: NodeId, weights: ArrayD<f64> },
}

/// Gradients produced by [`Tape::backward`], indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the node, if it received one.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn view2(a: &ArrayD<f64>, m: usize, n: usize) -> ArrayView2<'_, f64> {
    a.view().into_shape((m, n)).expect("tape arrays are standard layout")
}

/// Split a shape into (product of leading dims, last dim).
fn lanes_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("non-scalar");
    (shape.iter().product::<usize>() / d, d)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.nodes[id.0].value.first().expect("scalar node")
    }

    /// Insert a leaf (input or parameter).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 2, "weight must be 2-d");
        let (m, k) = lanes_of(&xs);
        assert_eq!(k, ws[0], "linear: inner dims");
        let n = ws[1];
        let xv = view2(&self.nodes[x.0].value, m, k);
        let wv = view2(&self.nodes[w.0].value, ws[0], n);
        let mut y = xv.dot(&wv);
        if let Some(bid) = b {
            let bv = &self.nodes[bid.0].value;
            assert_eq!(bv.len(), n, "bias length");
            let b1 = bv.view().into_shape(n).unwrap();
            y += &b1;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = n;
        let y = y.into_shape(out_shape).unwrap().into_dyn();
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(y, Op::Add { a, b })
    }

    pub fn add_tokens(&mut self, x: NodeId, t: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let tv = self.nodes[t.0].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(&xv.shape()[1..], tv.shape());
        let mut y = xv.to_owned();
        for mut row in y.outer_iter_mut() {
            row += &tv;
        }
        self.push(y.into_dyn(), Op::AddTokens { x, t })
    }

    pub fn affine_channels(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (m, d) = lanes_of(&shape);
        assert_eq!(self.nodes[gamma.0].value.len(), d);
        assert_eq!(self.nodes[beta.0].value.len(), d);
        let xv = view2(&self.nodes[x.0].value, m, d);
        let g = self.nodes[gamma.0].value.view().into_shape(d).unwrap();
        let b = self.nodes[beta.0].value.view().into_shape(d).unwrap();
        let mut y = xv.to_owned();
        for mut row in y.outer_iter_mut() {
            row *= &g;
            row += &b;
        }
        let y = y.into_shape(shape).unwrap();
        self.push(y, Op::AffineChannels { x, gamma, beta })
    }

    pub fn affine_channels_nchw(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let c = xv.shape()[1];
        assert_eq!(self.nodes[gamma.0].value.len(), c);
        let g = self.nodes[gamma.0].value.view().into_shape(c).unwrap().to_owned();
        let b = self.nodes[beta.0].value.view().into_shape(c).unwrap().to_owned();
        let mut y = xv.to_owned();
        for ci in 0..c {
            let mut lane = y.slice_axis_mut(Axis(1), Slice::from(ci..ci + 1));
            lane.mapv_inplace(|v| v * g[ci] + b[ci]);
        }
        self.push(y.into_dyn(), Op::AffineChannelsNchw { x, gamma, beta })
    }

    pub fn concat_tokens(&mut self, rows: NodeId, x: NodeId) -> NodeId {
        let rv = self.nodes[rows.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let p = rv.shape()[0];
        assert_eq!(rv.shape()[1], d);
        let mut y = ndarray::Array3::<f64>::zeros((bsz, p + l, d));
        for mut yb in y.outer_iter_mut() {
            yb.slice_mut(ndarray::s![..p, ..]).assign(&rv);
        }
        y.slice_mut(ndarray::s![.., p.., ..]).assign(&xv);
        self.push(y.into_dyn(), Op::ConcatTokens { rows, x })
    }

    pub fn slice_tokens(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let y = self.nodes[x.0]
            .value
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.push(y, Op::SliceTokens { x, start, len })
    }

    pub fn select_token(&mut self, x: NodeId, index: usize) -> NodeId {
        let y = self.nodes[x.0].value.index_axis(Axis(1), index).to_owned();
        self.push(y, Op::SelectToken { x, index })
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let last = self.nodes[x.0].value.ndim() - 1;
        let y = self.nodes[x.0]
            .value
            .slice_axis(Axis(last), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.push(y, Op::ColSlice { x, start, len })
    }

    pub fn col_concat(&mut self, parts: &[NodeId]) -> NodeId {
        let last = self.nodes[parts[0].0].value.ndim() - 1;
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let y = concatenate(Axis(last), &views).expect("col_concat shapes");
        let y = y.as_standard_layout().into_owned();
        self.push(y, Op::ColConcat { parts: parts.to_vec() })
    }

    pub fn batmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, l, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bsz);
        assert_eq!(bv.shape()[1], k);
        let m = bv.shape()[2];
        let mut y = ndarray::Array3::<f64>::zeros((bsz, l, m));
        for i in 0..bsz {
            let yi = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        self.push(y.into_dyn(), Op::BatMul { a, b })
    }

    pub fn batmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, l, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bsz);
        assert_eq!(bv.shape()[2], k);
        let m = bv.shape()[1];
        let mut y = ndarray::Array3::<f64>::zeros((bsz, l, m));
        for i in 0..bsz {
            let yi = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i).t());
            y.index_axis_mut(Axis(0), i).assign(&yi);
        }
        self.push(y.into_dyn(), Op::BatMulT { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(y, Op::Scale { x, c })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (m, d) = lanes_of(&shape);
        let xv = view2(&self.nodes[x.0].value, m, d);
        let mut y = xv.to_owned();
        for mut row in y.outer_iter_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y = y.into_shape(shape).unwrap();
        self.push(y, Op::SoftmaxLast { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let (m, d) = lanes_of(&shape);
        assert_eq!(self.nodes[gamma.0].value.len(), d);
        let xv = view2(&self.nodes[x.0].value, m, d);
        let g = self.nodes[gamma.0].value.view().into_shape(d).unwrap();
        let b = self.nodes[beta.0].value.view().into_shape(d).unwrap();
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(m);
        for mut row in xhat.outer_iter_mut() {
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            row.mapv_inplace(|v| (v - mu) * r);
        }
        let mut y = xhat.clone();
        for mut row in y.outer_iter_mut() {
            row *= &g;
            row += &b;
        }
        let y = y.into_shape(shape.clone()).unwrap();
        let xhat = xhat.into_shape(shape).unwrap().into_dyn();
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(gelu_fwd);
        self.push(y, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, cin_w, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, cin_w, "conv channels");
        let bias = self.nodes[b.0].value.view().into_shape(cout).unwrap().to_owned();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let wf = wv.into_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let mut y = ndarray::Array4::<f64>::zeros((bsz, cout, ho, wo));
        let mut cols = Vec::with_capacity(bsz);
        for i in 0..bsz {
            let xe = xv.index_axis(Axis(0), i);
            let ce = im2col(&xe, kh, kw, stride, pad, ho, wo);
            let mut ye = wf.dot(&ce);
            for (mut row, bv) in ye.outer_iter_mut().zip(bias.iter()) {
                row += *bv;
            }
            y.index_axis_mut(Axis(0), i)
                .assign(&ye.into_shape((cout, ho, wo)).unwrap());
            cols.push(ce);
        }
        self.push(y.into_dyn(), Op::Conv2d { x, w, b, stride, pad, cols, out_hw: (ho, wo) })
    }

    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let c = xv.shape()[1];
        let n = (xv.shape()[0] * xv.shape()[2] * xv.shape()[3]) as f64;
        let g = self.nodes[gamma.0].value.view().into_shape(c).unwrap().to_owned();
        let b = self.nodes[beta.0].value.view().into_shape(c).unwrap().to_owned();
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(c);
        for ci in 0..c {
            let lane = xv.slice(ndarray::s![.., ci, .., ..]);
            let mu = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| (v - mu) * r);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            y.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * g[ci] + b[ci]);
        }
        self.push(y.into_dyn(), Op::BatchNormTrain { x, gamma, beta, xhat: xhat.into_dyn(), rstd })
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<f64>,
        var: Array1<f64>,
        eps: f64,
    ) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let c = xv.shape()[1];
        assert_eq!(mean.len(), c);
        let g = self.nodes[gamma.0].value.view().into_shape(c).unwrap().to_owned();
        let b = self.nodes[beta.0].value.view().into_shape(c).unwrap().to_owned();
        let mut y = xv.to_owned();
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - mean[ci]) * inv * g[ci] + b[ci]);
        }
        self.push(y.into_dyn(), Op::BatchNormEval { x, gamma, beta, mean, var, eps })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut y = Array2::<f64>::zeros((bsz, c));
        for i in 0..bsz {
            for ci in 0..c {
                y[[i, ci]] = xv.slice(ndarray::s![i, ci, .., ..]).sum() / (h * w) as f64;
            }
        }
        self.push(y.into_dyn(), Op::GlobalAvgPool { x })
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), bsz);
        let mut probs = lv.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            assert!(labels[i] < c, "label within head width");
            loss -= row[labels[i]] - logsum;
            row.mapv_inplace(|v| (v - logsum).exp());
        }
        loss /= bsz as f64;
        self.push(
            arr0(loss).into_dyn(),
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), probs },
        )
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: ArrayD<f64>) -> NodeId {
        assert_eq!(self.nodes[x.0].value.shape(), weights.shape());
        let v = (&self.nodes[x.0].value * &weights).sum();
        self.push(arr0(v).into_dyn(), Op::WeightedSum { x, weights })
    }

    /// Run the backward pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(arr0(1.0).into_dyn());
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let acc = |grads: &mut [Option<ArrayD<f64>>], id: NodeId, add: ArrayD<f64>| {
            let add = if add.is_standard_layout() { add } else { add.as_standard_layout().into_owned() };
            match &mut grads[id.0] {
                Some(existing) => *existing += &add,
                slot @ None => *slot = Some(add),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (m, k) = lanes_of(&xs);
                let n = self.nodes[w.0].value.shape()[1];
                let dy = view2(g, m, n);
                let xv = view2(&self.nodes[x.0].value, m, k);
                let wv = view2(&self.nodes[w.0].value, k, n);
                let dx = dy.dot(&wv.t()).into_shape(xs).unwrap().into_dyn();
                let dw = xv.t().dot(&dy).into_dyn();
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(bid) = b {
                    acc(grads, *bid, dy.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddTokens { x, t } => {
                acc(grads, *x, g.clone());
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                acc(grads, *t, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::AffineChannels { x, gamma, beta } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (m, d) = lanes_of(&shape);
                let dy = view2(g, m, d);
                let xv = view2(&self.nodes[x.0].value, m, d);
                let gv = self.nodes[gamma.0].value.view().into_shape(d).unwrap();
                let mut dx = dy.to_owned();
                for mut row in dx.outer_iter_mut() {
                    row *= &gv;
                }
                acc(grads, *x, dx.into_shape(shape).unwrap().into_dyn());
                acc(grads, *gamma, (&dy * &xv).sum_axis(Axis(0)).into_dyn());
                acc(grads, *beta, dy.sum_axis(Axis(0)).into_dyn());
            }
            Op::AffineChannelsNchw { x, gamma, beta } => {
                let gv4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let c = xv.shape()[1];
                let gamma_v = self.nodes[gamma.0].value.view().into_shape(c).unwrap();
                let mut dx = gv4.to_owned();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let dyc = gv4.slice(ndarray::s![.., ci, .., ..]);
                    let xc = xv.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] = (&dyc * &xc).sum();
                    dbeta[ci] = dyc.sum();
                    dx.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * gamma_v[ci]);
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::ConcatTokens { rows, x } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let p = self.nodes[rows.0].value.shape()[0];
                let drows = gv.slice(ndarray::s![.., ..p, ..]).sum_axis(Axis(0));
                let dx = gv.slice(ndarray::s![.., p.., ..]).to_owned();
                acc(grads, *rows, drows.into_dyn());
                acc(grads, *x, dx.into_dyn());
            }
            Op::SliceTokens { x, start, len } => {
                let mut dx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                dx.slice_axis_mut(Axis(1), Slice::from(*start..*start + *len)).assign(g);
                acc(grads, *x, dx);
            }
            Op::SelectToken { x, index } => {
                let mut dx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                dx.index_axis_mut(Axis(1), *index).assign(&gv);
                acc(grads, *x, dx);
            }
            Op::ColSlice { x, start, len } => {
                let mut dx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                let last = dx.ndim() - 1;
                dx.slice_axis_mut(Axis(last), Slice::from(*start..*start + *len)).assign(g);
                acc(grads, *x, dx);
            }
            Op::ColConcat { parts } => {
                let last = g.ndim() - 1;
                let mut off = 0;
                for p in parts {
                    let w = *self.nodes[p.0].value.shape().last().unwrap();
                    let dp = g
                        .slice_axis(Axis(last), Slice::from(off..off + w))
                        .to_owned();
                    acc(grads, *p, dp);
                    off += w;
                }
            }
            Op::BatMul { a, b } => {
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = av.shape()[0];
                let mut da = ndarray::Array3::<f64>::zeros(av.dim());
                let mut db = ndarray::Array3::<f64>::zeros(bv.dim());
                for i in 0..bsz {
                    let gi = gv.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::BatMulT { a, b } => {
                let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = av.shape()[0];
                let mut da = ndarray::Array3::<f64>::zeros(av.dim());
                let mut db = ndarray::Array3::<f64>::zeros(bv.dim());
                for i in 0..bsz {
                    let gi = gv.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i)));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&av.index_axis(Axis(0), i)));
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::Scale { x, c } => {
                acc(grads, *x, g.mapv(|v| v * c));
            }
            Op::SoftmaxLast { x } => {
                let shape = g.shape().to_vec();
                let (m, d) = lanes_of(&shape);
                let y = view2(&self.nodes[i].value, m, d);
                let dy = view2(g, m, d);
                let mut dx = dy.to_owned();
                for (mut drow, yrow) in dx.outer_iter_mut().zip(y.outer_iter()) {
                    let dot = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>();
                    for (dv, yv) in drow.iter_mut().zip(yrow.iter()) {
                        *dv = (*dv - dot) * yv;
                    }
                }
                acc(grads, *x, dx.into_shape(shape).unwrap().into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let shape = g.shape().to_vec();
                let (m, d) = lanes_of(&shape);
                let dy = view2(g, m, d);
                let xh = view2(xhat, m, d);
                let gv = self.nodes[gamma.0].value.view().into_shape(d).unwrap();
                acc(grads, *gamma, (&dy * &xh).sum_axis(Axis(0)).into_dyn());
                acc(grads, *beta, dy.sum_axis(Axis(0)).into_dyn());
                let mut dx = Array2::<f64>::zeros((m, d));
                for r in 0..m {
                    let dyr = dy.row(r);
                    let xhr = xh.row(r);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = dyr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * xhr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = dyr[j] * gv[j];
                        dx[[r, j]] = rstd[r] * (dh - m1 - xhr[j] * m2);
                    }
                }
                acc(grads, *x, dx.into_shape(shape).unwrap().into_dyn());
            }
            Op::Gelu { x } => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|dv, xv| dv * gelu_bwd(*xv));
                acc(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|dv, xv| if *xv > 0.0 { *dv } else { 0.0 });
                acc(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, stride, pad, cols, out_hw } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let (ho, wo) = *out_hw;
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let wf = wv.into_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut dwf = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut dbias = Array1::<f64>::zeros(cout);
                let mut dx = ndarray::Array4::<f64>::zeros((bsz, cin, h, wdt));
                for iex in 0..bsz {
                    let dye = gv
                        .index_axis(Axis(0), iex)
                        .into_shape((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    dwf += &dye.dot(&cols[iex].t());
                    dbias += &dye.sum_axis(Axis(1));
                    let dcols = wf.t().dot(&dye);
                    col2im(&dcols, &mut dx.index_axis_mut(Axis(0), iex), kh, kw, *stride, *pad, ho, wo);
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *w, dwf.into_shape((cout, cin, kh, kw)).unwrap().into_dyn());
                acc(grads, *b, dbias.into_dyn());
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, rstd } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                let c = xh.shape()[1];
                let n = (xh.shape()[0] * xh.shape()[2] * xh.shape()[3]) as f64;
                let gamma_v = self.nodes[gamma.0].value.view().into_shape(c).unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = gv.to_owned();
                for ci in 0..c {
                    let dyc = gv.slice(ndarray::s![.., ci, .., ..]);
                    let xhc = xh.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] = (&dyc * &xhc).sum();
                    dbeta[ci] = dyc.sum();
                    let m1 = dbeta[ci] * gamma_v[ci] / n;
                    let m2 = dgamma[ci] * gamma_v[ci] / n;
                    let r = rstd[ci];
                    let gc = gamma_v[ci];
                    let mut dxc = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut dxc).and(&xhc).for_each(|dv, xhv| {
                        *dv = r * (*dv * gc - m1 - xhv * m2);
                    });
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::BatchNormEval { x, gamma, beta, mean, var, eps } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let c = xv.shape()[1];
                let gamma_v = self.nodes[gamma.0].value.view().into_shape(c).unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = gv.to_owned();
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let dyc = gv.slice(ndarray::s![.., ci, .., ..]);
                    let xc = xv.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] = dyc
                        .iter()
                        .zip(xc.iter())
                        .map(|(dv, xvv)| dv * (xvv - mean[ci]) * inv)
                        .sum();
                    dbeta[ci] = dyc.sum();
                    dx.slice_mut(ndarray::s![.., ci, .., ..])
                        .mapv_inplace(|v| v * gamma_v[ci] * inv);
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gamma, dgamma.into_dyn());
                acc(grads, *beta, dbeta.into_dyn());
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for i in 0..bsz {
                    for ci in 0..c {
                        dx.slice_mut(ndarray::s![i, ci, .., ..]).fill(gv[[i, ci]] * inv);
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::CrossEntropyMean { logits, labels, probs } => {
                let scale = *g.first().unwrap() / labels.len() as f64;
                let mut dl = probs.clone();
                for (idx, &y) in labels.iter().enumerate() {
                    dl[[idx, y]] -= 1.0;
                }
                dl.mapv_inplace(|v| v * scale);
                acc(grads, *logits, dl.into_dyn());
            }
            Op::WeightedSum { x, weights } => {
                let scale = *g.first().unwrap();
                acc(grads, *x, weights.mapv(|v| v * scale));
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4;
    let inner = S * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * 0.044715 * x * x)
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for oh in 0..ho {
        for ow in 0..wo {
            let col = oh * wo + ow;
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                            cols[[ci * kh * kw + ki * kw + kj, col]] = x[[ci, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    for oh in 0..ho {
        for ow in 0..wo {
            let col = oh * wo + ow;
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                            dx[[ci, ih as usize, iw as usize]] += dcols[[ci * kh * kw + ki * kw + kj, col]];
                        }
                    }
                }
            }
        }
    }
}
