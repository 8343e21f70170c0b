//! Define-by-run reverse-mode autodiff tape.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};

use super::conv::{
    conv2d_bwd, conv2d_fwd, conv_transpose2d_bwd, conv_transpose2d_fwd, Conv2dCfg,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a + broadcast(b)
    Add(NodeId, NodeId),
    /// a * broadcast(b), elementwise
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a [..., k] x w [k, m]
    MatmulLast(NodeId, NodeId),
    /// a [..., n, k] x b [..., k, m], identical leading dims
    BatchMatmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Slice { x: NodeId, axis: usize, start: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    Roll { x: NodeId, axis: usize, shift: isize },
    PadZero { x: NodeId, axis: usize, before: usize },
    SoftmaxLast(NodeId),
    /// layer norm over the last axis with learned scale/shift
    LayerNormLast { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, cfg: Conv2dCfg },
    ConvTranspose2d { x: NodeId, w: NodeId, b: Option<NodeId>, k: usize },
    /// [H, W, C] -> [nW, win*win, C]
    WindowPartition { x: NodeId, win: usize },
    /// [nW, win*win, C] -> [H, W, C]
    WindowMerge { x: NodeId, h: usize, w: usize, win: usize },
    /// table [R, C] indexed by rows -> [idx.len(), C]
    GatherRows { table: NodeId, idx: std::sync::Arc<Vec<usize>> },
    MeanAll(NodeId),
    SumAll(NodeId),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// The autodiff tape. Append-only during forward; `backward` consumes the
/// topological order implied by node indices.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads[id.0].take()
    }
}

fn reduce_to_shape(g: &ArrayViewD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = g.to_owned();
    // sum away leading extra axes
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    // sum axes broadcast from size 1
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn roll_axis(x: &ArrayViewD<f64>, axis: usize, shift: isize) -> ArrayD<f64> {
    let n = x.shape()[axis] as isize;
    if n == 0 {
        return x.to_owned();
    }
    let s = shift.rem_euclid(n);
    if s == 0 {
        return x.to_owned();
    }
    let mut out = ArrayD::zeros(x.raw_dim());
    // out[i + s mod n] = x[i]
    out.slice_axis_mut(Axis(axis), Slice::from(s..n))
        .assign(&x.slice_axis(Axis(axis), Slice::from(0..n - s)));
    out.slice_axis_mut(Axis(axis), Slice::from(0..s))
        .assign(&x.slice_axis(Axis(axis), Slice::from(n - s..n)));
    out
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

fn as_2d(a: &ArrayViewD<f64>, rows: usize, cols: usize) -> ndarray::Array2<f64> {
    a.to_shape((rows, cols)).unwrap().to_owned()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite value on tape");
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    /// Insert a leaf. `needs_grad = true` for parameters, false for data.
    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.nodes[b.0]
            .value
            .broadcast(self.nodes[a.0].value.raw_dim())
            .expect("add: rhs not broadcastable to lhs shape")
            .to_owned();
        let value = &self.nodes[a.0].value + &bv;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.nodes[b.0]
            .value
            .broadcast(self.nodes[a.0].value.raw_dim())
            .expect("mul: rhs not broadcastable to lhs shape")
            .to_owned();
        let value = &self.nodes[a.0].value * &bv;
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// a [..., k] x w [k, m] -> [..., m]
    pub fn matmul_last(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let wsh = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(wsh.len(), 2, "matmul_last weight must be 2-D");
        let k = *ash.last().unwrap();
        assert_eq!(k, wsh[0], "matmul_last inner dim mismatch");
        let n: usize = ash[..ash.len() - 1].iter().product();
        let a2 = as_2d(&self.nodes[a.0].value.view(), n, k);
        let w2 = as_2d(&self.nodes[w.0].value.view(), wsh[0], wsh[1]);
        let out2 = a2.dot(&w2);
        let mut osh = ash.clone();
        *osh.last_mut().unwrap() = wsh[1];
        let value = out2.into_shape(IxDyn(&osh)).unwrap();
        let needs = self.ng(a) || self.ng(w);
        self.push(value, Op::MatmulLast(a, w), needs)
    }

    /// a [..., n, k] x b [..., k, m] with identical leading dims.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ash = self.nodes[a.0].value.shape().to_vec();
        let bsh = self.nodes[b.0].value.shape().to_vec();
        assert_eq!(ash.len(), bsh.len());
        assert!(ash.len() >= 2);
        let d = ash.len();
        assert_eq!(&ash[..d - 2], &bsh[..d - 2], "batch dims mismatch");
        assert_eq!(ash[d - 1], bsh[d - 2], "inner dim mismatch");
        let batch: usize = ash[..d - 2].iter().product();
        let (n, k, m) = (ash[d - 2], ash[d - 1], bsh[d - 1]);
        let a3 = as_2d(&self.nodes[a.0].value.view(), batch * n, k);
        let b2full = self.nodes[b.0].value.view();
        let mut osh = ash.clone();
        osh[d - 1] = m;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&osh));
        {
            let mut out2 = out.view_mut().into_shape((batch, n, m)).unwrap();
            let a3 = a3.into_shape((batch, n, k)).unwrap();
            let b3 = as_2d(&b2full, batch * k, m).into_shape((batch, k, m)).unwrap();
            for i in 0..batch {
                let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                out2.index_axis_mut(Axis(0), i).assign(&prod);
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::BatchMatmul(a, b), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0].value.to_shape(IxDyn(shape)).unwrap().to_owned();
        let needs = self.ng(a);
        self.push(v, Op::Reshape(a), needs)
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let needs = self.ng(a);
        self.push(v, Op::Permute(a, axes.to_vec()), needs)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.ng(a);
        self.push(v, Op::Slice { x: a, axis, start }, needs)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = xs.iter().any(|id| self.ng(*id));
        self.push(v, Op::Concat { xs: xs.to_vec(), axis }, needs)
    }

    pub fn roll(&mut self, a: NodeId, axis: usize, shift: isize) -> NodeId {
        let v = roll_axis(&self.nodes[a.0].value.view(), axis, shift);
        let needs = self.ng(a);
        self.push(v, Op::Roll { x: a, axis, shift }, needs)
    }

    pub fn pad_zero(&mut self, a: NodeId, axis: usize, before: usize, after: usize) -> NodeId {
        let mut shape = self.nodes[a.0].value.shape().to_vec();
        let n = shape[axis];
        shape[axis] = n + before + after;
        let mut v = ArrayD::<f64>::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(before..before + n))
            .assign(&self.nodes[a.0].value);
        let needs = self.ng(a);
        self.push(v, Op::PadZero { x: a, axis, before }, needs)
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        for mut lane in v.rows_mut() {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|x| x / sum);
        }
        let needs = self.ng(a);
        self.push(v, Op::SoftmaxLast(a), needs)
    }

    pub fn layer_norm_last(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let c = *xv.shape().last().unwrap();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut out = xv.clone();
        for mut lane in out.rows_mut() {
            let mean = lane.sum() / c as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[[i]] + bv[[i]];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNormLast { x, gamma, beta, eps }, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        let needs = self.ng(a);
        self.push(v, Op::Gelu(a), needs)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, cfg: Conv2dCfg) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
        let bias = b.map(|bb| {
            self.nodes[bb.0]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned()
        });
        let out = conv2d_fwd(&xv, &wv, bias.as_ref(), &cfg);
        let needs = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, cfg }, needs)
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, k: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
        let bias = b.map(|bb| {
            self.nodes[bb.0]
                .value
                .view()
                .into_dimensionality()
                .unwrap()
                .to_owned()
        });
        let out = conv_transpose2d_fwd(&xv, &wv, bias.as_ref(), k);
        let needs = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, b, k }, needs)
    }

    /// [H, W, C] -> [nW, win*win, C]; requires win | H and win | W.
    pub fn window_partition(&mut self, x: NodeId, win: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(win > 0 && h % win == 0 && w % win == 0, "window must divide padded dims");
        let (nh, nw) = (h / win, w / win);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[nh * nw, win * win, c]));
        for wi in 0..nh {
            for wj in 0..nw {
                for dy in 0..win {
                    for dx in 0..win {
                        for ch in 0..c {
                            out[[wi * nw + wj, dy * win + dx, ch]] =
                                xv[[wi * win + dy, wj * win + dx, ch]];
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::WindowPartition { x, win }, needs)
    }

    /// Exact inverse of [`Graph::window_partition`].
    pub fn window_merge(&mut self, x: NodeId, h: usize, w: usize, win: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[2];
        assert_eq!(xv.shape()[0], (h / win) * (w / win));
        assert_eq!(xv.shape()[1], win * win);
        let nw = w / win;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
        for wi in 0..h / win {
            for wj in 0..nw {
                for dy in 0..win {
                    for dx in 0..win {
                        for ch in 0..c {
                            out[[wi * win + dy, wj * win + dx, ch]] =
                                xv[[wi * nw + wj, dy * win + dx, ch]];
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::WindowMerge { x, h, w, win }, needs)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let tv = &self.nodes[table.0].value;
        assert_eq!(tv.ndim(), 2);
        let cols = tv.shape()[1];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[idx.len(), cols]));
        for (i, &r) in idx.iter().enumerate() {
            for c in 0..cols {
                out[[i, c]] = tv[[r, c]];
            }
        }
        let needs = self.ng(table);
        self.push(out, Op::GatherRows { table, idx: std::sync::Arc::new(idx) }, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mean().unwrap();
        let needs = self.ng(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), v),
            Op::MeanAll(a),
            needs,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum();
        let needs = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::SumAll(a), needs)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients for
    /// every node with `needs_grad`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut Vec<Option<ArrayD<f64>>>, id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                let gb = reduce_to_shape(&g.view(), self.nodes[b.0].value.shape());
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0]
                    .value
                    .broadcast(self.nodes[a.0].value.raw_dim())
                    .unwrap()
                    .to_owned();
                self.acc(grads, *a, g * &bv);
                let ga_full = g * &self.nodes[a.0].value;
                let gb = reduce_to_shape(&ga_full.view(), self.nodes[b.0].value.shape());
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.mapv(|v| v * c));
            }
            Op::MatmulLast(a, w) => {
                let ash = self.nodes[a.0].value.shape().to_vec();
                let wsh = self.nodes[w.0].value.shape().to_vec();
                let k = *ash.last().unwrap();
                let n: usize = ash[..ash.len() - 1].iter().product();
                let a2 = as_2d(&self.nodes[a.0].value.view(), n, k);
                let w2 = as_2d(&self.nodes[w.0].value.view(), wsh[0], wsh[1]);
                let g2 = as_2d(&g.view(), n, wsh[1]);
                let ga = g2.dot(&w2.t()).into_shape(IxDyn(&ash)).unwrap();
                self.acc(grads, *a, ga);
                let gw = a2.t().dot(&g2).into_dyn();
                self.acc(grads, *w, gw);
            }
            Op::BatchMatmul(a, b) => {
                let ash = self.nodes[a.0].value.shape().to_vec();
                let bsh = self.nodes[b.0].value.shape().to_vec();
                let d = ash.len();
                let batch: usize = ash[..d - 2].iter().product();
                let (n, k, m) = (ash[d - 2], ash[d - 1], bsh[d - 1]);
                let a3 = as_2d(&self.nodes[a.0].value.view(), batch * n, k)
                    .into_shape((batch, n, k))
                    .unwrap();
                let b3 = as_2d(&self.nodes[b.0].value.view(), batch * k, m)
                    .into_shape((batch, k, m))
                    .unwrap();
                let g3 = as_2d(&g.view(), batch * n, m).into_shape((batch, n, m)).unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros((batch, n, k));
                let mut gb = ndarray::Array3::<f64>::zeros((batch, k, m));
                for bi in 0..batch {
                    let gi = g3.index_axis(Axis(0), bi);
                    ga.index_axis_mut(Axis(0), bi)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), bi).t()));
                    gb.index_axis_mut(Axis(0), bi)
                        .assign(&a3.index_axis(Axis(0), bi).t().dot(&gi));
                }
                self.acc(grads, *a, ga.into_dyn().into_shape(IxDyn(&ash)).unwrap());
                self.acc(grads, *b, gb.into_dyn().into_shape(IxDyn(&bsh)).unwrap());
            }
            Op::Reshape(a) => {
                let ash = self.nodes[a.0].value.shape().to_vec();
                self.acc(grads, *a, g.to_shape(IxDyn(&ash)).unwrap().to_owned());
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.acc(grads, *a, ga);
            }
            Op::Slice { x, axis, start } => {
                let mut ga = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                let len = g.shape()[*axis];
                ga.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                self.acc(grads, *x, ga);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0usize;
                for id in xs {
                    let len = self.nodes[id.0].value.shape()[*axis];
                    let gi = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    self.acc(grads, *id, gi);
                    offset += len;
                }
            }
            Op::Roll { x, axis, shift } => {
                self.acc(grads, *x, roll_axis(&g.view(), *axis, -shift));
            }
            Op::PadZero { x, axis, before } => {
                let n = self.nodes[x.0].value.shape()[*axis];
                let ga = g
                    .slice_axis(Axis(*axis), Slice::from(*before..*before + n))
                    .to_owned();
                self.acc(grads, *x, ga);
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let mut ga = g * y;
                // subtract y * rowsum(g*y)
                let d = y.ndim();
                let rowsum = ga.sum_axis(Axis(d - 1)).insert_axis(Axis(d - 1));
                ga = &ga - &(y * &rowsum);
                self.acc(grads, *a, ga);
            }
            Op::LayerNormLast { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let c = *xv.shape().last().unwrap();
                let rows = xv.len() / c;
                let x2 = as_2d(&xv.view(), rows, c);
                let g2 = as_2d(&g.view(), rows, c);
                let mut gx2 = ndarray::Array2::<f64>::zeros((rows, c));
                let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                for r in 0..rows {
                    let row = x2.row(r);
                    let grow = g2.row(r);
                    let mean = row.sum() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and the two reduction terms
                    let mut dot_gxhat = 0.0;
                    let mut sum_ghat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let ghat = grow[j] * gv[[j]];
                        ggamma[j] += grow[j] * xhat;
                        gbeta[j] += grow[j];
                        dot_gxhat += ghat * xhat;
                        sum_ghat += ghat;
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let ghat = grow[j] * gv[[j]];
                        gx2[[r, j]] =
                            inv * (ghat - sum_ghat / c as f64 - xhat * dot_gxhat / c as f64);
                    }
                }
                self.acc(grads, *x, gx2.into_dyn().into_shape(xv.raw_dim()).unwrap());
                self.acc(grads, *gamma, ggamma.into_dyn());
                self.acc(grads, *beta, gbeta.into_dyn());
            }
            Op::Gelu(a) => {
                let ga = ndarray::Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|gv, xv| gv * gelu_grad_scalar(*xv));
                self.acc(grads, *a, ga);
            }
            Op::Conv2d { x, w, b, cfg } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
                let gv = g.view().into_dimensionality().unwrap();
                let (gx, gw, gb) = conv2d_bwd(&xv, &wv, cfg, &gv);
                self.acc(grads, *x, gx.into_dyn());
                self.acc(grads, *w, gw.into_dyn());
                if let Some(bb) = b {
                    self.acc(grads, *bb, gb.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, b, k } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
                let gv = g.view().into_dimensionality().unwrap();
                let (gx, gw, gb) = conv_transpose2d_bwd(&xv, &wv, *k, &gv);
                self.acc(grads, *x, gx.into_dyn());
                self.acc(grads, *w, gw.into_dyn());
                if let Some(bb) = b {
                    self.acc(grads, *bb, gb.into_dyn());
                }
            }
            Op::WindowPartition { x, win } => {
                let xsh = self.nodes[x.0].value.shape().to_vec();
                let (h, w, c) = (xsh[0], xsh[1], xsh[2]);
                let nw = w / win;
                let mut ga = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                for wi in 0..h / win {
                    for wj in 0..nw {
                        for dy in 0..*win {
                            for dx in 0..*win {
                                for ch in 0..c {
                                    ga[[wi * win + dy, wj * win + dx, ch]] +=
                                        g[[wi * nw + wj, dy * win + dx, ch]];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, ga);
            }
            Op::WindowMerge { x, h, w, win } => {
                let c = self.nodes[x.0].value.shape()[2];
                let nw = w / win;
                let mut ga = ArrayD::<f64>::zeros(IxDyn(&[(h / win) * nw, win * win, c]));
                for wi in 0..h / win {
                    for wj in 0..nw {
                        for dy in 0..*win {
                            for dx in 0..*win {
                                for ch in 0..c {
                                    ga[[wi * nw + wj, dy * win + dx, ch]] +=
                                        g[[wi * win + dy, wj * win + dx, ch]];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, ga);
            }
            Op::GatherRows { table, idx } => {
                let tsh = self.nodes[table.0].value.shape().to_vec();
                let mut gt = ArrayD::<f64>::zeros(IxDyn(&tsh));
                for (i, &r) in idx.iter().enumerate() {
                    for c in 0..tsh[1] {
                        gt[[r, c]] += g[[i, c]];
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = g[[0]] / n;
                self.acc(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv));
            }
            Op::SumAll(a) => {
                let gv = g[[0]];
                self.acc(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv));
            }
        }
    }
}
