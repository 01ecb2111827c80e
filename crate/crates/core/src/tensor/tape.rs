use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Abs,
    Exp,
    Sigmoid,
    Relu,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffAxis {
    H,
    W,
}

#[derive(Clone, Debug)]
pub(crate) enum OpRecord {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    /// y = scale * x + offset
    Affine {
        a: usize,
        scale: f64,
    },
    ClampMin {
        a: usize,
        min: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    SliceAxis0 {
        a: usize,
        start: usize,
        chunk: usize,
    },
    ConcatAxis0 {
        parts: Vec<(usize, usize)>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: super::spatial::ConvGeom,
    },
    PoolAdaptive {
        a: usize,
        channels: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    UpsampleBilinear {
        a: usize,
        channels: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    BoxFilter3 {
        a: usize,
        channels: usize,
        hw: (usize, usize),
    },
    SpatialDiff {
        a: usize,
        axis: DiffAxis,
        channels: usize,
        hw: (usize, usize),
    },
    GridSample {
        img: usize,
        grid: usize,
        channels: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Rodrigues {
        w: usize,
    },
}

/// Reverse-mode autodiff tape.
///
/// Ops append nodes in execution order; `backward` walks them in exact
/// reverse order and populates `grad` on every reachable node that
/// requires gradients.
pub struct Tape {
    pub(crate) nodes: Vec<Tensor>,
    pub(crate) ops: Vec<OpRecord>,
    backward_done: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Trailing-dimension broadcasting -----------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcast-compatible",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Expand `data` of `shape` to `out_shape` by broadcasting. Returns the
/// input untouched when shapes already agree.
fn broadcast_expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let rank = out_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);

    // stride 0 along broadcast dims
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }

    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape`, the adjoint of
/// broadcasting.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - target_shape.len()..].copy_from_slice(target_shape);

    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }

    let numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    let mut dst = 0usize;
    for &g in grad.iter() {
        out[dst] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            dst += strides[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            dst -= strides[d] * grad_shape[d];
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
            check_finite: false,
        }
    }

    /// Panic on any non-finite op output. Off by default; NaN/Inf is an
    /// error state and the trainer checks the loss explicitly.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, t: Tensor, op: OpRecord) -> TensorId {
        if self.check_finite && !t.all_finite() {
            panic!("non-finite values produced by {:?}", op_name(&op));
        }
        self.nodes.push(t);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf; gradient participation follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, OpRecord::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn item(&self, id: TensorId) -> f64 {
        self.nodes[id.0].item()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn out_flags(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // Elementwise ----------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> TensorId {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shape(&an.shape, &bn.shape);
        let f = |x: f64, y: f64| -> f64 {
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
            }
        };
        let data = if an.shape == bn.shape {
            an.data.iter().zip(&bn.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ax = broadcast_expand(&an.data, &an.shape, &out_shape);
            let bx = broadcast_expand(&bn.data, &bn.shape, &out_shape);
            ax.iter().zip(&bx).map(|(&x, &y)| f(x, y)).collect()
        };
        let mut t = Tensor::new(out_shape, data);
        t.requires_grad = self.out_flags(&[a.0, b.0]);
        self.push(t, OpRecord::Binary { kind, a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(BinaryKind::Min, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: TensorId) -> TensorId {
        let an = &self.nodes[a.0];
        let data: Vec<f64> = an
            .data
            .iter()
            .map(|&x| match kind {
                UnaryKind::Abs => x.abs(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Elu => {
                    if x > 0.0 {
                        x
                    } else {
                        x.exp() - 1.0
                    }
                }
            })
            .collect();
        let mut t = Tensor::new(an.shape.clone(), data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::Unary { kind, a: a.0 })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn elu(&mut self, a: TensorId) -> TensorId {
        self.unary(UnaryKind::Elu, a)
    }

    /// y = scale * x + offset
    pub fn affine(&mut self, a: TensorId, scale: f64, offset: f64) -> TensorId {
        let an = &self.nodes[a.0];
        let data: Vec<f64> = an.data.iter().map(|&x| scale * x + offset).collect();
        let mut t = Tensor::new(an.shape.clone(), data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::Affine { a: a.0, scale })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.affine(a, -1.0, 0.0)
    }

    pub fn clamp_min(&mut self, a: TensorId, min: f64) -> TensorId {
        let an = &self.nodes[a.0];
        let data: Vec<f64> = an.data.iter().map(|&x| x.max(min)).collect();
        let mut t = Tensor::new(an.shape.clone(), data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::ClampMin { a: a.0, min })
    }

    // Linear algebra and structure ------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(an.rank(), 2, "matmul lhs must be 2-D, got {:?}", an.shape);
        assert_eq!(bn.rank(), 2, "matmul rhs must be 2-D, got {:?}", bn.shape);
        let (m, k) = (an.shape[0], an.shape[1]);
        let (k2, n) = (bn.shape[0], bn.shape[1]);
        assert_eq!(k, k2, "matmul inner extents differ: {} vs {}", k, k2);
        let data = matmul_raw(&an.data, &bn.data, m, k, n);
        let mut t = Tensor::new(vec![m, n], data);
        t.requires_grad = self.out_flags(&[a.0, b.0]);
        self.push(t, OpRecord::MatMul { a: a.0, b: b.0, m, k, n })
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorId {
        let an = &self.nodes[a.0];
        assert_eq!(an.rank(), 2, "transpose2d on shape {:?}", an.shape);
        let (rows, cols) = (an.shape[0], an.shape[1]);
        let data = transpose_raw(&an.data, rows, cols);
        let mut t = Tensor::new(vec![cols, rows], data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::Transpose2d { a: a.0, rows, cols })
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let an = &self.nodes[a.0];
        assert_eq!(
            shape.iter().product::<usize>(),
            an.numel(),
            "reshape {:?} -> {:?} changes element count",
            an.shape,
            shape
        );
        let mut t = Tensor::new(shape, an.data.clone());
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::Reshape { a: a.0 })
    }

    /// Contiguous slice along the first axis.
    pub fn slice_axis0(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let an = &self.nodes[a.0];
        assert!(!an.shape.is_empty());
        assert!(start + len <= an.shape[0], "slice [{start}, {start}+{len}) out of {:?}", an.shape);
        let chunk: usize = an.shape[1..].iter().product();
        let data = an.data[start * chunk..(start + len) * chunk].to_vec();
        let mut shape = an.shape.clone();
        shape[0] = len;
        let mut t = Tensor::new(shape, data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::SliceAxis0 { a: a.0, start, chunk })
    }

    /// Concatenate along the first axis; trailing extents must agree.
    pub fn concat_axis0(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tail = self.nodes[parts[0].0].shape[1..].to_vec();
        let mut data = Vec::new();
        let mut d0 = 0;
        let mut rec = Vec::with_capacity(parts.len());
        for &p in parts {
            let pn = &self.nodes[p.0];
            assert_eq!(pn.shape[1..], tail[..], "concat trailing extents differ");
            data.extend_from_slice(&pn.data);
            d0 += pn.shape[0];
            rec.push((p.0, pn.numel()));
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&tail);
        let mut t = Tensor::new(shape, data);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        t.requires_grad = self.out_flags(&ids);
        self.push(t, OpRecord::ConcatAxis0 { parts: rec })
    }

    // Reductions -------------------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let an = &self.nodes[a.0];
        let s: f64 = an.data.iter().sum();
        let mut t = Tensor::scalar(s);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let an = &self.nodes[a.0];
        assert!(an.numel() > 0);
        let s: f64 = an.data.iter().sum::<f64>() / an.numel() as f64;
        let mut t = Tensor::scalar(s);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::MeanAll { a: a.0 })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let an = &self.nodes[a.0];
        assert!(axis < an.rank(), "softmax axis {} out of rank {}", axis, an.rank());
        let outer: usize = an.shape[..axis].iter().product();
        let alen = an.shape[axis];
        let inner: usize = an.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; an.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..alen {
                    mx = mx.max(an.data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..alen {
                    let e = (an.data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..alen {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let mut t = Tensor::new(an.shape.clone(), data);
        t.requires_grad = an.requires_grad;
        self.push(t, OpRecord::Softmax { a: a.0, axis })
    }

    // Backward ----------------------------------------------------------------

    /// Reverse pass from a one-element node. Populates `grad` on every
    /// reachable node with `requires_grad`. Calling it again without
    /// `zero_grads` is an error.
    pub fn backward(&mut self, out: TensorId) {
        assert_eq!(
            self.nodes[out.0].numel(),
            1,
            "backward needs a scalar output, got shape {:?}",
            self.nodes[out.0].shape
        );
        assert!(
            !self.backward_done,
            "repeated backward without zero_grads reset"
        );
        self.backward_done = true;
        if !self.nodes[out.0].requires_grad {
            return; // constant graph: no-op
        }
        self.nodes[out.0].grad = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let up = self.nodes[idx].grad.clone().unwrap();
            let op = self.ops[idx].clone();
            self.dispatch_vjp(idx, &op, &up);
        }
    }

    /// Clear all gradients and re-arm backward.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, node: usize, contrib: &[f64]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let n = self.nodes[node].numel();
        let g = self.nodes[node].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gv, &c) in g.iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    fn dispatch_vjp(&mut self, idx: usize, op: &OpRecord, up: &[f64]) {
        match op {
            OpRecord::Leaf => {}
            OpRecord::Binary { kind, a, b } => self.vjp_binary(idx, *kind, *a, *b, up),
            OpRecord::Unary { kind, a } => {
                let contrib: Vec<f64> = match kind {
                    UnaryKind::Abs => self.nodes[*a]
                        .data
                        .iter()
                        .zip(up)
                        .map(|(&x, &u)| {
                            if x > 0.0 {
                                u
                            } else if x < 0.0 {
                                -u
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    UnaryKind::Exp => self.nodes[idx].data.iter().zip(up).map(|(&y, &u)| u * y).collect(),
                    UnaryKind::Sigmoid => self.nodes[idx]
                        .data
                        .iter()
                        .zip(up)
                        .map(|(&y, &u)| u * y * (1.0 - y))
                        .collect(),
                    UnaryKind::Relu => self.nodes[*a]
                        .data
                        .iter()
                        .zip(up)
                        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                        .collect(),
                    UnaryKind::Elu => {
                        let xs = &self.nodes[*a].data;
                        let ys = &self.nodes[idx].data;
                        xs.iter()
                            .zip(ys)
                            .zip(up)
                            .map(|((&x, &y), &u)| if x > 0.0 { u } else { u * (y + 1.0) })
                            .collect()
                    }
                };
                self.accumulate(*a, &contrib);
            }
            OpRecord::Affine { a, scale } => {
                let contrib: Vec<f64> = up.iter().map(|&u| u * scale).collect();
                self.accumulate(*a, &contrib);
            }
            OpRecord::ClampMin { a, min } => {
                let contrib: Vec<f64> = self.nodes[*a]
                    .data
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > *min { u } else { 0.0 })
                    .collect();
                self.accumulate(*a, &contrib);
            }
            OpRecord::MatMul { a, b, m, k, n } => {
                // da = up . b^T ; db = a^T . up
                let bt = transpose_raw(&self.nodes[*b].data, *k, *n);
                let da = matmul_raw(up, &bt, *m, *n, *k);
                self.accumulate(*a, &da);
                let at = transpose_raw(&self.nodes[*a].data, *m, *k);
                let db = matmul_raw(&at, up, *k, *m, *n);
                self.accumulate(*b, &db);
            }
            OpRecord::Transpose2d { a, rows, cols } => {
                let contrib = transpose_raw(up, *cols, *rows);
                let _ = rows;
                self.accumulate(*a, &contrib);
            }
            OpRecord::Reshape { a } => {
                self.accumulate(*a, up);
            }
            OpRecord::SliceAxis0 { a, start, chunk } => {
                let mut contrib = vec![0.0; self.nodes[*a].numel()];
                contrib[start * chunk..start * chunk + up.len()].copy_from_slice(up);
                self.accumulate(*a, &contrib);
            }
            OpRecord::ConcatAxis0 { parts } => {
                let mut off = 0;
                for &(pid, n) in parts {
                    let seg = up[off..off + n].to_vec();
                    self.accumulate(pid, &seg);
                    off += n;
                }
            }
            OpRecord::SumAll { a } => {
                let contrib = vec![up[0]; self.nodes[*a].numel()];
                self.accumulate(*a, &contrib);
            }
            OpRecord::MeanAll { a } => {
                let n = self.nodes[*a].numel();
                let contrib = vec![up[0] / n as f64; n];
                self.accumulate(*a, &contrib);
            }
            OpRecord::Softmax { a, axis } => {
                let an_shape = self.nodes[*a].shape.clone();
                let y = &self.nodes[idx].data;
                let outer: usize = an_shape[..*axis].iter().product();
                let alen = an_shape[*axis];
                let inner: usize = an_shape[*axis + 1..].iter().product();
                let mut contrib = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * alen * inner + i;
                        let mut dot = 0.0;
                        for j in 0..alen {
                            let p = base + j * inner;
                            dot += up[p] * y[p];
                        }
                        for j in 0..alen {
                            let p = base + j * inner;
                            contrib[p] = y[p] * (up[p] - dot);
                        }
                    }
                }
                self.accumulate(*a, &contrib);
            }
            OpRecord::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = super::spatial::conv2d_vjp(
                    &self.nodes[*x].data,
                    &self.nodes[*w].data,
                    up,
                    geom,
                );
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
                self.accumulate(*b, &db);
            }
            OpRecord::PoolAdaptive {
                a,
                channels,
                in_hw,
                out_hw,
            } => {
                let dx = super::spatial::pool_adaptive_vjp(up, *channels, *in_hw, *out_hw);
                self.accumulate(*a, &dx);
            }
            OpRecord::UpsampleBilinear {
                a,
                channels,
                in_hw,
                out_hw,
            } => {
                let dx = super::spatial::upsample_bilinear_vjp(up, *channels, *in_hw, *out_hw);
                self.accumulate(*a, &dx);
            }
            OpRecord::BoxFilter3 { a, channels, hw } => {
                let dx = super::spatial::box_filter3_vjp(up, *channels, *hw);
                self.accumulate(*a, &dx);
            }
            OpRecord::SpatialDiff {
                a,
                axis,
                channels,
                hw,
            } => {
                let dx = super::spatial::spatial_diff_vjp(up, *axis, *channels, *hw);
                self.accumulate(*a, &dx);
            }
            OpRecord::GridSample {
                img,
                grid,
                channels,
                in_hw,
                out_hw,
            } => {
                let (dimg, dgrid) = super::spatial::grid_sample_vjp(
                    &self.nodes[*img].data,
                    &self.nodes[*grid].data,
                    up,
                    *channels,
                    *in_hw,
                    *out_hw,
                );
                self.accumulate(*img, &dimg);
                self.accumulate(*grid, &dgrid);
            }
            OpRecord::Rodrigues { w } => {
                let dw = super::rodrigues::rodrigues_vjp(&self.nodes[*w].data, up);
                self.accumulate(*w, &dw);
            }
        }
    }

    fn vjp_binary(&mut self, idx: usize, kind: BinaryKind, a: usize, b: usize, up: &[f64]) {
        let out_shape = self.nodes[idx].shape.clone();
        let a_shape = self.nodes[a].shape.clone();
        let b_shape = self.nodes[b].shape.clone();
        let same = a_shape == b_shape;

        let (ax, bx): (Vec<f64>, Vec<f64>) = if same {
            (Vec::new(), Vec::new())
        } else {
            (
                broadcast_expand(&self.nodes[a].data, &a_shape, &out_shape),
                broadcast_expand(&self.nodes[b].data, &b_shape, &out_shape),
            )
        };
        let av = |i: usize| -> f64 {
            if same {
                self.nodes[a].data[i]
            } else {
                ax[i]
            }
        };
        let bv = |i: usize| -> f64 {
            if same {
                self.nodes[b].data[i]
            } else {
                bx[i]
            }
        };

        let mut da = vec![0.0; up.len()];
        let mut db = vec![0.0; up.len()];
        match kind {
            BinaryKind::Add => {
                da.copy_from_slice(up);
                db.copy_from_slice(up);
            }
            BinaryKind::Sub => {
                da.copy_from_slice(up);
                for (d, &u) in db.iter_mut().zip(up) {
                    *d = -u;
                }
            }
            BinaryKind::Mul => {
                for i in 0..up.len() {
                    da[i] = up[i] * bv(i);
                    db[i] = up[i] * av(i);
                }
            }
            BinaryKind::Div => {
                for i in 0..up.len() {
                    let b_i = bv(i);
                    da[i] = up[i] / b_i;
                    db[i] = -up[i] * av(i) / (b_i * b_i);
                }
            }
            BinaryKind::Min => {
                for i in 0..up.len() {
                    if av(i) <= bv(i) {
                        da[i] = up[i];
                    } else {
                        db[i] = up[i];
                    }
                }
            }
        }
        let da = reduce_to_shape(&da, &out_shape, &a_shape);
        let db = reduce_to_shape(&db, &out_shape, &b_shape);
        self.accumulate(a, &da);
        self.accumulate(b, &db);
    }
}

fn op_name(op: &OpRecord) -> &'static str {
    match op {
        OpRecord::Leaf => "leaf",
        OpRecord::Binary { .. } => "binary",
        OpRecord::Unary { .. } => "unary",
        OpRecord::Affine { .. } => "affine",
        OpRecord::ClampMin { .. } => "clamp_min",
        OpRecord::MatMul { .. } => "matmul",
        OpRecord::Transpose2d { .. } => "transpose2d",
        OpRecord::Reshape { .. } => "reshape",
        OpRecord::SliceAxis0 { .. } => "slice_axis0",
        OpRecord::ConcatAxis0 { .. } => "concat_axis0",
        OpRecord::SumAll { .. } => "sum_all",
        OpRecord::MeanAll { .. } => "mean_all",
        OpRecord::Softmax { .. } => "softmax",
        OpRecord::Conv2d { .. } => "conv2d",
        OpRecord::PoolAdaptive { .. } => "pool_adaptive",
        OpRecord::UpsampleBilinear { .. } => "upsample_bilinear",
        OpRecord::BoxFilter3 { .. } => "box_filter3",
        OpRecord::SpatialDiff { .. } => "spatial_diff",
        OpRecord::GridSample { .. } => "grid_sample",
        OpRecord::Rodrigues { .. } => "rodrigues",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_basic() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let c = t.add(a, b);
        assert_eq!(t.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(a);
        assert_eq!(t.item(s), 0.5);
    }

    #[test]
    fn abs_backward_signs() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![-2.0, 3.0]));
        let y = t.abs(a);
        let s = t.sum_all(y);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn matmul_identity_and_example() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = t.constant(Tensor::new(vec![2, 3], vec![5.0, -1.0, 2.0, 0.5, 7.0, 9.0]));
        let y = t.matmul(i2, x);
        assert_eq!(t.data(y), t.data(x));

        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.data(c), &[3.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 2]));
        let _ = t.matmul(a, b);
    }

    #[test]
    fn softmax_uniform_and_forced() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![4], vec![0.0; 4]));
        let s = t.softmax(a, 0);
        for &v in t.data(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let b = t.constant(Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 3.0f64.ln()]));
        let s = t.softmax(b, 0);
        let d = t.data(s);
        for &v in &d[..3] {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((d[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]));
        let s = t.softmax(a, 0);
        assert_eq!(t.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(
            vec![2, 3],
            vec![0.3, -2.0, 1.7, 40.0, 39.5, 38.0],
        ));
        let s = t.softmax(a, 1);
        let d = t.data(s);
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(d[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn square_backward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_graph_backward_is_noop() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        t.backward(y);
        assert!(t.grad(x).is_none());
    }

    #[test]
    #[should_panic(expected = "repeated backward")]
    fn repeated_backward_panics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        t.backward(y);
        t.backward(y);
    }

    #[test]
    fn zero_grads_rearms_backward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        t.backward(y);
        t.zero_grads();
        t.backward(y);
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    #[should_panic(expected = "scalar output")]
    fn backward_nonscalar_panics() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        t.backward(x);
    }

    #[test]
    fn broadcast_add_commutes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::new(vec![2], vec![10.0, 20.0]));
        let ab = t.add(a, b);
        let ba = t.add(b, a);
        assert_eq!(t.data(ab), t.data(ba));
        assert_eq!(t.data(ab), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn broadcast_grad_reduces() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.param(Tensor::new(vec![1], vec![5.0]));
        let y = t.mul(a, b);
        let s = t.sum_all(y);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap(), &[5.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[10.0]); // sum of a
    }

    #[test]
    #[should_panic(expected = "not broadcast-compatible")]
    fn incompatible_shapes_panic() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 2]));
        let _ = t.add(a, b);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn div_by_zero_is_error_state() {
        let mut t = Tape::new();
        t.set_check_finite(true);
        let a = t.constant(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(0.0));
        let _ = t.div(a, b);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = t.slice_axis0(a, 0, 1);
        let rest = t.slice_axis0(a, 1, 2);
        let back = t.concat_axis0(&[top, rest]);
        assert_eq!(t.data(back), t.data(a));
        let s = t.sum_all(back);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn minimum_routes_gradient_to_smaller() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 5.0]));
        let b = t.param(Tensor::new(vec![2], vec![2.0, 4.0]));
        let m = t.minimum(a, b);
        assert_eq!(t.data(m), &[1.0, 4.0]);
        let s = t.sum_all(m);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.0, 1.0]);
    }
}
