//! Operation tape: eager forward evaluation with recorded nodes, replayed
//! in reverse creation order for gradient accumulation.
//!
//! Inputs of a node always precede it on the tape, so one reverse sweep
//! visits each node exactly once and gradients accumulate additively at
//! fan-out. A tape is single-writer; run one forward/backward pass per
//! tape and parallelize only across independent tapes.

use super::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Broadcast form of the right operand in elementwise ops: equal shape,
/// a per-channel vector applied over (batch, height, width), or a single
/// scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: usize, b: usize, bc: Broadcast },
    Affine { x: usize, mul: f64, add: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    Ln { x: usize },
    Powf { x: usize, p: f64 },
    Huber { x: usize },
    Relu { x: usize },
    TanhOp { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Fc { x: usize, w: usize, b: usize },
    MaxPool2 { x: usize },
    GlobalAvg { x: usize },
    L2Rescale { x: usize, target: f64 },
    BilinearSample { x: usize, off: usize },
    ConcatC { a: usize, b: usize },
    SliceC { x: usize, from: usize, to: usize },
    Reshape { x: usize },
    Sum { x: usize },
}

struct Node<T: Real> {
    op: Op,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
}

/// Recording tape. Node order is creation order; backward walks it in
/// reverse.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Denominator guard for zero-norm positions in `l2_rescale`.
pub const L2_NORM_EPS: f64 = 1e-8;

fn bc_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    if b.len() == 1 && b[0] == 1 {
        return Some(Broadcast::Scalar);
    }
    if b.len() == 1 && a.len() >= 2 && b[0] == a[1] {
        return Some(Broadcast::Channel);
    }
    None
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor (parameter or constant).
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        self.nodes.push(Node { op: Op::Leaf, value: t, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, populated by [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor { dims: node.value.dims.clone(), data: g.clone() })
    }

    fn push(&mut self, opname: &'static str, op: Op, dims: &[usize], data: Vec<T>) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite_val()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        let value = Tensor::new(dims, data)?;
        self.nodes.push(Node { op, value, grad: None });
        Ok(TensorId(self.nodes.len() - 1))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, opname: &'static str, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ad, bd) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = bc_kind(ad.dims(), bd.dims()).ok_or_else(|| TensorError::ShapeMismatch {
            op: opname,
            lhs: ad.dims().to_vec(),
            rhs: bd.dims().to_vec(),
        })?;
        let cs: usize = ad.dims().iter().skip(2).product();
        let nch = if ad.rank() >= 2 { ad.dims()[1] } else { 1 };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let bdat = bd.data();
        let out: Vec<T> = ad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bdat[i],
                    Broadcast::Scalar => bdat[0],
                    Broadcast::Channel => bdat[(i / cs) % nch],
                };
                T::from_f64(f(x.to_f64(), y.to_f64()))
            })
            .collect();
        let dims = ad.dims().to_vec();
        self.push(opname, Op::Bin { kind, a: a.0, b: b.0, bc }, &dims, out)
    }

    /// Elementwise sum. `b` may also be a per-channel vector or a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, "add", a, b)
    }

    /// Elementwise difference with the same broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(mul * v.to_f64() + add)).collect();
        let dims = xv.dims().to_vec();
        self.push("affine", Op::Affine { x: x.0, mul, add }, &dims, out)
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(TensorError::Invalid { op: "clamp", reason: format!("lo {lo} >= hi {hi}") });
        }
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(v.to_f64().clamp(lo, hi))).collect();
        let dims = xv.dims().to_vec();
        self.push("clamp", Op::Clamp { x: x.0, lo, hi }, &dims, out)
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(v.to_f64().ln())).collect();
        let dims = xv.dims().to_vec();
        self.push("ln", Op::Ln { x: x.0 }, &dims, out)
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&mut self, x: TensorId, p: f64) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(v.to_f64().powf(p))).collect();
        let dims = xv.dims().to_vec();
        self.push("powf", Op::Powf { x: x.0, p }, &dims, out)
    }

    /// Smooth-L1 kernel: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn huber(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| {
                let v = v.to_f64();
                T::from_f64(if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
            })
            .collect();
        let dims = xv.dims().to_vec();
        self.push("huber", Op::Huber { x: x.0 }, &dims, out)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(v.to_f64().max(0.0))).collect();
        let dims = xv.dims().to_vec();
        self.push("relu", Op::Relu { x: x.0 }, &dims, out)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> = xv.data().iter().map(|&v| T::from_f64(v.to_f64().tanh())).collect();
        let dims = xv.dims().to_vec();
        self.push("tanh", Op::TanhOp { x: x.0 }, &dims, out)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<T> =
            xv.data().iter().map(|&v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp()))).collect();
        let dims = xv.dims().to_vec();
        self.push("sigmoid", Op::Sigmoid { x: x.0 }, &dims, out)
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(TensorError::Invalid {
                op: "softmax",
                reason: format!("axis {axis} out of range for rank {}", xv.rank()),
            });
        }
        let dims = xv.dims().to_vec();
        let out = softmax_forward(&xv.to_f64_vec(), &dims, axis);
        let out: Vec<T> = out.into_iter().map(T::from_f64).collect();
        self.push("softmax", Op::Softmax { x: x.0, axis }, &dims, out)
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Direct 2-D convolution, square kernel. Output extent
    /// `(H + 2*pad - k) / stride + 1` must divide exactly. Loop order is
    /// (batch, out-channel, in-channel, kh, kw, out-rows, out-cols) with a
    /// per-plane f64 accumulator.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let geom = ConvGeom::resolve(xv.dims(), wv.dims(), bv.dims(), stride, pad)?;
        let out = conv2d_forward(xv.data(), wv.data(), bv.data(), &geom);
        let dims = [geom.n, geom.cout, geom.h_out, geom.w_out];
        self.push("conv2d", Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }, &dims, out)
    }

    /// Affine map over flattened features: x (N, ...) -> (N, out). Rank-1
    /// input is treated as a single row and yields a rank-1 output.
    pub fn fully_connected(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if wv.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "fully_connected",
                reason: format!("weight must be rank 2, got {:?}", wv.dims()),
            });
        }
        let (f_out, f_in) = (wv.dims()[0], wv.dims()[1]);
        let rank1 = xv.rank() == 1;
        let n = if rank1 { 1 } else { xv.dims()[0] };
        let flat = xv.numel() / n;
        if flat != f_in {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                lhs: xv.dims().to_vec(),
                rhs: wv.dims().to_vec(),
            });
        }
        if bv.dims() != [f_out] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                lhs: bv.dims().to_vec(),
                rhs: vec![f_out],
            });
        }
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = Vec::with_capacity(n * f_out);
        for row in 0..n {
            let xr = &xd[row * flat..(row + 1) * flat];
            for o in 0..f_out {
                let wr = &wd[o * f_in..(o + 1) * f_in];
                let mut acc = bd[o].to_f64();
                for (xe, we) in xr.iter().zip(wr) {
                    acc += xe.to_f64() * we.to_f64();
                }
                out.push(T::from_f64(acc));
            }
        }
        let dims: Vec<usize> = if rank1 { vec![f_out] } else { vec![n, f_out] };
        self.push("fully_connected", Op::Fc { x: x.0, w: w.0, b: b.0 }, &dims, out)
    }

    /// 2x2 max pooling with stride 2; requires even spatial extents. Ties
    /// resolve to the first element in (top-left, top-right, bottom-left,
    /// bottom-right) scan order.
    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = rank4_dims("maxpool2", xv)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "maxpool2",
                reason: format!("odd spatial extents {h}x{w}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xc in 0..wo {
                    let i00 = base + (2 * y) * w + 2 * xc;
                    let mut best = xd[i00];
                    for &cand in &[xd[i00 + 1], xd[i00 + w], xd[i00 + w + 1]] {
                        if cand > best {
                            best = cand;
                        }
                    }
                    out.push(best);
                }
            }
        }
        self.push("maxpool2", Op::MaxPool2 { x: x.0 }, &[n, c, ho, wo], out)
    }

    /// Global average pooling: (N,C,H,W) -> (N,C,1,1), f64 accumulation.
    pub fn global_avg(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = rank4_dims("global_avg", xv)?;
        let hw = (h * w) as f64;
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let mut acc = 0f64;
            for v in &xd[plane * h * w..(plane + 1) * h * w] {
                acc += v.to_f64();
            }
            out.push(T::from_f64(acc / hw));
        }
        self.push("global_avg", Op::GlobalAvg { x: x.0 }, &[n, c, 1, 1], out)
    }

    /// Rescales each spatial position's channel vector to the target L2
    /// norm. Positions with norm below [`L2_NORM_EPS`] divide by the guard
    /// instead, so a zero vector stays zero.
    pub fn l2_rescale(&mut self, x: TensorId, target: f64) -> Result<TensorId> {
        if !(target > 0.0) {
            return Err(TensorError::Invalid {
                op: "l2_rescale",
                reason: format!("target norm {target} must be positive"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = rank4_dims("l2_rescale", xv)?;
        let xd = xv.data();
        let hw = h * w;
        let mut out = vec![T::ZERO; xd.len()];
        for img in 0..n {
            for pos in 0..hw {
                let mut sq = 0f64;
                for ch in 0..c {
                    let v = xd[(img * c + ch) * hw + pos].to_f64();
                    sq += v * v;
                }
                let denom = sq.sqrt().max(L2_NORM_EPS);
                for ch in 0..c {
                    let i = (img * c + ch) * hw + pos;
                    out[i] = T::from_f64(target * xd[i].to_f64() / denom);
                }
            }
        }
        let dims = [n, c, h, w];
        self.push("l2_rescale", Op::L2Rescale { x: x.0, target }, &dims, out)
    }

    /// Resamples `x` at (col + dx, row + dy) per output pixel with bilinear
    /// weights. `off` is (N,2,H,W): channel 0 = dx (columns), channel 1 =
    /// dy (rows). Source coordinates clamp to the valid range (border
    /// replication). Zero offsets reproduce the input bit for bit.
    pub fn bilinear_sample(&mut self, x: TensorId, off: TensorId) -> Result<TensorId> {
        let (xv, ov) = (&self.nodes[x.0].value, &self.nodes[off.0].value);
        let (n, c, h, w) = rank4_dims("bilinear_sample", xv)?;
        if ov.dims() != [n, 2, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: ov.dims().to_vec(),
                rhs: vec![n, 2, h, w],
            });
        }
        let (xd, od) = (xv.data(), ov.data());
        let hw = h * w;
        let mut out = vec![T::ZERO; xd.len()];
        for img in 0..n {
            for pos in 0..hw {
                let (row, col) = (pos / w, pos % w);
                let dx = od[(img * 2) * hw + pos].to_f64();
                let dy = od[(img * 2 + 1) * hw + pos].to_f64();
                let s = SamplePoint::locate(col as f64 + dx, row as f64 + dy, w, h);
                for ch in 0..c {
                    let plane = (img * c + ch) * hw;
                    let v = s.read(&xd[plane..plane + hw], w);
                    out[(img * c + ch) * hw + pos] = T::from_f64(v);
                }
            }
        }
        let dims = [n, c, h, w];
        self.push("bilinear_sample", Op::BilinearSample { x: x.0, off: off.0 }, &dims, out)
    }

    /// Concatenation along the channel axis.
    pub fn concat_c(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ok = av.rank() >= 2
            && av.rank() == bv.rank()
            && av.dims()[0] == bv.dims()[0]
            && av.dims()[2..] == bv.dims()[2..];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat_c",
                lhs: av.dims().to_vec(),
                rhs: bv.dims().to_vec(),
            });
        }
        let (n, ca, cb) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let rest: usize = av.dims().iter().skip(2).product();
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for img in 0..n {
            out.extend_from_slice(&av.data()[img * ca * rest..(img + 1) * ca * rest]);
            out.extend_from_slice(&bv.data()[img * cb * rest..(img + 1) * cb * rest]);
        }
        let mut dims = av.dims().to_vec();
        dims[1] = ca + cb;
        self.push("concat_c", Op::ConcatC { a: a.0, b: b.0 }, &dims, out)
    }

    /// Contiguous channel slice [from, to).
    pub fn slice_c(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() < 2 || from >= to || to > xv.dims()[1] {
            return Err(TensorError::Invalid {
                op: "slice_c",
                reason: format!("range {from}..{to} on dims {:?}", xv.dims()),
            });
        }
        let (n, c) = (xv.dims()[0], xv.dims()[1]);
        let rest: usize = xv.dims().iter().skip(2).product();
        let mut out = Vec::with_capacity(n * (to - from) * rest);
        for img in 0..n {
            let base = (img * c + from) * rest;
            out.extend_from_slice(&xv.data()[base..base + (to - from) * rest]);
        }
        let mut dims = xv.dims().to_vec();
        dims[1] = to - from;
        self.push("slice_c", Op::SliceC { x: x.0, from, to }, &dims, out)
    }

    /// Reinterprets the element order under new dims (same element count).
    pub fn reshape(&mut self, x: TensorId, dims: &[usize]) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let numel: usize = dims.iter().product();
        if numel != xv.numel() {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                reason: format!("reshape from {:?}", xv.dims()),
            });
        }
        let data = xv.data().to_vec();
        self.push("reshape", Op::Reshape { x: x.0 }, dims, data)
    }

    /// Sum of all elements, returned as a [1] tensor (f64 accumulation).
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x.0].value;
        let mut acc = 0f64;
        for v in xv.data() {
            acc += v.to_f64();
        }
        self.push("sum", Op::Sum { x: x.0 }, &[1], vec![T::from_f64(acc)])
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Seeds the (scalar) root with gradient 1 and accumulates gradients
    /// for every node in reverse creation order.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("root must be scalar, got {:?}", self.nodes[root.0].value.dims()),
            });
        }
        for node in &mut self.nodes {
            node.grad = Some(vec![T::ZERO; node.value.numel()]);
        }
        self.nodes[root.0].grad = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let contribs = self.backward_op(i, &op);
            for (target, add) in contribs {
                let g = self.nodes[target].grad.as_mut().expect("grad allocated");
                for (slot, delta) in g.iter_mut().zip(add) {
                    *slot = T::from_f64(slot.to_f64() + delta);
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs, computed
    /// in f64 from the node's output gradient.
    fn backward_op(&self, i: usize, op: &Op) -> Vec<(usize, Vec<f64>)> {
        let g: Vec<f64> = self.nodes[i].grad.as_ref().unwrap().iter().map(|v| v.to_f64()).collect();
        let val = |id: usize| &self.nodes[id].value;
        let out_val = &self.nodes[i].value;
        match *op {
            Op::Leaf => vec![],
            Op::Bin { kind, a, b, bc } => {
                let (av, bv) = (val(a), val(b));
                let cs: usize = av.dims().iter().skip(2).product();
                let nch = if av.rank() >= 2 { av.dims()[1] } else { 1 };
                let bidx = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Scalar => 0,
                    Broadcast::Channel => (i / cs) % nch,
                };
                let mut da = vec![0f64; av.numel()];
                let mut db = vec![0f64; bv.numel()];
                match kind {
                    BinKind::Add => {
                        for (idx, &ge) in g.iter().enumerate() {
                            da[idx] += ge;
                            db[bidx(idx)] += ge;
                        }
                    }
                    BinKind::Sub => {
                        for (idx, &ge) in g.iter().enumerate() {
                            da[idx] += ge;
                            db[bidx(idx)] -= ge;
                        }
                    }
                    BinKind::Mul => {
                        let (ad, bd) = (av.data(), bv.data());
                        for (idx, &ge) in g.iter().enumerate() {
                            let bi = bidx(idx);
                            da[idx] += ge * bd[bi].to_f64();
                            db[bi] += ge * ad[idx].to_f64();
                        }
                    }
                }
                vec![(a, da), (b, db)]
            }
            Op::Affine { x, mul, .. } => {
                vec![(x, g.iter().map(|ge| ge * mul).collect())]
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(ge, &xe)| {
                        let v = xe.to_f64();
                        if v > lo && v < hi {
                            *ge
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(x, dx)]
            }
            Op::Ln { x } => {
                let xd = val(x).data();
                vec![(x, g.iter().zip(xd).map(|(ge, &xe)| ge / xe.to_f64()).collect())]
            }
            Op::Powf { x, p } => {
                let xd = val(x).data();
                vec![(x, g.iter().zip(xd).map(|(ge, &xe)| ge * p * xe.to_f64().powf(p - 1.0)).collect())]
            }
            Op::Huber { x } => {
                let xd = val(x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(ge, &xe)| {
                        let v = xe.to_f64();
                        ge * if v.abs() < 1.0 { v } else { v.signum() }
                    })
                    .collect();
                vec![(x, dx)]
            }
            Op::Relu { x } => {
                let xd = val(x).data();
                vec![(
                    x,
                    g.iter()
                        .zip(xd)
                        .map(|(ge, &xe)| if xe.to_f64() > 0.0 { *ge } else { 0.0 })
                        .collect(),
                )]
            }
            Op::TanhOp { x } => {
                let yd = out_val.data();
                vec![(
                    x,
                    g.iter()
                        .zip(yd)
                        .map(|(ge, &ye)| {
                            let y = ye.to_f64();
                            ge * (1.0 - y * y)
                        })
                        .collect(),
                )]
            }
            Op::Sigmoid { x } => {
                let yd = out_val.data();
                vec![(
                    x,
                    g.iter()
                        .zip(yd)
                        .map(|(ge, &ye)| {
                            let y = ye.to_f64();
                            ge * y * (1.0 - y)
                        })
                        .collect(),
                )]
            }
            Op::Softmax { x, axis } => {
                let y = out_val.to_f64_vec();
                let dims = out_val.dims();
                let axis_len = dims[axis];
                let outer: usize = dims[..axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let mut dx = vec![0f64; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |j: usize| o * axis_len * inner + j * inner + inn;
                        let dot: f64 = (0..axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..axis_len {
                            let idx = at(j);
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv, bv) = (val(x), val(w), val(b));
                let geom = ConvGeom::resolve(xv.dims(), wv.dims(), bv.dims(), stride, pad)
                    .expect("geометry validated at forward");
                let (dx, dw, db) = conv2d_backward(&g, xv.data(), wv.data(), &geom);
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::Fc { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (f_out, f_in) = (wv.dims()[0], wv.dims()[1]);
                let n = xv.numel() / f_in;
                let (xd, wd) = (xv.data(), wv.data());
                let mut dx = vec![0f64; xv.numel()];
                let mut dw = vec![0f64; wv.numel()];
                let mut db = vec![0f64; f_out];
                for row in 0..n {
                    for o in 0..f_out {
                        let ge = g[row * f_out + o];
                        if ge == 0.0 {
                            continue;
                        }
                        db[o] += ge;
                        for f in 0..f_in {
                            dx[row * f_in + f] += ge * wd[o * f_in + f].to_f64();
                            dw[o * f_in + f] += ge * xd[row * f_in + f].to_f64();
                        }
                    }
                }
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::MaxPool2 { x } => {
                let xv = val(x);
                let (n, c, h, w) = xv.nchw();
                let (ho, wo) = (h / 2, w / 2);
                let xd = xv.data();
                let mut dx = vec![0f64; xv.numel()];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    let obase = plane * ho * wo;
                    for y in 0..ho {
                        for xc in 0..wo {
                            let i00 = base + (2 * y) * w + 2 * xc;
                            let cands = [i00, i00 + 1, i00 + w, i00 + w + 1];
                            let mut best = cands[0];
                            for &cand in &cands[1..] {
                                if xd[cand] > xd[best] {
                                    best = cand;
                                }
                            }
                            dx[best] += g[obase + y * wo + xc];
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::GlobalAvg { x } => {
                let xv = val(x);
                let (n, c, h, w) = xv.nchw();
                let hw = h * w;
                let scale = 1.0 / hw as f64;
                let mut dx = vec![0f64; xv.numel()];
                for plane in 0..n * c {
                    let ge = g[plane] * scale;
                    for slot in &mut dx[plane * hw..(plane + 1) * hw] {
                        *slot += ge;
                    }
                }
                vec![(x, dx)]
            }
            Op::L2Rescale { x, target } => {
                let xv = val(x);
                let (n, c, h, w) = xv.nchw();
                let hw = h * w;
                let xd = xv.data();
                let mut dx = vec![0f64; xv.numel()];
                for img in 0..n {
                    for pos in 0..hw {
                        let at = |ch: usize| (img * c + ch) * hw + pos;
                        let mut sq = 0f64;
                        for ch in 0..c {
                            let v = xd[at(ch)].to_f64();
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        if norm > L2_NORM_EPS {
                            let mut dot = 0f64;
                            for ch in 0..c {
                                dot += g[at(ch)] * xd[at(ch)].to_f64();
                            }
                            let n3 = norm * norm * norm;
                            for ch in 0..c {
                                let xi = xd[at(ch)].to_f64();
                                dx[at(ch)] += target * (g[at(ch)] / norm - xi * dot / n3);
                            }
                        } else {
                            for ch in 0..c {
                                dx[at(ch)] += target * g[at(ch)] / L2_NORM_EPS;
                            }
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::BilinearSample { x, off } => {
                let (xv, ov) = (val(x), val(off));
                let (n, c, h, w) = xv.nchw();
                let hw = h * w;
                let (xd, od) = (xv.data(), ov.data());
                let mut dx = vec![0f64; xv.numel()];
                let mut doff = vec![0f64; ov.numel()];
                for img in 0..n {
                    for pos in 0..hw {
                        let (row, col) = (pos / w, pos % w);
                        let dxo = od[(img * 2) * hw + pos].to_f64();
                        let dyo = od[(img * 2 + 1) * hw + pos].to_f64();
                        let s = SamplePoint::locate(col as f64 + dxo, row as f64 + dyo, w, h);
                        let (mut gx, mut gy) = (0f64, 0f64);
                        for ch in 0..c {
                            let plane = (img * c + ch) * hw;
                            let ge = g[plane + pos];
                            if ge == 0.0 {
                                continue;
                            }
                            let xp = &xd[plane..plane + hw];
                            s.scatter(ge, &mut dx[plane..plane + hw], w);
                            let (ddx, ddy) = s.coord_grads(xp, w);
                            gx += ge * ddx;
                            gy += ge * ddy;
                        }
                        if s.x_active {
                            doff[(img * 2) * hw + pos] += gx;
                        }
                        if s.y_active {
                            doff[(img * 2 + 1) * hw + pos] += gy;
                        }
                    }
                }
                vec![(x, dx), (off, doff)]
            }
            Op::ConcatC { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (n, ca, cb) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                let rest: usize = av.dims().iter().skip(2).product();
                let mut da = vec![0f64; av.numel()];
                let mut db = vec![0f64; bv.numel()];
                let stride_out = (ca + cb) * rest;
                for img in 0..n {
                    let gbase = img * stride_out;
                    da[img * ca * rest..(img + 1) * ca * rest]
                        .copy_from_slice(&g[gbase..gbase + ca * rest]);
                    db[img * cb * rest..(img + 1) * cb * rest]
                        .copy_from_slice(&g[gbase + ca * rest..gbase + stride_out]);
                }
                vec![(a, da), (b, db)]
            }
            Op::SliceC { x, from, to } => {
                let xv = val(x);
                let (n, c) = (xv.dims()[0], xv.dims()[1]);
                let rest: usize = xv.dims().iter().skip(2).product();
                let span = to - from;
                let mut dx = vec![0f64; xv.numel()];
                for img in 0..n {
                    let dst = (img * c + from) * rest;
                    let src = img * span * rest;
                    dx[dst..dst + span * rest].copy_from_slice(&g[src..src + span * rest]);
                }
                vec![(x, dx)]
            }
            Op::Reshape { x } => vec![(x, g)],
            Op::Sum { x } => {
                let numel = val(x).numel();
                vec![(x, vec![g[0]; numel])]
            }
        }
    }
}

fn rank4_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("expected rank-4 tensor, got {:?}", t.dims()),
        });
    }
    Ok(t.nchw())
}

// ── convolution kernels ──────────────────────────────────────────────

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn resolve(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let err = |reason: String| TensorError::Invalid { op: "conv2d", reason };
        if x.len() != 4 {
            return Err(err(format!("input must be rank 4, got {x:?}")));
        }
        if w.len() != 4 || w[2] != w[3] {
            return Err(err(format!("weight must be (Cout,Cin,k,k), got {w:?}")));
        }
        if stride == 0 {
            return Err(err("stride must be >= 1".into()));
        }
        let (n, cin, hh, ww) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, k) = (w[0], w[1], w[2]);
        if wcin != cin {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() });
        }
        if b != [cout] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: b.to_vec(), rhs: vec![cout] });
        }
        let span_h = hh + 2 * pad;
        let span_w = ww + 2 * pad;
        if k > span_h || k > span_w {
            return Err(err(format!("kernel {k} exceeds padded extent {span_h}x{span_w}")));
        }
        if (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(err(format!(
                "non-integral output extent for input {hh}x{ww}, k={k}, stride={stride}, pad={pad}"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h: hh,
            w: ww,
            cout,
            k,
            stride,
            pad,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        })
    }

    /// Valid output-index range [lo, hi) along one axis for kernel offset
    /// `koff`, i.e. the outputs whose source index lands inside the input.
    fn valid_range(&self, koff: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > koff { (self.pad - koff).div_ceil(s) } else { 0 };
        if koff > in_extent - 1 + self.pad {
            return (0, 0);
        }
        let hi = ((in_extent - 1 + self.pad - koff) / s + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

fn conv2d_forward<T: Real>(xd: &[T], wd: &[T], bd: &[T], gm: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::ZERO; gm.n * gm.cout * gm.h_out * gm.w_out];
    let mut acc = vec![0f64; gm.h_out * gm.w_out];
    for img in 0..gm.n {
        for co in 0..gm.cout {
            acc.fill(bd[co].to_f64());
            for ci in 0..gm.cin {
                let xplane = &xd[(img * gm.cin + ci) * gm.h * gm.w..][..gm.h * gm.w];
                for kh in 0..gm.k {
                    let (ho_lo, ho_hi) = gm.valid_range(kh, gm.h, gm.h_out);
                    for kw in 0..gm.k {
                        let wv = wd[((co * gm.cin + ci) * gm.k + kh) * gm.k + kw].to_f64();
                        let (wo_lo, wo_hi) = gm.valid_range(kw, gm.w, gm.w_out);
                        for ho in ho_lo..ho_hi {
                            let hi_in = ho * gm.stride + kh - gm.pad;
                            let xrow = &xplane[hi_in * gm.w..][..gm.w];
                            let arow = &mut acc[ho * gm.w_out..][..gm.w_out];
                            let base = kw.wrapping_sub(gm.pad);
                            for (wo, slot) in arow.iter_mut().enumerate().take(wo_hi).skip(wo_lo) {
                                let wi = wo * gm.stride + kw - gm.pad;
                                debug_assert_eq!(wi, wo * gm.stride + base.wrapping_add(gm.pad) - gm.pad);
                                *slot += wv * xrow[wi].to_f64();
                            }
                        }
                    }
                }
            }
            let obase = (img * gm.cout + co) * gm.h_out * gm.w_out;
            for (slot, &a) in out[obase..obase + gm.h_out * gm.w_out].iter_mut().zip(&acc) {
                *slot = T::from_f64(a);
            }
        }
    }
    out
}

fn conv2d_backward<T: Real>(
    g: &[f64],
    xd: &[T],
    wd: &[T],
    gm: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0f64; gm.n * gm.cin * gm.h * gm.w];
    let mut dw = vec![0f64; gm.cout * gm.cin * gm.k * gm.k];
    let mut db = vec![0f64; gm.cout];
    let ohw = gm.h_out * gm.w_out;
    for img in 0..gm.n {
        for co in 0..gm.cout {
            let gplane = &g[(img * gm.cout + co) * ohw..][..ohw];
            let mut bias_acc = 0f64;
            for ge in gplane {
                bias_acc += ge;
            }
            db[co] += bias_acc;
            for ci in 0..gm.cin {
                let xplane = &xd[(img * gm.cin + ci) * gm.h * gm.w..][..gm.h * gm.w];
                let dxplane_base = (img * gm.cin + ci) * gm.h * gm.w;
                for kh in 0..gm.k {
                    let (ho_lo, ho_hi) = gm.valid_range(kh, gm.h, gm.h_out);
                    for kw in 0..gm.k {
                        let widx = ((co * gm.cin + ci) * gm.k + kh) * gm.k + kw;
                        let wv = wd[widx].to_f64();
                        let (wo_lo, wo_hi) = gm.valid_range(kw, gm.w, gm.w_out);
                        let mut w_acc = 0f64;
                        for ho in ho_lo..ho_hi {
                            let hi_in = ho * gm.stride + kh - gm.pad;
                            let grow = &gplane[ho * gm.w_out..][..gm.w_out];
                            let xrow = &xplane[hi_in * gm.w..][..gm.w];
                            let dxrow = dxplane_base + hi_in * gm.w;
                            for wo in wo_lo..wo_hi {
                                let wi = wo * gm.stride + kw - gm.pad;
                                let ge = grow[wo];
                                w_acc += ge * xrow[wi].to_f64();
                                dx[dxrow + wi] += ge * wv;
                            }
                        }
                        dw[widx] += w_acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ── bilinear sampling geometry ───────────────────────────────────────

/// A source location after coordinate clamping: integer corners, fractional
/// weights, and whether each raw coordinate was strictly inside the valid
/// range (active coordinates propagate gradient to the offsets).
struct SamplePoint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_active: bool,
    y_active: bool,
}

impl SamplePoint {
    fn locate(raw_x: f64, raw_y: f64, w: usize, h: usize) -> Self {
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let sx = raw_x.clamp(0.0, max_x);
        let sy = raw_y.clamp(0.0, max_y);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        SamplePoint {
            x0,
            x1,
            y0,
            y1,
            fx: sx - x0 as f64,
            fy: sy - y0 as f64,
            x_active: raw_x > 0.0 && raw_x < max_x,
            y_active: raw_y > 0.0 && raw_y < max_y,
        }
    }

    fn read<T: Real>(&self, plane: &[T], w: usize) -> f64 {
        let v00 = plane[self.y0 * w + self.x0].to_f64();
        let v01 = plane[self.y0 * w + self.x1].to_f64();
        let v10 = plane[self.y1 * w + self.x0].to_f64();
        let v11 = plane[self.y1 * w + self.x1].to_f64();
        (1.0 - self.fy) * ((1.0 - self.fx) * v00 + self.fx * v01)
            + self.fy * ((1.0 - self.fx) * v10 + self.fx * v11)
    }

    fn scatter(&self, ge: f64, dplane: &mut [f64], w: usize) {
        dplane[self.y0 * w + self.x0] += ge * (1.0 - self.fy) * (1.0 - self.fx);
        dplane[self.y0 * w + self.x1] += ge * (1.0 - self.fy) * self.fx;
        dplane[self.y1 * w + self.x0] += ge * self.fy * (1.0 - self.fx);
        dplane[self.y1 * w + self.x1] += ge * self.fy * self.fx;
    }

    /// (d value / d source-x, d value / d source-y).
    fn coord_grads<T: Real>(&self, plane: &[T], w: usize) -> (f64, f64) {
        let v00 = plane[self.y0 * w + self.x0].to_f64();
        let v01 = plane[self.y0 * w + self.x1].to_f64();
        let v10 = plane[self.y1 * w + self.x0].to_f64();
        let v11 = plane[self.y1 * w + self.x1].to_f64();
        let ddx = (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        let ddy = (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        (ddx, ddy)
    }
}

fn softmax_forward(x: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0f64; x.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let at = |j: usize| o * axis_len * inner + j * inner + inn;
            let mut max = f64::NEG_INFINITY;
            for j in 0..axis_len {
                max = max.max(x[at(j)]);
            }
            let mut denom = 0f64;
            for j in 0..axis_len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..axis_len {
                out[at(j)] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(dims: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn add_identity_and_sub_self() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let z = tape.leaf(Tensor::zeros(&[2, 2]).unwrap());
        let same = tape.add(x, z).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        let diff = tape.sub(x, x).unwrap();
        assert!(tape.value(diff).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_broadcast_mul() {
        // 1x1 map with 4 spatial elements, channel vector [2] scales all.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.leaf(t32(&[1], &[2.0]));
        let y = tape.mul(x, v).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn channel_broadcast_uses_channel_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.leaf(t32(&[2], &[10.0, 100.0]));
        let y = tape.mul(x, v).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn broadcast_shape_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
        let v = tape.leaf(t32(&[2], &[1.0, 2.0]));
        assert!(tape.add(x, v).is_err());
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![0.0, 5.0, -5.0]).unwrap());
        let th = tape.tanh(x).unwrap();
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert!(tape.value(th).data().iter().all(|v| v.abs() < 1.0));
        let sg = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(sg).data()[0], 0.5);
        let sm_in = tape.leaf(Tensor::new(&[1, 2], vec![0.7, 0.7]).unwrap());
        let sm = tape.softmax(sm_in, 1).unwrap();
        assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2, 3], &[0.1, 2.0, -1.0, 4.0, 4.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for row in 0..2 {
            let s: f32 = d[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t32(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t32(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 3, 3], &[1.0; 9]));
        let w = tape.leaf(t32(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.leaf(t32(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], 9.0);
    }

    #[test]
    fn conv_padded_stride2_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 8, 6], |i| i as f64 * 0.01).unwrap());
        let w = tape.leaf(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.01).sin()).unwrap());
        let b = tape.leaf(t32(&[3], &[0.1, -0.2, 0.3]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 3, 4, 3]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]).unwrap());
        assert!(tape.conv2d(x, w, b, 2, 0).is_err());
    }

    #[test]
    fn pooling_hand_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gap = tape.global_avg(x).unwrap();
        assert_eq!(tape.value(gap).data()[0], 2.5);
        let mp = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(mp).data()[0], 4.0);
        let c = tape.leaf(t32(&[1, 1, 2, 2], &[7.5; 4]));
        let gc = tape.global_avg(c).unwrap();
        assert_eq!(tape.value(gc).data()[0], 7.5);
    }

    #[test]
    fn maxpool_rejects_odd_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
        assert!(tape.maxpool2(x).is_err());
    }

    #[test]
    fn fully_connected_hand_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2], &[2.0, 3.0]));
        let w = tape.leaf(t32(&[1, 2], &[1.0, 1.0]));
        let b = tape.leaf(t32(&[1], &[1.0]));
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        // identity weight, zero bias
        let x2 = tape.leaf(t32(&[1, 3], &[1.5, -2.0, 0.25]));
        let id = tape.leaf(t32(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let b2 = tape.leaf(Tensor::zeros(&[3]).unwrap());
        let y2 = tape.fully_connected(x2, id, b2).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn l2_rescale_hand_values() {
        let mut tape = Tape::<f32>::new();
        // channel vector [3,4] at a single position, target 10 -> [6,8]
        let x = tape.leaf(t32(&[1, 2, 1, 1], &[3.0, 4.0]));
        let y = tape.l2_rescale(x, 10.0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 8.0]);

        // single channel value 5 -> 10
        let x2 = tape.leaf(t32(&[1, 1, 1, 1], &[5.0]));
        let y2 = tape.l2_rescale(x2, 10.0).unwrap();
        assert_eq!(tape.value(y2).data(), &[10.0]);

        // already at target norm -> unchanged (within f32 rounding)
        let x3 = tape.leaf(t32(&[1, 2, 1, 1], &[6.0, 8.0]));
        let y3 = tape.l2_rescale(x3, 10.0).unwrap();
        for (a, b) in tape.value(y3).data().iter().zip(&[6.0f32, 8.0]) {
            assert!((a - b).abs() < 1e-5);
        }

        // zero vector stays zero under the guard
        let x4 = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        let y4 = tape.l2_rescale(x4, 10.0).unwrap();
        assert_eq!(tape.value(y4).data(), &[0.0, 0.0]);
    }

    #[test]
    fn per_position_norms_reach_target() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64 + 1.0) * 0.37).unwrap());
        let y = tape.l2_rescale(x, 10.0).unwrap();
        let d = tape.value(y).data();
        for pos in 0..4 {
            let n: f32 = (0..3).map(|c| d[c * 4 + pos] * d[c * 4 + pos]).sum::<f32>().sqrt();
            assert!((n - 10.0).abs() < 1e-5, "norm {n}");
        }
    }

    #[test]
    fn bilinear_zero_offset_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 4], |i| (i as f64 * 1.7).sin()).unwrap());
        let off = tape.leaf(Tensor::zeros(&[1, 2, 3, 4]).unwrap());
        let y = tape.bilinear_sample(x, off).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn bilinear_unit_shift_with_clamp() {
        // dx = 1 reads the pixel to the right; the last column clamps.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 1, 4], &[10.0, 20.0, 30.0, 40.0]));
        let mut offd = vec![0.0f32; 8];
        for slot in offd.iter_mut().take(4) {
            *slot = 1.0;
        }
        let off = tape.leaf(t32(&[1, 2, 1, 4], &offd));
        let y = tape.bilinear_sample(x, off).unwrap();
        assert_eq!(tape.value(y).data(), &[20.0, 30.0, 40.0, 40.0]);
    }

    #[test]
    fn bilinear_half_pixel_averages() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1, 1, 1, 2], &[2.0, 6.0]));
        let off = tape.leaf(t32(&[1, 2, 1, 2], &[0.5, 0.0, 0.0, 0.0]));
        let y = tape.bilinear_sample(x, off).unwrap();
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t32(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t32(&[1, 1, 1, 2], &[5.0, 6.0]));
        let cat = tape.concat_c(a, b).unwrap();
        assert_eq!(tape.value(cat).dims(), &[1, 3, 1, 2]);
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.slice_c(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fanout_accumulates_additively() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1], &[-1.0]));
        assert!(matches!(tape.ln(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64).cos()).unwrap());
            let w = tape.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.1).sin()).unwrap());
            let b = tape.leaf(t32(&[2], &[0.01, -0.02]));
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c).unwrap();
            let s = tape.sum(r).unwrap();
            tape.value(s).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
