use super::kernels;
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Op record. Node ids always point at earlier tape entries, so tape order
/// is a topological order and backward is a single reverse sweep.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = mul * x + add, scalar constants; only the slope matters backward
    Affine { x: NodeId, mul: f64 },
    /// y = max(x, c) elementwise; relu is c = 0
    MaxConst { x: NodeId, c: f64 },
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// softmax along the last axis
    SoftmaxLast(NodeId),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(NodeId, NodeId),
    /// a [m,k], b [n,k] -> a . b^T [m,n]
    MatmulNT(NodeId, NodeId),
    /// x [m,n] + v [n] broadcast over rows
    AddRowVec { x: NodeId, v: NodeId },
    /// x [H,W,Ci], w [KH,KW,Ci,Co], b [Co]
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    /// nearest-neighbor x2 on [H,W,C]
    Upsample2x(NodeId),
    /// concat along the last axis; leading axes must match
    ConcatLast(NodeId, NodeId),
    /// rows of a 2-D tensor by index, repeats allowed
    GatherRows { x: NodeId, indices: Vec<usize> },
    /// [N,C] rows into an all-zero [h,w,C] grid at distinct cells
    ScatterRows { x: NodeId, cells: Vec<(usize, usize)> },
    /// top-left [h,w,:] window of [H,W,C]
    CropHw(NodeId),
    /// zero-pad [H,W,C] on the bottom/right up to [h,w,C]
    PadHw(NodeId),
    /// single element of a flat tensor as a [1] scalar
    Select { x: NodeId, index: usize },
    Sum(NodeId),
    Mean(NodeId),
    /// x scaled by a scalar-node s
    ScaleBy { x: NodeId, s: NodeId },
    /// per-channel (last axis) learnable affine: x * gamma + beta
    ScaleShift { x: NodeId, gamma: NodeId, beta: NodeId },
    Reshape { x: NodeId, orig: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

/// Dynamic computation tape. Forward values are computed eagerly as ops are
/// recorded; `backward` runs one reverse sweep accumulating gradients.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "op add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "op sub: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "op mul: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::Affine { x, mul })
    }

    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.max(c)).collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::MaxConst { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.max_const(x, 0.0)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::sigmoid(v))
            .collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("op softmax: rank >= 1 required");
        assert!(cols > 0, "op softmax: empty last axis on {:?}", shape);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::from_vec(&shape, data);
        self.push(t, Op::SoftmaxLast(x))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = dims2(self.shape(a), "matmul lhs");
        let (kb, n) = dims2(self.shape(b), "matmul rhs");
        assert_eq!(
            ka, kb,
            "op matmul: inner dims {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        self.push(Tensor::from_vec(&[m, n], out), Op::Matmul(a, b))
    }

    /// a . b^T with b stored row-per-output: a [m,k], b [n,k] -> [m,n]
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = dims2(self.shape(a), "matmul_nt lhs");
        let (n, kb) = dims2(self.shape(b), "matmul_nt rhs");
        assert_eq!(
            ka, kb,
            "op matmul_nt: inner dims {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatmulNT(a, b))
    }

    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (m, n) = dims2(self.shape(x), "add_row_vec lhs");
        assert_eq!(
            self.shape(v),
            &[n],
            "op add_row_vec: vector {:?} vs row width {}",
            self.shape(v),
            n
        );
        let vd = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vd.iter()) {
                *o += b;
            }
        }
        self.push(Tensor::from_vec(&[m, n], data), Op::AddRowVec { x, v })
    }

    /// x [m,in] . w[out,in]^T + b[out]
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul_nt(x, w);
        self.add_row_vec(y, b)
    }

    // ---- convolution / grid ops ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (h, wd, ci) = dims3(self.shape(x), "conv2d input");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "op conv2d: kernel must be 4-d, got {:?}", ws);
        let (kh, kw, wci, co) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(
            wci, ci,
            "op conv2d: input channels {} vs kernel {:?}",
            ci, ws
        );
        assert_eq!(self.shape(b), &[co], "op conv2d: bias {:?} vs {} out channels", self.shape(b), co);
        assert!(stride >= 1, "op conv2d: stride must be >= 1");
        let ho = (h + 2 * pad).checked_sub(kh).expect("op conv2d: kernel larger than padded input") / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = kh * kw * ci;
        let mut cols = vec![0.0; ho * wo * k];
        kernels::im2col(self.value(x).data(), h, wd, ci, kh, kw, stride, pad, &mut cols);
        let mut out = vec![0.0; ho * wo * co];
        kernels::mm_nn(&cols, self.value(w).data(), ho * wo, k, co, &mut out);
        let bd = self.value(b).data();
        for row in out.chunks_mut(co) {
            for (o, bv) in row.iter_mut().zip(bd.iter()) {
                *o += bv;
            }
        }
        self.push(
            Tensor::from_vec(&[ho, wo, co], out),
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let (h, w, c) = dims3(self.shape(x), "upsample2x input");
        let xd = self.value(x).data();
        let mut out = vec![0.0; 4 * h * w * c];
        let (ho, wo) = (2 * h, 2 * w);
        for i in 0..h {
            for j in 0..w {
                let src = &xd[(i * w + j) * c..(i * w + j + 1) * c];
                for di in 0..2 {
                    for dj in 0..2 {
                        let base = ((2 * i + di) * wo + 2 * j + dj) * c;
                        out[base..base + c].copy_from_slice(src);
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[ho, wo, c], out), Op::Upsample2x(x))
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "op concat: rank mismatch {:?} vs {:?}", sa, sb);
        assert_eq!(
            &sa[..sa.len() - 1],
            &sb[..sb.len() - 1],
            "op concat: leading dims {:?} vs {:?}",
            sa,
            sb
        );
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).numel() / la;
        let mut out = Vec::with_capacity(rows * (la + lb));
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for r in 0..rows {
            out.extend_from_slice(&ad[r * la..(r + 1) * la]);
            out.extend_from_slice(&bd[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = la + lb;
        self.push(Tensor::from_vec(&shape, out), Op::ConcatLast(a, b))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let (r, c) = dims2(self.shape(x), "gather_rows input");
        for &i in &indices {
            assert!(i < r, "op gather_rows: index {} out of {} rows", i, r);
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_vec(&[indices.len(), c], out);
        self.push(t, Op::GatherRows { x, indices })
    }

    pub fn scatter_rows(&mut self, x: NodeId, cells: Vec<(usize, usize)>, h: usize, w: usize) -> NodeId {
        let (n, c) = dims2(self.shape(x), "scatter_rows input");
        assert_eq!(n, cells.len(), "op scatter_rows: {} rows vs {} cells", n, cells.len());
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &cells {
            assert!(i < h && j < w, "op scatter_rows: cell ({},{}) outside {}x{}", i, j, h, w);
            assert!(seen.insert((i, j)), "op scatter_rows: duplicate cell ({},{})", i, j);
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; h * w * c];
        for (r, &(i, j)) in cells.iter().enumerate() {
            out[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&xd[r * c..(r + 1) * c]);
        }
        self.push(Tensor::from_vec(&[h, w, c], out), Op::ScatterRows { x, cells })
    }

    pub fn crop_hw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let (hh, ww, c) = dims3(self.shape(x), "crop input");
        assert!(h <= hh && w <= ww, "op crop: {}x{} out of {}x{}", h, w, hh, ww);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c);
        for i in 0..h {
            out.extend_from_slice(&xd[i * ww * c..(i * ww + w) * c]);
        }
        self.push(Tensor::from_vec(&[h, w, c], out), Op::CropHw(x))
    }

    pub fn pad_hw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let (hh, ww, c) = dims3(self.shape(x), "pad input");
        assert!(h >= hh && w >= ww, "op pad: target {}x{} smaller than {}x{}", h, w, hh, ww);
        let xd = self.value(x).data();
        let mut out = vec![0.0; h * w * c];
        for i in 0..hh {
            out[i * w * c..(i * w + ww) * c].copy_from_slice(&xd[i * ww * c..(i + 1) * ww * c]);
        }
        self.push(Tensor::from_vec(&[h, w, c], out), Op::PadHw(x))
    }

    // ---- reductions / indexing ----

    pub fn select(&mut self, x: NodeId, index: usize) -> NodeId {
        let n = self.value(x).numel();
        assert!(index < n, "op select: index {} out of {} elements", index, n);
        let v = self.value(x).data()[index];
        self.push(Tensor::scalar(v), Op::Select { x, index })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        assert!(n > 0, "op mean: empty tensor");
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x))
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).numel(), 1, "op scale_by: scalar node required, got {:?}", self.shape(s));
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::from_vec(self.shape(x), data);
        self.push(t, Op::ScaleBy { x, s })
    }

    pub fn scale_shift(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("op scale_shift: rank >= 1 required");
        assert_eq!(self.shape(gamma), &[c], "op scale_shift: gamma {:?} vs {} channels", self.shape(gamma), c);
        assert_eq!(self.shape(beta), &[c], "op scale_shift: beta {:?} vs {} channels", self.shape(beta), c);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for k in 0..c {
                row[k] = row[k] * g[k] + bt[k];
            }
        }
        self.push(Tensor::from_vec(&shape, data), Op::ScaleShift { x, gamma, beta })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let orig = self.shape(x).to_vec();
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape { x, orig })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients accumulate on every node
    /// reachable from `loss`; leaves keep theirs for collection.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward: loss must be scalar, got {:?}",
            self.shape(loss)
        );
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let contribs = self.parent_grads(idx);
            for (pid, g) in contribs {
                match &mut self.nodes[pid.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    fn parent_grads(&self, idx: usize) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let dy = node.grad.as_ref().unwrap();
        let y = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => {
                let mut nb = dy.clone();
                nb.scale(-1.0);
                vec![(*a, dy.clone()), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let da = zip_mul(dy, val(*b));
                let db = zip_mul(dy, val(*a));
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { x, mul } => {
                let mut dx = dy.clone();
                dx.scale(*mul);
                vec![(*x, dx)]
            }
            Op::MaxConst { x, c } => {
                let xd = val(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > *c { *g } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_vec(val(*x).shape(), data))]
            }
            Op::Log(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| g / v)
                    .collect();
                vec![(*x, Tensor::from_vec(val(*x).shape(), data))]
            }
            Op::Tanh(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                vec![(*x, Tensor::from_vec(val(*x).shape(), data))]
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                vec![(*x, Tensor::from_vec(val(*x).shape(), data))]
            }
            Op::SoftmaxLast(x) => {
                let cols = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for ((drow, yrow), orow) in dy
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        orow[k] = yrow[k] * (drow[k] - dot);
                    }
                }
                vec![(*x, Tensor::from_vec(val(*x).shape(), dx))]
            }
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                // dA = dY . B^T ; dB = A^T . dY
                let mut da = vec![0.0; m * k];
                kernels::mm_nt(dy.data(), val(*b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                kernels::mm_tn(val(*a).data(), dy.data(), k, m, n, &mut db);
                vec![
                    (*a, Tensor::from_vec(&[m, k], da)),
                    (*b, Tensor::from_vec(&[k, n], db)),
                ]
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                // y = A . B^T : dA = dY . B ; dB = dY^T . A
                let mut da = vec![0.0; m * k];
                kernels::mm_nn(dy.data(), val(*b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; n * k];
                kernels::mm_tn(dy.data(), val(*a).data(), n, m, k, &mut db);
                vec![
                    (*a, Tensor::from_vec(&[m, k], da)),
                    (*b, Tensor::from_vec(&[n, k], db)),
                ]
            }
            Op::AddRowVec { x, v } => {
                let n = val(*v).numel();
                let mut dv = vec![0.0; n];
                for row in dy.data().chunks(n) {
                    for (acc, g) in dv.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![(*x, dy.clone()), (*v, Tensor::from_vec(&[n], dv))]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (h, wd, ci) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let ws = val(*w).shape();
                let (kh, kw, co) = (ws[0], ws[1], ws[3]);
                let (ho, wo) = (y.shape()[0], y.shape()[1]);
                let k = kh * kw * ci;
                let m = ho * wo;
                // recompute the unfolded input rather than caching it
                let mut cols = vec![0.0; m * k];
                kernels::im2col(val(*x).data(), h, wd, ci, kh, kw, *stride, *pad, &mut cols);

                let mut dw = vec![0.0; k * co];
                kernels::mm_tn(&cols, dy.data(), k, m, co, &mut dw);

                let mut db = vec![0.0; co];
                for row in dy.data().chunks(co) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }

                let mut dcols = vec![0.0; m * k];
                kernels::mm_nt(dy.data(), val(*w).data(), m, co, k, &mut dcols);
                let mut dx = vec![0.0; h * wd * ci];
                kernels::col2im(&dcols, h, wd, ci, kh, kw, *stride, *pad, &mut dx);

                vec![
                    (*x, Tensor::from_vec(&[h, wd, ci], dx)),
                    (*w, Tensor::from_vec(ws, dw)),
                    (*b, Tensor::from_vec(&[co], db)),
                ]
            }
            Op::Upsample2x(x) => {
                let (h, w, c) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let wo = 2 * w;
                let mut dx = vec![0.0; h * w * c];
                let dyd = dy.data();
                for i in 0..h {
                    for j in 0..w {
                        let dst = &mut dx[(i * w + j) * c..(i * w + j + 1) * c];
                        for di in 0..2 {
                            for dj in 0..2 {
                                let base = ((2 * i + di) * wo + 2 * j + dj) * c;
                                for (acc, g) in dst.iter_mut().zip(&dyd[base..base + c]) {
                                    *acc += g;
                                }
                            }
                        }
                    }
                }
                vec![(*x, Tensor::from_vec(&[h, w, c], dx))]
            }
            Op::ConcatLast(a, b) => {
                let la = *val(*a).shape().last().unwrap();
                let lb = *val(*b).shape().last().unwrap();
                let rows = val(*a).numel() / la;
                let mut da = Vec::with_capacity(rows * la);
                let mut db = Vec::with_capacity(rows * lb);
                for row in dy.data().chunks(la + lb) {
                    da.extend_from_slice(&row[..la]);
                    db.extend_from_slice(&row[la..]);
                }
                vec![
                    (*a, Tensor::from_vec(val(*a).shape(), da)),
                    (*b, Tensor::from_vec(val(*b).shape(), db)),
                ]
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![0.0; r * c];
                for (outrow, &i) in indices.iter().enumerate() {
                    let src = &dy.data()[outrow * c..(outrow + 1) * c];
                    for (acc, g) in dx[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *acc += g;
                    }
                }
                vec![(*x, Tensor::from_vec(&[r, c], dx))]
            }
            Op::ScatterRows { x, cells } => {
                let c = val(*x).shape()[1];
                let w = y.shape()[1];
                let mut dx = Vec::with_capacity(cells.len() * c);
                for &(i, j) in cells {
                    dx.extend_from_slice(&dy.data()[(i * w + j) * c..(i * w + j + 1) * c]);
                }
                vec![(*x, Tensor::from_vec(val(*x).shape(), dx))]
            }
            Op::CropHw(x) => {
                let (hh, ww, c) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let mut dx = vec![0.0; hh * ww * c];
                let (h, w) = (y.shape()[0], y.shape()[1]);
                for i in 0..h {
                    dx[i * ww * c..(i * ww + w) * c]
                        .copy_from_slice(&dy.data()[i * w * c..(i + 1) * w * c]);
                }
                vec![(*x, Tensor::from_vec(&[hh, ww, c], dx))]
            }
            Op::PadHw(x) => {
                let (hh, ww, c) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let w = y.shape()[1];
                let mut dx = Vec::with_capacity(hh * ww * c);
                for i in 0..hh {
                    dx.extend_from_slice(&dy.data()[i * w * c..(i * w + ww) * c]);
                }
                vec![(*x, Tensor::from_vec(&[hh, ww, c], dx))]
            }
            Op::Select { x, index } => {
                let mut dx = vec![0.0; val(*x).numel()];
                dx[*index] = dy.item();
                vec![(*x, Tensor::from_vec(val(*x).shape(), dx))]
            }
            Op::Sum(x) => {
                let g = dy.item();
                vec![(*x, Tensor::full(val(*x).shape(), g))]
            }
            Op::Mean(x) => {
                let g = dy.item() / val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g))]
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s).item();
                let mut dx = dy.clone();
                dx.scale(sv);
                let ds: f64 = dy.data().iter().zip(val(*x).data()).map(|(g, v)| g * v).sum();
                vec![(*x, dx), (*s, Tensor::scalar(ds))]
            }
            Op::ScaleShift { x, gamma, beta } => {
                let c = val(*gamma).numel();
                let g = val(*gamma).data();
                let xd = val(*x).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (dyrow, xrow) in dy.data().chunks(c).zip(xd.chunks(c)) {
                    for k in 0..c {
                        dg[k] += dyrow[k] * xrow[k];
                        db[k] += dyrow[k];
                    }
                }
                for (o, (gy, gk)) in dx
                    .iter_mut()
                    .zip(dy.data().iter().zip(g.iter().cycle()))
                {
                    *o = gy * gk;
                }
                vec![
                    (*x, Tensor::from_vec(val(*x).shape(), dx)),
                    (*gamma, Tensor::from_vec(&[c], dg)),
                    (*beta, Tensor::from_vec(&[c], db)),
                ]
            }
            Op::Reshape { x, orig } => {
                let dx = dy.clone().reshaped(orig);
                vec![(*x, dx)]
            }
        }
    }
}

fn dims2(shape: &[usize], what: &str) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "op {}: expected 2-d, got {:?}", what, shape);
    (shape[0], shape[1])
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "op {}: expected 3-d, got {:?}", what, shape);
    (shape[0], shape[1], shape[2])
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}
