//! Dense 64-bit tensors with a recorded operation tape and reverse-mode
//! gradients.
//!
//! A [`Tape`] owns every intermediate result of a forward computation. Ops on
//! [`Value`] handles compute eagerly and record a node with enough context to
//! run the chain rule backwards. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients for every node that (transitively) requires them.
//!
//! The tape is built fresh for each training step and dropped afterwards.
//! Recording is single-threaded; finished [`Tensor`]s are plain data and can
//! be shared read-only across threads.
//!
//! Shape violations are programmer errors and panic with a message naming
//! both shapes. Data-dependent failures (I/O, bad configs) live elsewhere and
//! use `Result`.

use std::cell::RefCell;

/// Probabilities below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should be accumulated for this tensor when it is
    /// placed on a tape as a leaf.
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            numel == data.len(),
            "tensor: shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Marks the tensor as a gradient-carrying parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert!(self.shape.len() == 2, "row: tensor is not 2-d: {:?}", self.shape);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Row-broadcast add: `x[m,n] + bias[n]`.
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Relu { x: usize },
    Sigmoid { x: usize },
    SoftmaxRows { x: usize },
    LogClamped { x: usize },
    Sum { x: usize },
    Reshape { x: usize },
    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x[b,c,h,w]`, `kernel[oc,c,3,3]`, `bias[oc]`.
    Conv3x3 { x: usize, kernel: usize, bias: usize },
    /// 2x2 average pooling with stride 2.
    AvgPool2 { x: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to one node on a [`Tape`]. Cheap to copy; alive as long as the
/// tape is.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape as a leaf, honoring its `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Value<'_> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// A leaf that never accumulates gradients (inputs, masks, targets).
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Value<'_> {
        let numel: usize = shape.iter().product();
        assert!(
            numel == data.len(),
            "constant: shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        self.push(Op::Leaf, shape, data, false)
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        Value { tape: self, id }
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Runs reverse-mode differentiation from a scalar loss node.
    ///
    /// Every node with `needs_grad` receives a gradient buffer; leaves that
    /// do not participate in the loss keep their zero-filled buffer.
    pub fn backward(&self, loss: Value<'_>) -> Gradients {
        assert!(
            std::ptr::eq(self, loss.tape),
            "backward: loss value belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.id].data.len() == 1,
            "backward: loss must be scalar, got shape {:?}",
            nodes[loss.id].shape
        );

        let mut grads: Vec<Option<Vec<f64>>> = nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    Some(vec![0.0; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = grads[loss.id].as_mut() {
            g[0] = 1.0;
        }

        for id in (0..nodes.len()).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Take the output gradient out to satisfy the borrow checker;
            // a node's output grad is final once we reach it (topological order).
            let gout = grads[id].take().unwrap();
            let node = &nodes[id];
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let n = nodes[b].shape[1];
                    if let Some(ga) = grads[a].as_mut() {
                        // dA[i,p] += sum_j dC[i,j] * B[p,j]
                        let bd = &nodes[b].data;
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for (p, gap) in garow.iter_mut().enumerate() {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                *gap += acc;
                            }
                        }
                    }
                    if let Some(gb) = grads[b].as_mut() {
                        // dB[p,j] += sum_i A[i,p] * dC[i,j]
                        let ad = &nodes[a].data;
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            let arow = &ad[i * k..(i + 1) * k];
                            for (p, &av) in arow.iter().enumerate() {
                                if av != 0.0 {
                                    let gbrow = &mut gb[p * n..(p + 1) * n];
                                    for (gbv, gv) in gbrow.iter_mut().zip(grow) {
                                        *gbv += av * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    if let Some(ga) = grads[a].as_mut() {
                        for (g, go) in ga.iter_mut().zip(&gout) {
                            *g += go;
                        }
                    }
                    if let Some(gb) = grads[b].as_mut() {
                        for (g, go) in gb.iter_mut().zip(&gout) {
                            *g += go;
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let n = nodes[bias].data.len();
                    if let Some(gx) = grads[x].as_mut() {
                        for (g, go) in gx.iter_mut().zip(&gout) {
                            *g += go;
                        }
                    }
                    if let Some(gb) = grads[bias].as_mut() {
                        for (row, chunk) in gout.chunks_exact(n).enumerate() {
                            let _ = row;
                            for (g, go) in gb.iter_mut().zip(chunk) {
                                *g += go;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(ga) = grads[a].as_mut() {
                        let bd = &nodes[b].data;
                        for ((g, go), bv) in ga.iter_mut().zip(&gout).zip(bd) {
                            *g += go * bv;
                        }
                    }
                    if let Some(gb) = grads[b].as_mut() {
                        let ad = &nodes[a].data;
                        for ((g, go), av) in gb.iter_mut().zip(&gout).zip(ad) {
                            *g += go * av;
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if let Some(gx) = grads[x].as_mut() {
                        for (g, go) in gx.iter_mut().zip(&gout) {
                            *g += go * factor;
                        }
                    }
                }
                Op::Relu { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let xd = &nodes[x].data;
                        for ((g, go), xv) in gx.iter_mut().zip(&gout).zip(xd) {
                            // Subgradient at exactly 0 is 0.
                            if *xv > 0.0 {
                                *g += go;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let yd = &node.data;
                        for ((g, go), yv) in gx.iter_mut().zip(&gout).zip(yd) {
                            *g += go * yv * (1.0 - yv);
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let yd = &node.data;
                        let n = *node.shape.last().unwrap();
                        for ((gxrow, gorow), yrow) in gx
                            .chunks_exact_mut(n)
                            .zip(gout.chunks_exact(n))
                            .zip(yd.chunks_exact(n))
                        {
                            let dot: f64 =
                                gorow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for ((g, go), y) in gxrow.iter_mut().zip(gorow).zip(yrow) {
                                *g += y * (go - dot);
                            }
                        }
                    }
                }
                Op::LogClamped { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let xd = &nodes[x].data;
                        for ((g, go), xv) in gx.iter_mut().zip(&gout).zip(xd) {
                            // Inside the clamp the output is constant.
                            if *xv > LOG_CLAMP {
                                *g += go / xv;
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let go = gout[0];
                        for g in gx.iter_mut() {
                            *g += go;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        for (g, go) in gx.iter_mut().zip(&gout) {
                            *g += go;
                        }
                    }
                }
                Op::Conv3x3 { x, kernel, bias } => {
                    let (bsz, cin, h, w) = dims4(&nodes[x].shape);
                    let oc = nodes[kernel].shape[0];
                    let xd = &nodes[x].data;
                    let kd = &nodes[kernel].data;
                    let plane = h * w;
                    for bi in 0..bsz {
                        for o in 0..oc {
                            let gplane = &gout[(bi * oc + o) * plane..(bi * oc + o + 1) * plane];
                            if let Some(gb) = grads[bias].as_mut() {
                                gb[o] += gplane.iter().sum::<f64>();
                            }
                            for c in 0..cin {
                                let xplane = &xd[(bi * cin + c) * plane..(bi * cin + c + 1) * plane];
                                for (dy, dx) in KERNEL_OFFSETS {
                                    let kidx = ((o * cin + c) * 3 + (dy + 1) as usize) * 3
                                        + (dx + 1) as usize;
                                    let kv = kd[kidx];
                                    let mut kacc = 0.0;
                                    for y in 0..h as isize {
                                        let sy = y + dy;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for xcol in 0..w as isize {
                                            let sx = xcol + dx;
                                            if sx < 0 || sx >= w as isize {
                                                continue;
                                            }
                                            let go = gplane[y as usize * w + xcol as usize];
                                            let src = sy as usize * w + sx as usize;
                                            kacc += go * xplane[src];
                                            if let Some(gx) = grads[x].as_mut() {
                                                gx[(bi * cin + c) * plane + src] += go * kv;
                                            }
                                        }
                                    }
                                    if let Some(gk) = grads[kernel].as_mut() {
                                        gk[kidx] += kacc;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AvgPool2 { x } => {
                    if let Some(gx) = grads[x].as_mut() {
                        let (bsz, cin, h, w) = dims4(&nodes[x].shape);
                        let (oh, ow) = (h / 2, w / 2);
                        for bc in 0..bsz * cin {
                            let gplane = &gout[bc * oh * ow..(bc + 1) * oh * ow];
                            let gxplane = &mut gx[bc * h * w..(bc + 1) * h * w];
                            for y in 0..oh {
                                for xcol in 0..ow {
                                    let g = gplane[y * ow + xcol] * 0.25;
                                    gxplane[(2 * y) * w + 2 * xcol] += g;
                                    gxplane[(2 * y) * w + 2 * xcol + 1] += g;
                                    gxplane[(2 * y + 1) * w + 2 * xcol] += g;
                                    gxplane[(2 * y + 1) * w + 2 * xcol + 1] += g;
                                }
                            }
                        }
                    }
                }
            }
        }

        Gradients { grads }
    }
}

const KERNEL_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert!(shape.len() == 4, "expected 4-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of a gradient-carrying node. Panics if the node was
    /// recorded without `requires_grad`.
    pub fn wrt(&self, v: Value<'_>) -> &[f64] {
        self.grads[v.id]
            .as_deref()
            .expect("gradients: node does not carry gradients")
    }

    pub fn try_wrt(&self, v: Value<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

impl<'t> Value<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    /// Copies the node's current data out of the tape.
    pub fn to_tensor(&self) -> Tensor {
        self.tape
            .with_node(self.id, |n| Tensor::new(n.shape.clone(), n.data.clone()))
    }

    /// The value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |n| {
            assert!(n.data.len() == 1, "item: node is not scalar: {:?}", n.shape);
            n.data[0]
        })
    }

    fn needs_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.needs_grad)
    }

    fn same_tape(&self, other: &Value<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "values belong to different tapes"
        );
    }

    /// Matrix product `self[m,k] . rhs[k,n]`.
    pub fn matmul(self, rhs: Value<'t>) -> Value<'t> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: inner extents do not match: {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let b = &nodes[rhs.id].data;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let brow = &b[p * n..(p + 1) * n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            out
        };
        let ng = self.needs_grad() || rhs.needs_grad();
        self.tape.push(
            Op::MatMul {
                a: self.id,
                b: rhs.id,
            },
            vec![m, n],
            out,
            ng,
        )
    }

    /// Elementwise sum of equally shaped values.
    pub fn add(self, rhs: Value<'t>) -> Value<'t> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(sa == sb, "add: shape mismatch {sa:?} vs {sb:?}");
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(&nodes[rhs.id].data)
                .map(|(a, b)| a + b)
                .collect()
        };
        let ng = self.needs_grad() || rhs.needs_grad();
        self.tape.push(
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
            sa,
            out,
            ng,
        )
    }

    /// Adds a bias row vector to every row of a 2-d value.
    pub fn add_bias(self, bias: Value<'t>) -> Value<'t> {
        self.same_tape(&bias);
        let (sx, sb) = (self.shape(), bias.shape());
        assert!(
            sx.len() == 2 && sb.len() == 1 && sx[1] == sb[0],
            "add_bias: shape mismatch {sx:?} vs {sb:?}"
        );
        let out = {
            let nodes = self.tape.nodes.borrow();
            let b = &nodes[bias.id].data;
            nodes[self.id]
                .data
                .chunks_exact(sb[0])
                .flat_map(|row| row.iter().zip(b).map(|(x, bv)| x + bv))
                .collect()
        };
        let ng = self.needs_grad() || bias.needs_grad();
        self.tape.push(
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            sx,
            out,
            ng,
        )
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(self, rhs: Value<'t>) -> Value<'t> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(sa == sb, "mul: shape mismatch {sa:?} vs {sb:?}");
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(&nodes[rhs.id].data)
                .map(|(a, b)| a * b)
                .collect()
        };
        let ng = self.needs_grad() || rhs.needs_grad();
        self.tape.push(
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
            sa,
            out,
            ng,
        )
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(self, factor: f64) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().map(|v| v * factor).collect()
        };
        let ng = self.needs_grad();
        self.tape.push(
            Op::Scale {
                x: self.id,
                factor,
            },
            self.shape(),
            out,
            ng,
        )
    }

    pub fn relu(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().map(|v| v.max(0.0)).collect()
        };
        let ng = self.needs_grad();
        self.tape.push(Op::Relu { x: self.id }, self.shape(), out, ng)
    }

    pub fn sigmoid(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect()
        };
        let ng = self.needs_grad();
        self.tape
            .push(Op::Sigmoid { x: self.id }, self.shape(), out, ng)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(self) -> Value<'t> {
        let shape = self.shape();
        let n = *shape.last().expect("softmax: empty shape");
        assert!(n >= 1, "softmax: rows must be non-empty");
        let out = {
            let nodes = self.tape.nodes.borrow();
            let mut out = Vec::with_capacity(nodes[self.id].data.len());
            for row in nodes[self.id].data.chunks_exact(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / total));
            }
            out
        };
        let ng = self.needs_grad();
        self.tape
            .push(Op::SoftmaxRows { x: self.id }, shape, out, ng)
    }

    /// Natural log with inputs clamped at [`LOG_CLAMP`].
    pub fn log_clamped(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .map(|v| v.max(LOG_CLAMP).ln())
                .collect()
        };
        let ng = self.needs_grad();
        self.tape
            .push(Op::LogClamped { x: self.id }, self.shape(), out, ng)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(self) -> Value<'t> {
        let total = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().sum::<f64>()
        };
        let ng = self.needs_grad();
        self.tape.push(Op::Sum { x: self.id }, vec![1], vec![total], ng)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Value<'t> {
        let numel: usize = shape.iter().product();
        assert!(
            numel == self.numel(),
            "reshape: {:?} incompatible with {} elements",
            shape,
            self.numel()
        );
        let data = self.tape.with_node(self.id, |n| n.data.clone());
        let ng = self.needs_grad();
        self.tape.push(Op::Reshape { x: self.id }, shape, data, ng)
    }

    /// 3x3 same-size convolution (stride 1, zero pad 1) plus channel bias.
    pub fn conv3x3(self, kernel: Value<'t>, bias: Value<'t>) -> Value<'t> {
        self.same_tape(&kernel);
        self.same_tape(&bias);
        let sx = self.shape();
        let sk = kernel.shape();
        assert!(
            sx.len() == 4 && sk.len() == 4 && sk[2] == 3 && sk[3] == 3 && sk[1] == sx[1],
            "conv3x3: shape mismatch input {sx:?} vs kernel {sk:?}"
        );
        let (bsz, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oc = sk[0];
        assert!(
            bias.shape() == vec![oc],
            "conv3x3: bias shape {:?} vs {} output channels",
            bias.shape(),
            oc
        );
        let out = {
            let nodes = self.tape.nodes.borrow();
            let xd = &nodes[self.id].data;
            let kd = &nodes[kernel.id].data;
            let bd = &nodes[bias.id].data;
            let plane = h * w;
            let mut out = vec![0.0; bsz * oc * plane];
            for bi in 0..bsz {
                for o in 0..oc {
                    let oplane = &mut out[(bi * oc + o) * plane..(bi * oc + o + 1) * plane];
                    oplane.fill(bd[o]);
                    for c in 0..cin {
                        let xplane = &xd[(bi * cin + c) * plane..(bi * cin + c + 1) * plane];
                        for (dy, dx) in KERNEL_OFFSETS {
                            let kv = kd[((o * cin + c) * 3 + (dy + 1) as usize) * 3
                                + (dx + 1) as usize];
                            if kv == 0.0 {
                                continue;
                            }
                            for y in 0..h as isize {
                                let sy = y + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xcol in 0..w as isize {
                                    let sx = xcol + dx;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    oplane[y as usize * w + xcol as usize] +=
                                        kv * xplane[sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let ng = self.needs_grad() || kernel.needs_grad() || bias.needs_grad();
        self.tape.push(
            Op::Conv3x3 {
                x: self.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            vec![bsz, oc, h, w],
            out,
            ng,
        )
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(self) -> Value<'t> {
        let sx = self.shape();
        let (bsz, cin, h, w) = dims4(&sx);
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2: spatial extents must be even, got {sx:?}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let xd = &nodes[self.id].data;
            let mut out = vec![0.0; bsz * cin * oh * ow];
            for bc in 0..bsz * cin {
                let xplane = &xd[bc * h * w..(bc + 1) * h * w];
                let oplane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
                for y in 0..oh {
                    for xcol in 0..ow {
                        oplane[y * ow + xcol] = 0.25
                            * (xplane[(2 * y) * w + 2 * xcol]
                                + xplane[(2 * y) * w + 2 * xcol + 1]
                                + xplane[(2 * y + 1) * w + 2 * xcol]
                                + xplane[(2 * y + 1) * w + 2 * xcol + 1]);
                    }
                }
            }
            out
        };
        let ng = self.needs_grad();
        self.tape.push(
            Op::AvgPool2 { x: self.id },
            vec![bsz, cin, oh, ow],
            out,
            ng,
        )
    }
}
