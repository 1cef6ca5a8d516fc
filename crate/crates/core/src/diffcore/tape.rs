use super::{DiffError, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the output `y = f(x)`.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        norm: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Index {
        x: Var,
        axis: usize,
        at: usize,
    },
    Stack {
        xs: Vec<Var>,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    CcApply {
        h: Var,
        r: Var,
        geom: CcGeom,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    l_in: usize,
    l_out: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct CcGeom {
    batch: usize,
    nr: usize,
    nt: usize,
    len: usize,
    h_len: usize,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order; `backward` walks them in exact
/// reverse, so every node's adjoint is complete before it is propagated.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`]. Only leaves keep their adjoint.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut offset = 0usize;
    'outer: loop {
        let mut o = offset;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_stride;
        }
        // advance all but the last axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Side of the kink each ReLU input lies on, in recording order. Two
    /// evaluations of one graph agree here exactly when no ReLU input
    /// changed sign between them.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Act {
                x,
                kind: Activation::Relu,
            } = node.op
            {
                out.extend(self.value(x).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            true,
        )
    }

    /// Leaf bound to a stored parameter; it gets a gradient iff the parameter does.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.tensor(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.is_requires_grad(),
        )
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, needs))
    }

    /// Applies a `[k×n]` weight to the last axis of `x`: `[..., k] → [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().expect("non-empty shape");
        let rows = numel(&shape) / k;
        let x2 = self.reshape(x, &[rows, k])?;
        let y = self.matmul(x2, w)?;
        let n = self.shape(w)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Batched product `[g×m×k]·[g×k×n]`, or `[g×m×k]·[g×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", format!("{sa:?} · {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(shape_err("batch_matmul", format!("{sa:?} · {sb:?}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let cb = &mut out[gi * m * n..(gi + 1) * m * n];
            small_gemm(m, k, n, ab, false, bb, trans_b, cb);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, needs))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, needs)
    }

    /// Adds `bias[C]` along the last axis of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != c {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &b)| v + b))
            .collect();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let needs = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Act { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    // ---- normalization and losses ------------------------------------------

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite { op: "softmax" });
        }
        let k = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x }, needs))
    }

    /// Mean cross-entropy of `logits[B×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, DiffError> {
        let b = labels.len();
        self.cross_entropy_normalized(logits, labels, b)
    }

    /// Summed cross-entropy divided by `norm` instead of the batch size. Lets a
    /// batch be split into chunks whose losses add up to the batch mean.
    pub fn cross_entropy_normalized(
        &mut self,
        logits: Var,
        labels: &[usize],
        norm: usize,
    ) -> Result<Var, DiffError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || norm == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DiffError::Label {
                label: bad,
                classes: k,
            });
        }
        if !self.value(logits).iter().all(|v| v.is_finite()) {
            return Err(DiffError::NonFinite {
                op: "cross_entropy",
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, (z, &y)) in probs
            .chunks_exact_mut(k)
            .zip(self.value(logits).chunks_exact(k).zip(labels))
        {
            let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - z[y];
            softmax_in_place(row);
        }
        let norm_t = T::from_usize(norm).unwrap();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / norm_t],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                norm: norm_t,
            },
            needs,
        ))
    }

    /// Standardizes the last axis (epsilon 1e-5), then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let c = *self.shape(x).last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err(
                    "layer_norm",
                    format!("{:?} with affine {:?}", self.shape(x), self.shape(p)),
                ));
            }
        }
        let eps = T::from_f64_lossy(1e-5);
        let c_t = T::from_usize(c).unwrap();
        let rows = self.value(x).len() / c;
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / c_t;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c_t;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let out = xhat
            .chunks_exact(c)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.iter().zip(bv))
                    .map(|(&h, (&g, &b))| h * g + b)
            })
            .collect();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    // ---- convolution -------------------------------------------------------

    /// 1-D convolution with zero padding over `x[N×L×Cin]`, weights
    /// `w[k×Cin×Cout]` shared across `N`, bias `b[Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sb != [sw[2]] {
            return Err(shape_err(
                "conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        if stride == 0 || sw[0] == 0 {
            return Err(DiffError::Argument {
                op: "conv1d",
                detail: format!("kernel {} stride {stride}", sw[0]),
            });
        }
        let (n, l_in, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        if l_in + 2 * pad < kernel {
            return Err(DiffError::DegenerateLength {
                len: l_in,
                kernel,
                pad,
                stride,
            });
        }
        let l_out = (l_in + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            n,
            l_in,
            l_out,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        };
        let cols = im2col(self.value(x), geom);
        let rows = n * l_out;
        let mut out = vec![T::zero(); rows * c_out];
        T::gemm(
            rows,
            kernel * c_in,
            c_out,
            &cols,
            false,
            self.value(w),
            false,
            &mut out,
            false,
        );
        let bv = self.value(b);
        for row in out.chunks_exact_mut(c_out) {
            add_into(row, bv);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            vec![n, l_out, c_out],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols,
            },
            needs,
        ))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, needs))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        let (out, out_shape) = permute_data(self.value(x), &shape, perm);
        let needs = self.needs(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(&[x]);
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, needs))
    }

    /// Selects position `at` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, at: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || at >= shape[axis] || shape.len() < 2 {
            return Err(shape_err(
                "index_axis",
                format!("{shape:?} axis {axis} index {at}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + at) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = self.needs(&[x]);
        Ok(self.push(out_shape, out, Op::Index { x, axis, at }, needs))
    }

    /// Stacks equally-shaped values along a new axis at position `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("stack", "no inputs".into()))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() || xs.iter().any(|v| self.shape(*v) != shape.as_slice()) {
            return Err(shape_err(
                "stack",
                format!("mismatched inputs, axis {axis}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis..]);
        let mut out = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for v in xs {
                out.extend_from_slice(&self.value(*v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, xs.len());
        let needs = self.needs(xs);
        Ok(self.push(
            out_shape,
            out,
            Op::Stack {
                xs: xs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    // ---- reductions --------------------------------------------------------

    /// Arithmetic mean over `axis`, dropping that axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(shape_err("mean_axis", format!("{shape:?} axis {axis}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..n {
                add_into(dst, &src[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = self.needs(&[x]);
        Ok(self.push(out_shape, out, Op::Mean { x, axis }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, needs)
    }

    // ---- channel compensation ---------------------------------------------

    /// Complex compensation `r̂_i = Σ_j Ĥ^{j,i} · r_j` per time slot.
    ///
    /// `h` is `[B×Nr×Nt×Lh×2]` with `Lh` either `L` or 1 (held constant over
    /// time); `r` is `[B×Nr×L×2]`; the result is `[B×Nt×L×2]`. The last axis
    /// holds the I and Q planes.
    pub fn cc_apply(&mut self, h: Var, r: Var) -> Result<Var, DiffError> {
        let (sh, sr) = (self.shape(h).to_vec(), self.shape(r).to_vec());
        let ok = sh.len() == 5
            && sr.len() == 4
            && sh[0] == sr[0]
            && sh[1] == sr[1]
            && sh[4] == 2
            && sr[3] == 2
            && (sh[3] == sr[2] || sh[3] == 1);
        if !ok {
            return Err(shape_err("cc_apply", format!("H {sh:?} with r {sr:?}")));
        }
        let geom = CcGeom {
            batch: sr[0],
            nr: sr[1],
            nt: sh[2],
            len: sr[2],
            h_len: sh[3],
        };
        let (hv, rv) = (self.value(h), self.value(r));
        let mut out = vec![T::zero(); geom.batch * geom.nt * geom.len * 2];
        for b in 0..geom.batch {
            for i in 0..geom.nt {
                let o = &mut out[(b * geom.nt + i) * geom.len * 2..][..geom.len * 2];
                for j in 0..geom.nr {
                    let hb = ((b * geom.nr + j) * geom.nt + i) * geom.h_len * 2;
                    let rb = (b * geom.nr + j) * geom.len * 2;
                    for t in 0..geom.len {
                        let th = if geom.h_len == 1 { 0 } else { t };
                        let (hi, hq) = (hv[hb + 2 * th], hv[hb + 2 * th + 1]);
                        let (ri, rq) = (rv[rb + 2 * t], rv[rb + 2 * t + 1]);
                        o[2 * t] += hi * ri - hq * rq;
                        o[2 * t + 1] += hq * ri + hi * rq;
                    }
                }
            }
        }
        let needs = self.needs(&[h, r]);
        Ok(self.push(
            vec![geom.batch, geom.nt, geom.len, 2],
            out,
            Op::CcApply { h, r, geom },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates adjoints from a scalar `loss` back to every leaf that needs
    /// a gradient. Adjoints from fan-out add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        if self.shape(loss) != [1] {
            return Err(DiffError::NonScalarRoot {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Sums leaf adjoints into the gradient accumulators of bound parameters.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, grads.grads[idx].as_ref()) {
                store.tensor_mut(*id).accumulate_grad(g);
            }
        }
    }

    /// Leaf adjoints keyed by parameter, in tape order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients<T>,
    ) -> impl Iterator<Item = (ParamId, &'a [T])> + 'a {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(
                move |(idx, node)| match (&node.op, grads.grads[idx].as_deref()) {
                    (Op::Leaf { param: Some(id) }, Some(g)) => Some((*id, g)),
                    _ => None,
                },
            )
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, false, val(*b), true, ga, true);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    T::gemm(k, m, n, val(*a), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (gn, m, n) = (node.shape[0], node.shape[1], node.shape[2]);
                let k = self.nodes[a.0].shape[2];
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, gn * m * k);
                    for gi in 0..gn {
                        // dA = dC · Bᵀ, where B is logical [k×n]
                        small_gemm_acc(
                            m,
                            n,
                            k,
                            &g[gi * m * n..][..m * n],
                            false,
                            &bv[gi * k * n..][..k * n],
                            !*trans_b,
                            &mut ga[gi * m * k..][..m * k],
                        );
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, gn * k * n);
                    for gi in 0..gn {
                        let ab = &av[gi * m * k..][..m * k];
                        let gc = &g[gi * m * n..][..m * n];
                        let dst = &mut gb[gi * k * n..][..k * n];
                        if *trans_b {
                            // stored [n×k]: dBᵀ = dCᵀ · A
                            small_gemm_acc(n, m, k, gc, true, ab, false, dst);
                        } else {
                            small_gemm_acc(k, m, n, ab, true, gc, false, dst);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (d, &gg) in gx.iter_mut().zip(g) {
                        *d += gg * *factor;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Act { x, kind } => {
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((d, &gg), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += gg * kind.derivative_from_output(y);
                    }
                }
            }
            Op::Softmax { x } => {
                if wants(*x) {
                    let k = *node.shape.last().unwrap();
                    let gx = slot(grads, *x, g.len());
                    for ((d, gg), y) in gx
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(node.value.chunks_exact(k))
                    {
                        let dot: T = gg.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for ((di, &gi), &yi) in d.iter_mut().zip(gg).zip(y) {
                            *di += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                norm,
            } => {
                if wants(*logits) {
                    let k = self.nodes[logits.0].shape[1];
                    let scale = g[0] / *norm;
                    let gl = slot(grads, *logits, probs.len());
                    for (row, (p, &y)) in gl
                        .chunks_exact_mut(k)
                        .zip(probs.chunks_exact(k).zip(labels))
                    {
                        for (c, (d, &pc)) in row.iter_mut().zip(p).enumerate() {
                            let target = if c == y { T::one() } else { T::zero() };
                            *d += scale * (pc - target);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.shape.last().unwrap();
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * hi;
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, c);
                    for grow in g.chunks_exact(c) {
                        add_into(gb, grow);
                    }
                }
                if wants(*x) {
                    let gamma_v = val(*gamma);
                    let c_t = T::from_usize(c).unwrap();
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); c];
                    for (((d, grow), hrow), &r) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .zip(rstd)
                    {
                        for ((dh, &gi), &ga) in dxhat.iter_mut().zip(grow).zip(gamma_v) {
                            *dh = gi * ga;
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / c_t;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / c_t;
                        for ((di, &dh), &h) in d.iter_mut().zip(&dxhat).zip(hrow) {
                            *di += r * (dh - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let rows = geom.n * geom.l_out;
                let kc = geom.kernel * geom.c_in;
                if wants(*w) {
                    let gw = slot(grads, *w, kc * geom.c_out);
                    T::gemm(kc, rows, geom.c_out, cols, true, g, false, gw, true);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, geom.c_out);
                    for row in g.chunks_exact(geom.c_out) {
                        add_into(gb, row);
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); rows * kc];
                    T::gemm(
                        rows,
                        geom.c_out,
                        kc,
                        g,
                        false,
                        val(*w),
                        true,
                        &mut dcols,
                        false,
                    );
                    let gx = slot(grads, *x, geom.n * geom.l_in * geom.c_in);
                    col2im_add(&dcols, *geom, gx);
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Permute { x, perm } => {
                if wants(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inverse[p] = d;
                    }
                    let (back, _) = permute_data(g, &node.shape, &inverse);
                    add_into(slot(grads, *x, g.len()), &back);
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(*x) {
                    let in_shape = &self.nodes[x.0].shape;
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let len = node.shape[*axis];
                    let gx = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..][..len * inner];
                        add_into(dst, &g[o * len * inner..][..len * inner]);
                    }
                }
            }
            Op::Index { x, axis, at } => {
                if wants(*x) {
                    let in_shape = &self.nodes[x.0].shape;
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let gx = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + at) * inner..][..inner];
                        add_into(dst, &g[o * inner..][..inner]);
                    }
                }
            }
            Op::Stack { xs, axis } => {
                let in_shape = &self.nodes[xs[0].0].shape;
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[*axis..]);
                let count = xs.len();
                for (pos, v) in xs.iter().enumerate() {
                    if !wants(*v) {
                        continue;
                    }
                    let gx = slot(grads, *v, outer * inner);
                    for o in 0..outer {
                        add_into(
                            &mut gx[o * inner..][..inner],
                            &g[(o * count + pos) * inner..][..inner],
                        );
                    }
                }
            }
            Op::Mean { x, axis } => {
                if wants(*x) {
                    let in_shape = &self.nodes[x.0].shape;
                    let (outer, n, inner) = split_axis(in_shape, *axis);
                    let inv = T::one() / T::from_usize(n).unwrap();
                    let gx = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..][..inner];
                        for i in 0..n {
                            let dst = &mut gx[(o * n + i) * inner..][..inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let len = self.nodes[x.0].value.len();
                    for d in slot(grads, *x, len).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CcApply { h, r, geom } => {
                let CcGeom {
                    batch,
                    nr,
                    nt,
                    len,
                    h_len,
                } = *geom;
                if wants(*r) {
                    let hv = val(*h);
                    let gr = slot(grads, *r, batch * nr * len * 2);
                    for b in 0..batch {
                        for i in 0..nt {
                            let go = &g[(b * nt + i) * len * 2..][..len * 2];
                            for j in 0..nr {
                                let hb = ((b * nr + j) * nt + i) * h_len * 2;
                                let dst = &mut gr[(b * nr + j) * len * 2..][..len * 2];
                                for t in 0..len {
                                    let th = if h_len == 1 { 0 } else { t };
                                    let (hi, hq) = (hv[hb + 2 * th], hv[hb + 2 * th + 1]);
                                    let (gi, gq) = (go[2 * t], go[2 * t + 1]);
                                    dst[2 * t] += gi * hi + gq * hq;
                                    dst[2 * t + 1] += gq * hi - gi * hq;
                                }
                            }
                        }
                    }
                }
                if wants(*h) {
                    let rv = val(*r);
                    let gh = slot(grads, *h, batch * nr * nt * h_len * 2);
                    for b in 0..batch {
                        for i in 0..nt {
                            let go = &g[(b * nt + i) * len * 2..][..len * 2];
                            for j in 0..nr {
                                let hb = ((b * nr + j) * nt + i) * h_len * 2;
                                let rb = &rv[(b * nr + j) * len * 2..][..len * 2];
                                for t in 0..len {
                                    let th = if h_len == 1 { 0 } else { t };
                                    let (ri, rq) = (rb[2 * t], rb[2 * t + 1]);
                                    let (gi, gq) = (go[2 * t], go[2 * t + 1]);
                                    gh[hb + 2 * th] += gi * ri + gq * rq;
                                    gh[hb + 2 * th + 1] += gq * ri - gi * rq;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `c = a·b` for small matrices; `a_t`/`b_t` flag transposed storage.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    c.fill(T::zero());
    small_gemm_acc(m, k, n, a, a_t, b, b_t, c);
}

#[allow(clippy::too_many_arguments)]
fn small_gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    for i in 0..m {
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
            let crow = &mut c[i * n..(i + 1) * n];
            if b_t {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let kc = g.kernel * g.c_in;
    let mut cols = vec![T::zero(); g.n * g.l_out * kc];
    for n in 0..g.n {
        for t in 0..g.l_out {
            let row = &mut cols[(n * g.l_out + t) * kc..][..kc];
            for kk in 0..g.kernel {
                let pos = (t * g.stride + kk) as isize - g.pad as isize;
                if pos < 0 || pos as usize >= g.l_in {
                    continue;
                }
                let src = &x[(n * g.l_in + pos as usize) * g.c_in..][..g.c_in];
                row[kk * g.c_in..(kk + 1) * g.c_in].copy_from_slice(src);
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(dcols: &[T], g: ConvGeom, dx: &mut [T]) {
    let kc = g.kernel * g.c_in;
    for n in 0..g.n {
        for t in 0..g.l_out {
            let row = &dcols[(n * g.l_out + t) * kc..][..kc];
            for kk in 0..g.kernel {
                let pos = (t * g.stride + kk) as isize - g.pad as isize;
                if pos < 0 || pos as usize >= g.l_in {
                    continue;
                }
                let dst = &mut dx[(n * g.l_in + pos as usize) * g.c_in..][..g.c_in];
                add_into(dst, &row[kk * g.c_in..(kk + 1) * g.c_in]);
            }
        }
    }
}
