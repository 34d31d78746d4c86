use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Inputs to `log_floor` are clamped to this value before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-8;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    LogFloor(Var),
    Relu(Var),
    Sum(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    SoftmaxChannels(Var),
    GatherPixels { input: Var, indices: Vec<usize> },
    NormalizeRows { input: Var, norms: Vec<T> },
    MatmulNt(Var, Var),
    RowSum(Var),
    AddRowwise(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of primitive applications in execution order.
///
/// Nodes are appended as operations run, so every node's inputs precede it and
/// the backward pass is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`; all zeros when `var` is not
    /// reachable from the loss or does not require a gradient.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// `ln(max(x, LOG_FLOOR))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var) -> Result<Var> {
        let floor = T::of(LOG_FLOOR);
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push("log_floor", out, Op::LogFloor(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// 3x3 cross-correlation with zero padding 1 plus per-channel bias.
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw().map_err(|_| {
            Error::shape("conv2d", format!("input must be [C_in,H,W], got {:?}", self.value(input).shape()))
        })?;
        let ks = self.value(kernel).shape();
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        }
        if ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape("conv2d", format!("kernel spatial size must be 3x3, got {}x{}", ks[2], ks[3])));
        }
        if ks[1] != ci {
            return Err(Error::shape("conv2d", format!("kernel C_in is {} but input has {ci} channels", ks[1])));
        }
        let co = ks[0];
        if self.value(bias).shape() != [co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{co}] (C_out), got {:?}", self.value(bias).shape()),
            ));
        }
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            ci,
            co,
            h,
            w,
        );
        let out = Tensor::new(&[co, h, w], out)?;
        self.push("conv2d", out, Op::Conv2d { input, kernel, bias }, &[input, kernel, bias])
    }

    /// Softmax over the channel axis of a `[C, H, W]` tensor, independently per pixel.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        let (c, h, w) = t.chw()?;
        if c < 2 {
            return Err(Error::shape("softmax_channels", format!("need at least 2 channels, got {c}")));
        }
        let out = softmax_channels_forward(t.data(), c, h * w);
        let out = Tensor::new(&[c, h, w], out)?;
        self.push("softmax_channels", out, Op::SoftmaxChannels(logits), &[logits])
    }

    /// Gathers per-pixel channel vectors: `[C, H, W]` to `[N, C]` for flat pixel `indices`.
    pub fn gather_pixels(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let (c, h, w) = t.chw()?;
        let hw = h * w;
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_pixels: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= hw) {
            return Err(Error::InvalidArgument(format!("pixel index {bad} out of range for {h}x{w}")));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &p in indices {
            for ch in 0..c {
                out.push(src[ch * hw + p]);
            }
        }
        let out = Tensor::new(&[indices.len(), c], out)?;
        self.push("gather_pixels", out, Op::GatherPixels { input, indices: indices.to_vec() }, &[input])
    }

    /// Divides each row of an `[N, K]` matrix by its Euclidean norm.
    pub fn normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("normalize_rows", input)?;
        let src = self.value(input).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let norm = row.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
            if norm <= T::zero() {
                return Err(Error::InvalidArgument(format!("zero-norm row {r} cannot be normalized")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&x| x / norm));
        }
        let out = Tensor::new(&[n, k], out)?;
        self.push("normalize_rows", out, Op::NormalizeRows { input, norms }, &[input])
    }

    /// `A Bᵀ` for `A: [N, K]`, `B: [M, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul_nt", a)?;
        let (m, kb) = self.matrix_dims("matmul_nt", b)?;
        if k != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims differ: {k} vs {kb}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let ra = &da[i * k..(i + 1) * k];
            for j in 0..m {
                let rb = &db[j * k..(j + 1) * k];
                out[i * m + j] = ra.iter().zip(rb).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        self.push("matmul_nt", out, Op::MatmulNt(a, b), &[a, b])
    }

    /// Row sums of an `[N, K]` matrix, giving `[N]`.
    pub fn row_sum(&mut self, input: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("row_sum", input)?;
        let src = self.value(input).data();
        let out: Vec<T> =
            (0..n).map(|r| src[r * k..(r + 1) * k].iter().fold(T::zero(), |acc, &x| acc + x)).collect();
        let out = Tensor::new(&[n], out)?;
        self.push("row_sum", out, Op::RowSum(input), &[input])
    }

    /// `m[i, j] + v[i]` for `m: [N, M]`, `v: [N]`.
    pub fn add_rowwise(&mut self, m: Var, v: Var) -> Result<Var> {
        let (n, cols) = self.matrix_dims("add_rowwise", m)?;
        if self.value(v).shape() != [n] {
            return Err(Error::shape("add_rowwise", format!("vector must be [{n}], got {:?}", self.value(v).shape())));
        }
        let (dm, dv) = (self.value(m).data(), self.value(v).data());
        let out: Vec<T> = (0..n * cols).map(|idx| dm[idx] + dv[idx / cols]).collect();
        let out = Tensor::new(&[n, cols], out)?;
        self.push("add_rowwise", out, Op::AddRowwise(m, v), &[m, v])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            &[n, k] => Ok((n, k)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&gi, &y)| gi * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&gi, &x)| gi * x).collect());
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|&x| x * *f).collect()),
            Op::Square(a) => {
                let two = T::of(2.0);
                accumulate(grads, *a, g.iter().zip(val(*a)).map(|(&gi, &x)| two * x * gi).collect())
            }
            Op::LogFloor(a) => {
                let floor = T::of(LOG_FLOOR);
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| if x > floor { gi / x } else { T::zero() })
                    .collect();
                accumulate(grads, *a, d)
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *a, d)
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(grads, *a, vec![g[0]; n])
            }
            Op::Conv2d { input, kernel, bias } => {
                let (ci, h, w) = self.nodes[input.0].value.chw().expect("conv input");
                let co = self.nodes[kernel.0].value.shape()[0];
                let x = val(*input);
                let k = val(*kernel);
                let hw = h * w;
                if needs(*bias) {
                    let db = (0..co)
                        .map(|o| g[o * hw..(o + 1) * hw].iter().fold(T::zero(), |acc, &v| acc + v))
                        .collect();
                    accumulate(grads, *bias, db);
                }
                if needs(*kernel) {
                    accumulate(grads, *kernel, conv2d_kernel_grad(x, g, ci, co, h, w));
                }
                if needs(*input) {
                    accumulate(grads, *input, conv2d_input_grad(k, g, ci, co, h, w));
                }
            }
            Op::SoftmaxChannels(a) => {
                let y = node.value.data();
                let (c, h, w) = node.value.chw().expect("softmax shape");
                let hw = h * w;
                let mut dot = vec![T::zero(); hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dot[p] = dot[p] + g[ch * hw + p] * y[ch * hw + p];
                    }
                }
                let d = (0..c * hw).map(|i| y[i] * (g[i] - dot[i % hw])).collect();
                accumulate(grads, *a, d)
            }
            Op::GatherPixels { input, indices } => {
                let (c, h, w) = self.nodes[input.0].value.chw().expect("gather shape");
                let hw = h * w;
                let mut d = vec![T::zero(); c * hw];
                for (n, &p) in indices.iter().enumerate() {
                    for ch in 0..c {
                        d[ch * hw + p] = d[ch * hw + p] + g[n * c + ch];
                    }
                }
                accumulate(grads, *input, d)
            }
            Op::NormalizeRows { input, norms } => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let proj = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * proj) / norm));
                }
                accumulate(grads, *input, d)
            }
            Op::MatmulNt(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (n, k) = (sa[0], sa[1]);
                let m = self.nodes[b.0].value.shape()[0];
                let (da, db) = (val(*a), val(*b));
                if needs(*a) {
                    let mut d = vec![T::zero(); n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for c in 0..k {
                                d[i * k + c] = d[i * k + c] + gij * db[j * k + c];
                            }
                        }
                    }
                    accumulate(grads, *a, d);
                }
                if needs(*b) {
                    let mut d = vec![T::zero(); m * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            for c in 0..k {
                                d[j * k + c] = d[j * k + c] + gij * da[i * k + c];
                            }
                        }
                    }
                    accumulate(grads, *b, d);
                }
            }
            Op::RowSum(a) => {
                let k = self.nodes[a.0].value.shape()[1];
                let d = (0..g.len() * k).map(|i| g[i / k]).collect();
                accumulate(grads, *a, d)
            }
            Op::AddRowwise(m, v) => {
                let cols = self.nodes[m.0].value.shape()[1];
                if needs(*m) {
                    accumulate(grads, *m, g.to_vec());
                }
                if needs(*v) {
                    let d = g.chunks(cols).map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x)).collect();
                    accumulate(grads, *v, d);
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let start = if d < 0 { 1 } else { 0 };
    let end = if d > 0 { len - 1 } else { len };
    (start, end.max(start))
}

fn conv2d_forward<T: Real>(x: &[T], k: &[T], b: &[T], ci: usize, co: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); co * hw];
    for o in 0..co {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(b[o]);
        for i in 0..ci {
            let x_i = &x[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let wgt = k[((o * ci + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut out_o[y * w + x0..y * w + x1];
                        let irow = &x_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (o_el, &i_el) in orow.iter_mut().zip(irow) {
                            *o_el = *o_el + wgt * i_el;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_kernel_grad<T: Real>(x: &[T], g: &[T], ci: usize, co: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut dk = vec![T::zero(); co * ci * 9];
    for o in 0..co {
        let g_o = &g[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let x_i = &x[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g_o[y * w + x0..y * w + x1];
                        let irow = &x_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc = grow.iter().zip(irow).fold(acc, |a, (&gv, &iv)| a + gv * iv);
                    }
                    dk[((o * ci + i) * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    }
    dk
}

fn conv2d_input_grad<T: Real>(k: &[T], g: &[T], ci: usize, co: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut dx_all = vec![T::zero(); ci * hw];
    for o in 0..co {
        let g_o = &g[o * hw..(o + 1) * hw];
        for i in 0..ci {
            let dx_i = &mut dx_all[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(w, dx);
                    let wgt = k[((o * ci + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g_o[y * w + x0..y * w + x1];
                        let drow = &mut dx_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + wgt * gv;
                        }
                    }
                }
            }
        }
    }
    dx_all
}

fn softmax_channels_forward<T: Real>(z: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut max = z[..hw].to_vec();
    for ch in 1..c {
        for p in 0..hw {
            max[p] = max[p].max(z[ch * hw + p]);
        }
    }
    let mut out: Vec<T> = (0..c * hw).map(|i| (z[i] - max[i % hw]).exp()).collect();
    let mut sum = vec![T::zero(); hw];
    for ch in 0..c {
        for p in 0..hw {
            sum[p] = sum[p] + out[ch * hw + p];
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v = *v / sum[i % hw];
    }
    out
}
