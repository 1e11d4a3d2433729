use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Per-frame product `adj · z_f` for each of `frames` row blocks of `z`.
    FrameMatMul {
        adj: usize,
        z: usize,
        frames: usize,
    },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `num / (den + eps)`; denominators are nonnegative where used.
    Div {
        num: usize,
        den: usize,
        eps: f64,
    },
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    /// `1 / sqrt(x + eps)`.
    Rsqrt {
        x: usize,
    },
    /// Row block `f` of the output is row block `clamp(f + offset)` of the input.
    ShiftFrames {
        x: usize,
        block: usize,
        offset: isize,
    },
    MaskedSelect {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of primitive operations.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order; [`Tape::backward`] visits it once in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {}×{} and {}×{}",
        a[0], a[1], b[0], b[1]
    ))
}

/// Output extent of a broadcast dimension, if the two extents are compatible.
fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// Applies an n×n matrix to each n-row block of `z`.
    pub fn frame_matmul(&mut self, adj: Var, z: Var) -> Result<Var> {
        let [n, n2] = self.shape(adj);
        let [rows, d] = self.shape(z);
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(shape_err("frame_matmul", [n, n2], [rows, d]));
        }
        let frames = rows / n;
        let mut out = Tensor::zeros(rows, d);
        {
            let a = self.value(adj).data();
            let zd = self.value(z).data();
            let od = out.data_mut();
            for f in 0..frames {
                let block = f * n * d..(f + 1) * n * d;
                T::gemm(
                    n,
                    n,
                    d,
                    a,
                    (n as isize, 1),
                    &zd[block.clone()],
                    (d as isize, 1),
                    T::zero(),
                    &mut od[block],
                    (d as isize, 1),
                );
            }
        }
        let rg = self.rg(adj.0) || self.rg(z.0);
        Ok(self.push(
            out,
            Op::FrameMatMul {
                adj: adj.0,
                z: z.0,
                frames,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a.0);
        self.push(value, Op::Transpose(a.0), rg)
    }

    fn broadcast(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (Some(r), Some(c)) = (broadcast_dim(sa[0], sb[0]), broadcast_dim(sa[1], sb[1]))
        else {
            return Err(shape_err(name, sa, sb));
        };
        let av = self.value(a);
        let bv = self.value(b);
        if sa == sb {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(r, c, data);
        }
        Ok(Tensor::from_fn(r, c, |i, j| {
            let x = av.get(if sa[0] == 1 { 0 } else { i }, if sa[1] == 1 { 0 } else { j });
            let y = bv.get(if sb[0] == 1 { 0 } else { i }, if sb[1] == 1 { 0 } else { j });
            f(x, y)
        }))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, num: Var, den: Var, eps: f64) -> Result<Var> {
        let e = T::from_f64_lossy(eps);
        let value = self.broadcast("div", num, den, |x, y| x / (y + e))?;
        let rg = self.rg(num.0) || self.rg(den.0);
        Ok(self.push(
            value,
            Op::Div {
                num: num.0,
                den: den.0,
                eps,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::from_f64_lossy(c);
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a.0);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::abs);
        let rg = self.rg(a.0);
        self.push(value, Op::Abs(a.0), rg)
    }

    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        let e = T::from_f64_lossy(eps);
        let value = self.value(a).map(|x| (x + e).sqrt().recip());
        let rg = self.rg(a.0);
        self.push(value, Op::Rsqrt { x: a.0 }, rg)
    }

    /// Shifts row blocks of size `block` by `offset`, replicating the edge
    /// block at either boundary.
    pub fn shift_frames(&mut self, x: Var, block: usize, offset: isize) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if block == 0 || rows % block != 0 {
            return Err(Error::Shape(format!(
                "shift_frames: {rows} rows are not a multiple of block {block}"
            )));
        }
        let frames = rows / block;
        let width = block * cols;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * cols);
        for f in 0..frames {
            let s = shifted_frame(f, offset, frames);
            data.extend_from_slice(&src[s * width..(s + 1) * width]);
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.rg(x.0);
        Ok(self.push(
            value,
            Op::ShiftFrames {
                x: x.0,
                block,
                offset,
            },
            rg,
        ))
    }

    /// Gathers the flat (row-major) entries listed in `idx` into a column.
    pub fn masked_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "masked_select index {bad} out of range for {} entries",
                src.len()
            )));
        }
        let value = Tensor::column(idx.iter().map(|&i| src[i]).collect());
        let rg = self.rg(x.0);
        Ok(self.push(
            value,
            Op::MaskedSelect {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Mean of all entries; the mean of an empty tensor is zero.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len();
        let s: T = v.data().iter().copied().sum();
        let m = if n == 0 {
            T::zero()
        } else {
            s / T::from_usize(n).unwrap()
        };
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    /// Accumulates `d loss / d node` into the tape's gradient slots.
    ///
    /// Calling it again without [`Tape::reset_grads`] adds onto the
    /// gradients from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            let [r, c] = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let n = self.nodes.len();
        let mut work: Vec<Option<Tensor<T>>> = vec![None; n];
        work[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut work);
            if self.grads.len() < n {
                self.grads.resize(n, None);
            }
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, work: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(a) {
                    // dA = G · Bᵀ
                    let mut ga = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::zero(),
                        ga.data_mut(),
                        (k as isize, 1),
                    );
                    accumulate(work, a, ga);
                }
                if self.rg(b) {
                    // dB = Aᵀ · G
                    let mut gb = Tensor::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        gb.data_mut(),
                        (n as isize, 1),
                    );
                    accumulate(work, b, gb);
                }
            }
            &Op::FrameMatMul { adj, z, frames } => {
                let (av, zv) = (val(adj), val(z));
                let n = av.rows();
                let d = zv.cols();
                let gd = g.data();
                if self.rg(adj) {
                    let mut ga = Tensor::zeros(n, n);
                    for f in 0..frames {
                        let block = f * n * d..(f + 1) * n * d;
                        // dA += G_f · Z_fᵀ
                        T::gemm(
                            n,
                            d,
                            n,
                            &gd[block.clone()],
                            (d as isize, 1),
                            &zv.data()[block],
                            (1, d as isize),
                            T::one(),
                            ga.data_mut(),
                            (n as isize, 1),
                        );
                    }
                    accumulate(work, adj, ga);
                }
                if self.rg(z) {
                    let mut gz = Tensor::zeros(frames * n, d);
                    for f in 0..frames {
                        let block = f * n * d..(f + 1) * n * d;
                        // dZ_f = Aᵀ · G_f
                        T::gemm(
                            n,
                            n,
                            d,
                            av.data(),
                            (1, n as isize),
                            &gd[block.clone()],
                            (d as isize, 1),
                            T::zero(),
                            &mut gz.data_mut()[block],
                            (d as isize, 1),
                        );
                    }
                    accumulate(work, z, gz);
                }
            }
            &Op::Transpose(a) => {
                if self.rg(a) {
                    accumulate(work, a, g.transpose());
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(work, a, reduce_to(g, val(a).shape()));
                }
                if self.rg(b) {
                    accumulate(work, b, reduce_to(g, val(b).shape()));
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(work, a, reduce_to(g, val(a).shape()));
                }
                if self.rg(b) {
                    accumulate(work, b, reduce_to(&g.map(|x| -x), val(b).shape()));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if self.rg(a) {
                    let full = zip_broadcast(g, bv, |gi, y| gi * y);
                    accumulate(work, a, reduce_to(&full, av.shape()));
                }
                if self.rg(b) {
                    let full = zip_broadcast(g, av, |gi, x| gi * x);
                    accumulate(work, b, reduce_to(&full, bv.shape()));
                }
            }
            &Op::Div { num, den, eps } => {
                let e = T::from_f64_lossy(eps);
                let (nv, dv) = (val(num), val(den));
                if self.rg(num) {
                    let full = zip_broadcast(g, dv, |gi, y| gi / (y + e));
                    accumulate(work, num, reduce_to(&full, nv.shape()));
                }
                if self.rg(den) {
                    // d/dy x/(y+e) = -x/(y+e)² = -out/(y+e)
                    let out = &node.value;
                    let go = zip_broadcast(g, out, |gi, o| gi * o);
                    let full = zip_broadcast(&go, dv, |t, y| -t / (y + e));
                    accumulate(work, den, reduce_to(&full, dv.shape()));
                }
            }
            &Op::Scale(a, c) => {
                if self.rg(a) {
                    let k = T::from_f64_lossy(c);
                    accumulate(work, a, g.map(|x| x * k));
                }
            }
            &Op::Tanh(a) => {
                if self.rg(a) {
                    let ga = zip_same(g, &node.value, |gi, y| gi * (T::one() - y * y));
                    accumulate(work, a, ga);
                }
            }
            &Op::Relu(a) => {
                if self.rg(a) {
                    let ga = zip_same(g, val(a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                    accumulate(work, a, ga);
                }
            }
            &Op::Sigmoid(a) => {
                if self.rg(a) {
                    let ga = zip_same(g, &node.value, |gi, s| gi * s * (T::one() - s));
                    accumulate(work, a, ga);
                }
            }
            &Op::Abs(a) => {
                if self.rg(a) {
                    let ga = zip_same(g, val(a), |gi, x| gi * sign(x));
                    accumulate(work, a, ga);
                }
            }
            &Op::Rsqrt { x, .. } => {
                if self.rg(x) {
                    // d/dx (x+e)^(-1/2) = -1/2 · y³
                    let half = T::from_f64_lossy(0.5);
                    let ga = zip_same(g, &node.value, |gi, y| -half * gi * y * y * y);
                    accumulate(work, x, ga);
                }
            }
            &Op::ShiftFrames { x, block, offset } => {
                if self.rg(x) {
                    let xv = val(x);
                    let frames = xv.rows() / block;
                    let width = block * xv.cols();
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let gxd = gx.data_mut();
                    for f in 0..frames {
                        let s = shifted_frame(f, offset, frames);
                        for (dst, &src) in gxd[s * width..(s + 1) * width]
                            .iter_mut()
                            .zip(&g.data()[f * width..(f + 1) * width])
                        {
                            *dst += src;
                        }
                    }
                    accumulate(work, x, gx);
                }
            }
            Op::MaskedSelect { x, idx } => {
                let x = *x;
                if self.rg(x) {
                    let xv = val(x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (&i, &gi) in idx.iter().zip(g.data()) {
                        gx.data_mut()[i] += gi;
                    }
                    accumulate(work, x, gx);
                }
            }
            &Op::Sum(a) => {
                if self.rg(a) {
                    let [r, c] = val(a).shape();
                    accumulate(work, a, Tensor::full(r, c, g.item()));
                }
            }
            &Op::Mean(a) => {
                if self.rg(a) {
                    let [r, c] = val(a).shape();
                    let n = (r * c).max(1);
                    let share = g.item() / T::from_usize(n).unwrap();
                    accumulate(work, a, Tensor::full(r, c, share));
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn shifted_frame(f: usize, offset: isize, frames: usize) -> usize {
    (f as isize + offset).clamp(0, frames as isize - 1) as usize
}

fn accumulate<T: Real>(work: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut work[id] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Combines a full-shape gradient with an operand that may be broadcast.
fn zip_broadcast<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if g.shape() == other.shape() {
        return zip_same(g, other, f);
    }
    let [or, oc] = other.shape();
    Tensor::from_fn(g.rows(), g.cols(), |i, j| {
        f(
            g.get(i, j),
            other.get(if or == 1 { 0 } else { i }, if oc == 1 { 0 } else { j }),
        )
    })
}

/// Sums a gradient over the dimensions an operand was broadcast along.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: [usize; 2]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (
                if shape[0] == 1 { 0 } else { i },
                if shape[1] == 1 { 0 } else { j },
            );
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of
    /// every input, compared against the tape gradient.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            let s = t.sum(o);
            t.value(s).item()
        };
        let eps = 1e-4;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).cloned().unwrap_or(Tensor::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-3, "input {k} entry {e}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones_and_square_gradient_is_2x() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(v).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(Tensor::full(2, 2, 1.0));
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 2.0));
        tape.reset_grads();
        assert!(tape.grad(v).is_none());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(1, 3, 2.0));
        let x = tape.leaf(Tensor::full(1, 3, 1.0));
        let p = tape.mul(c, x).unwrap();
        let d = tape.detach(p);
        let q = tape.mul(d, x).unwrap();
        let s = tape.sum(q);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        // detached product contributes its value only
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(1, 1, 1), (2, 3, 4), (5, 2, 3)] {
            let a = random(m, k, &mut rng);
            let b = random(k, n, &mut rng);
            check(vec![a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
        }
    }

    #[test]
    fn frame_matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = random(3, 3, &mut rng);
        let z = random(12, 2, &mut rng);
        check(vec![adj, z], |t, v| t.frame_matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn broadcast_binary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(3, 4, &mut rng);
        let row = random(1, 4, &mut rng);
        let col = random(3, 1, &mut rng);
        let s = random(1, 1, &mut rng);
        check(vec![a.clone(), row.clone()], |t, v| t.add(v[0], v[1]).unwrap());
        check(vec![col.clone(), row.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
        check(vec![a.clone(), col.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
        check(vec![a.clone(), s], |t, v| t.mul(v[0], v[1]).unwrap());
        let pos = a.map(|x| x.abs() + 0.5);
        check(vec![a.clone(), pos], |t, v| t.div(v[0], v[1], 1e-6).unwrap());
        let pos_col = col.map(|x| x.abs() + 0.5);
        check(vec![a, pos_col], |t, v| t.div(v[0], v[1], 1e-6).unwrap());
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // keep entries away from the relu/abs kink at zero
        let a = random(3, 3, &mut rng).map(|x| if x.abs() < 0.05 { 0.3 } else { x });
        check(vec![a.clone()], |t, v| t.tanh(v[0]));
        check(vec![a.clone()], |t, v| t.relu(v[0]));
        check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        check(vec![a.clone()], |t, v| t.abs(v[0]));
        check(vec![a.clone()], |t, v| t.transpose(v[0]));
        check(vec![a.clone()], |t, v| t.scale(v[0], -2.5));
        check(vec![a.clone()], |t, v| t.mean(v[0]));
        check(vec![a.map(|x| x.abs() + 0.1)], |t, v| t.rsqrt(v[0], 1e-6));
        check(vec![a.clone()], |t, v| {
            let s = t.masked_select(v[0], &[0, 4, 4, 8]).unwrap();
            t.mul(s, s).unwrap()
        });
    }

    #[test]
    fn shift_frames_replicates_edges_and_backpropagates() {
        let mut tape = Tape::<f64>::new();
        // three frames of two nodes, one feature
        let x = tape.leaf(Tensor::column(vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let prev = tape.shift_frames(x, 2, -1).unwrap();
        let next = tape.shift_frames(x, 2, 1).unwrap();
        assert_eq!(tape.value(prev).data(), &[0.0, 1.0, 0.0, 1.0, 10.0, 11.0]);
        assert_eq!(tape.value(next).data(), &[10.0, 11.0, 20.0, 21.0, 20.0, 21.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(8, 3, &mut rng);
        check(vec![z.clone()], |t, v| {
            let s = t.shift_frames(v[0], 2, -1).unwrap();
            t.mul(s, s).unwrap()
        });
        check(vec![z], |t, v| {
            let s = t.shift_frames(v[0], 2, 1).unwrap();
            t.mul(s, v[0]).unwrap()
        });
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.matmul(a, a), Err(Error::Shape(_))));
        assert!(tape.masked_select(a, &[6]).is_err());
    }

    #[test]
    fn guarded_primitives_stay_finite() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros(2, 2));
        let r = tape.rsqrt(z, 1e-6);
        let d = tape.div(z, z, 1e-6).unwrap();
        let big = tape.leaf(Tensor::column(vec![1e4, -1e4]));
        let sb = tape.sigmoid(big);
        let loss = tape.sum(sb);
        tape.backward(loss).unwrap();
        assert!(tape.value(r).is_finite());
        assert!(tape.value(d).is_finite());
        assert_eq!(tape.value(sb).data(), &[1.0, 0.0]);
        assert!(tape.grad(big).unwrap().is_finite());
    }
}
