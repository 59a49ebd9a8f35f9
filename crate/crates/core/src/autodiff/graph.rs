use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    MaxConst(Var, T),
    Scale(Var, T),
    AddConst(Var, T),
    /// Elementwise tensor times a one-element tensor.
    MulScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    PadReplicate {
        input: Var,
        pad: usize,
    },
    Conv2d(Box<ConvNode<T>>),
    Upsample2(Var),
}

#[derive(Debug)]
struct ConvNode<T> {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    /// im2col buffer `[C*k*k, Ho*Wo]` kept for the weight adjoint.
    cols: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_row, col_col, input_offset)` for every im2col entry, with
    /// out-of-range taps clamped to the edge (replicate padding).
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad();
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    for oi in 0..self.ho {
                        let ii = (oi as isize * self.stride as isize + ki as isize - pad)
                            .clamp(0, self.h as isize - 1)
                            as usize;
                        let base = (c * self.h + ii) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj as isize * self.stride as isize + kj as isize - pad)
                                .clamp(0, self.w as isize - 1)
                                as usize;
                            f(r, r * p + oi * self.wo + oj, base + jj);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Operations append nodes; [`Graph::backward`] walks them
/// in reverse. A graph is used from a single thread.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar loss with respect to every reachable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient matches shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank3(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    t.chw()
        .ok_or_else(|| Error::shape(op, format!("expected [C, H, W], got {:?}", t.shape())))
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// First element of a node's value; the loss value for scalar nodes.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect())
                .expect("same length")
        };
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, x, y)?;
            Tensor::from_vec(
                x.shape(),
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| f(p, q))
                    .collect(),
            )
            .expect("same length")
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Elementwise `max(a, c)`.
    pub fn max_const(&self, a: Var, c: T) -> Var {
        self.unary(a, |v| if v > c { v } else { c }, Op::MaxConst(a, c))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        self.unary(a, |v| v + c, Op::AddConst(a, c))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, k) = (&nodes[a.0].value, &nodes[s.0].value);
            if k.numel() != 1 {
                return Err(Error::shape(
                    "mul_scalar",
                    format!("scalar operand has shape {:?}", k.shape()),
                ));
            }
            let k = k.item();
            Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * k).collect())
                .expect("same length")
        };
        let rg = self.needs(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().copied().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64)
        };
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (_, h, w) = rank3("concat_channels", &nodes[parts[0].0].value)?;
            let mut data = Vec::new();
            let mut c_total = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                let (c, ph, pw) = rank3("concat_channels", t)?;
                if (ph, pw) != (h, w) {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("spatial {:?} vs {:?}", (ph, pw), (h, w)),
                    ));
                }
                c_total += c;
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(&[c_total, h, w], data).expect("channel sizes add up")
        };
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = rank3("slice_channels", t)?;
            if len == 0 || start + len > c {
                return Err(Error::shape(
                    "slice_channels",
                    format!("channels {start}..{} of {c}", start + len),
                ));
            }
            let hw = h * w;
            Tensor::from_vec(
                &[len, h, w],
                t.data()[start * hw..(start + len) * hw].to_vec(),
            )
            .expect("slice length")
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Slice { input: a, start }, rg))
    }

    /// Extends each channel by `pad` cells on every side, copying edge values.
    pub fn pad_replicate(&self, a: Var, pad: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = rank3("pad_replicate", t)?;
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let mut data = Vec::with_capacity(c * ph * pw);
            for ch in 0..c {
                for i in 0..ph {
                    let si = (i as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                    for j in 0..pw {
                        let sj = (j as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                        data.push(t.data()[(ch * h + si) * w + sj]);
                    }
                }
            }
            Tensor::from_vec(&[c, ph, pw], data).expect("padded size")
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::PadReplicate { input: a, pad }, rg))
    }

    /// Nearest-neighbour upsampling by two in both spatial axes.
    pub fn upsample2(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = rank3("upsample2", t)?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut data = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for i in 0..oh {
                    let row = &t.data()[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                    for j in 0..ow {
                        data.push(row[j / 2]);
                    }
                }
            }
            Tensor::from_vec(&[c, oh, ow], data).expect("upsampled size")
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Upsample2(a), rg))
    }

    /// 2-D convolution with an odd square kernel, stride 1 or 2, and
    /// replicate padding of `(k - 1) / 2` cells.
    ///
    /// `input` is `[C, H, W]`, `weight` is `[O, C, k, k]`, `bias` is `[O]`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (out, node) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let wt = &nodes[weight.0].value;
            let (c, h, w) = rank3("conv2d", x)?;
            let (o, k) = match wt.shape()[..] {
                [o, wc, k, k2] if wc == c && k == k2 && k % 2 == 1 => (o, k),
                _ => {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input {:?} with weight {:?}", x.shape(), wt.shape()),
                    ))
                }
            };
            if !(stride == 1 || stride == 2) {
                return Err(Error::shape(
                    "conv2d",
                    format!("unsupported stride {stride}"),
                ));
            }
            if let Some(b) = bias {
                let bt = &nodes[b.0].value;
                if bt.shape() != [o] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} for {o} output channels", bt.shape()),
                    ));
                }
            }
            let pad = (k - 1) / 2;
            let geom = ConvGeom {
                c,
                h,
                w,
                k,
                stride,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (w + 2 * pad - k) / stride + 1,
            };
            let (rows, p) = (geom.rows(), geom.cols());
            let mut cols = vec![T::zero(); rows * p];
            let xd = x.data();
            geom.for_each_tap(|_, dst, src| cols[dst] = xd[src]);
            let mut y = vec![T::zero(); o * p];
            if let Some(b) = bias {
                let bt = &nodes[b.0].value;
                for (oc, chunk) in y.chunks_mut(p).enumerate() {
                    chunk.fill(bt.data()[oc]);
                }
            }
            T::gemm(
                o,
                rows,
                p,
                T::one(),
                wt.data(),
                rows as isize,
                1,
                &cols,
                p as isize,
                1,
                T::one(),
                &mut y,
                p as isize,
                1,
            );
            let out = Tensor::from_vec(&[o, geom.ho, geom.wo], y).expect("conv output size");
            (
                out,
                ConvNode {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                },
            )
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(out, Op::Conv2d(Box::new(node)), rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lt = &nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                        if needs(v) {
                            accumulate(&mut grads[v.0], g.len(), |d| {
                                d.iter_mut().zip(&g).for_each(|(d, &g)| *d += sign * g)
                            });
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                        if needs(v) {
                            accumulate(&mut grads[v.0], g.len(), |d| {
                                d.iter_mut().zip(&g).for_each(|(d, &g)| *d += sign * g)
                            });
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.len(), |d| {
                            for k in 0..g.len() {
                                d[k] += g[k] * bv[k];
                            }
                        });
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.len(), |d| {
                            for k in 0..g.len() {
                                d[k] += g[k] * av[k];
                            }
                        });
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d -= g)
                }),
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for k in 0..g.len() {
                            if x[k] > T::zero() {
                                d[k] += g[k];
                            }
                        }
                    });
                }
                Op::MaxConst(a, c) => {
                    let x = nodes[a.0].value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for k in 0..g.len() {
                            if x[k] > *c {
                                d[k] += g[k];
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for k in 0..g.len() {
                            d[k] += g[k] * y[k];
                        }
                    });
                }
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    let two = T::lit(2.0);
                    accumulate(&mut grads[a.0], g.len(), |d| {
                        for k in 0..g.len() {
                            d[k] += two * x[k] * g[k];
                        }
                    });
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += *c * g)
                }),
                Op::AddConst(a, _) => accumulate(&mut grads[a.0], g.len(), |d| {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g)
                }),
                Op::MulScalar(a, s) => {
                    let k = nodes[s.0].value.item();
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(d, &g)| *d += k * g)
                        });
                    }
                    if needs(*s) {
                        let x = nodes[a.0].value.data();
                        let dot: T = x.iter().zip(&g).map(|(&x, &g)| x * g).sum();
                        accumulate(&mut grads[s.0], 1, |d| d[0] += dot);
                    }
                }
                Op::Sum(a) => {
                    let n = len(*a);
                    accumulate(&mut grads[a.0], n, |d| {
                        d.iter_mut().for_each(|d| *d += g[0])
                    });
                }
                Op::Mean(a) => {
                    let n = len(*a);
                    let gi = g[0] / T::lit(n as f64);
                    accumulate(&mut grads[a.0], n, |d| d.iter_mut().for_each(|d| *d += gi));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = len(*p);
                        if needs(*p) {
                            let src = &g[offset..offset + n];
                            accumulate(&mut grads[p.0], n, |d| {
                                d.iter_mut().zip(src).for_each(|(d, &g)| *d += g)
                            });
                        }
                        offset += n;
                    }
                }
                Op::Slice { input, start, .. } => {
                    let (_, h, w) = nodes[input.0].value.chw().expect("rank 3");
                    let off = start * h * w;
                    accumulate(&mut grads[input.0], len(*input), |d| {
                        d[off..off + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, &g)| *d += g)
                    });
                }
                Op::PadReplicate { input, pad } => {
                    let (c, h, w) = nodes[input.0].value.chw().expect("rank 3");
                    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                    accumulate(&mut grads[input.0], len(*input), |d| {
                        for ch in 0..c {
                            for i in 0..ph {
                                let si =
                                    (i as isize - *pad as isize).clamp(0, h as isize - 1) as usize;
                                for j in 0..pw {
                                    let sj = (j as isize - *pad as isize).clamp(0, w as isize - 1)
                                        as usize;
                                    d[(ch * h + si) * w + sj] += g[(ch * ph + i) * pw + j];
                                }
                            }
                        }
                    });
                }
                Op::Upsample2(a) => {
                    let (c, h, w) = nodes[a.0].value.chw().expect("rank 3");
                    let ow = 2 * w;
                    accumulate(&mut grads[a.0], len(*a), |d| {
                        for ch in 0..c {
                            for i in 0..2 * h {
                                for j in 0..ow {
                                    d[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * ow + j];
                                }
                            }
                        }
                    });
                }
                Op::Conv2d(conv) => {
                    let geom = conv.geom;
                    let (rows, p) = (geom.rows(), geom.cols());
                    let o = g.len() / p;
                    if let Some(b) = conv.bias {
                        if needs(b) {
                            accumulate(&mut grads[b.0], o, |d| {
                                for (oc, chunk) in g.chunks(p).enumerate() {
                                    d[oc] += chunk.iter().copied().sum::<T>();
                                }
                            });
                        }
                    }
                    if needs(conv.weight) {
                        let cols = &conv.cols;
                        accumulate(&mut grads[conv.weight.0], o * rows, |d| {
                            T::gemm(
                                o,
                                p,
                                rows,
                                T::one(),
                                &g,
                                p as isize,
                                1,
                                cols,
                                1,
                                p as isize,
                                T::one(),
                                d,
                                rows as isize,
                                1,
                            );
                        });
                    }
                    if needs(conv.input) {
                        let wt = nodes[conv.weight.0].value.data();
                        let mut dcols = vec![T::zero(); rows * p];
                        T::gemm(
                            rows,
                            o,
                            p,
                            T::one(),
                            wt,
                            1,
                            rows as isize,
                            &g,
                            p as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            p as isize,
                            1,
                        );
                        accumulate(&mut grads[conv.input.0], len(conv.input), |d| {
                            geom.for_each_tap(|_, src, dst| d[dst] += dcols[src]);
                        });
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}
