//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output tensor and the indices
//! of its inputs; `backward` walks the record once in reverse, so the cost of
//! a full gradient is a constant multiple of the forward cost. `Value` is a
//! copyable handle into the tape.
//!
//! Domain guards: `log` clamps its argument to the smallest positive normal
//! and `exp` caps its argument, so node values stay finite; the derivative is
//! zero on the clamped branch. Division leaves the denominator untouched,
//! callers keep it away from zero.

use std::cell::RefCell;

use super::kernels;
use super::tensor::{strides_of, Scalar, Tensor};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    AvgPool {
        x: usize,
        factor: usize,
    },
    GlobalAvgPool(usize),
    NearestUpsample {
        x: usize,
        factor: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    MatmulTn(usize, usize),
    ConcatChannels(usize, usize),
    Reshape(usize),
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanAxes {
        x: usize,
        axes: Vec<usize>,
    },
    ReduceSum(usize),
    ReduceMean(usize),
    LogMeanExp(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    BoxSum {
        x: usize,
        window: usize,
    },
    Warp {
        img: usize,
        field: usize,
    },
    FfdInterp {
        control: usize,
        out_sp: Vec<usize>,
        spacing_vox: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Value<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Adjoints produced by one backward sweep, indexed by `Value`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`, `None` when the output did not depend on it.
    pub fn get(&self, v: Value<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zeros when the output did not depend on it.
    pub fn get_or_zeros(&self, v: Value<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Record an input (leaf) tensor.
    pub fn input(&self, t: Tensor<T>) -> Value<'_, T> {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&self, v: T) -> Value<'_, T> {
        self.input(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Value<'_, T> {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by a tape primitive"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a one-element output. Seeds the output adjoint with
    /// one and accumulates into every reachable node.
    pub fn backward(&self, output: Value<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a one-element output, got shape {:?}",
            nodes[output.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(
            nodes[output.id].value.shape(),
            T::one(),
        ));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to_shape(&g, nodes[*a].value.shape()));
                    accumulate(&mut grads, *b, reduce_to_shape(&g, nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to_shape(&g, nodes[*a].value.shape()));
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *b, reduce_to_shape(&neg, nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = broadcast_binary(&g, bv, |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to_shape(&ga, av.shape()));
                    let gb = broadcast_binary(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *b, reduce_to_shape(&gb, bv.shape()));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = broadcast_binary(&g, bv, |x, y| x / y);
                    accumulate(&mut grads, *a, reduce_to_shape(&ga, av.shape()));
                    // d(a/b)/db = -a / b^2
                    let ratio = broadcast_binary(av, bv, |x, y| -x / (y * y));
                    let gb = broadcast_binary(&g, &ratio, |x, y| x * y);
                    accumulate(&mut grads, *b, reduce_to_shape(&gb, bv.shape()));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let xv = &nodes[*a].value;
                    let cap = T::from_f64(T::EXP_CLAMP);
                    let out = &node.value;
                    let ga = Tensor::from_fn(xv.shape(), |i| {
                        if xv.data()[i] < cap {
                            g.data()[i] * out.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let xv = &nodes[*a].value;
                    let floor = T::from_f64(T::LOG_FLOOR);
                    let ga = Tensor::from_fn(xv.shape(), |i| {
                        let x = xv.data()[i];
                        if x > floor {
                            g.data()[i] / x
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let xv = &nodes[*a].value;
                    let out = &node.value;
                    let half = T::from_f64(0.5);
                    let ga = Tensor::from_fn(xv.shape(), |i| {
                        if xv.data()[i] > T::zero() {
                            g.data()[i] * half / out.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    let ga = Tensor::from_fn(out.shape(), |i| {
                        let s = out.data()[i];
                        g.data()[i] * s * (T::one() - s)
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let xv = &nodes[*a].value;
                    let ga = Tensor::from_fn(xv.shape(), |i| {
                        if xv.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let xv = &nodes[*a].value;
                    let ga = Tensor::from_fn(xv.shape(), |i| {
                        if xv.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            g.data()[i] * slope
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv { x, w, b, stride } => {
                    let (gx, gw, gb) = kernels::conv_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &nodes[*b].value,
                        *stride,
                        &g,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AvgPool { x, factor } => {
                    let gx = kernels::avg_pool_backward(nodes[*x].value.shape(), *factor, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let vox: usize = xs[2..].iter().product();
                    let inv = T::from_f64(1.0 / vox as f64);
                    let mut gx = Tensor::zeros(&xs);
                    for p in 0..n * c {
                        let gv = g.data()[p] * inv;
                        for v in gx.data_mut()[p * vox..][..vox].iter_mut() {
                            *v = gv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NearestUpsample { x, factor } => {
                    let gx =
                        kernels::nearest_upsample_backward(nodes[*x].value.shape(), *factor, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let m = xv.shape()[0];
                    let fan_in = xv.shape()[1];
                    let fan_out = wv.shape()[0];
                    let mut gx = Tensor::zeros(xv.shape());
                    kernels::mm_nn(g.data(), m, fan_out, wv.data(), fan_in, gx.data_mut());
                    let mut gw = Tensor::zeros(wv.shape());
                    kernels::mm_tn(g.data(), m, fan_out, xv.data(), fan_in, gw.data_mut());
                    let mut gb = Tensor::zeros(&[fan_out]);
                    for i in 0..m {
                        for o in 0..fan_out {
                            gb.data_mut()[o] = gb.data_mut()[o] + g.data()[i * fan_out + o];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatmulTn(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let k = av.shape()[0];
                    let m = av.shape()[1];
                    let n = bv.shape()[1];
                    let mut ga = Tensor::zeros(av.shape());
                    kernels::mm_nt(bv.data(), k, n, g.data(), m, ga.data_mut());
                    let mut gb = Tensor::zeros(bv.shape());
                    kernels::mm_nn(av.data(), k, m, g.data(), n, gb.data_mut());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatChannels(a, b) => {
                    let asv = nodes[*a].value.shape().to_vec();
                    let bsv = nodes[*b].value.shape().to_vec();
                    let (ga, gb) = split_channels(&g, &asv, &bsv);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let target = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.reshaped(&target));
                }
                Op::SliceAxis {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let mut gx = Tensor::zeros(&xs);
                    slice_axis_scatter(&mut gx, &g, *axis, *start, *len);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanAxes { x, axes } => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let count: usize = axes.iter().map(|&a| xs[a]).product();
                    let inv = T::from_f64(1.0 / count as f64);
                    let map = reduced_offset_map(&xs, axes);
                    let mut gx = Tensor::zeros(&xs);
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v = g.data()[map(i)] * inv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ReduceSum(x) => {
                    let xs = nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&xs, g.item()));
                }
                Op::ReduceMean(x) => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let n: usize = xs.iter().product();
                    let gv = g.item() * T::from_f64(1.0 / n as f64);
                    accumulate(&mut grads, *x, Tensor::full(&xs, gv));
                }
                Op::LogMeanExp(x) => {
                    let xv = &nodes[*x].value;
                    let gv = g.item();
                    let m = xv
                        .data()
                        .iter()
                        .copied()
                        .fold(T::neg_infinity(), |acc, v| acc.max(v));
                    let denom: T = xv.data().iter().map(|&v| (v - m).exp()).sum();
                    let ga = xv.map(|v| gv * (v - m).exp() / denom);
                    accumulate(&mut grads, *x, ga);
                }
                Op::Softmax { x, axis } => {
                    let out = &node.value;
                    let ga = softmax_backward(out, &g, *axis);
                    accumulate(&mut grads, *x, ga);
                }
                Op::BoxSum { x, window } => {
                    accumulate(&mut grads, *x, kernels::box_sum(&g, *window));
                }
                Op::Warp { img, field } => {
                    let (gi, gf) =
                        kernels::warp_backward(&nodes[*img].value, &nodes[*field].value, &g);
                    accumulate(&mut grads, *img, gi);
                    accumulate(&mut grads, *field, gf);
                }
                Op::FfdInterp {
                    control,
                    out_sp,
                    spacing_vox,
                } => {
                    let gc = kernels::ffd_interp_backward(
                        nodes[*control].value.shape(),
                        out_sp,
                        spacing_vox,
                        &g,
                    );
                    accumulate(&mut grads, *control, gc);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, contrib: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contrib.shape());
            for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *e = *e + *c;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// Elementwise binary op with numpy-style broadcasting over equal ranks.
fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    assert_eq!(
        a.rank(),
        b.rank(),
        "broadcast requires equal ranks: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let r = a.rank();
    let mut out_shape = Vec::with_capacity(r);
    for ax in 0..r {
        let (da, db) = (a.shape()[ax], b.shape()[ax]);
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        out_shape.push(da.max(db));
    }
    let out_str = strides_of(&out_shape);
    let sa = effective_strides(a.shape(), &out_shape);
    let sb = effective_strides(b.shape(), &out_shape);
    Tensor::from_fn(&out_shape, |flat| {
        let mut rest = flat;
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..r {
            let i = rest / out_str[ax];
            rest %= out_str[ax];
            oa += i * sa[ax];
            ob += i * sb[ax];
        }
        f(a.data()[oa], b.data()[ob])
    })
}

fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(own)
        .map(|((&d, &od), s)| if d == od { s } else { 0 })
        .collect()
}

/// Sum `g` over axes where `target` has extent one (ranks equal).
fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    assert_eq!(g.rank(), target.len());
    let axes: Vec<usize> = (0..target.len())
        .filter(|&a| target[a] == 1 && g.shape()[a] != 1)
        .collect();
    let map = reduced_offset_map(g.shape(), &axes);
    let mut out = Tensor::zeros(target);
    for (i, &v) in g.data().iter().enumerate() {
        let o = map(i);
        out.data_mut()[o] = out.data_mut()[o] + v;
    }
    out
}

/// Mapping from a flat index in `shape` to the flat index in the same shape
/// with `axes` collapsed to one.
fn reduced_offset_map(shape: &[usize], axes: &[usize]) -> impl Fn(usize) -> usize {
    let in_str = strides_of(shape);
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_str = strides_of(&out_shape);
    let keep: Vec<(usize, usize, usize)> = (0..shape.len())
        .filter(|a| !axes.contains(a))
        .map(|a| (in_str[a], shape[a], out_str[a]))
        .collect();
    move |flat: usize| {
        let mut o = 0;
        for &(istr, dim, ostr) in &keep {
            o += (flat / istr % dim) * ostr;
        }
        o
    }
}

fn split_channels<T: Scalar>(
    g: &Tensor<T>,
    a_shape: &[usize],
    b_shape: &[usize],
) -> (Tensor<T>, Tensor<T>) {
    let n = a_shape[0];
    let (ca, cb) = (a_shape[1], b_shape[1]);
    let vox: usize = a_shape[2..].iter().product();
    let mut ga = Tensor::zeros(a_shape);
    let mut gb = Tensor::zeros(b_shape);
    for ni in 0..n {
        let src = ni * (ca + cb) * vox;
        ga.data_mut()[ni * ca * vox..][..ca * vox]
            .copy_from_slice(&g.data()[src..][..ca * vox]);
        gb.data_mut()[ni * cb * vox..][..cb * vox]
            .copy_from_slice(&g.data()[src + ca * vox..][..cb * vox]);
    }
    (ga, gb)
}

fn slice_axis_copy<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let xs = x.shape();
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let dim = xs[axis];
    let mut out_shape = xs.to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        for j in 0..len {
            let src = (o * dim + start + j) * inner;
            let dst = (o * len + j) * inner;
            out.data_mut()[dst..][..inner].copy_from_slice(&x.data()[src..][..inner]);
        }
    }
    out
}

fn slice_axis_scatter<T: Scalar>(
    gx: &mut Tensor<T>,
    g: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) {
    let xs = gx.shape().to_vec();
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let dim = xs[axis];
    for o in 0..outer {
        for j in 0..len {
            let dst = (o * dim + start + j) * inner;
            let src = (o * len + j) * inner;
            let gslice = &g.data()[src..][..inner];
            for (t, &v) in gx.data_mut()[dst..][..inner].iter_mut().zip(gslice) {
                *t = *t + v;
            }
        }
    }
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let xs = x.shape();
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let dim = xs[axis];
    let mut out = Tensor::zeros(xs);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * dim + j) * inner + i;
            let m = (0..dim)
                .map(|j| x.data()[at(j)])
                .fold(T::neg_infinity(), |a, v| a.max(v));
            let mut denom = T::zero();
            for j in 0..dim {
                denom = denom + (x.data()[at(j)] - m).exp();
            }
            for j in 0..dim {
                out.data_mut()[at(j)] = (x.data()[at(j)] - m).exp() / denom;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(out: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let xs = out.shape();
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    let dim = xs[axis];
    let mut gx = Tensor::zeros(xs);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * dim + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..dim {
                dot = dot + g.data()[at(j)] * out.data()[at(j)];
            }
            for j in 0..dim {
                gx.data_mut()[at(j)] = out.data()[at(j)] * (g.data()[at(j)] - dot);
            }
        }
    }
    gx
}

// Arithmetic lives on named methods rather than operator overloads so long
// chains of taped math read uniformly with the non-operator ops (exp, log,
// reduce_mean, ...). The names shadowing the std traits is intentional.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Value<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this value is recorded on, for creating sibling nodes.
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn binary(self, other: Self, make: impl Fn(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Self {
        let nodes = self.tape.nodes.borrow();
        let out = broadcast_binary(&nodes[self.id].value, &nodes[other.id].value, f);
        drop(nodes);
        self.tape.push(out, make(self.id, other.id))
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Self) -> Self {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Self {
        let out = self.value().map(|v| v + s);
        self.tape.push(out, Op::AddScalar(self.id, s))
    }

    pub fn neg(self) -> Self {
        self.scale(-T::one())
    }

    pub fn exp(self) -> Self {
        let cap = T::from_f64(T::EXP_CLAMP);
        let out = self.value().map(|v| v.min(cap).exp());
        self.tape.push(out, Op::Exp(self.id))
    }

    pub fn log(self) -> Self {
        let floor = T::from_f64(T::LOG_FLOOR);
        let out = self.value().map(|v| v.max(floor).ln());
        self.tape.push(out, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Self {
        let out = self.value().map(|v| v.max(T::zero()).sqrt());
        self.tape.push(out, Op::Sqrt(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Self {
        let out = self.value().map(|v| v.max(T::zero()));
        self.tape.push(out, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let out = self
            .value()
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.tape.push(out, Op::LeakyRelu(self.id, slope))
    }

    /// Convolution with zero padding `(k-1)/2`; output extent `ceil(in/stride)`.
    pub fn conv(self, w: Self, b: Self, stride: usize) -> Self {
        let nodes = self.tape.nodes.borrow();
        let out = kernels::conv_forward(
            &nodes[self.id].value,
            &nodes[w.id].value,
            &nodes[b.id].value,
            stride,
        );
        drop(nodes);
        self.tape.push(
            out,
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.id,
                stride,
            },
        )
    }

    pub fn avg_pool(self, factor: usize) -> Self {
        let out = kernels::avg_pool(&self.value(), factor);
        self.tape.push(
            out,
            Op::AvgPool {
                x: self.id,
                factor,
            },
        )
    }

    /// Mean over all spatial axes: `[n, c, spatial...] -> [n, c]`.
    pub fn global_avg_pool(self) -> Self {
        let x = self.value();
        let xs = x.shape();
        let (n, c) = (xs[0], xs[1]);
        let vox: usize = xs[2..].iter().product();
        let inv = T::from_f64(1.0 / vox as f64);
        let out = Tensor::from_fn(&[n, c], |p| {
            let mut acc = T::zero();
            for &v in &x.data()[p * vox..][..vox] {
                acc = acc + v;
            }
            acc * inv
        });
        self.tape.push(out, Op::GlobalAvgPool(self.id))
    }

    pub fn nearest_upsample(self, factor: usize) -> Self {
        let out = kernels::nearest_upsample(&self.value(), factor);
        self.tape.push(
            out,
            Op::NearestUpsample {
                x: self.id,
                factor,
            },
        )
    }

    /// Dense layer: `x [m, in] -> [m, out]` with `w [out, in]`, `b [out]`.
    pub fn linear(self, w: Self, b: Self) -> Self {
        let nodes = self.tape.nodes.borrow();
        let xv = &nodes[self.id].value;
        let wv = &nodes[w.id].value;
        let bv = &nodes[b.id].value;
        let (m, fan_in) = (xv.shape()[0], xv.shape()[1]);
        let fan_out = wv.shape()[0];
        assert_eq!(wv.shape()[1], fan_in, "linear weight mismatch");
        assert_eq!(bv.shape(), &[fan_out], "linear bias mismatch");
        let mut out = Tensor::zeros(&[m, fan_out]);
        for i in 0..m {
            out.data_mut()[i * fan_out..][..fan_out].copy_from_slice(bv.data());
        }
        kernels::mm_nt(xv.data(), m, fan_in, wv.data(), fan_out, out.data_mut());
        drop(nodes);
        self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        )
    }

    /// `self^T * other` for `self [k, m]`, `other [k, n]`.
    pub fn matmul_tn(self, other: Self) -> Self {
        let nodes = self.tape.nodes.borrow();
        let av = &nodes[self.id].value;
        let bv = &nodes[other.id].value;
        let (k, m) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape()[0], k, "matmul_tn contraction mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        kernels::mm_tn(av.data(), k, m, bv.data(), n, out.data_mut());
        drop(nodes);
        self.tape.push(out, Op::MatmulTn(self.id, other.id))
    }

    pub fn concat_channels(self, other: Self) -> Self {
        let nodes = self.tape.nodes.borrow();
        let av = &nodes[self.id].value;
        let bv = &nodes[other.id].value;
        assert_eq!(av.shape()[0], bv.shape()[0], "concat batch mismatch");
        assert_eq!(
            &av.shape()[2..],
            &bv.shape()[2..],
            "concat spatial mismatch"
        );
        let n = av.shape()[0];
        let (ca, cb) = (av.shape()[1], bv.shape()[1]);
        let vox: usize = av.shape()[2..].iter().product();
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let mut out = Tensor::zeros(&shape);
        for ni in 0..n {
            let dst = ni * (ca + cb) * vox;
            out.data_mut()[dst..][..ca * vox]
                .copy_from_slice(&av.data()[ni * ca * vox..][..ca * vox]);
            out.data_mut()[dst + ca * vox..][..cb * vox]
                .copy_from_slice(&bv.data()[ni * cb * vox..][..cb * vox]);
        }
        drop(nodes);
        self.tape
            .push(out, Op::ConcatChannels(self.id, other.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let out = self.value().reshaped(shape);
        self.tape.push(out, Op::Reshape(self.id))
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Self {
        let nodes = self.tape.nodes.borrow();
        let xv = &nodes[self.id].value;
        assert!(axis < xv.rank() && start + len <= xv.shape()[axis]);
        let out = slice_axis_copy(xv, axis, start, len);
        drop(nodes);
        self.tape.push(
            out,
            Op::SliceAxis {
                x: self.id,
                axis,
                start,
                len,
            },
        )
    }

    /// Mean over the given axes, keeping them with extent one.
    pub fn mean_axes(self, axes: &[usize]) -> Self {
        let x = self.value();
        let xs = x.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        let inv = T::from_f64(1.0 / count as f64);
        let mut out_shape = xs.clone();
        for &a in &axes {
            out_shape[a] = 1;
        }
        let map = reduced_offset_map(&xs, &axes);
        let mut out = Tensor::zeros(&out_shape);
        for (i, &v) in x.data().iter().enumerate() {
            let o = map(i);
            out.data_mut()[o] = out.data_mut()[o] + v;
        }
        for v in out.data_mut() {
            *v = *v * inv;
        }
        self.tape.push(out, Op::MeanAxes { x: self.id, axes })
    }

    pub fn reduce_sum(self) -> Self {
        let s: T = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::ReduceSum(self.id))
    }

    pub fn reduce_mean(self) -> Self {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let m = s * T::from_f64(1.0 / x.len() as f64);
        self.tape.push(Tensor::scalar(m), Op::ReduceMean(self.id))
    }

    /// Stabilized `log(mean(exp(x)))` over all elements.
    pub fn log_mean_exp(self) -> Self {
        let x = self.value();
        let m = x
            .data()
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, v| a.max(v));
        let mean: T = x
            .data()
            .iter()
            .map(|&v| (v - m).exp())
            .sum::<T>()
            * T::from_f64(1.0 / x.len() as f64);
        let out = m + mean.ln();
        self.tape
            .push(Tensor::scalar(out), Op::LogMeanExp(self.id))
    }

    pub fn softmax(self, axis: usize) -> Self {
        let out = softmax_forward(&self.value(), axis);
        self.tape.push(out, Op::Softmax { x: self.id, axis })
    }

    /// Per-channel sum over a centered odd window, truncated at edges.
    pub fn box_sum(self, window: usize) -> Self {
        let out = kernels::box_sum(&self.value(), window);
        self.tape.push(
            out,
            Op::BoxSum {
                x: self.id,
                window,
            },
        )
    }

    /// Pull-warp of `self` (image) by `field` in voxel units; differentiable
    /// in both.
    pub fn warp(self, field: Self) -> Self {
        let nodes = self.tape.nodes.borrow();
        let out = kernels::warp_forward(&nodes[self.id].value, &nodes[field.id].value);
        drop(nodes);
        self.tape.push(
            out,
            Op::Warp {
                img: self.id,
                field: field.id,
            },
        )
    }

    /// Evaluate `self` as a cubic B-spline control lattice `[rank, grid...]`
    /// on a voxel grid, producing a dense field `[1, rank, spatial...]`.
    pub fn ffd_interp(self, out_sp: &[usize], spacing_vox: &[f64]) -> Self {
        let out = kernels::ffd_interp_forward(&self.value(), out_sp, spacing_vox);
        self.tape.push(
            out,
            Op::FfdInterp {
                control: self.id,
                out_sp: out_sp.to_vec(),
                spacing_vox: spacing_vox.to_vec(),
            },
        )
    }
}

impl<'t, T: Scalar> std::ops::Add for Value<'t, T> {
    type Output = Value<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Value::add(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Value<'t, T> {
    type Output = Value<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Value::sub(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Value<'t, T> {
    type Output = Value<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Value::mul(self, rhs)
    }
}

impl<'t, T: Scalar> std::ops::Div for Value<'t, T> {
    type Output = Value<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Value::div(self, rhs)
    }
}
