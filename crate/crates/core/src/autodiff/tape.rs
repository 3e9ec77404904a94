use std::cell::RefCell;
use std::rc::Rc;

use super::conv;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPadding {
    Periodic,
    Zero,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Gelu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Pad {
        input: usize,
        widths: [usize; 4],
        mode: PadMode,
    },
    CircularShift {
        input: usize,
        axis: usize,
        offset: isize,
    },
    ZeroShift {
        input: usize,
        axis: usize,
        offset: isize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        padding: ConvPadding,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    Interleave {
        parts: Vec<usize>,
        s_h: usize,
        s_w: usize,
    },
    Subgrid {
        input: usize,
        s_h: usize,
        s_w: usize,
        i: usize,
        j: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph. Node order is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`]; `None` for frozen leaves.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("gradient shape"))
    }
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; receives a gradient in [`Tape::backward`].
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Frozen leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Vec<f64>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        let shapes = nodes[..=loss.id].iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |s| {
                for n in 0..s.len() {
                    s[n] += g[n] * vb[n];
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for n in 0..s.len() {
                    s[n] += g[n] * va[n];
                }
            });
        }
        Op::Scale(a, alpha) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += alpha * g));
        }
        Op::AddScalar(a) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Square(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |s| {
                for n in 0..s.len() {
                    s[n] += 2.0 * va[n] * g[n];
                }
            });
        }
        Op::Gelu(a) => {
            let va = &nodes[*a].value;
            accumulate(grads, nodes, *a, |s| {
                for n in 0..s.len() {
                    s[n] += gelu_grad(va[n]) * g[n];
                }
            });
        }
        Op::Tanh(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |s| {
                for n in 0..s.len() {
                    s[n] += (1.0 - y[n] * y[n]) * g[n];
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
        }
        Op::Concat(parts) => {
            let inner: usize = node.shape[1..].iter().product();
            let mut start = 0;
            for p in parts {
                let len = nodes[*p].shape[0] * inner;
                accumulate(grads, nodes, *p, |s| {
                    s.iter_mut().zip(&g[start..start + len]).for_each(|(s, g)| *s += g)
                });
                start += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, extent, inner) = strides(&nodes[*input].shape, *axis);
            let len = node.shape[*axis];
            accumulate(grads, nodes, *input, |s| {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut s[(o * extent + start) * inner..(o * extent + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            });
        }
        Op::Pad { input, widths, mode } => {
            let in_shape = &nodes[*input].shape;
            accumulate(grads, nodes, *input, |s| pad_backward(in_shape, *widths, *mode, g, s));
        }
        Op::CircularShift { input, axis, offset } => {
            let (outer, extent, inner) = strides(&node.shape, *axis);
            accumulate(grads, nodes, *input, |s| {
                for o in 0..outer {
                    for e in 0..extent {
                        let src = wrap(e as isize - offset, extent);
                        let (db, sb) = ((o * extent + src) * inner, (o * extent + e) * inner);
                        for n in 0..inner {
                            s[db + n] += g[sb + n];
                        }
                    }
                }
            });
        }
        Op::ZeroShift { input, axis, offset } => {
            let (outer, extent, inner) = strides(&node.shape, *axis);
            accumulate(grads, nodes, *input, |s| {
                for o in 0..outer {
                    for e in 0..extent {
                        let src = e as isize - offset;
                        if src < 0 || src >= extent as isize {
                            continue;
                        }
                        let (db, sb) = ((o * extent + src as usize) * inner, (o * extent + e) * inner);
                        for n in 0..inner {
                            s[db + n] += g[sb + n];
                        }
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            padding,
        } => {
            let (xi, ki) = (&nodes[*input], &nodes[*kernel]);
            let (gx, gk) = conv::conv2d_backward(
                &xi.value,
                &xi.shape,
                &ki.value,
                &ki.shape,
                *padding,
                g,
                xi.needs_grad,
                ki.needs_grad,
            );
            if let Some(gx) = gx {
                accumulate(grads, nodes, *input, |s| s.iter_mut().zip(&gx).for_each(|(s, v)| *s += v));
            }
            if let Some(gk) = gk {
                accumulate(grads, nodes, *kernel, |s| s.iter_mut().zip(&gk).for_each(|(s, v)| *s += v));
            }
        }
        Op::ChannelBias { input, bias } => {
            accumulate(grads, nodes, *input, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            let plane: usize = node.shape[1..].iter().product();
            accumulate(grads, nodes, *bias, |s| {
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                }
            });
        }
        Op::Interleave { parts, s_h, s_w } => {
            let (ch, height, width) = (node.shape[0], node.shape[1], node.shape[2]);
            let (h, w) = (height / s_h, width / s_w);
            for (n, p) in parts.iter().enumerate() {
                let (i, j) = (n / s_w, n % s_w);
                accumulate(grads, nodes, *p, |s| {
                    for c in 0..ch {
                        for r in 0..h {
                            let row = (c * height + r * s_h + i) * width;
                            for col in 0..w {
                                s[(c * h + r) * w + col] += g[row + col * s_w + j];
                            }
                        }
                    }
                });
            }
        }
        Op::Subgrid {
            input,
            s_h,
            s_w,
            i,
            j,
        } => {
            let in_shape = &nodes[*input].shape;
            let (ch, height, width) = (in_shape[0], in_shape[1], in_shape[2]);
            let (h, w) = (height / s_h, width / s_w);
            accumulate(grads, nodes, *input, |s| {
                for c in 0..ch {
                    for r in 0..h {
                        let row = (c * height + r * s_h + i) * width;
                        for col in 0..w {
                            s[row + col * s_w + j] += g[(c * h + r) * w + col];
                        }
                    }
                }
            });
        }
    }
}

fn pad_index(p: isize, n: usize, mode: PadMode) -> Option<usize> {
    if p >= 0 && (p as usize) < n {
        return Some(p as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let q = if p < 0 { -p } else { 2 * (n as isize - 1) - p };
            Some(q as usize)
        }
    }
}

fn pad_geometry(shape: &[usize], widths: [usize; 4]) -> (usize, usize, usize, usize, usize) {
    let nd = shape.len();
    let outer: usize = shape[..nd - 2].iter().product();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let (hp, wp) = (h + widths[0] + widths[1], w + widths[2] + widths[3]);
    (outer, h, w, hp, wp)
}

fn pad_forward(x: &[f64], shape: &[usize], widths: [usize; 4], mode: PadMode) -> Vec<f64> {
    let (outer, h, w, hp, wp) = pad_geometry(shape, widths);
    let mut out = vec![0.0; outer * hp * wp];
    for o in 0..outer {
        for r in 0..hp {
            let Some(sr) = pad_index(r as isize - widths[0] as isize, h, mode) else { continue };
            for c in 0..wp {
                if let Some(sc) = pad_index(c as isize - widths[2] as isize, w, mode) {
                    out[(o * hp + r) * wp + c] = x[(o * h + sr) * w + sc];
                }
            }
        }
    }
    out
}

fn pad_backward(shape: &[usize], widths: [usize; 4], mode: PadMode, g: &[f64], s: &mut [f64]) {
    let (outer, h, w, hp, wp) = pad_geometry(shape, widths);
    for o in 0..outer {
        for r in 0..hp {
            let Some(sr) = pad_index(r as isize - widths[0] as isize, h, mode) else { continue };
            for c in 0..wp {
                if let Some(sc) = pad_index(c as isize - widths[2] as isize, w, mode) {
                    s[(o * h + sr) * w + sc] += g[(o * hp + r) * wp + c];
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        Tensor::new(self.shape(), (*self.tape.value_of(self.id)).clone()).expect("node shape")
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id)[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::Shape {
                left: sa,
                right: sb,
                context,
            });
        }
        let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
        let v = a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect();
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(sa, v, op, needs))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let a = self.tape.value_of(self.id);
        let v = a.iter().map(|x| f(*x)).collect();
        self.tape.push(self.shape(), v, op, self.requires_grad())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, alpha: f64) -> Var<'t> {
        self.unary(|x| alpha * x, Op::Scale(self.id, alpha))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.value_of(self.id).iter().sum();
        self.tape.push(vec![], vec![s], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.tape.value_of(self.id);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.tape.push(vec![], vec![m], Op::Mean(self.id), self.requires_grad())
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let base = first.shape();
        let mut channels = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            if s.len() != base.len() || s[1..] != base[1..] {
                return Err(Error::Shape {
                    left: base,
                    right: s,
                    context: "concat_channels",
                });
            }
            channels += s[0];
            data.extend_from_slice(&tape.value_of(p.id));
            needs |= p.requires_grad();
        }
        let mut shape = base;
        shape[0] = channels;
        Ok(tape.push(shape, data, Op::Concat(parts.iter().map(|p| p.id).collect()), needs))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                left: shape,
                right: vec![axis, start, len],
                context: "slice (axis, start, len)",
            });
        }
        let (outer, extent, inner) = strides(&shape, axis);
        let v = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * extent + start) * inner..(o * extent + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.tape.push(
            new_shape,
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Pads the last two axes by `[top, bottom, left, right]`.
    pub fn pad(self, widths: [usize; 4], mode: PadMode) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::Shape {
                left: shape,
                right: vec![2],
                context: "pad needs at least 2 axes",
            });
        }
        let nd = shape.len();
        if mode == PadMode::Reflect
            && (widths[0].max(widths[1]) >= shape[nd - 2] || widths[2].max(widths[3]) >= shape[nd - 1])
        {
            return Err(Error::Shape {
                left: shape,
                right: widths.to_vec(),
                context: "reflect padding wider than extent",
            });
        }
        let out = pad_forward(&self.tape.value_of(self.id), &shape, widths, mode);
        let mut new_shape = shape;
        new_shape[nd - 2] += widths[0] + widths[1];
        new_shape[nd - 1] += widths[2] + widths[3];
        Ok(self.tape.push(
            new_shape,
            out,
            Op::Pad {
                input: self.id,
                widths,
                mode,
            },
            self.requires_grad(),
        ))
    }

    fn shifted(self, axis: usize, offset: isize, periodic: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                left: shape,
                right: vec![axis],
                context: "shift axis",
            });
        }
        let (outer, extent, inner) = strides(&shape, axis);
        let v = self.tape.value_of(self.id);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for e in 0..extent {
                let src = e as isize - offset;
                let src = if periodic {
                    wrap(src, extent)
                } else if src < 0 || src >= extent as isize {
                    continue;
                } else {
                    src as usize
                };
                let (db, sb) = ((o * extent + e) * inner, (o * extent + src) * inner);
                out[db..db + inner].copy_from_slice(&v[sb..sb + inner]);
            }
        }
        let op = if periodic {
            Op::CircularShift {
                input: self.id,
                axis,
                offset,
            }
        } else {
            Op::ZeroShift {
                input: self.id,
                axis,
                offset,
            }
        };
        Ok(self.tape.push(shape, out, op, self.requires_grad()))
    }

    /// `out[e] = in[(e - offset) mod n]` along `axis`.
    pub fn circular_shift(self, axis: usize, offset: isize) -> Result<Var<'t>> {
        self.shifted(axis, offset, true)
    }

    /// Like [`Var::circular_shift`] but vacated entries are zero.
    pub fn zero_shift(self, axis: usize, offset: isize) -> Result<Var<'t>> {
        self.shifted(axis, offset, false)
    }

    /// "Same" 2-d convolution of a `[C_in, H, W]` input with a `[C_out, C_in, k, k]` kernel.
    pub fn conv2d(self, kernel: Var<'t>, padding: ConvPadding) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(Error::Shape {
                left: xs,
                right: ks,
                context: "conv2d input [C_in,H,W] vs kernel [C_out,C_in,k,k], k odd",
            });
        }
        if padding == ConvPadding::Periodic && (ks[2] / 2 > xs[1] || ks[2] / 2 > xs[2]) {
            return Err(Error::Shape {
                left: xs,
                right: ks,
                context: "periodic conv2d kernel wider than grid",
            });
        }
        let out = conv::conv2d_forward(
            &self.tape.value_of(self.id),
            &xs,
            &self.tape.value_of(kernel.id),
            &ks,
            padding,
        );
        let needs = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(
            vec![ks[0], xs[1], xs[2]],
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                padding,
            },
            needs,
        ))
    }

    /// Adds `bias[c]` to every entry of channel `c`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (xs, bs) = (self.shape(), bias.shape());
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::Shape {
                left: xs,
                right: bs,
                context: "channel bias",
            });
        }
        let plane: usize = xs[1..].iter().product();
        let b = self.tape.value_of(bias.id);
        let v = self.tape.value_of(self.id);
        let out = v.iter().enumerate().map(|(n, x)| x + b[n / plane]).collect();
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            xs,
            out,
            Op::ChannelBias {
                input: self.id,
                bias: bias.id,
            },
            needs,
        ))
    }

    /// Reassembles `s_h * s_w` coarse `[C, h, w]` parts (row-major over `(i, j)`) into one fine tensor.
    pub fn interleave(parts: &[Var<'t>], s_h: usize, s_w: usize) -> Result<Var<'t>> {
        if parts.len() != s_h * s_w || parts.is_empty() {
            return Err(Error::Layout(format!(
                "interleave needs {} parts, got {}",
                s_h * s_w,
                parts.len()
            )));
        }
        let tape = parts[0].tape;
        let base = parts[0].shape();
        if base.len() != 3 {
            return Err(Error::Shape {
                left: base,
                right: vec![3],
                context: "interleave parts must be [C,h,w]",
            });
        }
        let (ch, h, w) = (base[0], base[1], base[2]);
        let (height, width) = (h * s_h, w * s_w);
        let mut out = vec![0.0; ch * height * width];
        let mut needs = false;
        for (n, p) in parts.iter().enumerate() {
            parts[0].same_tape(p);
            let s = p.shape();
            if s != base {
                return Err(Error::Shape {
                    left: base,
                    right: s,
                    context: "interleave parts",
                });
            }
            needs |= p.requires_grad();
            let (i, j) = (n / s_w, n % s_w);
            let v = tape.value_of(p.id);
            for c in 0..ch {
                for r in 0..h {
                    let row = (c * height + r * s_h + i) * width;
                    for col in 0..w {
                        out[row + col * s_w + j] = v[(c * h + r) * w + col];
                    }
                }
            }
        }
        Ok(tape.push(
            vec![ch, height, width],
            out,
            Op::Interleave {
                parts: parts.iter().map(|p| p.id).collect(),
                s_h,
                s_w,
            },
            needs,
        ))
    }

    /// Subgrid `(i, j)` of a `[C, H, W]` tensor.
    pub fn subgrid(self, s_h: usize, s_w: usize, i: usize, j: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || s[1] % s_h != 0 || s[2] % s_w != 0 || i >= s_h || j >= s_w {
            return Err(Error::Shape {
                left: s,
                right: vec![s_h, s_w, i, j],
                context: "subgrid (s_h, s_w, i, j)",
            });
        }
        let (ch, height, width) = (s[0], s[1], s[2]);
        let (h, w) = (height / s_h, width / s_w);
        let v = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(ch * h * w);
        for c in 0..ch {
            for r in 0..h {
                let row = (c * height + r * s_h + i) * width;
                for col in 0..w {
                    out.push(v[row + col * s_w + j]);
                }
            }
        }
        Ok(self.tape.push(
            vec![ch, h, w],
            out,
            Op::Subgrid {
                input: self.id,
                s_h,
                s_w,
                i,
                j,
            },
            self.requires_grad(),
        ))
    }
}
