//! Tape of recorded operations and the reverse-mode sweep over it.

use super::conv::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Mul,
    Add,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
        k: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    Downsample2(Var),
    Upsample2(Var),
    Crop {
        input: Var,
        row0: usize,
        col0: usize,
    },
    Pad {
        input: Var,
        row0: usize,
        col0: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: bool,
    needs_grad: bool,
}

/// A single-writer computation graph. Records are appended in evaluation
/// order, so the tape is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: gradients for every node that depends on a parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true, true)
    }

    /// A frozen leaf; never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, param: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, false, needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!(
                "{what}: operand shapes {sa:?} and {sb:?} differ"
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Size-preserving convolution of a `[Cin,H,W]` input with a `[Cout,Cin,k,k]` kernel.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(input).chw()?;
        let (cout, kcin, k) = match self.value(kernel).shape()[..] {
            [co, ci, ky, kx] if ky == kx => (co, ci, ky),
            ref s => return Err(shape_err!("conv kernel must be [Cout,Cin,k,k], got {s:?}")),
        };
        if k % 2 == 0 {
            return Err(invalid!("conv kernel size {k} must be odd"));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(shape_err!(
                "conv bias must be [{cout}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let dims = ConvDims { cin, cout, h, w, k };
        let (out, cols) = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &dims,
        );
        let value = Tensor::new(vec![cout, h, w], out)?;
        let needs = [input, kernel, bias]
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        // Column matrices are only needed when a gradient flows through the kernel.
        let cols = if self.nodes[kernel.0].needs_grad {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push_raw(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
                k,
            },
            false,
            needs,
        ))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, args: &[Var]) -> Result<Var> {
        match (kind, args) {
            (ElementwiseKind::Mul, &[a, b]) => self.mul(a, b),
            (ElementwiseKind::Add, &[a, b]) => self.add(a, b),
            (ElementwiseKind::Relu, &[a]) => Ok(self.relu(a)),
            (ElementwiseKind::Sigmoid, &[a]) => Ok(self.sigmoid(a)),
            _ => Err(invalid!("{kind:?} called with {} operands", args.len())),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine { input: a, scale }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Keeps every second row and column of a `[C,H,W]` tensor, starting at 0.
    /// Output extents are `ceil(H/2)` by `ceil(W/2)`.
    pub fn downsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &src[(ch * h + 2 * y) * w..];
                out.extend((0..ow).map(|x| row[2 * x]));
            }
        }
        let v = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(v, Op::Downsample2(a), &[a]))
    }

    /// Nearest-neighbour 2x upsampling to exactly `h` by `w`, which must
    /// satisfy `ceil(h/2) == H` and `ceil(w/2) == W` for the `[C,H,W]` input.
    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.value(a).chw()?;
        if h.div_ceil(2) != ih || w.div_ceil(2) != iw {
            return Err(shape_err!("cannot upsample {ih}x{iw} to {h}x{w}"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = &src[(ch * ih + y / 2) * iw..];
                out.extend((0..w).map(|x| row[x / 2]));
            }
        }
        let v = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(v, Op::Upsample2(a), &[a]))
    }

    /// Window `[row0, row0+h) x [col0, col0+w)` of every channel.
    pub fn crop(&mut self, a: Var, row0: usize, col0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.value(a).chw()?;
        if h == 0 || w == 0 || row0 + h > ih || col0 + w > iw {
            return Err(shape_err!(
                "crop window {h}x{w} at ({row0},{col0}) outside {ih}x{iw}"
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let start = (ch * ih + row0 + y) * iw + col0;
                out.extend_from_slice(&src[start..start + w]);
            }
        }
        let v = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            v,
            Op::Crop {
                input: a,
                row0,
                col0,
            },
            &[a],
        ))
    }

    /// Embed a `[C,h,w]` tensor into a zero `[C,H,W]` canvas at `(row0, col0)`.
    pub fn pad(&mut self, a: Var, row0: usize, col0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.value(a).chw()?;
        if row0 + ih > h || col0 + iw > w {
            return Err(shape_err!(
                "pad of {ih}x{iw} at ({row0},{col0}) exceeds {h}x{w}"
            ));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..ih {
                let dst = (ch * h + row0 + y) * w + col0;
                out[dst..dst + iw]
                    .copy_from_slice(&src[(ch * ih + y) * iw..(ch * ih + y + 1) * iw]);
            }
        }
        let v = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            v,
            Op::Pad {
                input: a,
                row0,
                col0,
            },
            &[a],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cols,
                    k,
                } => {
                    let (cin, h, w) = self.value(*input).chw()?;
                    let cout = self.value(*bias).len();
                    let dims = ConvDims {
                        cin,
                        cout,
                        h,
                        w,
                        k: *k,
                    };
                    let kdata = self.value(*kernel).data();
                    let want_input = self.nodes[input.0].needs_grad;
                    let cols = (!cols.is_empty()).then_some(cols.as_slice());
                    let (gi, gk, gb) = conv::backward(g.data(), kdata, cols, &dims, want_input);
                    if want_input {
                        self.accumulate(&mut grads, *input, gi);
                    }
                    if cols.is_some() {
                        self.accumulate(&mut grads, *kernel, gk);
                    }
                    self.accumulate(&mut grads, *bias, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.data().to_vec());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.data().iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.data().iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb = g.data().iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.data().iter().zip(vb).map(|(g, y)| g / y).collect();
                    let gb = g
                        .data()
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    let ga = g
                        .data()
                        .iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    let ga = g
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Affine { input, scale } => {
                    let ga = g.data().iter().map(|g| g * scale).collect();
                    self.accumulate(&mut grads, *input, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g.data()[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g.data()[0] / n as f64; n]);
                }
                Op::Downsample2(a) => {
                    let (c, h, w) = self.value(*a).chw()?;
                    let (_, oh, ow) = g.chw()?;
                    let mut ga = vec![0.0; c * h * w];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                ga[(ch * h + 2 * y) * w + 2 * x] = gd[(ch * oh + y) * ow + x];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Upsample2(a) => {
                    let (c, ih, iw) = self.value(*a).chw()?;
                    let (_, h, w) = g.chw()?;
                    let mut ga = vec![0.0; c * ih * iw];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                ga[(ch * ih + y / 2) * iw + x / 2] += gd[(ch * h + y) * w + x];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Crop { input, row0, col0 } => {
                    let (c, ih, iw) = self.value(*input).chw()?;
                    let (_, h, w) = g.chw()?;
                    let mut ga = vec![0.0; c * ih * iw];
                    let gd = g.data();
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * ih + row0 + y) * iw + col0;
                            ga[dst..dst + w]
                                .copy_from_slice(&gd[(ch * h + y) * w..(ch * h + y + 1) * w]);
                        }
                    }
                    self.accumulate(&mut grads, *input, ga);
                }
                Op::Pad { input, row0, col0 } => {
                    let (c, ih, iw) = self.value(*input).chw()?;
                    let (_, h, w) = g.chw()?;
                    let gd = g.data();
                    let mut ga = Vec::with_capacity(c * ih * iw);
                    for ch in 0..c {
                        for y in 0..ih {
                            let src = (ch * h + row0 + y) * w + col0;
                            ga.extend_from_slice(&gd[src..src + iw]);
                        }
                    }
                    self.accumulate(&mut grads, *input, ga);
                }
            }
            // Parameters keep their gradient; intermediates were consumed above.
            if node.param {
                grads[idx] = Some(g);
            }
        }
        // Drop anything that is not a parameter.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.param {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"));
            }
        }
    }
}

/// Logistic function, kept strictly inside (0, 1) even where `exp` saturates.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
