//! A small reverse-mode tape.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the tape once in reverse. Nodes whose inputs never require a
//! gradient are skipped.

use crate::kernel;
use crate::render::RenderParams;
use crate::tensor::{Float, Tensor};

use super::conv::{conv2d_backward, conv2d_forward};
use super::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u8> },
    Resize(Var),
    Concat(Vec<Var>),
    GlobalPoolReplicate(Var),
    SliceChannels { x: Var, start: usize },
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    BasisFilter {
        image: Tensor<T>,
        basis: Var,
        coeffs: Var,
        d: usize,
        use_b: bool,
    },
    PixelKernelFilter {
        x_nf: Tensor<T>,
        x_f: Tensor<T>,
        kernels: Var,
        size: usize,
    },
    Render { x: Var, params: Vec<RenderParams> },
    RenderedLoss { pred: Var, target: Tensor<T>, eta: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b, pad }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = ops::max_pool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Bilinear resize to `height x width` (half-pixel centres).
    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Var {
        let out = ops::resize_forward(self.value(x), height, width);
        let rg = self.rg(x);
        self.push(out, Op::Resize(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    /// Global average pooling, replicated to `height x width`.
    pub fn global_pool_replicate(&mut self, x: Var, height: usize, width: usize) -> Var {
        let out = ops::global_pool_replicate(self.value(x), height, width);
        let rg = self.rg(x);
        self.push(out, Op::GlobalPoolReplicate(x), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Var {
        let out = self.value(x).channel_slice(start, count);
        let rg = self.rg(x);
        self.push(out, Op::SliceChannels { x, start }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Product with a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c.as_f64()), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = kernel::apply_scale_map(self.value(a), self.value(b))
            .expect("elementwise product of equal shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Two-scale basis filtering of a constant image (see [`kernel`]).
    pub fn basis_filter(&mut self, image: Tensor<T>, basis: Var, coeffs: Var, d: usize, use_b: bool) -> Var {
        let out = kernel::basis_filter_forward(&image, self.value(basis), self.value(coeffs), d, use_b);
        let rg = self.rg(basis) || self.rg(coeffs);
        self.push(
            out,
            Op::BasisFilter {
                image,
                basis,
                coeffs,
                d,
                use_b,
            },
            rg,
        )
    }

    pub fn pixel_kernel_filter(&mut self, x_nf: Tensor<T>, x_f: Tensor<T>, kernels: Var, size: usize) -> Var {
        let out = kernel::pixel_kernel_forward(&x_nf, &x_f, self.value(kernels), size);
        let rg = self.rg(kernels);
        self.push(
            out,
            Op::PixelKernelFilter {
                x_nf,
                x_f,
                kernels,
                size,
            },
            rg,
        )
    }

    /// Display rendering with one parameter set per batch item.
    pub fn render(&mut self, x: Var, params: Vec<RenderParams>) -> Var {
        assert_eq!(params.len(), self.value(x).batch());
        let out = ops::render_forward(self.value(x), &params);
        let rg = self.rg(x);
        self.push(out, Op::Render { x, params }, rg)
    }

    /// `mean((p - t)^2) + eta (mean|dx (p - t)| + mean|dy (p - t)|)`.
    pub fn rendered_loss(&mut self, pred: Var, target: Tensor<T>, eta: f64) -> Var {
        let loss = ops::rendered_loss(self.value(pred), &target, eta);
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::RenderedLoss { pred, target, eta }, rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(e) => e.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, pad } => {
                    let need_x = self.rg(*x);
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), *pad, &g, need_x);
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    acc(*b, gb);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    acc(*x, gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    acc(*x, ops::max_pool2_backward(self.value(*x).shape(), argmax, &g));
                }
                Op::Resize(x) => {
                    acc(*x, ops::resize_backward(self.value(*x).shape(), &g));
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &v in xs {
                        let c = self.value(v).channels();
                        acc(v, g.channel_slice(start, c));
                        start += c;
                    }
                }
                Op::GlobalPoolReplicate(x) => {
                    acc(*x, ops::global_pool_replicate_backward(self.value(*x).shape(), &g));
                }
                Op::SliceChannels { x, start } => {
                    let shape = self.value(*x).shape();
                    let mut gx = Tensor::zeros(shape);
                    let p = shape[2] * shape[3];
                    let count = g.channels();
                    for b in 0..shape[0] {
                        gx.item_mut(b)[start * p..(start + count) * p].copy_from_slice(g.item(b));
                    }
                    acc(*x, gx);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Scale(x, c) => {
                    let c = T::of(*c);
                    acc(*x, g.map(|v| v * c));
                }
                Op::Mul(a, b) => {
                    let ga = kernel::apply_scale_map(&g, self.value(*b)).expect("shape");
                    let gb = kernel::apply_scale_map(&g, self.value(*a)).expect("shape");
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::BasisFilter {
                    image,
                    basis,
                    coeffs,
                    d,
                    use_b,
                } => {
                    let (gh, gc) = kernel::basis_filter_backward(
                        image,
                        self.value(*basis),
                        self.value(*coeffs),
                        *d,
                        *use_b,
                        &g,
                    );
                    acc(*basis, gh);
                    acc(*coeffs, gc);
                }
                Op::PixelKernelFilter {
                    x_nf,
                    x_f,
                    kernels,
                    size,
                } => {
                    acc(*kernels, kernel::pixel_kernel_backward(x_nf, x_f, *size, &g));
                }
                Op::Render { x, params } => {
                    acc(*x, ops::render_backward(self.value(*x), params, &g));
                }
                Op::RenderedLoss { pred, target, eta } => {
                    let scale = g.data()[0];
                    let mut gp = ops::rendered_loss_backward(self.value(*pred), target, *eta);
                    if scale != T::one() {
                        gp = gp.map(|v| v * scale);
                    }
                    acc(*pred, gp);
                }
            }
        }
        Gradients { grads }
    }
}
