//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s together with
//! a closure computing the vector-Jacobian product. [`Graph::backward`]
//! replays the tape in reverse. Named parameters are registered once per
//! graph, so a weight used at several sites accumulates its gradient.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, AttentionAxis, ConvSpec, Interpolation};
use crate::tensor::{Dims, Float, Tensor};

/// Vector-Jacobian product: `(parent values, output value, output grad)` to
/// one optional gradient per parent.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    record: bool,
    check_finite: bool,
    macs: Cell<u64>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A graph for inference only; [`Graph::backward`] will fail.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record,
            check_finite: cfg!(debug_assertions),
            macs: Cell::new(0),
        }
    }

    /// Enables or disables the non-finite output check (on by default in
    /// debug builds).
    pub fn check_finite(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Multiply-adds executed by convolutions and matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Input that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// Leaf whose gradient is tracked when recording.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = self.record;
        self.push_node(value, Vec::new(), None, rg)
    }

    /// Registers a named parameter once; later calls with the same name
    /// return the same variable.
    pub fn param(&self, name: &str, value: &Tensor<T>, trainable: bool) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { graph: self, id };
        }
        let rg = self.record && trainable;
        let v = self.push_node(value.clone(), Vec::new(), None, rg);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Names of all parameters registered so far, sorted.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    /// Records an operation whose forward value was computed by the caller.
    /// This is the extension point for primitives defined outside the crate.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, T>],
        value: Tensor<T>,
        op: &'static str,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'g, T>> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.record && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        Ok(self.push_node(value, parents, bw, rg))
    }

    /// Reverse pass from `output`, seeded with `seed` (ones when `None`).
    pub fn backward(&self, output: Var<'_, T>, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !self.record || !nodes[output.id].requires_grad {
            return Err(Error::NoRecordedForward);
        }
        let out_dims = nodes[output.id].value.dims();
        let seed = seed.unwrap_or_else(|| Tensor::full(out_dims, T::one()));
        if seed.dims() != out_dims {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.dims(), out_dims),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let pgrads = bw(&parent_vals, &node.value, &g);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign_tensor(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse pass.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    /// Gradients of every registered parameter that received one.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &id)| self.grads[id].take().map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Sums `grad` (shaped like the broadcast result) down to `target` dims.
fn reduce_to<T: Float>(grad: &Tensor<T>, target: Dims) -> Tensor<T> {
    if grad.dims() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    let gd = grad.dims();
    for n in 0..gd[0] {
        for c in 0..gd[1] {
            for y in 0..gd[2] {
                for x in 0..gd[3] {
                    let idx = [n, c, y, x];
                    let t: Vec<usize> = (0..4).map(|a| if target[a] == 1 { 0 } else { idx[a] }).collect();
                    let o = out.offset(t[0], t[1], t[2], t[3]);
                    out.data_mut()[o] += grad.at(n, c, y, x);
                }
            }
        }
    }
    out
}

fn broadcast_zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad == bd {
        return a.zip_map(b, f);
    }
    if (0..4).any(|i| bd[i] != ad[i] && bd[i] != 1) {
        return Err(Error::shape(op, format!("cannot broadcast {bd:?} onto {ad:?}")));
    }
    Ok(Tensor::from_fn(ad, |n, c, y, x| {
        let bv = b.at(
            if bd[0] == 1 { 0 } else { n },
            if bd[1] == 1 { 0 } else { c },
            if bd[2] == 1 { 0 } else { y },
            if bd[3] == 1 { 0 } else { x },
        );
        f(a.at(n, c, y, x), bv)
    }))
}

fn broadcast_to<T: Float>(b: &Tensor<T>, dims: Dims) -> Tensor<T> {
    let bd = b.dims();
    if bd == dims {
        return b.clone();
    }
    Tensor::from_fn(dims, |n, c, y, x| {
        b.at(
            if bd[0] == 1 { 0 } else { n },
            if bd[1] == 1 { 0 } else { c },
            if bd[2] == 1 { 0 } else { y },
            if bd[3] == 1 { 0 } else { x },
        )
    })
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn dims(&self) -> Dims {
        self.graph.nodes.borrow()[self.id].value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        op: &'static str,
        value: Tensor<T>,
        bw: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Self> {
        self.graph
            .custom(&[self], value, op, move |p, y, g| vec![Some(bw(p[0], y, g))])
    }

    // -- elementwise -------------------------------------------------------

    /// `self + other`, with `other` broadcast over unit axes.
    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        let v = broadcast_zip(&self.value(), &other.value(), "add", |a, b| a + b)?;
        let bd = other.dims();
        self.graph.custom(&[self, other], v, "add", move |_, _, g| {
            vec![Some(g.clone()), Some(reduce_to(g, bd))]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        let v = broadcast_zip(&self.value(), &other.value(), "sub", |a, b| a - b)?;
        let bd = other.dims();
        self.graph.custom(&[self, other], v, "sub", move |_, _, g| {
            vec![Some(g.clone()), Some(reduce_to(&g.map(|v| -v), bd))]
        })
    }

    /// Elementwise product, with `other` broadcast over unit axes.
    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        let v = broadcast_zip(&self.value(), &other.value(), "mul", |a, b| a * b)?;
        let bd = other.dims();
        self.graph.custom(&[self, other], v, "mul", move |p, _, g| {
            let ga = broadcast_zip(g, p[1], "mul", |g, b| g * b).expect("shape");
            let gb = g.zip_map(p[0], |g, a| g * a).expect("shape");
            vec![Some(ga), Some(reduce_to(&gb, bd))]
        })
    }

    pub fn scale(self, k: f64) -> Result<Self> {
        let k = T::of(k);
        let v = self.value().map(|x| x * k);
        self.unary("scale", v, move |_, _, g| g.map(|v| v * k))
    }

    pub fn sigmoid(self) -> Result<Self> {
        let v = ops::sigmoid(&self.value());
        self.unary("sigmoid", v, |_, y, g| {
            y.zip_map(g, |s, g| g * s * (T::one() - s)).expect("shape")
        })
    }

    pub fn relu(self) -> Result<Self> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary("relu", v, |x, _, g| {
            x.zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() })
                .expect("shape")
        })
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(self) -> Result<Self> {
        let v = self.value().map(|x| x.sqrt());
        self.unary("sqrt", v, |_, y, g| {
            y.zip_map(g, |s, g| {
                if s > T::zero() {
                    g / (T::of(2.0) * s)
                } else {
                    T::zero()
                }
            })
            .expect("shape")
        })
    }

    pub fn square(self) -> Result<Self> {
        let v = self.value().map(|x| x * x);
        self.unary("square", v, |x, _, g| {
            x.zip_map(g, |x, g| T::of(2.0) * x * g).expect("shape")
        })
    }

    /// Absolute value; the derivative at zero is taken as zero.
    pub fn abs(self) -> Result<Self> {
        let v = self.value().map(|x| x.abs());
        self.unary("abs", v, |x, _, g| {
            x.zip_map(g, |x, g| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .expect("shape")
        })
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(self) -> Result<Self> {
        let dims = self.dims();
        let v = Tensor::scalar(self.value().sum());
        self.unary("sum", v, move |_, _, g| Tensor::full(dims, g.data()[0]))
    }

    pub fn mean(self) -> Result<Self> {
        let dims = self.dims();
        let count = T::of(dims.iter().product::<usize>() as f64);
        let v = Tensor::scalar(self.value().sum() / count);
        self.unary("mean", v, move |_, _, g| Tensor::full(dims, g.data()[0] / count))
    }

    /// Mean over the spatial axes: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn spatial_mean(self) -> Result<Self> {
        let x = self.value();
        let [n, c, h, w] = x.dims();
        let hw = T::of((h * w) as f64);
        let v = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
            x.plane(b, ch).iter().copied().sum::<T>() / hw
        });
        self.unary("spatial_mean", v, move |_, _, g| {
            Tensor::from_fn([n, c, h, w], |b, ch, _, _| g.at(b, ch, 0, 0) / hw)
        })
    }

    // -- convolution and pooling ------------------------------------------

    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: ConvSpec) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let y = ops::conv2d(&x, &w, b.as_deref(), spec)?;
        self.graph.add_macs(ops::conv2d_macs(y.dims(), w.dims()));
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph.custom(&inputs, y, "conv2d", move |p, _, g| {
            let (gx, gw, gb) = ops::conv2d_backward(p[0], p[1], g, spec);
            let mut out = vec![Some(gx), Some(gw)];
            if p.len() == 3 {
                out.push(Some(gb.reshape(p[2].dims()).expect("bias dims")));
            }
            out
        })
    }

    pub fn avg_pool(self, k: usize, stride: usize) -> Result<Self> {
        let dims = self.dims();
        let v = ops::avg_pool(&self.value(), k, stride)?;
        self.unary("avg_pool", v, move |_, _, g| ops::avg_pool_backward(dims, g, k, stride))
    }

    pub fn max_pool(self, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let dims = self.dims();
        let (v, arg) = ops::max_pool(&self.value(), k, stride, pad)?;
        self.unary("max_pool", v, move |_, _, g| ops::max_pool_backward(dims, g, &arg))
    }

    pub fn resize(self, out_h: usize, out_w: usize, mode: Interpolation) -> Result<Self> {
        let x = self.value();
        let dims = x.dims();
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", "zero output size"));
        }
        if (out_h, out_w) == (dims[2], dims[3]) {
            return self.unary("resize", (*x).clone(), |_, _, g| g.clone());
        }
        let wy = mode.weights(dims[2], out_h);
        let wx = mode.weights(dims[3], out_w);
        let v = ops::resize_with(&x, &wy, &wx);
        self.unary("resize", v, move |_, _, g| ops::resize_backward(dims, g, &wy, &wx))
    }

    // -- rearrangement -----------------------------------------------------

    pub fn pixel_shuffle(self, r: usize) -> Result<Self> {
        let v = ops::pixel_shuffle(&self.value(), r)?;
        self.unary("pixel_shuffle", v, move |_, _, g| {
            ops::pixel_unshuffle(g, r).expect("inverse shape")
        })
    }

    pub fn pixel_unshuffle(self, r: usize) -> Result<Self> {
        let v = ops::pixel_unshuffle(&self.value(), r)?;
        self.unary("pixel_unshuffle", v, move |_, _, g| {
            ops::pixel_shuffle(g, r).expect("inverse shape")
        })
    }

    pub fn concat(parts: &[Var<'g, T>]) -> Result<Self> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let v = ops::concat_channels(&refs)?;
        let sizes: Vec<usize> = vals.iter().map(|v| v.c()).collect();
        first.graph.custom(parts, v, "concat_channels", move |_, _, g| {
            ops::split_channels(g, &sizes)
                .expect("split sizes")
                .into_iter()
                .map(Some)
                .collect()
        })
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Self> {
        let dims = self.dims();
        let v = ops::slice_channels(&self.value(), start, len)?;
        self.unary("slice_channels", v, move |_, _, g| {
            let [n, c, h, w] = dims;
            let mut out = Tensor::zeros(dims);
            for b in 0..n {
                out.data_mut()[(b * c + start) * h * w..][..len * h * w]
                    .copy_from_slice(&g.data()[b * len * h * w..][..len * h * w]);
            }
            out
        })
    }

    pub fn split(self, parts: &[usize]) -> Result<Vec<Self>> {
        if parts.iter().sum::<usize>() != self.dims()[1] {
            return Err(Error::shape(
                "split_channels",
                format!("parts {parts:?} do not sum to {} channels", self.dims()[1]),
            ));
        }
        let mut start = 0;
        parts
            .iter()
            .map(|&len| {
                let v = self.slice_channels(start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn transpose2d(self) -> Result<Self> {
        let v = ops::transpose2d(&self.value());
        self.unary("transpose2d", v, |_, _, g| ops::transpose2d(g))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        let v = ops::matmul(&self.value(), &other.value())?;
        let [n, c, m, k] = self.dims();
        self.graph.add_macs((n * c * m * k * other.dims()[3]) as u64);
        self.graph.custom(&[self, other], v, "matmul", |p, _, g| {
            let ga = ops::matmul(g, &ops::transpose2d(p[1])).expect("shape");
            let gb = ops::matmul(&ops::transpose2d(p[0]), g).expect("shape");
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn softmax_lastdim(self) -> Result<Self> {
        let v = ops::softmax_lastdim(&self.value());
        self.unary("softmax", v, |_, y, g| ops::softmax_lastdim_backward(y, g))
    }

    // -- composite primitives used by the network --------------------------

    /// Channel-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Self> {
        let (y, stats) = ops::layer_norm(&self.value(), &gamma.value(), &beta.value(), eps)?;
        self.graph
            .custom(&[self, gamma, beta], y, "layer_norm", move |p, _, g| {
                let (gx, gg, gb) = ops::layer_norm_backward(p[1], &stats, g);
                vec![
                    Some(gx),
                    Some(gg.reshape(p[1].dims()).expect("dims")),
                    Some(gb.reshape(p[2].dims()).expect("dims")),
                ]
            })
    }

    pub fn shift_channels(self, kept: usize) -> Result<Self> {
        let v = ops::shift_channels(&self.value(), kept)?;
        self.unary("shift_channels", v, move |_, _, g| {
            ops::shift_channels_backward(g, kept)
        })
    }

    /// Scaled dot-product attention within windows (see
    /// [`ops::window_attention`]).
    pub fn window_attention(
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        window: Option<usize>,
        axis: AttentionAxis,
    ) -> Result<Self> {
        let out = ops::window_attention(&q.value(), &k.value(), &v.value(), window, axis)?;
        q.graph
            .add_macs(ops::window_attention_macs(q.dims(), window, axis));
        q.graph
            .custom(&[q, k, v], out, "window_attention", move |p, _, g| {
                let (gq, gk, gv) = ops::window_attention_backward(p[0], p[1], p[2], g, window, axis);
                vec![Some(gq), Some(gk), Some(gv)]
            })
    }

    /// Broadcasts a `(n, c, 1, 1)` or similar tensor up to `dims`.
    pub fn expand(self, dims: Dims) -> Result<Self> {
        let src = self.dims();
        if (0..4).any(|i| src[i] != dims[i] && src[i] != 1) {
            return Err(Error::shape("expand", format!("{src:?} -> {dims:?}")));
        }
        let v = broadcast_to(&self.value(), dims);
        self.unary("expand", v, move |_, _, g| reduce_to(g, src))
    }
}
