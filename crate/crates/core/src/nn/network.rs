//! Executes a shaped layer graph: forward in train or inference mode and
//! backward into parameter gradients.
//!
//! Block structure:
//! - ConvBlock: `relu(bn(conv(x)))`
//! - ResBlock: `relu(bn(conv(x)) + shortcut(x))`, where the shortcut zero-pads
//!   (or truncates) channels to `C'`
//! - Sum / Concat: the larger input is max-pooled down to the smaller
//!   rows/cols first (see [`ops::resample_plan`]); Sum zero-pads channels
//! - Output: flatten, dense, softmax

use super::ops::{self, BnCache, PoolWindow};
use super::tensor::{Scalar, Tensor4};
use super::{he_init, NnError};
use crate::catalog::{FunctionKind, TensorShape};
use crate::phenotype::{NodeOp, ShapedGraph};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A learnable tensor and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, dims: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, dims.iter().product::<usize>());
        Param {
            name,
            dims,
            value,
            grad: vec![T::zero(); n],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Start every batch-norm scale at zero in ResBlocks so each block
    /// initially passes its shortcut through.
    pub zero_init_residual: bool,
}

#[derive(Debug, Clone)]
struct ConvLayer<T> {
    kernel: usize,
    out_channels: usize,
    residual: bool,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running_mean: Vec<T>,
    running_var: Vec<T>,
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Input,
    Conv(ConvLayer<T>),
    MaxPool,
    AvgPool,
    Sum([Vec<PoolWindow>; 2]),
    Concat([Vec<PoolWindow>; 2]),
    Output { weight: usize, bias: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    id: usize,
    /// Producer positions in `nodes`.
    inputs: Vec<usize>,
    layer: Layer<T>,
    shape: TensorShape,
}

/// Per-step record of a resampling chain: argmax routes and input dims.
type ResampleTrace = Vec<(Vec<usize>, [usize; 4])>;

enum Cache<T> {
    None,
    Conv(BnCache<T>),
    MaxPool(Vec<usize>),
    Binary([ResampleTrace; 2], [usize; 2]),
}

type ForwardStep<T> = (Tensor4<T>, Cache<T>, Option<(ops::BnBatchStats<T>, usize)>);

pub struct Network<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Param<T>>,
    input: TensorShape,
    classes: usize,
    activations: Vec<Option<Tensor4<T>>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Network<T> {
    /// Instantiates layers for a shaped graph with He-initialized weights,
    /// zero biases and shifts, and unit batch-norm scales.
    pub fn build(graph: &ShapedGraph, rng: &mut Rng, options: BuildOptions) -> Self {
        let positions: std::collections::HashMap<usize, usize> =
            graph.nodes().iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut params: Vec<Param<T>> = Vec::new();
        let push = |params: &mut Vec<Param<T>>, name: String, dims: Vec<usize>, value: Vec<T>| {
            params.push(Param::new(name, dims, value));
            params.len() - 1
        };
        let mut nodes = Vec::with_capacity(graph.nodes().len());
        for (i, gnode) in graph.nodes().iter().enumerate() {
            let inputs: Vec<usize> = gnode.inputs.iter().map(|p| positions[p]).collect();
            let in_shape = |slot: usize| graph.shapes[inputs[slot]];
            let shape = graph.shapes[i];
            let layer = match gnode.op {
                NodeOp::Input(_) => Layer::Input,
                NodeOp::Output => {
                    let features = in_shape(0).elements();
                    let k = graph.classes;
                    let weight = push(
                        &mut params,
                        "out.weight".into(),
                        vec![features, k],
                        he_init(&[features, k], rng),
                    );
                    let bias = push(&mut params, "out.bias".into(), vec![k], vec![T::zero(); k]);
                    Layer::Output { weight, bias }
                }
                NodeOp::Function(spec) => match spec.kind {
                    FunctionKind::ConvBlock | FunctionKind::ResBlock => {
                        let (k, cin, cout) = (spec.kernel, in_shape(0).channels, spec.out_channels);
                        let residual = spec.kind == FunctionKind::ResBlock;
                        let id = gnode.id;
                        let dims = vec![k, k, cin, cout];
                        let weight = push(&mut params, format!("n{id}.conv.weight"), dims.clone(), he_init(&dims, rng));
                        let bias = push(&mut params, format!("n{id}.conv.bias"), vec![cout], vec![T::zero(); cout]);
                        let scale = if residual && options.zero_init_residual { T::zero() } else { T::one() };
                        let gamma = push(&mut params, format!("n{id}.bn.gamma"), vec![cout], vec![scale; cout]);
                        let beta = push(&mut params, format!("n{id}.bn.beta"), vec![cout], vec![T::zero(); cout]);
                        Layer::Conv(ConvLayer {
                            kernel: k,
                            out_channels: cout,
                            residual,
                            weight,
                            bias,
                            gamma,
                            beta,
                            running_mean: vec![T::zero(); cout],
                            running_var: vec![T::one(); cout],
                        })
                    }
                    FunctionKind::MaxPool => Layer::MaxPool,
                    FunctionKind::AvgPool => Layer::AvgPool,
                    FunctionKind::Sum | FunctionKind::Concat => {
                        let target = (shape.rows, shape.cols);
                        let plan = |slot: usize| {
                            let s = in_shape(slot);
                            ops::resample_plan((s.rows, s.cols), target)
                        };
                        let plans = [plan(0), plan(1)];
                        if spec.kind == FunctionKind::Sum {
                            Layer::Sum(plans)
                        } else {
                            Layer::Concat(plans)
                        }
                    }
                },
            };
            nodes.push(Node {
                id: gnode.id,
                inputs,
                layer,
                shape,
            });
        }
        let n = nodes.len();
        Network {
            nodes,
            params,
            input: graph.input,
            classes: graph.classes,
            activations: (0..n).map(|_| None).collect(),
            caches: (0..n).map(|_| Cache::None).collect(),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input
    }

    /// Running statistics of every batch-norm layer, in layer order, as
    /// `(node id, mean, var)`.
    pub fn running_stats(&self) -> Vec<(usize, &[T], &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.layer {
                Layer::Conv(c) => Some((n.id, c.running_mean.as_slice(), c.running_var.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn running_stats_mut(&mut self) -> Vec<(usize, &mut Vec<T>, &mut Vec<T>)> {
        self.nodes
            .iter_mut()
            .filter_map(|n| match &mut n.layer {
                Layer::Conv(c) => Some((n.id, &mut c.running_mean, &mut c.running_var)),
                _ => None,
            })
            .collect()
    }

    fn activation(&self, i: usize) -> &Tensor4<T> {
        self.activations[i].as_ref().expect("producer evaluated before consumer")
    }

    fn resample(x: &Tensor4<T>, plan: &[PoolWindow]) -> Result<(Tensor4<T>, ResampleTrace), NnError> {
        let mut cur = x.clone();
        let mut trace = Vec::with_capacity(plan.len());
        for &win in plan {
            let dims = cur.dims();
            let (y, arg) = ops::max_pool(&cur, win)?;
            trace.push((arg, dims));
            cur = y;
        }
        Ok((cur, trace))
    }

    fn resample_backward(mut g: Tensor4<T>, trace: &ResampleTrace) -> Tensor4<T> {
        for (arg, dims) in trace.iter().rev() {
            g = ops::max_pool_backward(arg, &g, *dims);
        }
        g
    }

    /// Runs the network and returns logits as a `B x 1 x 1 x K` tensor.
    /// Train mode uses batch statistics, updates running statistics and
    /// keeps the caches needed by [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NnError> {
        if x.shape() != self.input {
            return Err(NnError::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.input,
                x.shape()
            )));
        }
        let train = mode == Mode::Train;
        for i in 0..self.nodes.len() {
            let (out, cache, stats) = self.forward_node(i, x, train)?;
            if let (Some((stats, count)), Layer::Conv(conv)) = (stats, &mut self.nodes[i].layer) {
                ops::update_running_stats(&stats, count, &mut conv.running_mean, &mut conv.running_var);
            }
            self.activations[i] = Some(out);
            self.caches[i] = cache;
        }
        let logits = self.activations.last().and_then(|a| a.clone()).expect("output evaluated");
        if mode == Mode::Infer {
            self.release();
        }
        Ok(logits)
    }

    fn forward_node(&self, i: usize, x: &Tensor4<T>, train: bool) -> Result<ForwardStep<T>, NnError> {
        let node = &self.nodes[i];
        let params = &self.params;
        let mut stats = None;
        let (out, cache) = match &node.layer {
            Layer::Input => (x.clone(), Cache::None),
            Layer::Conv(conv) => {
                let src = self.activation(node.inputs[0]);
                let z = ops::conv2d(src, &params[conv.weight].value, &params[conv.bias].value, conv.kernel)?;
                let gamma = &params[conv.gamma].value;
                let beta = &params[conv.beta].value;
                let (mut y, cache) = if train {
                    let (y, cache, batch_stats) = ops::batch_norm_train(&z, gamma, beta)?;
                    stats = Some((batch_stats, z.data.len() / z.channels));
                    (y, Cache::Conv(cache))
                } else {
                    let y = ops::batch_norm_infer(&z, gamma, beta, &conv.running_mean, &conv.running_var)?;
                    (y, Cache::None)
                };
                if conv.residual {
                    y.add_assign(&ops::match_channels(src, conv.out_channels));
                }
                ops::relu(&mut y);
                (y, cache)
            }
            Layer::MaxPool => {
                let (y, arg) = ops::max_pool(self.activation(node.inputs[0]), PoolWindow::HALVE)?;
                (y, if train { Cache::MaxPool(arg) } else { Cache::None })
            }
            Layer::AvgPool => (ops::avg_pool(self.activation(node.inputs[0]))?, Cache::None),
            Layer::Sum(plans) | Layer::Concat(plans) => {
                let a = self.activation(node.inputs[0]);
                let b = self.activation(node.inputs[1]);
                let (ra, ta) = Self::resample(a, &plans[0])?;
                let (rb, tb) = Self::resample(b, &plans[1])?;
                let y = if matches!(node.layer, Layer::Sum(_)) {
                    ops::padded_sum(&ra, &rb)?
                } else {
                    ops::channel_concat(&ra, &rb)?
                };
                (y, Cache::Binary([ta, tb], [a.channels, b.channels]))
            }
            Layer::Output { weight, bias } => {
                let src = self.activation(node.inputs[0]);
                (ops::dense(src, &params[*weight].value, &params[*bias].value)?, Cache::None)
            }
        };
        Ok((out, cache, stats))
    }

    fn release(&mut self) {
        self.activations.iter_mut().for_each(|a| *a = None);
        self.caches.iter_mut().for_each(|c| *c = Cache::None);
    }

    /// Back-propagates `dlogits` through the last train-mode forward pass,
    /// overwriting every parameter gradient.
    pub fn backward(&mut self, dlogits: &Tensor4<T>) -> Result<(), NnError> {
        if self.activations.iter().any(Option::is_none) {
            return Err(NnError::ShapeMismatch("backward requires a train-mode forward pass".into()));
        }
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor4<T>>> = (0..n).map(|_| None).collect();
        grads[n - 1] = Some(dlogits.clone());
        for i in (0..n).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Tensor4<T>>>, to: usize, d: Tensor4<T>| match &mut grads[to] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match (&node.layer, &self.caches[i]) {
                (Layer::Input, _) => {}
                (Layer::Conv(conv), Cache::Conv(bn_cache)) => {
                    let src = self.activations[node.inputs[0]].as_ref().expect("evaluated");
                    ops::relu_backward(self.activations[i].as_ref().expect("evaluated"), &mut g);
                    if conv.residual {
                        send(&mut grads, node.inputs[0], ops::match_channels(&g, src.channels));
                    }
                    let (dz, dgamma, dbeta) = ops::batch_norm_backward(bn_cache, &self.params[conv.gamma].value, &g);
                    let cg = ops::conv2d_backward(src, &self.params[conv.weight].value, conv.kernel, &dz)?;
                    self.params[conv.weight].grad = cg.dweight;
                    self.params[conv.bias].grad = cg.dbias;
                    self.params[conv.gamma].grad = dgamma;
                    self.params[conv.beta].grad = dbeta;
                    send(&mut grads, node.inputs[0], cg.dx);
                }
                (Layer::MaxPool, Cache::MaxPool(arg)) => {
                    let dims = self.activations[node.inputs[0]].as_ref().expect("evaluated").dims();
                    send(&mut grads, node.inputs[0], ops::max_pool_backward(arg, &g, dims));
                }
                (Layer::AvgPool, _) => {
                    let dims = self.activations[node.inputs[0]].as_ref().expect("evaluated").dims();
                    send(&mut grads, node.inputs[0], ops::avg_pool_backward(&g, dims));
                }
                (Layer::Sum(_), Cache::Binary(traces, [ca, cb])) => {
                    let (da, db) = ops::padded_sum_backward(&g, *ca, *cb);
                    send(&mut grads, node.inputs[0], Self::resample_backward(da, &traces[0]));
                    send(&mut grads, node.inputs[1], Self::resample_backward(db, &traces[1]));
                }
                (Layer::Concat(_), Cache::Binary(traces, [ca, _])) => {
                    let (da, db) = ops::channel_concat_backward(&g, *ca);
                    send(&mut grads, node.inputs[0], Self::resample_backward(da, &traces[0]));
                    send(&mut grads, node.inputs[1], Self::resample_backward(db, &traces[1]));
                }
                (Layer::Output { weight, bias }, _) => {
                    let src = self.activations[node.inputs[0]].as_ref().expect("evaluated");
                    let (dx, dw, db) = ops::dense_backward(src, &self.params[*weight].value, &g);
                    self.params[*weight].grad = dw;
                    self.params[*bias].grad = db;
                    send(&mut grads, node.inputs[0], dx);
                }
                _ => {
                    return Err(NnError::ShapeMismatch(format!(
                        "node {} has no train-mode cache",
                        node.id
                    )))
                }
            }
        }
        Ok(())
    }

    /// Train-mode forward, loss and backward; returns the mean batch loss.
    pub fn loss_and_grad(&mut self, x: &Tensor4<T>, labels: &[usize]) -> Result<T, NnError> {
        let logits = self.forward(x, Mode::Train)?;
        let (loss, dlogits) = ops::softmax_cross_entropy(&logits.data, self.classes, labels)?;
        if !loss.is_finite() {
            return Err(NnError::TrainingDiverged);
        }
        self.backward(&Tensor4::from_vec(labels.len(), 1, 1, self.classes, dlogits))?;
        Ok(loss)
    }

    /// Train-mode loss without touching gradients.
    pub fn loss(&mut self, x: &Tensor4<T>, labels: &[usize]) -> Result<T, NnError> {
        let logits = self.forward(x, Mode::Train)?;
        Ok(ops::softmax_cross_entropy(&logits.data, self.classes, labels)?.0)
    }

    /// Inference-mode class predictions, processed `batch` samples at a time.
    /// Ties resolve to the lowest class index.
    pub fn predict(&mut self, x: &Tensor4<T>, batch: usize) -> Result<Vec<usize>, NnError> {
        let mut out = Vec::with_capacity(x.batch);
        let idx: Vec<usize> = (0..x.batch).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let logits = self.forward(&x.gather(chunk), Mode::Infer)?;
            for row in logits.data.chunks_exact(self.classes) {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Output shape of each layer in order, for inspection.
    pub fn layer_shapes(&self) -> Vec<(usize, TensorShape)> {
        self.nodes.iter().map(|n| (n.id, n.shape)).collect()
    }
}
