use std::collections::BTreeMap;

use super::{GraphError, LayerKind, ModelGraph, Params, Result, Source};
use crate::tensor::{self, PoolCache, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Output of every layer keyed by layer name, when recording was requested.
    pub activations: Option<BTreeMap<String, Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: BTreeMap<String, Params>,
}

struct Trace {
    outputs: Vec<Tensor>,
    pools: Vec<Option<PoolCache>>,
}

fn at(layer: &str, e: TensorError) -> GraphError {
    GraphError::AtLayer {
        layer: layer.to_string(),
        source: e,
    }
}

impl ModelGraph {
    fn input_of<'a>(&self, input: &'a Tensor, outputs: &'a [Tensor], src: Source) -> &'a Tensor {
        match src {
            Source::Input => input,
            Source::Layer(j) => &outputs[j],
        }
    }

    fn run(&self, input: &Tensor, keep_pools: bool) -> Result<Trace> {
        if input.shape() != self.input_shape() {
            return Err(GraphError::InputShape {
                expected: self.input_shape().to_vec(),
                got: input.shape().to_vec(),
            });
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut pools = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let srcs = &self.sources[i];
            let x = self.input_of(input, &outputs, srcs[0]);
            let name = layer.name.as_str();
            let mut pool = None;
            let y = match layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => {
                    let p = &self.params[name];
                    tensor::conv2d_forward(x, &p.weights, &p.bias, stride, padding).map_err(|e| at(name, e))?
                }
                LayerKind::Dense { .. } => {
                    let p = &self.params[name];
                    tensor::dense_forward(x, &p.weights, &p.bias).map_err(|e| at(name, e))?
                }
                LayerKind::Relu => tensor::relu_forward(x),
                LayerKind::MaxPool { window, stride } => {
                    let (y, cache) = tensor::maxpool_forward(x, window, stride).map_err(|e| at(name, e))?;
                    if keep_pools {
                        pool = Some(cache);
                    }
                    y
                }
                LayerKind::AvgPool { window, stride } => {
                    tensor::avgpool_forward(x, window, stride).map_err(|e| at(name, e))?
                }
                LayerKind::Flatten => {
                    let n = x.len();
                    x.clone().reshape(&[n]).map_err(|e| at(name, e))?
                }
                LayerKind::ResidualAdd => {
                    let other = self.input_of(input, &outputs, srcs[1]);
                    x.add(other).map_err(|e| at(name, e))?
                }
            };
            outputs.push(y);
            pools.push(pool);
        }
        Ok(Trace { outputs, pools })
    }

    /// Runs the graph on one `(H, W, C)` sample.
    pub fn forward(&self, input: &Tensor, record: bool) -> Result<ForwardOutput> {
        let trace = self.run(input, false)?;
        let activations = record.then(|| {
            self.layers
                .iter()
                .zip(&trace.outputs)
                .map(|(l, t)| (l.name.clone(), t.clone()))
                .collect()
        });
        let logits = trace.outputs.last().cloned().unwrap_or_else(|| input.clone());
        Ok(ForwardOutput { logits, activations })
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.logits)
    }

    /// Softmax cross-entropy of one sample and the gradient of every
    /// parameter. Gradients reaching a node from several consumers are
    /// summed in consumer order.
    pub fn backward(&self, input: &Tensor, label: usize) -> Result<Backprop> {
        let trace = self.run(input, true)?;
        let Some(logits) = trace.outputs.last() else {
            return Err(GraphError::Structure("cannot backpropagate through an empty graph".into()));
        };
        let (loss, grad_logits) = tensor::softmax_cross_entropy(logits, label)?;
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        *node_grads.last_mut().unwrap() = Some(grad_logits);
        let mut grads = BTreeMap::new();

        for i in (0..self.layers.len()).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let layer = &self.layers[i];
            let name = layer.name.as_str();
            let srcs = &self.sources[i];
            let x = self.input_of(input, &trace.outputs, srcs[0]);
            let mut upstream: Vec<(Source, Tensor)> = Vec::with_capacity(2);
            match layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => {
                    let p = &self.params[name];
                    let cg = tensor::conv2d_backward(x, &p.weights, &g, stride, padding).map_err(|e| at(name, e))?;
                    grads.insert(
                        layer.name.clone(),
                        Params {
                            weights: cg.filters,
                            bias: cg.bias,
                        },
                    );
                    upstream.push((srcs[0], cg.input));
                }
                LayerKind::Dense { .. } => {
                    let p = &self.params[name];
                    let dg = tensor::dense_backward(x, &p.weights, &g).map_err(|e| at(name, e))?;
                    grads.insert(
                        layer.name.clone(),
                        Params {
                            weights: dg.weights,
                            bias: dg.bias,
                        },
                    );
                    upstream.push((srcs[0], dg.input));
                }
                LayerKind::Relu => {
                    upstream.push((srcs[0], tensor::relu_backward(x, &g).map_err(|e| at(name, e))?));
                }
                LayerKind::MaxPool { .. } => {
                    let cache = trace.pools[i].as_ref().expect("pool cache recorded");
                    upstream.push((srcs[0], tensor::maxpool_backward(cache, &g).map_err(|e| at(name, e))?));
                }
                LayerKind::AvgPool { window, stride } => {
                    upstream.push((
                        srcs[0],
                        tensor::avgpool_backward(x.shape(), window, stride, &g).map_err(|e| at(name, e))?,
                    ));
                }
                LayerKind::Flatten => {
                    upstream.push((srcs[0], g.reshape(x.shape()).map_err(|e| at(name, e))?));
                }
                LayerKind::ResidualAdd => {
                    upstream.push((srcs[0], g.clone()));
                    upstream.push((srcs[1], g));
                }
            }
            for (src, t) in upstream {
                if let Source::Layer(j) = src {
                    match &mut node_grads[j] {
                        Some(acc) => acc.axpy(1.0, &t)?,
                        slot @ None => *slot = Some(t),
                    }
                }
            }
        }
        Ok(Backprop {
            loss,
            logits: logits.clone(),
            grads,
        })
    }
}
