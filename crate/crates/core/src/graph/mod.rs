//! Small CNN graphs: layer table, parameter store, execution, cost
//! accounting and the on-disk container.
//!
//! A graph is a list of layers in topological order. Each layer names its
//! inputs (`"input"` for the model input); the last layer is the output.
//! Residual joins take exactly two inputs, both of which must be conv layers
//! (a main-path conv and a 1x1 shortcut conv).

mod build;
mod channels;
mod cost;
mod exec;
mod io;

pub use build::GraphBuilder;
pub use channels::{ChannelConsumer, ChannelGroup};
pub use cost::{count_costs, CostReport, LayerCost};
pub use exec::{Backprop, ForwardOutput};
pub use io::{load_checkpoint, load_model, save_checkpoint, save_model, sidecar_path, FORMAT_VERSION, MAGIC};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv_output_extent, Padding, Tensor, TensorError};

pub const INPUT: &str = "input";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Structure(String),
    #[error("layer '{layer}': {source}")]
    AtLayer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("model expects input {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed model file at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

fn structure<T>(msg: impl Into<String>) -> Result<T> {
    Err(GraphError::Structure(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        padding: Padding,
        in_channels: usize,
        filters: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    ResidualAdd,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    /// Number of output filters for conv and dense layers.
    pub fn filter_count(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv { filters, .. } => Some(filters),
            LayerKind::Dense { out_features, .. } => Some(out_features),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd => "residual_add",
        }
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv {
                kernel,
                in_channels,
                filters,
                ..
            } => Some(vec![kernel, kernel, in_channels, filters]),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some(vec![in_features, out_features]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Weights and bias of one conv or dense layer. The filter axis is the last
/// axis of `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn filter_count(&self) -> usize {
        self.bias.len()
    }

    /// Flattened weights of filter `j` followed by its bias.
    pub fn filter_vector(&self, j: usize) -> Vec<f64> {
        let mut v = self.weights.filter_column(j);
        v.push(self.bias.data()[j]);
        v
    }

    /// Overwrites filter `j` (weights then bias) with `values`.
    pub fn set_filter(&mut self, j: usize, values: &[f64]) {
        let n = self.filter_count();
        let rows = self.weights.len() / n;
        debug_assert_eq!(values.len(), rows + 1);
        let w = self.weights.data_mut();
        for r in 0..rows {
            w[r * n + j] = values[r];
        }
        self.bias.data_mut()[j] = values[rows];
    }

    pub fn add_to_filter(&mut self, j: usize, delta: &[f64]) {
        let n = self.filter_count();
        let rows = self.weights.len() / n;
        debug_assert_eq!(delta.len(), rows + 1);
        let w = self.weights.data_mut();
        for r in 0..rows {
            w[r * n + j] += delta[r];
        }
        self.bias.data_mut()[j] += delta[rows];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Params>,
    sources: Vec<Vec<Source>>,
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    /// Validates the layer table and parameter store and builds a graph.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Params>,
    ) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.iter().any(|&e| e == 0) {
            return structure(format!("input shape must be (H, W, C) with positive extents, got {input_shape:?}"));
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut sources = Vec::with_capacity(layers.len());
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut consumed = vec![false; layers.len()];
        let mut input_used = false;
        for (i, layer) in layers.iter().enumerate() {
            if layer.name.is_empty() || layer.name == INPUT {
                return structure(format!("layer {i} has reserved or empty name '{}'", layer.name));
            }
            if seen.contains_key(layer.name.as_str()) {
                return structure(format!("duplicate layer name '{}'", layer.name));
            }
            let arity = if layer.kind == LayerKind::ResidualAdd { 2 } else { 1 };
            if layer.inputs.len() != arity {
                return structure(format!(
                    "layer '{}' takes {arity} input(s), got {}",
                    layer.name,
                    layer.inputs.len()
                ));
            }
            let mut srcs = Vec::with_capacity(arity);
            for name in &layer.inputs {
                if name == INPUT {
                    input_used = true;
                    srcs.push(Source::Input);
                } else if let Some(&j) = seen.get(name.as_str()) {
                    consumed[j] = true;
                    srcs.push(Source::Layer(j));
                } else {
                    return structure(format!(
                        "layer '{}' reads '{name}', which is not an earlier layer",
                        layer.name
                    ));
                }
            }
            let in_shapes: Vec<&[usize]> = srcs
                .iter()
                .map(|s| match s {
                    Source::Input => input_shape.as_slice(),
                    Source::Layer(j) => shapes[*j].as_slice(),
                })
                .collect();
            if layer.kind == LayerKind::ResidualAdd {
                for s in &srcs {
                    let ok = matches!(s, Source::Layer(j) if matches!(layers[*j].kind, LayerKind::Conv { .. }));
                    if !ok {
                        return structure(format!(
                            "residual join '{}' must add the outputs of two conv layers",
                            layer.name
                        ));
                    }
                }
            }
            let shape = infer_shape(&layer.name, &layer.kind, &in_shapes)?;
            check_params(layer, params.get(&layer.name))?;
            seen.insert(&layer.name, i);
            sources.push(srcs);
            shapes.push(shape);
        }
        for name in params.keys() {
            match seen.get(name.as_str()) {
                Some(&i) if layers[i].kind.has_params() => {}
                _ => return structure(format!("parameters stored for unknown or parameterless layer '{name}'")),
            }
        }
        if let Some(last) = layers.len().checked_sub(1) {
            if !input_used {
                return structure("no layer reads the model input");
            }
            if let Some(j) = (0..last).find(|&j| !consumed[j]) {
                return structure(format!(
                    "layer '{}' is never consumed; a graph has a single output",
                    layers[j].name
                ));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            sources,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn params(&self) -> &BTreeMap<String, Params> {
        &self.params
    }

    pub fn layer_params(&self, name: &str) -> Option<&Params> {
        self.params.get(name)
    }

    /// Replaces the values of an existing parameter entry; shapes must match.
    pub fn set_params(&mut self, name: &str, params: Params) -> Result<()> {
        let Some(cur) = self.params.get_mut(name) else {
            return structure(format!("no parameters for layer '{name}'"));
        };
        if cur.weights.shape() != params.weights.shape() || cur.bias.shape() != params.bias.shape() {
            return structure(format!("parameter shapes for '{name}' do not match"));
        }
        *cur = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Params> {
        &mut self.params
    }

    /// Output shape of each layer, in layer order.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(self.input_shape.as_slice(), |s| s.as_slice())
    }

    /// Indices of layers that read the output of `layer`.
    pub(crate) fn consumers_of(&self, layer: usize) -> Vec<usize> {
        (layer + 1..self.layers.len())
            .filter(|&c| self.sources[c].contains(&Source::Layer(layer)))
            .collect()
    }

    /// Names of conv and dense layers in layer order.
    pub fn parameter_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind.has_params())
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Same layer table with every weight drawn again from a fan-in scaled
    /// Gaussian and every bias set to zero.
    pub fn reinitialized(&self, rng: &mut crate::rng::Rng) -> Self {
        let mut out = self.clone();
        for layer in &self.layers {
            if let Some(shape) = layer.kind.weight_shape() {
                out.params.insert(layer.name.clone(), init_params(&shape, rng));
            }
        }
        out
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            *p = p.zeros_like();
        }
        out
    }

    /// True when both graphs have the same input shape and layer table.
    pub fn same_architecture(&self, other: &ModelGraph) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }

    /// Rebuilds a graph with new layer specs and parameters, revalidating.
    pub(crate) fn rebuild(&self, layers: Vec<LayerSpec>, params: BTreeMap<String, Params>) -> Result<Self> {
        ModelGraph::new(self.input_shape.clone(), layers, params)
    }

}

/// He-style initialization: weights ~ N(0, 2 / fan_in), bias 0.
pub(crate) fn init_params(weight_shape: &[usize], rng: &mut crate::rng::Rng) -> Params {
    let n = *weight_shape.last().expect("weight rank >= 2");
    let fan_in: usize = weight_shape[..weight_shape.len() - 1].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    Params {
        weights: Tensor::from_fn(weight_shape, |_| std * rng.normal()),
        bias: Tensor::zeros(&[n]),
    }
}

fn check_params(layer: &LayerSpec, params: Option<&Params>) -> Result<()> {
    match (layer.kind.weight_shape(), params) {
        (None, None) => Ok(()),
        (None, Some(_)) => structure(format!("layer '{}' has no parameters", layer.name)),
        (Some(_), None) => structure(format!("missing parameters for layer '{}'", layer.name)),
        (Some(shape), Some(p)) => {
            let n = *shape.last().unwrap();
            if p.weights.shape() != shape.as_slice() || p.bias.shape() != [n] {
                return structure(format!(
                    "layer '{}' expects weights {shape:?} and bias [{n}], got {:?} and {:?}",
                    layer.name,
                    p.weights.shape(),
                    p.bias.shape()
                ));
            }
            Ok(())
        }
    }
}

pub(crate) fn infer_shape(name: &str, kind: &LayerKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let bad = |detail: String| -> Result<Vec<usize>> {
        Err(GraphError::AtLayer {
            layer: name.to_string(),
            source: TensorError::Shape { op: "shape inference", detail },
        })
    };
    let x = inputs[0];
    match *kind {
        LayerKind::Conv {
            kernel,
            stride,
            padding,
            in_channels,
            filters,
        } => {
            if kernel == 0 || stride == 0 || filters == 0 {
                return bad("kernel, stride and filter count must be positive".into());
            }
            let &[h, w, c] = x else {
                return bad(format!("conv needs (H, W, C) input, got {x:?}"));
            };
            if c != in_channels {
                return bad(format!("declared {in_channels} input channels, producer gives {c}"));
            }
            let pad = padding.amount(kernel);
            match (
                conv_output_extent(h, kernel, stride, pad),
                conv_output_extent(w, kernel, stride, pad),
            ) {
                (Some(oh), Some(ow)) => Ok(vec![oh, ow, filters]),
                _ => bad(format!("kernel {kernel} does not fit input {h}x{w}")),
            }
        }
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            if out_features == 0 {
                return bad("dense layer needs at least one output".into());
            }
            if x.len() != 1 || x[0] != in_features {
                return bad(format!("dense expects flat input [{in_features}], got {x:?}"));
            }
            Ok(vec![out_features])
        }
        LayerKind::Relu => Ok(x.to_vec()),
        LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
            let &[h, w, c] = x else {
                return bad(format!("pooling needs (H, W, C) input, got {x:?}"));
            };
            match (
                conv_output_extent(h, window, stride, 0),
                conv_output_extent(w, window, stride, 0),
            ) {
                (Some(oh), Some(ow)) => Ok(vec![oh, ow, c]),
                _ => bad(format!("window {window}/stride {stride} does not fit {h}x{w}")),
            }
        }
        LayerKind::Flatten => Ok(vec![x.iter().product()]),
        LayerKind::ResidualAdd => {
            if inputs[0] != inputs[1] {
                return bad(format!(
                    "residual branches disagree: {:?} vs {:?}",
                    inputs[0], inputs[1]
                ));
            }
            Ok(x.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toy() -> ModelGraph {
        GraphBuilder::new(&[6, 6, 1])
            .conv("c1", 3, 4, 1, Padding::Same)
            .relu("r1")
            .maxpool("p1", 2, 2)
            .flatten("flat")
            .dense("fc", 3)
            .build(&mut Rng::new(0))
            .unwrap()
    }

    #[test]
    fn shapes_are_inferred() {
        let m = toy();
        assert_eq!(m.output_shapes()[0], vec![6, 6, 4]);
        assert_eq!(m.output_shapes()[2], vec![3, 3, 4]);
        assert_eq!(m.output_shape(), &[3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let m = toy();
        let mut layers = m.layers().to_vec();
        layers[1].name = "c1".into();
        let err = ModelGraph::new(vec![6, 6, 1], layers, m.params().clone()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn dangling_layer_rejected() {
        let m = toy();
        let mut layers = m.layers().to_vec();
        layers[2].inputs = vec!["c1".into()];
        let err = ModelGraph::new(vec![6, 6, 1], layers, m.params().clone()).unwrap_err();
        assert!(err.to_string().contains("never consumed"), "{err}");
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let m = toy();
        let mut layers = m.layers().to_vec();
        let mut params = m.params().clone();
        layers[0].kind = LayerKind::Conv {
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
            in_channels: 2,
            filters: 4,
        };
        params.insert("c1".into(), init_params(&[3, 3, 2, 4], &mut Rng::new(0)));
        let err = ModelGraph::new(vec![6, 6, 1], layers, params).unwrap_err();
        assert!(err.to_string().contains("'c1'"), "{err}");
    }

    #[test]
    fn residual_requires_conv_branches() {
        let m = GraphBuilder::new(&[4, 4, 2])
            .conv("c0", 3, 2, 1, Padding::Same)
            .relu("r0")
            .residual_block("b1", 2)
            .flatten("flat")
            .dense("fc", 2)
            .build(&mut Rng::new(1))
            .unwrap();
        let mut layers = m.layers().to_vec();
        let add = m.layer_index("b1_add").unwrap();
        layers[add].inputs[1] = "r0".into();
        assert!(ModelGraph::new(vec![4, 4, 2], layers, m.params().clone()).is_err());
    }

    #[test]
    fn reinitialize_is_seeded() {
        let m = toy();
        let a = m.reinitialized(&mut Rng::new(5));
        let b = m.reinitialized(&mut Rng::new(5));
        assert_eq!(a, b);
        assert!(a.params()["c1"].bias.max_abs() == 0.0);
    }
}
