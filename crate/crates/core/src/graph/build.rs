use std::collections::BTreeMap;

use super::{infer_shape, init_params, LayerKind, LayerSpec, ModelGraph, Result, INPUT};
use crate::rng::Rng;
use crate::tensor::Padding;

/// Appends layers to a sequential chain, tracking shapes so channel counts
/// can be filled in automatically.
#[derive(Debug)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    cursor: String,
    shape: Vec<usize>,
    error: Option<super::GraphError>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            cursor: INPUT.to_string(),
            shape: input_shape.to_vec(),
            error: None,
        }
    }

    fn push(mut self, name: &str, kind: LayerKind, inputs: Vec<String>, shapes: Vec<Vec<usize>>) -> Self {
        if self.error.is_some() {
            return self;
        }
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        match infer_shape(name, &kind, &refs) {
            Ok(shape) => {
                self.shape = shape;
                self.cursor = name.to_string();
                self.layers.push(LayerSpec {
                    name: name.to_string(),
                    kind,
                    inputs,
                });
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    fn push_seq(self, name: &str, kind: LayerKind) -> Self {
        let inputs = vec![self.cursor.clone()];
        let shapes = vec![self.shape.clone()];
        self.push(name, kind, inputs, shapes)
    }

    fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn conv(self, name: &str, kernel: usize, filters: usize, stride: usize, padding: Padding) -> Self {
        let in_channels = self.channels();
        self.push_seq(
            name,
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                in_channels,
                filters,
            },
        )
    }

    pub fn relu(self, name: &str) -> Self {
        self.push_seq(name, LayerKind::Relu)
    }

    pub fn maxpool(self, name: &str, window: usize, stride: usize) -> Self {
        self.push_seq(name, LayerKind::MaxPool { window, stride })
    }

    pub fn avgpool(self, name: &str, window: usize, stride: usize) -> Self {
        self.push_seq(name, LayerKind::AvgPool { window, stride })
    }

    pub fn flatten(self, name: &str) -> Self {
        self.push_seq(name, LayerKind::Flatten)
    }

    pub fn dense(self, name: &str, out_features: usize) -> Self {
        let in_features = self.shape.iter().product();
        self.push_seq(
            name,
            LayerKind::Dense {
                in_features,
                out_features,
            },
        )
    }

    /// Two-branch residual block:
    /// `relu(conv3x3(relu(conv3x3(x))) + conv1x1(x))`.
    ///
    /// Layers are named `{prefix}_a`, `{prefix}_a_relu`, `{prefix}_b`,
    /// `{prefix}_short`, `{prefix}_add` and `{prefix}_relu`.
    pub fn residual_block(self, prefix: &str, filters: usize) -> Self {
        let block_input = self.cursor.clone();
        let block_shape = self.shape.clone();
        let main = self
            .conv(&format!("{prefix}_a"), 3, filters, 1, Padding::Same)
            .relu(&format!("{prefix}_a_relu"))
            .conv(&format!("{prefix}_b"), 3, filters, 1, Padding::Same);
        let main_shape = main.shape.clone();
        let short_name = format!("{prefix}_short");
        let short_kind = LayerKind::Conv {
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            in_channels: *block_shape.last().unwrap_or(&0),
            filters,
        };
        let with_short = main.push(&short_name, short_kind, vec![block_input], vec![block_shape]);
        let short_shape = with_short.shape.clone();
        with_short
            .push(
                &format!("{prefix}_add"),
                LayerKind::ResidualAdd,
                vec![format!("{prefix}_b"), short_name],
                vec![main_shape, short_shape],
            )
            .relu(&format!("{prefix}_relu"))
    }

    /// Validates and initializes weights from `rng` (fan-in scaled Gaussian,
    /// zero bias), in layer order.
    pub fn build(self, rng: &mut Rng) -> Result<ModelGraph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut params = BTreeMap::new();
        for layer in &self.layers {
            if let Some(shape) = layer.kind.weight_shape() {
                params.insert(layer.name.clone(), init_params(&shape, rng));
            }
        }
        ModelGraph::new(self.input_shape, self.layers, params)
    }

    /// Builds with all-zero parameters.
    pub fn build_zeroed(self) -> Result<ModelGraph> {
        Ok(self.build(&mut Rng::new(0))?.zeroed())
    }
}
