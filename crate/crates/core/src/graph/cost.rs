use serde::{Deserialize, Serialize};

use super::{LayerKind, ModelGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    /// Multiply-accumulates for one forward pass of one sample.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    pub fn get(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Parameter and MAC counts of every conv and dense layer.
///
/// Conv: `params = d*d*M*N + N`, `macs = H'*W'*d*d*M*N`.
/// Dense: `params = in*out + out`, `macs = in*out`.
pub fn count_costs(model: &ModelGraph) -> CostReport {
    let mut layers = Vec::new();
    for (layer, shape) in model.layers().iter().zip(model.output_shapes()) {
        let (params, macs) = match layer.kind {
            LayerKind::Conv {
                kernel,
                in_channels,
                filters,
                ..
            } => {
                let w = (kernel * kernel * in_channels * filters) as u64;
                (w + filters as u64, (shape[0] * shape[1]) as u64 * w)
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let w = (in_features * out_features) as u64;
                (w + out_features as u64, w)
            }
            _ => continue,
        };
        layers.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.label().to_string(),
            params,
            macs,
        });
    }
    CostReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    }
}
