//! Stock architectures for desk-scale experiments.

use serde::{Deserialize, Serialize};

use crate::graph::{GraphBuilder, ModelGraph, Result};
use crate::rng::Rng;
use crate::tensor::Padding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// `[conv3x3 -> relu -> maxpool2]` for all but the last entry of
    /// `filters`, then `conv3x3 -> relu -> flatten -> dense`.
    Cnn { filters: Vec<usize> },
    /// `conv3x3 -> relu -> maxpool2 -> residual block -> maxpool2 -> flatten
    /// -> dense`, the block being `relu(conv(relu(conv(x))) + conv1x1(x))`.
    Residual { stem: usize, block: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Cnn {
            filters: vec![16, 32, 32],
        }
    }
}

impl Architecture {
    pub fn build(&self, input_shape: &[usize], classes: usize, rng: &mut Rng) -> Result<ModelGraph> {
        match self {
            Architecture::Cnn { filters } => {
                let mut b = GraphBuilder::new(input_shape);
                for (i, &f) in filters.iter().enumerate() {
                    let k = i + 1;
                    b = b.conv(&format!("conv{k}"), 3, f, 1, Padding::Same).relu(&format!("relu{k}"));
                    if k < filters.len() {
                        b = b.maxpool(&format!("pool{k}"), 2, 2);
                    }
                }
                b.flatten("flatten").dense("fc", classes).build(rng)
            }
            Architecture::Residual { stem, block } => GraphBuilder::new(input_shape)
                .conv("conv1", 3, *stem, 1, Padding::Same)
                .relu("relu1")
                .maxpool("pool1", 2, 2)
                .residual_block("res1", *block)
                .maxpool("pool2", 2, 2)
                .flatten("flatten")
                .dense("fc", classes)
                .build(rng),
        }
    }
}
