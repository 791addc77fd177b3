use std::collections::BTreeSet;

use super::{LayerKind, ModelGraph};

/// A conv or dense layer that reads the channels of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelConsumer {
    pub layer: usize,
    /// Spatial positions per channel in the consumer's input. 1 for conv
    /// consumers; `H * W` for a dense layer behind a flatten, whose input
    /// index for position `s` and channel `c` is `s * channels + c`.
    pub spatial: usize,
}

/// Producers whose output channels share one index space: a single conv or
/// dense layer, or every conv feeding the same residual joins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroup {
    pub producers: Vec<usize>,
    pub channels: usize,
    pub consumers: Vec<ChannelConsumer>,
    /// Layer whose output carries the group's post-activation feature maps.
    pub activation: usize,
    /// True when the channels reach the model output without passing
    /// through a consumer; such groups cannot be pruned.
    pub reaches_output: bool,
}

struct Reach {
    consumers: BTreeSet<ChannelConsumer>,
    joins: BTreeSet<usize>,
    activation: Option<usize>,
    reaches_output: bool,
}

impl ModelGraph {
    fn trace_channels(&self, producer: usize) -> Reach {
        let last = self.layers.len() - 1;
        let mut reach = Reach {
            consumers: BTreeSet::new(),
            joins: BTreeSet::new(),
            activation: None,
            reaches_output: producer == last,
        };
        // (node, spatial positions per channel once flattened)
        let mut frontier = vec![(producer, None::<usize>)];
        let mut visited = BTreeSet::new();
        while let Some((node, flat)) = frontier.pop() {
            for c in self.consumers_of(node) {
                let kind = &self.layers[c].kind;
                match kind {
                    LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                        reach.consumers.insert(ChannelConsumer {
                            layer: c,
                            spatial: flat.unwrap_or(1),
                        });
                        continue;
                    }
                    LayerKind::Relu => {
                        if reach.activation.is_none_or(|a| c < a) {
                            reach.activation = Some(c);
                        }
                    }
                    LayerKind::ResidualAdd => {
                        reach.joins.insert(c);
                    }
                    _ => {}
                }
                let next_flat = if *kind == LayerKind::Flatten {
                    let s = &self.shapes[node];
                    Some(s[..s.len() - 1].iter().product())
                } else {
                    flat
                };
                if c == last {
                    reach.reaches_output = true;
                }
                if visited.insert(c) {
                    frontier.push((c, next_flat));
                }
            }
        }
        reach
    }

    /// Channel groups of every conv and dense layer, ordered by their first
    /// producer.
    pub fn channel_groups(&self) -> Vec<ChannelGroup> {
        let producers: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_params())
            .collect();
        let reaches: Vec<Reach> = producers.iter().map(|&p| self.trace_channels(p)).collect();

        // union producers that meet at a residual join
        let mut parent: Vec<usize> = (0..producers.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for a in 0..producers.len() {
            for b in a + 1..producers.len() {
                if !reaches[a].joins.is_disjoint(&reaches[b].joins) {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[rb.max(ra)] = ra.min(rb);
                    }
                }
            }
        }

        let mut groups: Vec<ChannelGroup> = Vec::new();
        let mut root_to_group: Vec<Option<usize>> = vec![None; producers.len()];
        let mut activations: Vec<Option<usize>> = Vec::new();
        for (k, &p) in producers.iter().enumerate() {
            let root = find(&mut parent, k);
            let r = &reaches[k];
            let gi = match root_to_group[root] {
                Some(gi) => gi,
                None => {
                    activations.push(None);
                    groups.push(ChannelGroup {
                        producers: Vec::new(),
                        channels: self.layers[p].kind.filter_count().unwrap_or(0),
                        consumers: Vec::new(),
                        activation: p,
                        reaches_output: false,
                    });
                    root_to_group[root] = Some(groups.len() - 1);
                    groups.len() - 1
                }
            };
            let g = &mut groups[gi];
            g.producers.push(p);
            g.reaches_output |= r.reaches_output;
            if let Some(a) = r.activation {
                let first_relu = activations[gi].map_or(a, |cur: usize| cur.min(a));
                activations[gi] = Some(first_relu);
            }
            for c in &r.consumers {
                if !g.consumers.contains(c) {
                    g.consumers.push(*c);
                }
            }
        }
        for (g, act) in groups.iter_mut().zip(activations) {
            g.consumers.sort();
            if let Some(a) = act {
                g.activation = a;
            }
        }
        groups
    }

    /// Channel groups that may lose filters.
    pub fn prunable_groups(&self) -> Vec<ChannelGroup> {
        self.channel_groups()
            .into_iter()
            .filter(|g| !g.reaches_output)
            .collect()
    }

    /// Names of the conv and dense layers whose filters may be pruned.
    pub fn prunable_layers(&self) -> Vec<&str> {
        self.prunable_groups()
            .iter()
            .flat_map(|g| g.producers.iter().map(|&p| self.layers[p].name.as_str()))
            .collect()
    }
}
