use std::collections::BTreeMap;

use serde::Serialize;

use super::{Ddg, DdgError, NodeId, OpClass, OpKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepthReport {
    /// Largest number of multiplications on any input-to-output path.
    pub depth: u32,
    /// Largest number of rescales on any input-to-output path.
    pub rescale_count_r: u32,
    /// An input-to-output path realizing `depth`.
    pub critical_path: Vec<NodeId>,
}

/// Counts along input-to-output paths. Plaintext operands do not start
/// paths, so a multiplication by a constant contributes exactly one.
pub fn multiplicative_depth(graph: &Ddg) -> Result<DepthReport, DdgError> {
    let order = graph.topo_order()?;
    let n = graph.len();
    let mut mul = vec![None::<u32>; n];
    let mut resc = vec![None::<u32>; n];
    let mut pred = vec![None::<NodeId>; n];
    for id in order {
        let node = graph.node(id);
        if node.kind == OpKind::CipherInput {
            mul[id] = Some(0);
            resc[id] = Some(0);
            continue;
        }
        let mut best: Option<(u32, NodeId)> = None;
        let mut best_r: Option<u32> = None;
        for &o in &node.operands {
            if let Some(d) = mul[o] {
                if best.is_none_or(|(b, _)| d > b) {
                    best = Some((d, o));
                }
            }
            if let Some(r) = resc[o] {
                best_r = Some(best_r.map_or(r, |b| b.max(r)));
            }
        }
        if let Some((d, o)) = best {
            mul[id] = Some(d + u32::from(node.kind.is_multiplication()));
            pred[id] = Some(o);
        }
        resc[id] = best_r.map(|r| r + u32::from(node.kind == OpKind::Rescale));
    }
    let mut depth = 0;
    let mut end = None;
    let mut rescales = 0;
    for &o in &graph.outputs {
        if let Some(d) = mul[o] {
            if end.is_none() || d > depth {
                depth = d;
                end = Some(o);
            }
        }
        rescales = rescales.max(resc[o].unwrap_or(0));
    }
    let mut critical_path = Vec::new();
    let mut cur = end;
    while let Some(id) = cur {
        critical_path.push(id);
        cur = pred[id];
    }
    critical_path.reverse();
    Ok(DepthReport {
        depth,
        rescale_count_r: rescales,
        critical_path,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HistogramEntry {
    pub kind: OpClass,
    pub level: u32,
    pub count: usize,
}

/// Node counts keyed by `(kind, level)`, sorted by kind then level.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpHistogram {
    counts: BTreeMap<(OpClass, u32), usize>,
}

impl OpHistogram {
    pub fn get(&self, kind: OpClass, level: u32) -> usize {
        self.counts.get(&(kind, level)).copied().unwrap_or(0)
    }

    pub fn total(&self, kind: OpClass) -> usize {
        self.counts
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn node_count(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn entries(&self) -> Vec<HistogramEntry> {
        self.counts
            .iter()
            .map(|(&(kind, level), &count)| HistogramEntry { kind, level, count })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpClass, u32, usize)> + '_ {
        self.counts.iter().map(|(&(k, l), &c)| (k, l, c))
    }
}

pub fn op_histogram(graph: &Ddg) -> Result<OpHistogram, DdgError> {
    let mut counts = BTreeMap::new();
    for node in &graph.nodes {
        let level = node.level.ok_or(DdgError::Unleveled)?;
        *counts.entry((node.kind.class(), level)).or_insert(0) += 1;
    }
    Ok(OpHistogram { counts })
}

impl Ddg {
    /// Assigns levels from rescale placement: with `r` the deepest rescale
    /// count, a node sits at `r` minus the rescales on its deepest path.
    /// Plaintexts are encoded on demand and carry level 0.
    pub fn assign_levels(&mut self) {
        let order = match self.topo_order() {
            Ok(o) => o,
            Err(_) => return,
        };
        let mut below = vec![0u32; self.len()];
        for &id in &order {
            let node = &self.nodes[id];
            let deepest = node
                .operands
                .iter()
                .filter(|&&o| self.nodes[o].is_cipher())
                .map(|&o| below[o])
                .max()
                .unwrap_or(0);
            below[id] = deepest + u32::from(node.kind == OpKind::Rescale);
        }
        let r = below.iter().copied().max().unwrap_or(0);
        for node in &mut self.nodes {
            node.level = Some(if node.is_cipher() {
                r - below[node.id]
            } else {
                0
            });
        }
    }

    pub fn clear_levels(&mut self) {
        for node in &mut self.nodes {
            node.level = None;
        }
    }
}
