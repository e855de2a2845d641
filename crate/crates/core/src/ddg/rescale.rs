use std::collections::HashMap;

use super::{
    multiplicative_depth, BlockTail, Ddg, DdgBuilder, DdgError, NodeId, OpKind, PlainRole,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RescaleError {
    #[error("prime size must be positive")]
    ZeroPrime,
    #[error(
        "plaintext {node} has scale {scale_bits}, wider than prime plus waterline ({limit} bits)"
    )]
    CoefficientTooWide {
        node: NodeId,
        scale_bits: u32,
        limit: u32,
    },
    #[error(transparent)]
    Graph(#[from] DdgError),
}

/// How eagerly a rebuild divides ciphertexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Placement {
    /// Only multiplication operands and outputs are rescaled.
    Lazy,
    /// Addends are also rescaled when the sum can still be lined up by
    /// re-encoding constants.
    MatchedAdds,
    /// Addends of different scale are always rescaled first.
    Adds,
    /// Every product is rescaled as soon as it is wide enough.
    Eager,
}

const PLACEMENTS: [Placement; 4] = [
    Placement::Lazy,
    Placement::MatchedAdds,
    Placement::Adds,
    Placement::Eager,
];

/// Places rescales so that every multiplication operand and every output
/// stays below `waterline_bits + prime_bits`.
///
/// A ciphertext is rescaled only while its scale stays at or above
/// `waterline_bits` after the division, and chains are shared between
/// consumers. Whether the division happens at the next multiplication, at
/// a mismatched addition, or right after the producing product changes how
/// the remaining bits line up for later squares, so all of these placements
/// are built and the one with the fewest rescales on any path wins (ties go
/// to the smaller depth, then the smaller graph). Existing rescales are
/// dropped first, so the pass can be re-run with another waterline. The
/// result carries levels.
pub fn insert_rescales(graph: &Ddg, waterline_bits: u32) -> Result<Ddg, RescaleError> {
    if graph.prime_bits == 0 {
        return Err(RescaleError::ZeroPrime);
    }
    let limit = waterline_bits + graph.prime_bits;
    let mut best: Option<((u32, u32, usize), Ddg)> = None;
    for placement in PLACEMENTS {
        let g = rebuild(graph, Some(limit), placement)?;
        let d = multiplicative_depth(&g)?;
        let key = (d.rescale_count_r, d.depth, g.len());
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, g));
        }
    }
    let mut out = best.expect("at least one placement").1;
    // constants added to a ciphertext follow its scale; only multiplicands
    // are bounded
    for node in out.nodes.iter().filter(|n| n.kind == OpKind::MulPlain) {
        let c = out.node(node.operands[1]);
        if c.scale_bits > limit {
            return Err(RescaleError::CoefficientTooWide {
                node: c.id,
                scale_bits: c.scale_bits,
                limit,
            });
        }
    }
    out.assign_levels();
    Ok(out)
}

/// Removes every rescale and recomputes scales.
pub fn strip_rescales(graph: &Ddg) -> Result<Ddg, DdgError> {
    rebuild(graph, None, Placement::Lazy)
}

fn rebuild(graph: &Ddg, limit: Option<u32>, placement: Placement) -> Result<Ddg, DdgError> {
    let order = graph.topo_order()?;
    let mut b = DdgBuilder::like(graph);
    let mut map: Vec<NodeId> = vec![usize::MAX; graph.len()];
    let mut ready_cache: HashMap<NodeId, NodeId> = HashMap::new();

    let mut ready = |b: &mut DdgBuilder, v: NodeId| -> NodeId {
        let Some(limit) = limit else { return v };
        if let Some(&r) = ready_cache.get(&v) {
            return r;
        }
        // rescales belong to the layer that produced the value
        let consumer_layer = b.layer();
        b.set_layer(b.node(v).layer);
        let mut cur = v;
        while b.scale(cur) >= limit {
            cur = b.rescale(cur);
        }
        b.set_layer(consumer_layer);
        ready_cache.insert(v, cur);
        cur
    };

    for id in order {
        let node = graph.node(id);
        if is_unit(graph, id) {
            // scale-matching multiplies are re-created by the builder as needed
            map[id] = match node.kind {
                OpKind::MulPlain => map[node.operands[0]],
                _ => usize::MAX,
            };
            continue;
        }
        b.set_layer(node.layer);
        let ops: Vec<NodeId> = node.operands.iter().map(|&o| map[o]).collect();
        let new = match node.kind {
            OpKind::CipherInput => b.input_at(node.scale_bits),
            OpKind::PlainConst => {
                let p = node.plain.as_deref().expect("plaintext payload");
                b.plain(p.role, p.value.clone(), node.scale_bits - p.raised_bits)
            }
            OpKind::Add | OpKind::Sub => {
                let (mut x, mut y) = (ops[0], ops[1]);
                let early = b.scale(x) != b.scale(y)
                    && match placement {
                        Placement::MatchedAdds => early_rescale_matches(&b, x, y, limit),
                        Placement::Adds => true,
                        Placement::Lazy | Placement::Eager => false,
                    };
                if early {
                    x = ready(&mut b, x);
                    y = ready(&mut b, y);
                }
                if node.kind == OpKind::Add {
                    b.add(x, y)
                } else {
                    b.sub(x, y)
                }
            }
            OpKind::MulPlain => {
                let x = ready(&mut b, ops[0]);
                let p = b.mul_plain(x, ops[1]);
                if placement == Placement::Eager {
                    ready(&mut b, p)
                } else {
                    p
                }
            }
            OpKind::MulCipher => {
                let x = ready(&mut b, ops[0]);
                let y = ready(&mut b, ops[1]);
                let p = b.mul_cipher(x, y);
                if placement == Placement::Eager {
                    ready(&mut b, p)
                } else {
                    p
                }
            }
            OpKind::Rotate { offset } => b.rotate(ops[0], offset),
            OpKind::Rescale => ops[0],
            OpKind::Output => {
                let x = ready(&mut b, ops[0]);
                b.output(x)
            }
        };
        map[id] = new;
    }
    for t in &graph.tails {
        b.add_tail(BlockTail {
            input: map[t.input],
            output: map[t.output],
            ..t.clone()
        });
    }
    let mut g = b.finish();
    // outputs keep their original order
    g.outputs = graph.outputs.iter().map(|&o| map[o]).collect();
    Ok(g)
}

/// A unit constant or a product with one, inserted only to line up scales.
pub(crate) fn is_unit(graph: &Ddg, id: NodeId) -> bool {
    let node = graph.node(id);
    let unit_const = |n: NodeId| {
        graph
            .node(n)
            .plain
            .as_deref()
            .is_some_and(|p| p.role == PlainRole::Unit)
    };
    match node.kind {
        OpKind::PlainConst => unit_const(id),
        OpKind::MulPlain => unit_const(node.operands[1]),
        _ => false,
    }
}

/// Whether rescaling both addends first still lets their scales meet by
/// re-encoding constants. A freshly rescaled value can only be the higher
/// side.
fn early_rescale_matches(b: &DdgBuilder, x: NodeId, y: NodeId, limit: Option<u32>) -> bool {
    let Some(limit) = limit else { return false };
    let after = |v: NodeId| {
        let mut s = b.scale(v);
        let mut rescaled = false;
        while s >= limit {
            s -= b.prime_bits();
            rescaled = true;
        }
        (s, rescaled)
    };
    let ((sx, rx), (sy, ry)) = (after(x), after(y));
    if !rx && !ry {
        return false;
    }
    match sx.cmp(&sy) {
        std::cmp::Ordering::Equal => true,
        std::cmp::Ordering::Less => !rx && b.can_lift(x),
        std::cmp::Ordering::Greater => !ry && b.can_lift(y),
    }
}
