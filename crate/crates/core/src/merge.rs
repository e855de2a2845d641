//! Coefficient merging: folds the mask, activation coefficients and batch
//! norm of each tagged tail into one quadratic `a'*X^2 + b'*X + c'`.

use std::collections::HashSet;

use num_traits::Zero;

use crate::ddg::is_unit;
use crate::ddg::{
    strip_rescales, BlockTail, Ddg, DdgBuilder, DdgError, NodeId, OpKind, PlainRole, PlainValue,
};
use crate::fixed::Rational;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MergeError {
    #[error("tail of layer {layer} channel {channel}: node {node} is also used outside the tail")]
    SharedTailNode {
        layer: usize,
        channel: usize,
        node: NodeId,
    },
    #[error("tail of layer {layer} channel {channel} does not reach its input")]
    MalformedTail { layer: usize, channel: usize },
    #[error(transparent)]
    Graph(#[from] DdgError),
}

/// Merged coefficients for one slot or scalar position.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedCoeffs {
    pub a: Rational,
    pub b: Rational,
    pub c: Rational,
}

/// `a' = d*a*m^2`, `b' = d*b*m`, `c' = d*c + e`.
pub fn compute_merged_coeffs(
    m: &Rational,
    a: &Rational,
    b: &Rational,
    c: &Rational,
    d: &Rational,
    e: &Rational,
) -> MergedCoeffs {
    MergedCoeffs {
        a: d * a * m * m,
        b: d * b * m,
        c: d * c + e,
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub graph: Ddg,
    pub merged_tails: usize,
}

/// Rewrites every unmerged tail. Merged coefficients are encoded at
/// `coeff_scale_bits`, or twice that when a batch norm is folded in, so
/// they are exact on the coefficient grid. Rescales, if present, are removed first;
/// the result must go through rescale insertion again. Already merged
/// tails are left alone, so the pass is idempotent.
pub fn merge_coefficients(graph: &Ddg, coeff_scale_bits: u32) -> Result<MergeOutcome, MergeError> {
    let has_rescales = graph.nodes.iter().any(|n| n.kind == OpKind::Rescale);
    let stripped;
    let graph = if has_rescales {
        stripped = strip_rescales(graph)?;
        &stripped
    } else {
        graph
    };

    let n = graph.len();
    let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for node in &graph.nodes {
        for &o in &node.operands {
            consumers[o].push(node.id);
        }
    }
    let mut internal = vec![false; n];
    let mut tail_at_output = vec![None::<usize>; n];
    for (ti, t) in graph.tails.iter().enumerate() {
        if t.merged {
            continue;
        }
        let members = tail_members(graph, t)?;
        for &id in &members {
            if id != t.output {
                // a shared intermediate would lose its other consumers
                if consumers[id].iter().any(|u| !members.contains(u)) {
                    return Err(MergeError::SharedTailNode {
                        layer: t.layer,
                        channel: t.channel,
                        node: id,
                    });
                }
            }
            internal[id] = true;
        }
        tail_at_output[t.output] = Some(ti);
    }

    let mut b = DdgBuilder::like(graph);
    let mut map = vec![usize::MAX; n];
    let mut merged = 0;
    let mut new_tails = Vec::with_capacity(graph.tails.len());
    for node in &graph.nodes {
        b.set_layer(node.layer);
        if let Some(ti) = tail_at_output[node.id] {
            let t = &graph.tails[ti];
            let x = map[t.input];
            // products of two coefficients need twice the fractional bits
            let scale = if t.bn.is_some() {
                2 * coeff_scale_bits
            } else {
                coeff_scale_bits
            };
            let out = emit_merged(&mut b, x, t, scale);
            map[node.id] = out;
            merged += 1;
            new_tails.push(BlockTail {
                input: x,
                output: out,
                merged: true,
                ..t.clone()
            });
            continue;
        }
        if internal[node.id] {
            continue;
        }
        if is_unit(graph, node.id) {
            map[node.id] = match node.kind {
                OpKind::MulPlain => map[node.operands[0]],
                _ => usize::MAX,
            };
            continue;
        }
        let ops: Vec<NodeId> = node.operands.iter().map(|&o| map[o]).collect();
        map[node.id] = match node.kind {
            OpKind::CipherInput => b.input_at(node.scale_bits),
            OpKind::PlainConst => {
                let p = node.plain.as_deref().expect("plaintext payload");
                b.plain(p.role, p.value.clone(), node.scale_bits - p.raised_bits)
            }
            OpKind::Add => b.add(ops[0], ops[1]),
            OpKind::Sub => b.sub(ops[0], ops[1]),
            OpKind::MulPlain => b.mul_plain(ops[0], ops[1]),
            OpKind::MulCipher => b.mul_cipher(ops[0], ops[1]),
            OpKind::Rotate { offset } => b.rotate(ops[0], offset),
            OpKind::Rescale => ops[0],
            OpKind::Output => b.output(ops[0]),
        };
    }
    for t in graph.tails.iter().filter(|t| t.merged) {
        new_tails.push(BlockTail {
            input: map[t.input],
            output: map[t.output],
            ..t.clone()
        });
    }
    new_tails.sort_by_key(|t| (t.layer, t.channel));
    for t in new_tails {
        b.add_tail(t);
    }
    let mut out = b.finish();
    out.outputs = graph.outputs.iter().map(|&o| map[o]).collect();
    Ok(MergeOutcome {
        graph: out.prune(),
        merged_tails: merged,
    })
}

/// Nodes computed strictly after the tail input on the way to its output.
fn tail_members(graph: &Ddg, t: &BlockTail) -> Result<HashSet<NodeId>, MergeError> {
    let mut seen = HashSet::new();
    let mut stack = vec![t.output];
    let mut reached = t.output == t.input;
    while let Some(id) = stack.pop() {
        if id == t.input {
            reached = true;
            continue;
        }
        if !seen.insert(id) {
            continue;
        }
        let node = graph.node(id);
        if node.kind == OpKind::CipherInput {
            return Err(MergeError::MalformedTail {
                layer: t.layer,
                channel: t.channel,
            });
        }
        stack.extend(node.operands.iter().copied());
    }
    if !reached {
        return Err(MergeError::MalformedTail {
            layer: t.layer,
            channel: t.channel,
        });
    }
    Ok(seen)
}

fn emit_merged(b: &mut DdgBuilder, x: NodeId, t: &BlockTail, scale: u32) -> NodeId {
    let one = Rational::from_integer(1.into());
    let zero = Rational::zero();
    let (d, e) = t.bn.clone().unwrap_or((one.clone(), zero.clone()));
    let on = compute_merged_coeffs(&one, &t.act[0], &t.act[1], &t.act[2], &d, &e);
    let slotwise = |v: &Rational| -> PlainValue {
        match t.mask {
            Some(mask) => PlainValue::Masked {
                mask,
                on: v.clone(),
                off: Rational::zero(),
            },
            None => PlainValue::Scalar(v.clone()),
        }
    };
    let mut z = if !on.a.is_zero() {
        let sq = b.mul_cipher(x, x);
        let av = slotwise(&on.a);
        let ak = b.plain(PlainRole::MergedCoeff, av, scale);
        let t2 = b.mul_plain(sq, ak);
        if on.b.is_zero() {
            t2
        } else {
            let bv = slotwise(&on.b);
            let bk = b.plain(PlainRole::MergedCoeff, bv, scale);
            let l = b.mul_plain(x, bk);
            b.add(t2, l)
        }
    } else {
        let bv = slotwise(&on.b);
        let bk = b.plain(PlainRole::MergedCoeff, bv, scale);
        b.mul_plain(x, bk)
    };
    if !on.c.is_zero() {
        let ck = b.plain(PlainRole::MergedCoeff, PlainValue::Scalar(on.c), scale);
        z = b.add(z, ck);
    }
    z
}
