//! Data-dependency graph of HE operations.
//!
//! Nodes are stored densely; ids are assigned in creation order, which is
//! always a topological order for graphs built through [`DdgBuilder`].
//! Every node carries its fixed-point scale (in bits) and, once rescales
//! have been placed, its level: the number of rescales still available.

mod analysis;
mod builder;
mod rescale;

use std::collections::BTreeSet;
use std::fmt;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::fixed::{rational_serde, Rational};

pub use analysis::{multiplicative_depth, op_histogram, DepthReport, HistogramEntry, OpHistogram};
pub use builder::DdgBuilder;
pub(crate) use rescale::is_unit;
pub use rescale::{insert_rescales, strip_rescales, RescaleError};

pub type NodeId = usize;
pub type MaskId = usize;

/// Default RNS prime size (rescaling divisor) in bits.
pub const DEFAULT_PRIME_BITS: u32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OpKind {
    CipherInput,
    PlainConst,
    Add,
    Sub,
    MulPlain,
    MulCipher,
    /// Slot `i` of the result reads slot `(i + offset) mod slots`.
    Rotate {
        offset: i64,
    },
    Rescale,
    Output,
}

/// [`OpKind`] without payload, used as a histogram key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpClass {
    CipherInput,
    PlainConst,
    Add,
    Sub,
    MulPlain,
    MulCipher,
    Rotate,
    Rescale,
    Output,
}

impl OpKind {
    pub fn class(self) -> OpClass {
        match self {
            OpKind::CipherInput => OpClass::CipherInput,
            OpKind::PlainConst => OpClass::PlainConst,
            OpKind::Add => OpClass::Add,
            OpKind::Sub => OpClass::Sub,
            OpKind::MulPlain => OpClass::MulPlain,
            OpKind::MulCipher => OpClass::MulCipher,
            OpKind::Rotate { .. } => OpClass::Rotate,
            OpKind::Rescale => OpClass::Rescale,
            OpKind::Output => OpClass::Output,
        }
    }

    pub fn is_multiplication(self) -> bool {
        matches!(self, OpKind::MulPlain | OpKind::MulCipher)
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlainRole {
    FilterCoeff,
    Mask,
    ActCoeff,
    BnCoeff,
    MergedCoeff,
    PoolScalar,
    DenseWeight,
    /// Multiply-by-one used to raise a scale for an addition.
    Unit,
}

/// Slot contents of a plaintext, stored compactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlainValue {
    /// Placeholder for weights that were not supplied (cost analysis only).
    Unbound,
    #[serde(with = "rational_serde")]
    Scalar(Rational),
    /// `on` where the mask is set, `off` elsewhere.
    Masked {
        mask: MaskId,
        #[serde(with = "rational_serde")]
        on: Rational,
        #[serde(with = "rational_serde")]
        off: Rational,
    },
    /// Listed slots, zero elsewhere.
    Sparse(Vec<SparseEntry>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseEntry {
    pub slot: usize,
    #[serde(with = "rational_serde")]
    pub value: Rational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainOperand {
    pub role: PlainRole,
    pub value: PlainValue,
    /// Bits added to the encoding scale to line up an addition; passes that
    /// rebuild the graph start again from the unraised scale.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub raised_bits: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdgNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: OpKind,
    pub operands: Vec<NodeId>,
    pub scale_bits: u32,
    pub level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plain: Option<Box<PlainOperand>>,
}

impl DdgNode {
    pub fn is_cipher(&self) -> bool {
        self.kind != OpKind::PlainConst
    }
}

/// Lowering-time tag of a `mask -> activation -> batch-norm` tail, used by
/// coefficient merging to find its pattern without structural search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTail {
    pub layer: usize,
    pub channel: usize,
    /// Unmasked convolution result.
    pub input: NodeId,
    pub output: NodeId,
    pub mask: Option<MaskId>,
    #[serde(with = "crate::fixed::rational_vec_serde")]
    pub act: Vec<Rational>,
    /// Folded `(d, e)`; absent when no batch norm follows.
    #[serde(default, with = "opt_pair")]
    pub bn: Option<(Rational, Rational)>,
    pub merged: bool,
}

mod opt_pair {
    use super::Rational;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        v: &Option<(Rational, Rational)>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        v.as_ref()
            .map(|(d, e)| [d.to_string(), e.to_string()])
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<(Rational, Rational)>, D::Error> {
        let raw = Option::<[String; 2]>::deserialize(d)?;
        raw.map(|[a, b]| -> Result<_, D::Error> {
            Ok((
                a.parse().map_err(serde::de::Error::custom)?,
                b.parse().map_err(serde::de::Error::custom)?,
            ))
        })
        .transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ddg {
    pub prime_bits: u32,
    pub input_scale_bits: u32,
    pub slots: usize,
    pub outputs: Vec<NodeId>,
    pub nodes: Vec<DdgNode>,
    pub masks: Vec<Vec<bool>>,
    #[serde(default)]
    pub tails: Vec<BlockTail>,
    /// Label of each network layer, indexed by `DdgNode::layer`.
    #[serde(default)]
    pub layer_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DdgError {
    #[error("graph contains a cycle through node {0}")]
    Cycle(NodeId),
    #[error("node {node} references missing operand {operand}")]
    DanglingOperand { node: NodeId, operand: NodeId },
    #[error("graph has no assigned levels")]
    Unleveled,
}

impl Ddg {
    pub fn node(&self, id: NodeId) -> &DdgNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cipher_inputs(&self) -> impl Iterator<Item = &DdgNode> {
        self.nodes.iter().filter(|n| n.kind == OpKind::CipherInput)
    }

    pub fn count(&self, class: OpClass) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind.class() == class)
            .count()
    }

    pub fn is_leveled(&self) -> bool {
        self.nodes.iter().all(|n| n.level.is_some())
    }

    /// Returns `Some(r)` where `r` is the level of the cipher inputs.
    pub fn rescale_budget(&self) -> Option<u32> {
        self.cipher_inputs().filter_map(|n| n.level).max()
    }

    /// Kahn order; fails on dangling ids or cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, DdgError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for &op in &node.operands {
                if op >= n {
                    return Err(DdgError::DanglingOperand {
                        node: node.id,
                        operand: op,
                    });
                }
                indegree[node.id] += 1;
                users[op].push(node.id);
            }
        }
        let mut ready: BTreeSet<NodeId> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &u in &users[id] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(DdgError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Number of consumers of every node (outputs list excluded).
    pub fn use_counts(&self) -> Vec<usize> {
        let mut uses = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &op in &node.operands {
                if op < uses.len() {
                    uses[op] += 1;
                }
            }
        }
        uses
    }

    /// Expands a plaintext payload into one exact value per slot.
    pub fn plain_slots(&self, value: &PlainValue) -> Option<Vec<Rational>> {
        match value {
            PlainValue::Unbound => None,
            PlainValue::Scalar(v) => Some(vec![v.clone(); self.slots]),
            PlainValue::Masked { mask, on, off } => {
                let bits = self.masks.get(*mask)?;
                Some(
                    bits.iter()
                        .map(|&b| if b { on.clone() } else { off.clone() })
                        .collect(),
                )
            }
            PlainValue::Sparse(entries) => {
                let mut out = vec![Rational::zero(); self.slots];
                for e in entries {
                    *out.get_mut(e.slot)? = e.value.clone();
                }
                Some(out)
            }
        }
    }

    /// Removes nodes that no output depends on (cipher inputs are kept) and
    /// renumbers the survivors in their existing relative order.
    pub fn prune(&self) -> Ddg {
        let n = self.nodes.len();
        let mut live = vec![false; n];
        let mut stack: Vec<NodeId> = self.outputs.clone();
        stack.extend(self.cipher_inputs().map(|n| n.id));
        while let Some(id) = stack.pop() {
            if id >= n || live[id] {
                continue;
            }
            live[id] = true;
            stack.extend(self.nodes[id].operands.iter().copied());
        }
        let mut remap = vec![usize::MAX; n];
        let mut nodes = Vec::with_capacity(n);
        for node in &self.nodes {
            if !live[node.id] {
                continue;
            }
            let id = nodes.len();
            remap[node.id] = id;
            let mut copy = node.clone();
            copy.id = id;
            copy.operands = node.operands.iter().map(|&o| remap[o]).collect();
            nodes.push(copy);
        }
        let tails = self
            .tails
            .iter()
            .filter(|t| live[t.input] && live[t.output])
            .map(|t| BlockTail {
                input: remap[t.input],
                output: remap[t.output],
                ..t.clone()
            })
            .collect();
        Ddg {
            nodes,
            outputs: self.outputs.iter().map(|&o| remap[o]).collect(),
            tails,
            ..self.shallow_meta()
        }
    }

    /// Copy of everything except nodes, outputs and tails.
    pub(crate) fn shallow_meta(&self) -> Ddg {
        Ddg {
            prime_bits: self.prime_bits,
            input_scale_bits: self.input_scale_bits,
            slots: self.slots,
            outputs: Vec::new(),
            nodes: Vec::new(),
            masks: self.masks.clone(),
            tails: Vec::new(),
            layer_labels: self.layer_labels.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graphs always serialize")
    }

    pub fn from_json(text: &str) -> Result<Ddg, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum DdgViolationCode {
    NoOutputs,
    NotAnOutputNode,
    DanglingOperand,
    Cycle,
    Arity,
    OperandType,
    ScaleMismatch,
    ScaleArithmetic,
    LevelMismatch,
    MissingPayload,
    BadPayload,
    UnreachableOutput,
    IdMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DdgViolation {
    pub node: Option<NodeId>,
    pub code: DdgViolationCode,
    pub message: String,
}

impl fmt::Display for DdgViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {n}: {:?}: {}", self.code, self.message),
            None => write!(f, "{:?}: {}", self.code, self.message),
        }
    }
}

/// Structural and bookkeeping checks; empty iff the graph is well formed.
pub fn validate_ddg(graph: &Ddg) -> Vec<DdgViolation> {
    use DdgViolationCode::*;
    let mut out = Vec::new();
    let mut push = |node: Option<NodeId>, code, message: String| {
        out.push(DdgViolation {
            node,
            code,
            message,
        })
    };
    let n = graph.nodes.len();
    if graph.outputs.is_empty() {
        push(None, NoOutputs, "graph has no outputs".into());
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        if node.id != i {
            push(
                Some(i),
                IdMismatch,
                format!("stored id {} at position {i}", node.id),
            );
        }
    }
    let mut structural_ok = true;
    for node in &graph.nodes {
        for &op in &node.operands {
            if op >= n {
                structural_ok = false;
                push(
                    Some(node.id),
                    DanglingOperand,
                    format!("operand {op} does not exist"),
                );
            }
        }
    }
    for &o in &graph.outputs {
        if o >= n || graph.nodes[o].kind != OpKind::Output {
            push(
                Some(o),
                NotAnOutputNode,
                format!("output {o} is not an Output node"),
            );
            structural_ok = false;
        }
    }
    if !structural_ok {
        return out;
    }
    if let Err(DdgError::Cycle(id)) = graph.topo_order() {
        push(Some(id), Cycle, "node lies on a cycle".into());
        return out;
    }

    let is_cipher = |id: NodeId| graph.nodes[id].is_cipher();
    let leveled = graph.is_leveled();
    let input_level = graph.rescale_budget();
    for node in &graph.nodes {
        let id = Some(node.id);
        let ops = &node.operands;
        let arity = match node.kind {
            OpKind::CipherInput | OpKind::PlainConst => 0,
            OpKind::Add | OpKind::Sub | OpKind::MulPlain | OpKind::MulCipher => 2,
            OpKind::Rotate { .. } | OpKind::Rescale | OpKind::Output => 1,
        };
        if ops.len() != arity {
            push(
                id,
                Arity,
                format!(
                    "{:?} expects {arity} operands, has {}",
                    node.kind,
                    ops.len()
                ),
            );
            continue;
        }
        let scale = |i: usize| graph.nodes[ops[i]].scale_bits;
        match node.kind {
            OpKind::CipherInput => {
                if leveled && node.level != input_level {
                    push(
                        id,
                        LevelMismatch,
                        "cipher inputs must share the top level".into(),
                    );
                }
            }
            OpKind::PlainConst => match node.plain.as_deref() {
                None => push(id, MissingPayload, "plaintext without payload".into()),
                Some(p) => {
                    let ok = match &p.value {
                        PlainValue::Masked { mask, .. } => graph
                            .masks
                            .get(*mask)
                            .is_some_and(|m| m.len() == graph.slots),
                        PlainValue::Sparse(e) => e.iter().all(|e| e.slot < graph.slots),
                        PlainValue::Unbound | PlainValue::Scalar(_) => true,
                    };
                    if !ok {
                        push(
                            id,
                            BadPayload,
                            "payload does not fit the slot layout".into(),
                        );
                    }
                    if p.role == PlainRole::Mask {
                        let binary = match &p.value {
                            PlainValue::Masked { on, off, .. } => {
                                (on.is_zero() || *on == Rational::from_integer(1.into()))
                                    && (off.is_zero() || *off == Rational::from_integer(1.into()))
                            }
                            PlainValue::Scalar(v) => {
                                v.is_zero() || *v == Rational::from_integer(1.into())
                            }
                            _ => true,
                        };
                        if !binary {
                            push(id, BadPayload, "mask values must be 0 or 1".into());
                        }
                    }
                }
            },
            OpKind::Add | OpKind::Sub => {
                if !is_cipher(ops[0]) && !is_cipher(ops[1]) {
                    push(
                        id,
                        OperandType,
                        "addition needs a ciphertext operand".into(),
                    );
                }
                if scale(0) != scale(1) {
                    push(
                        id,
                        ScaleMismatch,
                        format!("operand scales {} and {} differ", scale(0), scale(1)),
                    );
                } else if node.scale_bits != scale(0) {
                    push(
                        id,
                        ScaleArithmetic,
                        "sum must keep the operand scale".into(),
                    );
                }
            }
            OpKind::MulPlain | OpKind::MulCipher => {
                let want_plain = node.kind == OpKind::MulPlain;
                if !is_cipher(ops[0]) || is_cipher(ops[1]) == want_plain {
                    push(
                        id,
                        OperandType,
                        format!("bad operand kinds for {:?}", node.kind),
                    );
                }
                if node.scale_bits != scale(0) + scale(1) {
                    push(
                        id,
                        ScaleArithmetic,
                        "product scale must be the operand sum".into(),
                    );
                }
            }
            OpKind::Rotate { .. } | OpKind::Output => {
                if !is_cipher(ops[0]) {
                    push(id, OperandType, "operand must be a ciphertext".into());
                }
                if node.scale_bits != scale(0) {
                    push(id, ScaleArithmetic, "scale must be preserved".into());
                }
            }
            OpKind::Rescale => {
                if !is_cipher(ops[0]) {
                    push(id, OperandType, "operand must be a ciphertext".into());
                }
                if scale(0) < graph.prime_bits || node.scale_bits != scale(0) - graph.prime_bits {
                    push(
                        id,
                        ScaleArithmetic,
                        "rescale must drop exactly one prime".into(),
                    );
                }
            }
        }
        if leveled && node.is_cipher() && node.kind != OpKind::CipherInput {
            let level = node.level.unwrap_or(0);
            let operand_min = ops
                .iter()
                .filter(|&&o| is_cipher(o))
                .filter_map(|&o| graph.nodes[o].level)
                .min();
            let expected = match node.kind {
                OpKind::Rescale => operand_min.and_then(|l| l.checked_sub(1)),
                _ => operand_min,
            };
            if expected != Some(level) {
                push(
                    id,
                    LevelMismatch,
                    format!("level {level}, expected {expected:?}"),
                );
            }
        }
    }

    let mut from_input = vec![false; n];
    for id in graph.topo_order().unwrap_or_default() {
        let node = &graph.nodes[id];
        from_input[id] =
            node.kind == OpKind::CipherInput || node.operands.iter().any(|&o| from_input[o]);
    }
    for &o in &graph.outputs {
        if !from_input[o] {
            push(
                Some(o),
                UnreachableOutput,
                "output does not depend on any input".into(),
            );
        }
    }
    out
}
