use std::collections::HashMap;

use num_traits::One;

use super::{BlockTail, Ddg, DdgNode, MaskId, NodeId, OpKind, PlainOperand, PlainRole, PlainValue};
use crate::fixed::Rational;

/// Incremental graph construction with scale bookkeeping.
///
/// Additions equalize operand scales by re-encoding plaintexts that only
/// feed the lower-scale operand; when that is impossible the lower operand
/// is multiplied by a unit plaintext.
#[derive(Debug, Clone)]
pub struct DdgBuilder {
    nodes: Vec<DdgNode>,
    uses: Vec<u32>,
    outputs: Vec<NodeId>,
    masks: Vec<Vec<bool>>,
    mask_index: HashMap<Vec<bool>, MaskId>,
    rotations: HashMap<(NodeId, i64), NodeId>,
    tails: Vec<BlockTail>,
    layer: Option<usize>,
    layer_labels: Vec<String>,
    slots: usize,
    prime_bits: u32,
    input_scale_bits: u32,
}

impl DdgBuilder {
    pub fn new(slots: usize, prime_bits: u32, input_scale_bits: u32) -> Self {
        DdgBuilder {
            nodes: Vec::new(),
            uses: Vec::new(),
            outputs: Vec::new(),
            masks: Vec::new(),
            mask_index: HashMap::new(),
            rotations: HashMap::new(),
            tails: Vec::new(),
            layer: None,
            layer_labels: Vec::new(),
            slots,
            prime_bits,
            input_scale_bits,
        }
    }

    /// Empty builder sharing the masks, labels and parameters of `graph`.
    pub fn like(graph: &Ddg) -> Self {
        let mut b = DdgBuilder::new(graph.slots, graph.prime_bits, graph.input_scale_bits);
        for m in &graph.masks {
            b.mask(m.clone());
        }
        b.layer_labels = graph.layer_labels.clone();
        b
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn prime_bits(&self) -> u32 {
        self.prime_bits
    }

    pub fn set_layer(&mut self, layer: Option<usize>) {
        self.layer = layer;
    }

    pub fn layer(&self) -> Option<usize> {
        self.layer
    }

    /// Registers a label for network layer `index`.
    pub fn label_layer(&mut self, index: usize, label: String) {
        if self.layer_labels.len() <= index {
            self.layer_labels.resize(index + 1, String::new());
        }
        self.layer_labels[index] = label;
    }

    pub fn scale(&self, id: NodeId) -> u32 {
        self.nodes[id].scale_bits
    }

    pub fn node(&self, id: NodeId) -> &DdgNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        kind: OpKind,
        operands: Vec<NodeId>,
        scale_bits: u32,
        plain: Option<PlainOperand>,
    ) -> NodeId {
        let id = self.nodes.len();
        for &o in &operands {
            self.uses[o] += 1;
        }
        self.nodes.push(DdgNode {
            id,
            kind,
            operands,
            scale_bits,
            level: None,
            layer: self.layer,
            plain: plain.map(Box::new),
        });
        self.uses.push(0);
        id
    }

    pub fn input(&mut self) -> NodeId {
        self.input_at(self.input_scale_bits)
    }

    pub fn input_at(&mut self, scale_bits: u32) -> NodeId {
        self.push(OpKind::CipherInput, vec![], scale_bits, None)
    }

    pub fn plain(&mut self, role: PlainRole, value: PlainValue, scale_bits: u32) -> NodeId {
        self.push(
            OpKind::PlainConst,
            vec![],
            scale_bits,
            Some(PlainOperand {
                role,
                value,
                raised_bits: 0,
            }),
        )
    }

    /// Interns a slot mask and returns its id.
    pub fn mask(&mut self, bits: Vec<bool>) -> MaskId {
        if let Some(&id) = self.mask_index.get(&bits) {
            return id;
        }
        let id = self.masks.len();
        self.mask_index.insert(bits.clone(), id);
        self.masks.push(bits);
        id
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> NodeId {
        self.additive(OpKind::Add, x, y)
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> NodeId {
        self.additive(OpKind::Sub, x, y)
    }

    fn additive(&mut self, kind: OpKind, x: NodeId, y: NodeId) -> NodeId {
        let (x, y) = self.equalize(x, y);
        let s = self.scale(x);
        self.push(kind, vec![x, y], s, None)
    }

    /// `x` must be a ciphertext, `c` a plaintext.
    pub fn mul_plain(&mut self, x: NodeId, c: NodeId) -> NodeId {
        debug_assert!(self.nodes[x].is_cipher() && !self.nodes[c].is_cipher());
        let s = self.scale(x) + self.scale(c);
        self.push(OpKind::MulPlain, vec![x, c], s, None)
    }

    pub fn mul_cipher(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let s = self.scale(x) + self.scale(y);
        self.push(OpKind::MulCipher, vec![x, y], s, None)
    }

    /// Rotation by `offset` slots; offsets are reduced modulo the slot count,
    /// a zero rotation is the identity and repeated rotations are shared.
    pub fn rotate(&mut self, x: NodeId, offset: i64) -> NodeId {
        let offset = offset.rem_euclid(self.slots as i64);
        if offset == 0 {
            return x;
        }
        if let Some(&r) = self.rotations.get(&(x, offset)) {
            return r;
        }
        let s = self.scale(x);
        let r = self.push(OpKind::Rotate { offset }, vec![x], s, None);
        self.rotations.insert((x, offset), r);
        r
    }

    pub fn rescale(&mut self, x: NodeId) -> NodeId {
        let s = self.scale(x).saturating_sub(self.prime_bits);
        self.push(OpKind::Rescale, vec![x], s, None)
    }

    pub fn output(&mut self, x: NodeId) -> NodeId {
        let s = self.scale(x);
        let o = self.push(OpKind::Output, vec![x], s, None);
        self.outputs.push(o);
        o
    }

    pub fn add_tail(&mut self, tail: BlockTail) {
        self.tails.push(tail);
    }

    fn equalize(&mut self, x: NodeId, y: NodeId) -> (NodeId, NodeId) {
        let (sx, sy) = (self.scale(x), self.scale(y));
        if sx == sy {
            return (x, y);
        }
        let (lo, hi, hi_scale) = if sx < sy { (x, y, sy) } else { (y, x, sx) };
        if self.nodes[hi].kind == OpKind::PlainConst && self.uses[hi] == 0 {
            // a fresh constant can simply be encoded at the lower scale
            self.nodes[hi].scale_bits = self.scale(lo);
            if let Some(p) = self.nodes[hi].plain.as_deref_mut() {
                p.raised_bits = 0;
            }
            return (x, y);
        }
        let diff = hi_scale - self.scale(lo);
        let lo2 = if self.can_raise(lo, 0) {
            self.raise(lo, diff);
            lo
        } else {
            let one = self.plain(PlainRole::Unit, PlainValue::Scalar(Rational::one()), diff);
            self.mul_plain(lo, one)
        };
        if sx < sy {
            (lo2, y)
        } else {
            (x, lo2)
        }
    }

    /// True when `id` can be brought up to a higher scale by re-encoding
    /// constants, without an extra multiplication.
    pub fn can_lift(&self, id: NodeId) -> bool {
        let node = &self.nodes[id];
        (node.kind == OpKind::PlainConst && self.uses[id] == 0) || self.can_raise(id, 0)
    }

    /// True when every value feeding `id` through scale-preserving ops can
    /// be re-encoded without affecting any other consumer.
    fn can_raise(&self, id: NodeId, allowed_uses: u32) -> bool {
        let node = &self.nodes[id];
        if self.uses[id] > allowed_uses {
            return false;
        }
        match node.kind {
            OpKind::PlainConst => true,
            OpKind::MulPlain => {
                let c = node.operands[1];
                self.uses[c] == 1 && self.nodes[c].kind == OpKind::PlainConst
            }
            OpKind::Add | OpKind::Sub => {
                node.operands[0] != node.operands[1]
                    && node.operands.iter().all(|&o| self.can_raise(o, 1))
            }
            OpKind::Rotate { .. } => self.can_raise(node.operands[0], 1),
            _ => false,
        }
    }

    fn raise(&mut self, id: NodeId, diff: u32) {
        let kind = self.nodes[id].kind;
        let operands = self.nodes[id].operands.clone();
        match kind {
            OpKind::PlainConst => self.note_raise(id, diff),
            OpKind::MulPlain => {
                self.nodes[operands[1]].scale_bits += diff;
                self.note_raise(operands[1], diff);
            }
            OpKind::Add | OpKind::Sub => {
                for o in operands {
                    self.raise(o, diff);
                }
            }
            OpKind::Rotate { .. } => self.raise(operands[0], diff),
            _ => unreachable!("checked by can_raise"),
        }
        self.nodes[id].scale_bits += diff;
    }

    fn note_raise(&mut self, id: NodeId, diff: u32) {
        if let Some(p) = self.nodes[id].plain.as_deref_mut() {
            p.raised_bits += diff;
        }
    }

    pub fn finish(self) -> Ddg {
        Ddg {
            prime_bits: self.prime_bits,
            input_scale_bits: self.input_scale_bits,
            slots: self.slots,
            outputs: self.outputs,
            nodes: self.nodes,
            masks: self.masks,
            tails: self.tails,
            layer_labels: self.layer_labels,
        }
    }
}
