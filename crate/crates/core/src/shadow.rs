//! Plaintext execution of graphs and a dense float reference.
//!
//! Graphs run either in exact rational arithmetic (rescales are exact
//! divisions and cancel out) or on integer mantissas that emulate the
//! fixed-point behaviour of CKKS: values are encoded at their node's scale,
//! products multiply mantissas, and rescales divide by `2^prime_bits` with
//! round-half-even.

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::ddg::{Ddg, DdgError, NodeId, OpKind};
use crate::fixed::Decimal;
use crate::fixed::{
    div_round_half_even, pow2, quantize, rational_from_f64, rational_to_f64, Rational,
};
use crate::lowering::CiphertextLayout;
use crate::network::{LayerSpec, NetworkSpec, Padding};
use crate::weights::{Tensor, Weights, WeightsError};

/// Largest integer part a mantissa may carry, in bits.
pub const MAX_INTEGER_BITS: u64 = 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShadowError {
    #[error("expected {expected} input vectors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {index} has {got} slots, graph has {expected}")]
    InputLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error(
        "node {node}: value exceeds {MAX_INTEGER_BITS}-bit integer range at scale {scale_bits}"
    )]
    Overflow { node: NodeId, scale_bits: u32 },
    #[error("node {node}: plaintext has no bound value")]
    Unbound { node: NodeId },
    #[error("input value is not finite")]
    NonFinite,
    #[error("reference: {0}")]
    Reference(String),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Graph(#[from] DdgError),
}

/// Decoded slot values of one output node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotVector {
    pub node: NodeId,
    pub scale_bits: u32,
    pub values: Vec<f64>,
}

enum Slots {
    Exact(Vec<Rational>),
    Fixed(Vec<BigInt>),
}

/// Runs `graph` on one slot vector per cipher input (in node order).
pub fn eval_ddg(
    graph: &Ddg,
    inputs: &[Vec<f64>],
    mode: EvalMode,
) -> Result<Vec<SlotVector>, ShadowError> {
    let n_inputs = graph.cipher_inputs().count();
    if inputs.len() != n_inputs {
        return Err(ShadowError::InputCount {
            expected: n_inputs,
            got: inputs.len(),
        });
    }
    for (index, v) in inputs.iter().enumerate() {
        if v.len() != graph.slots {
            return Err(ShadowError::InputLength {
                index,
                expected: graph.slots,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ShadowError::NonFinite);
        }
    }
    let order = graph.topo_order()?;
    // free values after their last consumer
    let mut remaining = graph.use_counts();
    let mut values: Vec<Option<Slots>> = (0..graph.len()).map(|_| None).collect();
    let mut next_input = 0;
    let slots = graph.slots;
    let mut outputs = Vec::with_capacity(graph.outputs.len());
    for id in order {
        let node = graph.node(id);
        let scale = node.scale_bits;
        let value = match node.kind {
            OpKind::CipherInput => {
                let raw = &inputs[next_input];
                next_input += 1;
                let exact: Vec<Rational> = raw.iter().map(|&v| rational_from_f64(v)).collect();
                encode(exact, scale, mode)
            }
            OpKind::PlainConst => {
                let payload = node
                    .plain
                    .as_deref()
                    .ok_or(ShadowError::Unbound { node: id })?;
                let exact = graph
                    .plain_slots(&payload.value)
                    .ok_or(ShadowError::Unbound { node: id })?;
                encode(exact, scale, mode)
            }
            OpKind::Add | OpKind::Sub | OpKind::MulPlain | OpKind::MulCipher => {
                let sub = node.kind == OpKind::Sub;
                let mul = node.kind.is_multiplication();
                match (
                    operand(&values, node.operands[0]),
                    operand(&values, node.operands[1]),
                ) {
                    (Slots::Exact(x), Slots::Exact(y)) => Slots::Exact(
                        x.iter()
                            .zip(y)
                            .map(|(a, b)| {
                                if mul {
                                    a * b
                                } else if sub {
                                    a - b
                                } else {
                                    a + b
                                }
                            })
                            .collect(),
                    ),
                    (Slots::Fixed(x), Slots::Fixed(y)) => Slots::Fixed(
                        x.iter()
                            .zip(y)
                            .map(|(a, b)| {
                                if mul {
                                    a * b
                                } else if sub {
                                    a - b
                                } else {
                                    a + b
                                }
                            })
                            .collect(),
                    ),
                    _ => unreachable!("one mode per run"),
                }
            }
            OpKind::Rotate { offset } => {
                let s = offset.rem_euclid(slots as i64) as usize;
                match operand(&values, node.operands[0]) {
                    Slots::Exact(x) => {
                        Slots::Exact((0..slots).map(|i| x[(i + s) % slots].clone()).collect())
                    }
                    Slots::Fixed(x) => {
                        Slots::Fixed((0..slots).map(|i| x[(i + s) % slots].clone()).collect())
                    }
                }
            }
            OpKind::Rescale => match operand(&values, node.operands[0]) {
                Slots::Exact(x) => Slots::Exact(x.clone()),
                Slots::Fixed(x) => {
                    let p = pow2(graph.prime_bits);
                    Slots::Fixed(x.iter().map(|m| div_round_half_even(m, &p)).collect())
                }
            },
            OpKind::Output => match operand(&values, node.operands[0]) {
                Slots::Exact(x) => Slots::Exact(x.clone()),
                Slots::Fixed(x) => Slots::Fixed(x.clone()),
            },
        };
        if let Slots::Fixed(m) = &value {
            let limit = u64::from(scale) + MAX_INTEGER_BITS;
            if m.iter().any(|v| v.bits() > limit) {
                return Err(ShadowError::Overflow {
                    node: id,
                    scale_bits: scale,
                });
            }
        }
        for &o in &node.operands {
            remaining[o] -= 1;
            if remaining[o] == 0 {
                values[o] = None;
            }
        }
        if node.kind == OpKind::Output {
            let decoded = match &value {
                Slots::Exact(x) => x.iter().map(rational_to_f64).collect(),
                Slots::Fixed(x) => {
                    let d = Rational::from_integer(pow2(scale));
                    x.iter()
                        .map(|m| rational_to_f64(&(Rational::from_integer(m.clone()) / &d)))
                        .collect()
                }
            };
            outputs.push((
                id,
                SlotVector {
                    node: id,
                    scale_bits: scale,
                    values: decoded,
                },
            ));
        }
        values[id] = Some(value);
    }
    // report in the graph's output order
    Ok(graph
        .outputs
        .iter()
        .filter_map(|o| {
            outputs
                .iter()
                .find(|(id, _)| id == o)
                .map(|(_, v)| v.clone())
        })
        .collect())
}

fn operand(values: &[Option<Slots>], id: NodeId) -> &Slots {
    values[id].as_ref().expect("operands are evaluated first")
}

fn encode(exact: Vec<Rational>, scale: u32, mode: EvalMode) -> Slots {
    match mode {
        EvalMode::Exact => Slots::Exact(exact),
        EvalMode::Quantized => Slots::Fixed(exact.iter().map(|v| quantize(v, scale)).collect()),
    }
}

/// Packs a `C x H x W` tensor (row-major) into one slot vector per channel.
pub fn pack_input(layout: &CiphertextLayout, data: &[f64]) -> Vec<Vec<f64>> {
    let per = layout.height * layout.width;
    let valid = layout.valid_slots();
    (0..layout.channels)
        .map(|c| {
            let mut v = vec![0.0; layout.slots()];
            for (p, &s) in valid.iter().enumerate() {
                v[s] = data[c * per + p];
            }
            v
        })
        .collect()
}

/// Reads the logical tensor back out of per-channel output slots.
pub fn unpack_output(layout: &CiphertextLayout, outputs: &[SlotVector]) -> Vec<f64> {
    let valid = layout.valid_slots();
    outputs
        .iter()
        .flat_map(|o| valid.iter().map(move |&s| o.values[s]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_abs_err: f64,
    /// `max_abs_err` over the largest reference magnitude.
    pub max_rel_err: f64,
    pub per_output_err: Vec<f64>,
    pub tol_rel: f64,
    pub passed: bool,
}

/// Compares decoded outputs (valid slots only) with reference values.
/// `outputs` holds one tensor per channel, already restricted to valid slots.
pub fn compare_outputs(
    got: &[f64],
    reference: &[f64],
    per_output: usize,
    tol_rel: f64,
) -> EvalReport {
    let per_output = per_output.max(1);
    let mut max_abs = 0.0f64;
    let mut per_output_err = Vec::new();
    for (g, r) in got.chunks(per_output).zip(reference.chunks(per_output)) {
        let e = g
            .iter()
            .zip(r)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        per_output_err.push(e);
        max_abs = max_abs.max(e);
    }
    if got.len() != reference.len() {
        max_abs = f64::INFINITY;
    }
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let max_rel = if scale > 0.0 {
        max_abs / scale
    } else {
        max_abs
    };
    EvalReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        per_output_err,
        tol_rel,
        passed: max_rel <= tol_rel,
    }
}

/// Dense evaluation of `spec` on a `C x H x W` input in `f64`.
pub fn eval_reference(
    spec: &NetworkSpec,
    weights: &Weights,
    input: &[f64],
) -> Result<Vec<f64>, ShadowError> {
    weights.check(spec)?;
    let s = spec.input();
    if input.len() != s.c * s.h * s.w {
        return Err(ShadowError::Reference(format!(
            "input has {} values, expected {}",
            input.len(),
            s.c * s.h * s.w
        )));
    }
    let mut t = Dense {
        c: s.c,
        h: s.h,
        w: s.w,
        data: input.to_vec(),
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        let get = |name: &str| weights.get(i, name).expect("checked above");
        t = match layer {
            LayerSpec::Conv2D(c) => conv(&t, get("filter"), c.stride, c.padding),
            LayerSpec::FireModule(f) => {
                let sq = inner_act(
                    conv(&t, get("squeeze"), 1, Padding::Same),
                    &f.inner_act_coeffs,
                );
                let e1 = conv(&sq, get("expand1"), 1, Padding::Same);
                let e3 = conv(&sq, get("expand3"), 1, Padding::Same);
                concat(vec![e1, e3])
            }
            LayerSpec::InceptionModule(m) => {
                let b0 = conv(&t, get("b0"), 1, Padding::Same);
                let r1 = inner_act(
                    conv(&t, get("b1_reduce"), 1, Padding::Same),
                    &m.inner_act_coeffs,
                );
                let b1 = conv(&r1, get("b1"), 1, Padding::Same);
                let r2 = inner_act(
                    conv(&t, get("b2_reduce"), 1, Padding::Same),
                    &m.inner_act_coeffs,
                );
                let b2 = conv(&r2, get("b2"), 1, Padding::Same);
                let b3 = conv(&pool3_same(&t), get("b3"), 1, Padding::Same);
                concat(vec![b0, b1, b2, b3])
            }
            LayerSpec::PolyActivation(a) => {
                let [a, b, c] = [
                    a.act_coeffs[0].to_f64(),
                    a.act_coeffs[1].to_f64(),
                    a.act_coeffs[2].to_f64(),
                ];
                t.map(|_, v| a * v * v + b * v + c)
            }
            LayerSpec::BatchNorm(b) => {
                let folded = b
                    .fold(t.c)
                    .map_err(|e| ShadowError::Reference(e.to_string()))?;
                t.map(|ch, v| folded[ch].d * v + folded[ch].e)
            }
            LayerSpec::AvgPool(p) => {
                if p.global {
                    avg_pool(&t, t.h, t.w, t.h, t.w)
                } else {
                    avg_pool(&t, p.kernel, p.kernel, p.stride(), p.stride())
                }
            }
            LayerSpec::Dense(d) => {
                let w = get("weight");
                let data = (0..d.out_channels)
                    .map(|o| {
                        t.data
                            .iter()
                            .enumerate()
                            .map(|(k, v)| w.at(&[o, k]) * v)
                            .sum()
                    })
                    .collect();
                Dense {
                    c: d.out_channels,
                    h: 1,
                    w: 1,
                    data,
                }
            }
        };
    }
    Ok(t.data)
}

fn inner_act(t: Dense, coeffs: &Option<[Decimal; 3]>) -> Dense {
    match coeffs {
        None => t,
        Some(k) => {
            let [a, b, c] = [k[0].to_f64(), k[1].to_f64(), k[2].to_f64()];
            t.map(|_, v| a * v * v + b * v + c)
        }
    }
}

struct Dense {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Dense {
    fn at(&self, c: usize, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.h || y as usize >= self.w {
            return 0.0;
        }
        self.data[(c * self.h + x as usize) * self.w + y as usize]
    }

    fn map(self, f: impl Fn(usize, f64) -> f64) -> Dense {
        let per = self.h * self.w;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / per, v))
            .collect();
        Dense { data, ..self }
    }
}

fn conv(t: &Dense, filter: &Tensor, stride: usize, padding: Padding) -> Dense {
    let (out, inc, k) = (filter.shape[0], filter.shape[1], filter.shape[2]);
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Same => (k - 1) / 2,
    } as i64;
    let (oh, ow) = match padding {
        Padding::Valid => ((t.h - k) / stride + 1, (t.w - k) / stride + 1),
        Padding::Same => (t.h.div_ceil(stride), t.w.div_ceil(stride)),
    };
    let mut data = vec![0.0; out * oh * ow];
    for o in 0..out {
        for x in 0..oh {
            for y in 0..ow {
                let mut acc = 0.0;
                for c in 0..inc {
                    for i in 0..k {
                        for j in 0..k {
                            let sx = (x * stride + i) as i64 - pad;
                            let sy = (y * stride + j) as i64 - pad;
                            acc += filter.at(&[o, c, i, j]) * t.at(c, sx, sy);
                        }
                    }
                }
                data[(o * oh + x) * ow + y] = acc;
            }
        }
    }
    Dense {
        c: out,
        h: oh,
        w: ow,
        data,
    }
}

/// 3x3 stride-1 average, zero padded, divisor always 9.
fn pool3_same(t: &Dense) -> Dense {
    let mut data = vec![0.0; t.data.len()];
    for c in 0..t.c {
        for x in 0..t.h {
            for y in 0..t.w {
                let mut acc = 0.0;
                for i in -1..=1i64 {
                    for j in -1..=1i64 {
                        acc += t.at(c, x as i64 + i, y as i64 + j);
                    }
                }
                data[(c * t.h + x) * t.w + y] = acc / 9.0;
            }
        }
    }
    Dense { data, ..*t }
}

fn avg_pool(t: &Dense, kh: usize, kw: usize, sh: usize, sw: usize) -> Dense {
    let (oh, ow) = (t.h / sh, t.w / sw);
    let mut data = vec![0.0; t.c * oh * ow];
    for c in 0..t.c {
        for x in 0..oh {
            for y in 0..ow {
                let mut acc = 0.0;
                for i in 0..kh {
                    for j in 0..kw {
                        acc += t.at(c, (x * sh + i) as i64, (y * sw + j) as i64);
                    }
                }
                data[(c * oh + x) * ow + y] = acc / (kh * kw) as f64;
            }
        }
    }
    Dense {
        c: t.c,
        h: oh,
        w: ow,
        data,
    }
}

fn concat(parts: Vec<Dense>) -> Dense {
    let (h, w) = (parts[0].h, parts[0].w);
    let c = parts.iter().map(|p| p.c).sum();
    let data = parts.into_iter().flat_map(|p| p.data).collect();
    Dense { c, h, w, data }
}
