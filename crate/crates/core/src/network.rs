//! Network description language for HE inference candidates.
//!
//! A [`NetworkSpec`] is an ordered list of layers over a `(C, H, W)` input.
//! Mobile modules (fire and inception) are the replaceable blocks used by the
//! architecture search; [`replace_module`] swaps one of them for a single
//! 3x3 convolution with the same channel signature.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fixed::Decimal;

/// Kernel size used when a mobile module is replaced by a regular convolution.
pub const REPLACEMENT_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error{}: {message}", fmt_layer(*.layer))]
    Schema {
        layer: Option<usize>,
        message: String,
    },
    #[error("block {index} is not a mobile module")]
    NotMobileModule { index: usize },
    #[error("domain error: {0}")]
    Domain(String),
}

fn fmt_layer(layer: Option<usize>) -> String {
    layer.map(|l| format!(" in layer {l}")).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; the output shrinks by `kernel - 1`.
    #[default]
    Valid,
    /// Zero padding of `(kernel - 1) / 2`; odd kernels only.
    Same,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_valid(p: &Padding) -> bool {
    *p == Padding::Valid
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_valid")]
    pub padding: Padding,
}

/// Squeeze 1x1 (I -> C) followed by parallel 1x1 (C -> O0) and 3x3 (C -> O1)
/// expansions whose outputs are concatenated. Same padding throughout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FireSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub fire_squeeze: usize,
    pub fire_expand1: usize,
    pub fire_expand3: usize,
    /// `a*y^2 + b*y + c` applied to the squeeze output. None by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_act_coeffs: Option<[Decimal; 3]>,
}

/// Four branches: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 average pool -> 1x1.
/// Same padding throughout, outputs concatenated in branch order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub inception_branch_channels: [usize; 4],
    /// Width of the 1x1 reductions ahead of the 3x3 and 5x5 branches.
    /// Defaults to half of the respective branch output (at least 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inception_reduce_channels: Option<[usize; 2]>,
    /// Activation applied to both 1x1 reductions. None by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_act_coeffs: Option<[Decimal; 3]>,
}

impl InceptionSpec {
    pub fn reduce_channels(&self) -> [usize; 2] {
        self.inception_reduce_channels.unwrap_or([
            (self.inception_branch_channels[1] / 2).max(1),
            (self.inception_branch_channels[2] / 2).max(1),
        ])
    }
}

/// `a*y^2 + b*y + c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    pub act_coeffs: [Decimal; 3],
}

/// Per-channel statistics; a single-element list broadcasts to every channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnStats {
    pub gamma: Vec<Decimal>,
    pub beta: Vec<Decimal>,
    pub mu: Vec<Decimal>,
    pub sigma_sq: Vec<Decimal>,
    pub epsilon: Decimal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormSpec {
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    pub bn_stats: BnStats,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default)]
    pub kernel: usize,
    /// Defaults to `kernel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Average over the whole remaining spatial extent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub global: bool,
}

impl PoolSpec {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    /// Flattened input features, `C * H * W`.
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2D(ConvSpec),
    FireModule(FireSpec),
    InceptionModule(InceptionSpec),
    PolyActivation(ActivationSpec),
    BatchNorm(BatchNormSpec),
    AvgPool(PoolSpec),
    Dense(DenseSpec),
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D(_) => "Conv2D",
            LayerSpec::FireModule(_) => "FireModule",
            LayerSpec::InceptionModule(_) => "InceptionModule",
            LayerSpec::PolyActivation(_) => "PolyActivation",
            LayerSpec::BatchNorm(_) => "BatchNorm",
            LayerSpec::AvgPool(_) => "AvgPool",
            LayerSpec::Dense(_) => "Dense",
        }
    }

    pub fn is_mobile_module(&self) -> bool {
        matches!(
            self,
            LayerSpec::FireModule(_) | LayerSpec::InceptionModule(_)
        )
    }

    pub fn in_channels(&self) -> usize {
        match self {
            LayerSpec::Conv2D(l) => l.in_channels,
            LayerSpec::FireModule(l) => l.in_channels,
            LayerSpec::InceptionModule(l) => l.in_channels,
            LayerSpec::PolyActivation(l) => l.in_channels,
            LayerSpec::BatchNorm(l) => l.in_channels,
            LayerSpec::AvgPool(l) => l.in_channels,
            LayerSpec::Dense(l) => l.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            LayerSpec::Conv2D(l) => l.out_channels,
            LayerSpec::FireModule(l) => l.out_channels,
            LayerSpec::InceptionModule(l) => l.out_channels,
            LayerSpec::PolyActivation(l) => l.out_channels,
            LayerSpec::BatchNorm(l) => l.out_channels,
            LayerSpec::AvgPool(l) => l.out_channels,
            LayerSpec::Dense(l) => l.out_channels,
        }
    }

    /// Number of sequential HE layers this entry lowers to. Activations and
    /// batch norm are folded into the preceding layer's tail.
    pub fn lowered_layers(&self) -> usize {
        match self {
            LayerSpec::Conv2D(_) | LayerSpec::AvgPool(_) | LayerSpec::Dense(_) => 1,
            LayerSpec::FireModule(_) | LayerSpec::InceptionModule(_) => 2,
            LayerSpec::PolyActivation(_) | LayerSpec::BatchNorm(_) => 0,
        }
    }

    /// Channel-preserving layers whose channel fields may be left out of a document.
    fn inherits_channels(&self) -> bool {
        matches!(
            self,
            LayerSpec::PolyActivation(_) | LayerSpec::BatchNorm(_) | LayerSpec::AvgPool(_)
        )
    }

    fn set_channels(&mut self, c: usize) {
        match self {
            LayerSpec::PolyActivation(l) => {
                l.in_channels = c;
                l.out_channels = c;
            }
            LayerSpec::BatchNorm(l) => {
                l.in_channels = c;
                l.out_channels = c;
            }
            LayerSpec::AvgPool(l) => {
                l.in_channels = c;
                l.out_channels = c;
            }
            _ => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Layer positions (0-based) of the replaceable blocks; block `i` (1-based)
    /// is `layers[block_indices[i - 1]]`. Defaults to every mobile module.
    #[serde(default)]
    pub block_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl NetworkSpec {
    pub fn input(&self) -> Shape {
        let [c, h, w] = self.input_shape;
        Shape { c, h, w }
    }

    /// Number of replaceable blocks `n`.
    pub fn block_count(&self) -> usize {
        self.block_indices.len()
    }

    /// Sequential HE layer count after lowering (pools and dense included).
    pub fn lowered_layer_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::lowered_layers).sum()
    }

    /// 1-based block numbers whose layer is still a mobile module.
    pub fn mobile_blocks(&self) -> Vec<usize> {
        self.block_indices
            .iter()
            .enumerate()
            .filter(|(_, &pos)| {
                self.layers
                    .get(pos)
                    .is_some_and(LayerSpec::is_mobile_module)
            })
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Shape after every layer, or the first violation.
    pub fn shapes(&self) -> Result<Vec<Shape>, Violation> {
        let mut cur = self.input();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = output_shape(idx, layer, cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape, Violation> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationCode {
    ZeroDimension,
    ChannelMismatch,
    FireExpandSum,
    FireSqueezeWidth,
    InceptionBranchSum,
    KernelTooLarge,
    EvenKernelSamePadding,
    StrideMismatch,
    PoolWindow,
    DenseInput,
    BatchNormLength,
    BadBlockIndex,
    DuplicateBlockIndex,
    EmptyNetwork,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub layer: Option<usize>,
    pub code: ViolationCode,
    pub message: String,
}

impl Violation {
    fn new(layer: Option<usize>, code: ViolationCode, message: impl Into<String>) -> Self {
        Violation {
            layer,
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {:?}: {}", self.code, self.message),
            None => write!(f, "{:?}: {}", self.code, self.message),
        }
    }
}

/// Checks that depend on nothing but the layer itself.
fn local_violations(idx: usize, layer: &LayerSpec) -> Vec<Violation> {
    use ViolationCode::*;
    let at = Some(idx);
    let mut v = Vec::new();
    let positive = |name: &str, value: usize, v: &mut Vec<Violation>| {
        if value == 0 {
            v.push(Violation::new(
                at,
                ZeroDimension,
                format!("{name} must be >= 1"),
            ));
        }
    };
    positive("in_channels", layer.in_channels(), &mut v);
    positive("out_channels", layer.out_channels(), &mut v);
    match layer {
        LayerSpec::Conv2D(c) => {
            positive("kernel", c.kernel, &mut v);
            positive("stride", c.stride, &mut v);
            if c.padding == Padding::Same && c.kernel % 2 == 0 {
                v.push(Violation::new(
                    at,
                    EvenKernelSamePadding,
                    format!("same padding needs an odd kernel, got {}", c.kernel),
                ));
            }
        }
        LayerSpec::FireModule(f) => {
            positive("fire_squeeze", f.fire_squeeze, &mut v);
            if f.fire_expand1 + f.fire_expand3 != f.out_channels {
                v.push(Violation::new(
                    at,
                    FireExpandSum,
                    format!(
                        "fire_expand1 + fire_expand3 = {} but out_channels = {}",
                        f.fire_expand1 + f.fire_expand3,
                        f.out_channels
                    ),
                ));
            }
        }
        LayerSpec::InceptionModule(m) => {
            let sum: usize = m.inception_branch_channels.iter().sum();
            if sum != m.out_channels {
                v.push(Violation::new(
                    at,
                    InceptionBranchSum,
                    format!(
                        "branch channels sum to {sum} but out_channels = {}",
                        m.out_channels
                    ),
                ));
            }
            if let Some([r1, r2]) = m.inception_reduce_channels {
                positive("inception_reduce_channels[0]", r1, &mut v);
                positive("inception_reduce_channels[1]", r2, &mut v);
            }
        }
        LayerSpec::PolyActivation(a) => {
            if a.in_channels != a.out_channels {
                v.push(Violation::new(
                    at,
                    ChannelMismatch,
                    "activation must preserve channels",
                ));
            }
        }
        LayerSpec::BatchNorm(b) => {
            if b.in_channels != b.out_channels {
                v.push(Violation::new(
                    at,
                    ChannelMismatch,
                    "batch norm must preserve channels",
                ));
            }
            let s = &b.bn_stats;
            for (name, list) in [
                ("gamma", &s.gamma),
                ("beta", &s.beta),
                ("mu", &s.mu),
                ("sigma_sq", &s.sigma_sq),
            ] {
                if list.len() != 1 && list.len() != b.out_channels {
                    v.push(Violation::new(
                        at,
                        BatchNormLength,
                        format!(
                            "{name} has {} entries for {} channels",
                            list.len(),
                            b.out_channels
                        ),
                    ));
                }
            }
        }
        LayerSpec::AvgPool(p) => {
            if p.in_channels != p.out_channels {
                v.push(Violation::new(
                    at,
                    ChannelMismatch,
                    "pooling must preserve channels",
                ));
            }
            if !p.global {
                positive("kernel", p.kernel, &mut v);
                positive("stride", p.stride(), &mut v);
                if p.kernel > p.stride() {
                    v.push(Violation::new(
                        at,
                        PoolWindow,
                        format!("kernel {} exceeds stride {}", p.kernel, p.stride()),
                    ));
                }
            }
        }
        LayerSpec::Dense(_) => {}
    }
    v
}

fn output_shape(idx: usize, layer: &LayerSpec, input: Shape) -> Result<Shape, Violation> {
    use ViolationCode::*;
    let at = Some(idx);
    let expect_in = match layer {
        LayerSpec::Dense(_) => input.c * input.h * input.w,
        _ => input.c,
    };
    if layer.in_channels() != expect_in {
        let code = if matches!(layer, LayerSpec::Dense(_)) {
            DenseInput
        } else {
            ChannelMismatch
        };
        return Err(Violation::new(
            at,
            code,
            format!(
                "in_channels = {} but the incoming tensor provides {expect_in}",
                layer.in_channels()
            ),
        ));
    }
    let c = layer.out_channels();
    match layer {
        LayerSpec::Conv2D(conv) => {
            let (k, s) = (conv.kernel.max(1), conv.stride.max(1));
            let (h, w) = match conv.padding {
                Padding::Valid => {
                    if input.h < k || input.w < k {
                        return Err(Violation::new(
                            at,
                            KernelTooLarge,
                            format!("kernel {k} does not fit a {}x{} input", input.h, input.w),
                        ));
                    }
                    if !(input.h - k).is_multiple_of(s) || !(input.w - k).is_multiple_of(s) {
                        return Err(Violation::new(
                            at,
                            StrideMismatch,
                            format!("stride {s} does not tile a {}x{} input", input.h, input.w),
                        ));
                    }
                    ((input.h - k) / s + 1, (input.w - k) / s + 1)
                }
                Padding::Same => {
                    if !input.h.is_multiple_of(s) || !input.w.is_multiple_of(s) {
                        return Err(Violation::new(
                            at,
                            StrideMismatch,
                            format!("stride {s} does not divide {}x{}", input.h, input.w),
                        ));
                    }
                    (input.h / s, input.w / s)
                }
            };
            Ok(Shape { c, h, w })
        }
        LayerSpec::FireModule(_) | LayerSpec::InceptionModule(_) => Ok(Shape { c, ..input }),
        LayerSpec::PolyActivation(_) | LayerSpec::BatchNorm(_) => Ok(Shape { c, ..input }),
        LayerSpec::AvgPool(p) => {
            if p.global {
                return Ok(Shape { c, h: 1, w: 1 });
            }
            let s = p.stride().max(1);
            if !input.h.is_multiple_of(s) || !input.w.is_multiple_of(s) {
                return Err(Violation::new(
                    at,
                    StrideMismatch,
                    format!("pool stride {s} does not divide {}x{}", input.h, input.w),
                ));
            }
            Ok(Shape {
                c,
                h: input.h / s,
                w: input.w / s,
            })
        }
        LayerSpec::Dense(_) => Ok(Shape { c, h: 1, w: 1 }),
    }
}

/// Every invariant violation of `spec`; empty iff the spec is well formed.
pub fn validate_network(spec: &NetworkSpec) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    if spec.input_shape.contains(&0) {
        out.push(Violation::new(
            None,
            ZeroDimension,
            "input_shape entries must be >= 1",
        ));
        return out;
    }
    for (idx, layer) in spec.layers.iter().enumerate() {
        out.extend(local_violations(idx, layer));
    }
    // Shape threading continues past a mismatch using the declared channels so
    // that one bad layer produces one violation.
    let mut cur = spec.input();
    for (idx, layer) in spec.layers.iter().enumerate() {
        match output_shape(idx, layer, cur) {
            Ok(next) => cur = next,
            Err(v) => {
                let recover = v.code == ChannelMismatch || v.code == DenseInput;
                out.push(v);
                if !recover {
                    break;
                }
                let fixed = match layer {
                    LayerSpec::Dense(d) => Shape {
                        c: d.out_channels,
                        h: 1,
                        w: 1,
                    },
                    other => {
                        let probe = Shape {
                            c: other.in_channels(),
                            ..cur
                        };
                        match output_shape(idx, other, probe) {
                            Ok(s) => s,
                            Err(v) => {
                                out.push(v);
                                break;
                            }
                        }
                    }
                };
                cur = fixed;
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for &pos in &spec.block_indices {
        if !seen.insert(pos) {
            out.push(Violation::new(
                None,
                DuplicateBlockIndex,
                format!("block index {pos} repeated"),
            ));
        }
        match spec.layers.get(pos) {
            Some(l) if l.is_mobile_module() => {}
            // a block already replaced by its 3x3 convolution
            Some(LayerSpec::Conv2D(c)) if c.kernel == REPLACEMENT_KERNEL => {}
            _ => out.push(Violation::new(
                Some(pos),
                BadBlockIndex,
                format!("block index {pos} does not name a mobile module"),
            )),
        }
    }
    if spec.block_indices.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation::new(
            None,
            BadBlockIndex,
            "block indices must be increasing",
        ));
    }
    out
}

/// Parses a JSON network document, fills documented defaults and rejects
/// per-layer invariant violations.
pub fn parse_network(text: &str) -> Result<NetworkSpec, NetworkError> {
    let mut spec: NetworkSpec = serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        if e.is_data() {
            NetworkError::Schema {
                layer: None,
                message,
            }
        } else {
            NetworkError::Parse {
                line: e.line(),
                column: e.column(),
                message,
            }
        }
    })?;
    let mut channels = spec.input_shape[0];
    for layer in &mut spec.layers {
        if layer.inherits_channels() && layer.in_channels() == 0 && layer.out_channels() == 0 {
            layer.set_channels(channels);
        }
        channels = match layer {
            LayerSpec::Dense(d) => d.out_channels,
            other => other.out_channels(),
        };
    }
    if spec.block_indices.is_empty() {
        spec.block_indices = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_mobile_module())
            .map(|(i, _)| i)
            .collect();
    }
    if let Some(v) = spec
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| local_violations(i, l))
        .next()
    {
        return Err(NetworkError::Schema {
            layer: v.layer,
            message: v.message,
        });
    }
    Ok(spec)
}

pub fn serialize_network(spec: &NetworkSpec) -> String {
    serde_json::to_string_pretty(spec).expect("network specs always serialize")
}

/// Replaces block `index` (1-based) with a 3x3 same-padded convolution of
/// identical channel signature.
pub fn replace_module(spec: &NetworkSpec, index: usize) -> Result<NetworkSpec, NetworkError> {
    let pos = index
        .checked_sub(1)
        .and_then(|i| spec.block_indices.get(i))
        .copied()
        .ok_or(NetworkError::NotMobileModule { index })?;
    let layer = spec
        .layers
        .get(pos)
        .filter(|l| l.is_mobile_module())
        .ok_or(NetworkError::NotMobileModule { index })?;
    let conv = LayerSpec::Conv2D(ConvSpec {
        in_channels: layer.in_channels(),
        out_channels: layer.out_channels(),
        kernel: REPLACEMENT_KERNEL,
        stride: 1,
        padding: Padding::Same,
    });
    let mut out = spec.clone();
    out.layers[pos] = conv;
    Ok(out)
}

/// `y*d + e` form of a batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldedBn {
    pub d: f64,
    pub e: f64,
}

impl FoldedBn {
    pub const IDENTITY: FoldedBn = FoldedBn { d: 1.0, e: 0.0 };
}

pub fn fold_batchnorm(
    gamma: f64,
    beta: f64,
    mu: f64,
    sigma_sq: f64,
    epsilon: f64,
) -> Result<FoldedBn, NetworkError> {
    let var = sigma_sq + epsilon;
    if var.is_nan() || var <= 0.0 {
        return Err(NetworkError::Domain(format!(
            "sigma_sq + epsilon must be positive, got {var}"
        )));
    }
    let inv_std = var.sqrt().recip();
    Ok(FoldedBn {
        d: gamma * inv_std,
        e: beta - gamma * mu * inv_std,
    })
}

impl BatchNormSpec {
    /// Folded coefficients for each of `channels` channels.
    pub fn fold(&self, channels: usize) -> Result<Vec<FoldedBn>, NetworkError> {
        let s = &self.bn_stats;
        let pick = |list: &[Decimal], c: usize| -> Result<f64, NetworkError> {
            match list.len() {
                1 => Ok(list[0].to_f64()),
                n if n == channels => Ok(list[c].to_f64()),
                n => Err(NetworkError::Domain(format!(
                    "batch-norm list of {n} entries for {channels} channels"
                ))),
            }
        };
        (0..channels)
            .map(|c| {
                fold_batchnorm(
                    pick(&s.gamma, c)?,
                    pick(&s.beta, c)?,
                    pick(&s.mu, c)?,
                    pick(&s.sigma_sq, c)?,
                    s.epsilon.to_f64(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec(s: &str) -> Decimal {
        s.parse().unwrap()
    }

    fn fire(i: usize, c: usize, o0: usize, o1: usize) -> LayerSpec {
        LayerSpec::FireModule(FireSpec {
            in_channels: i,
            out_channels: o0 + o1,
            fire_squeeze: c,
            fire_expand1: o0,
            fire_expand3: o1,
            inner_act_coeffs: None,
        })
    }

    #[test]
    fn parses_minimal_document() {
        let text = r#"{
            "name": "tiny",
            "input_shape": [3, 32, 32],
            "layers": [
                {"kind": "Conv2D", "in_channels": 3, "out_channels": 64, "kernel": 3},
                {"kind": "PolyActivation", "act_coeffs": ["0.1", "1", "0"]},
                {"kind": "AvgPool", "kernel": 2}
            ]
        }"#;
        let spec = parse_network(text).unwrap();
        assert_eq!(spec.layers.len(), 3);
        assert_eq!(spec.input(), Shape { c: 3, h: 32, w: 32 });
        match &spec.layers[0] {
            LayerSpec::Conv2D(c) => {
                assert_eq!(c.stride, 1);
                assert_eq!(c.padding, Padding::Valid);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(spec.layers[1].in_channels(), 64);
        assert_eq!(spec.layers[2].out_channels(), 64);
        assert!(validate_network(&spec).is_empty());
        assert_eq!(
            spec.output_shape().unwrap(),
            Shape {
                c: 64,
                h: 15,
                w: 15
            }
        );
    }

    #[test]
    fn fire_expand_mismatch_is_schema_error() {
        let text = r#"{"name": "bad", "input_shape": [64, 8, 8], "layers": [
            {"kind": "FireModule", "in_channels": 64, "out_channels": 200,
             "fire_squeeze": 32, "fire_expand1": 128, "fire_expand3": 128}]}"#;
        match parse_network(text) {
            Err(NetworkError::Schema { layer: Some(0), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_kind_is_schema_error() {
        let text = r#"{"name": "x", "input_shape": [1, 4, 4], "layers": [{"kind": "MaxPool", "kernel": 2}]}"#;
        assert!(matches!(
            parse_network(text),
            Err(NetworkError::Schema { .. })
        ));
    }

    #[test]
    fn malformed_json_reports_position() {
        let text = "{\n  \"name\": \"x\",\n  \"input_shape\": [1, 2,\n}";
        match parse_network(text) {
            Err(NetworkError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_one_violation() {
        let spec = NetworkSpec {
            name: "mismatch".into(),
            input_shape: [3, 8, 8],
            layers: vec![
                LayerSpec::Conv2D(ConvSpec {
                    in_channels: 3,
                    out_channels: 64,
                    kernel: 1,
                    stride: 1,
                    padding: Padding::Valid,
                }),
                LayerSpec::Conv2D(ConvSpec {
                    in_channels: 128,
                    out_channels: 8,
                    kernel: 1,
                    stride: 1,
                    padding: Padding::Valid,
                }),
            ],
            block_indices: vec![],
            notes: None,
        };
        let report = validate_network(&spec);
        assert_eq!(report.len(), 1, "{report:?}");
        assert_eq!(report[0].code, ViolationCode::ChannelMismatch);
        assert_eq!(report[0].layer, Some(1));
    }

    #[test]
    fn fire_with_256_outputs_is_valid() {
        let spec = NetworkSpec {
            name: "f3".into(),
            input_shape: [64, 8, 8],
            layers: vec![fire(64, 32, 128, 128)],
            block_indices: vec![0],
            notes: None,
        };
        assert!(validate_network(&spec).is_empty());
    }

    #[test]
    fn replacement_keeps_channel_signature() {
        for (i, c) in [(128, 32), (64, 32)] {
            let spec = NetworkSpec {
                name: "r".into(),
                input_shape: [i, 8, 8],
                layers: vec![fire(i, c, 128, 128)],
                block_indices: vec![0],
                notes: None,
            };
            let out = replace_module(&spec, 1).unwrap();
            assert_eq!(
                out.layers[0],
                LayerSpec::Conv2D(ConvSpec {
                    in_channels: i,
                    out_channels: 256,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                })
            );
            assert!(validate_network(&out).is_empty());
            assert_eq!(
                replace_module(&out, 1),
                Err(NetworkError::NotMobileModule { index: 1 })
            );
        }
    }

    #[test]
    fn replace_rejects_out_of_range() {
        let spec = NetworkSpec {
            name: "r".into(),
            input_shape: [8, 4, 4],
            layers: vec![fire(8, 2, 4, 4)],
            block_indices: vec![0],
            notes: None,
        };
        assert!(replace_module(&spec, 0).is_err());
        assert!(replace_module(&spec, 2).is_err());
    }

    #[test]
    fn fold_batchnorm_examples() {
        assert_eq!(
            fold_batchnorm(1.0, 0.0, 0.0, 1.0, 0.0).unwrap(),
            FoldedBn { d: 1.0, e: 0.0 }
        );
        assert_eq!(
            fold_batchnorm(2.0, 1.0, 3.0, 4.0, 0.0).unwrap(),
            FoldedBn { d: 1.0, e: -2.0 }
        );
        let f = fold_batchnorm(1.0, 0.0, 0.0, 0.0, 1e-4).unwrap();
        assert!((f.d - 100.0).abs() < 1e-9);
        assert_eq!(f.e, 0.0);
        assert!(matches!(
            fold_batchnorm(1.0, 0.0, 0.0, 0.0, 0.0),
            Err(NetworkError::Domain(_))
        ));
        assert!(matches!(
            fold_batchnorm(1.0, 0.0, 0.0, -1.0, 0.5),
            Err(NetworkError::Domain(_))
        ));
    }

    #[test]
    fn batchnorm_broadcasts_single_entries() {
        let bn = BatchNormSpec {
            in_channels: 2,
            out_channels: 2,
            bn_stats: BnStats {
                gamma: vec![dec("2"), dec("4")],
                beta: vec![dec("1")],
                mu: vec![dec("3")],
                sigma_sq: vec![dec("4")],
                epsilon: dec("0"),
            },
        };
        let folded = bn.fold(2).unwrap();
        assert_eq!(folded[0], FoldedBn { d: 1.0, e: -2.0 });
        assert_eq!(folded[1], FoldedBn { d: 2.0, e: -5.0 });
    }

    #[test]
    fn pool_divisibility_is_checked() {
        let spec = NetworkSpec {
            name: "p".into(),
            input_shape: [1, 5, 5],
            layers: vec![LayerSpec::AvgPool(PoolSpec {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: None,
                global: false,
            })],
            block_indices: vec![],
            notes: None,
        };
        let report = validate_network(&spec);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].code, ViolationCode::StrideMismatch);
    }
}
