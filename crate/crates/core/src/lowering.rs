//! Network description to HE-operation graph under HW batching.
//!
//! Every channel is one ciphertext whose slots form the input image grid
//! `H0 x W0`. Downsampling layers keep values in place and record a gap:
//! logical position `(x, y)` lives in slot `x*gap*W0 + y*gap`. Slots outside
//! the logical grid hold garbage until masked.

use std::collections::{BTreeMap, HashSet};

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::ddg::{
    BlockTail, Ddg, DdgBuilder, NodeId, OpClass, PlainRole, PlainValue, SparseEntry,
    DEFAULT_PRIME_BITS,
};
use crate::fixed::{rational_from_f64, Decimal, Rational};
use crate::network::{
    validate_network, ActivationSpec, BatchNormSpec, ConvSpec, FireSpec, InceptionSpec, LayerSpec,
    NetworkError, NetworkSpec, Padding, PoolSpec, Violation,
};
use crate::weights::{Tensor, Weights, WeightsError};

/// Fixed-point scales (bits) used when encoding values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub input_scale_bits: u32,
    pub weight_scale_bits: u32,
    pub mask_scale_bits: u32,
    pub coeff_scale_bits: u32,
    pub prime_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            input_scale_bits: 25,
            weight_scale_bits: 15,
            mask_scale_bits: 15,
            coeff_scale_bits: 10,
            prime_bits: DEFAULT_PRIME_BITS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchingScheme {
    Hw,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiphertextLayout {
    pub scheme: BatchingScheme,
    /// Slot grid, fixed by the network input.
    pub slot_height: usize,
    pub slot_width: usize,
    /// Logical tensor extent.
    pub height: usize,
    pub width: usize,
    pub gap: usize,
    pub channels: usize,
}

impl CiphertextLayout {
    pub fn input(channels: usize, height: usize, width: usize) -> Self {
        CiphertextLayout {
            scheme: BatchingScheme::Hw,
            slot_height: height,
            slot_width: width,
            height,
            width,
            gap: 1,
            channels,
        }
    }

    pub fn slots(&self) -> usize {
        self.slot_height * self.slot_width
    }

    pub fn slot(&self, x: usize, y: usize) -> usize {
        x * self.gap * self.slot_width + y * self.gap
    }

    /// Slots of the logical grid in row-major logical order.
    pub fn valid_slots(&self) -> Vec<usize> {
        (0..self.height)
            .flat_map(|x| (0..self.width).map(move |y| (x, y)))
            .map(|(x, y)| self.slot(x, y))
            .collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.slots()];
        for s in self.valid_slots() {
            m[s] = true;
        }
        m
    }

    pub fn has_invalid_slots(&self) -> bool {
        self.height * self.width < self.slots()
    }

    /// Signed slot offset of a logical displacement.
    fn offset(&self, dx: i64, dy: i64) -> i64 {
        (dx * self.slot_width as i64 + dy) * self.gap as i64
    }
}

/// Ciphertexts of one tensor, one per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherTensor {
    pub layout: CiphertextLayout,
    pub channels: Vec<NodeId>,
}

/// Operation counts attributed to one network layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub kind: String,
    /// Distinct (ciphertext, offset) filter inputs, identity taps included,
    /// summed over the layer's convolutions.
    pub rotation_terms: usize,
    /// Emitted rotation nodes (identity taps and shared rotations excluded).
    pub rotations: usize,
    pub filter_mults: usize,
    pub plain_mults: usize,
    pub cipher_mults: usize,
    pub adds: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoweringError {
    #[error("network is invalid: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidNetwork(Vec<Violation>),
    #[error("layer {layer}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },
    #[error("layer {layer}: {message}")]
    NotAModule { layer: usize, message: String },
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("layer {layer}: {source}")]
    Network { layer: usize, source: NetworkError },
}

/// Result of lowering a whole network.
#[derive(Clone, Debug)]
pub struct LoweredNetwork {
    pub graph: Ddg,
    pub input_layout: CiphertextLayout,
    pub output_layout: CiphertextLayout,
    pub stats: Vec<LayerStats>,
}

/// Graph under construction plus the encoding configuration.
pub struct Lowerer<'w> {
    b: DdgBuilder,
    quant: QuantConfig,
    weights: Option<&'w Weights>,
    layer: usize,
    stats: BTreeMap<usize, LayerStats>,
}

fn exact(v: f64) -> Rational {
    rational_from_f64(v)
}

fn bits_for(n: usize) -> u32 {
    usize::BITS - n.saturating_sub(1).leading_zeros()
}

impl<'w> Lowerer<'w> {
    pub fn new(slots: usize, quant: QuantConfig, weights: Option<&'w Weights>) -> Self {
        Lowerer {
            b: DdgBuilder::new(slots, quant.prime_bits, quant.input_scale_bits),
            quant,
            weights,
            layer: 0,
            stats: BTreeMap::new(),
        }
    }

    pub fn builder(&mut self) -> &mut DdgBuilder {
        &mut self.b
    }

    /// Attributes subsequently emitted nodes to network layer `layer`.
    pub fn enter_layer(&mut self, layer: usize, kind: &str) {
        self.layer = layer;
        self.b.set_layer(Some(layer));
        self.b.label_layer(layer, format!("{layer}:{kind}"));
        self.stats.entry(layer).or_insert_with(|| LayerStats {
            layer,
            kind: kind.to_string(),
            ..LayerStats::default()
        });
    }

    fn stat(&mut self) -> &mut LayerStats {
        let layer = self.layer;
        self.stats.entry(layer).or_default()
    }

    pub fn input(&mut self, channels: usize, height: usize, width: usize) -> CipherTensor {
        let layout = CiphertextLayout::input(channels, height, width);
        let channels = (0..channels).map(|_| self.b.input()).collect();
        CipherTensor { layout, channels }
    }

    fn tensor(&self, name: &str) -> Result<Option<&'w Tensor>, LoweringError> {
        match self.weights {
            None => Ok(None),
            Some(w) => w.get(self.layer, name).map(Some).ok_or_else(|| {
                LoweringError::Weights(WeightsError::Missing {
                    layer: self.layer,
                    name: name.to_string(),
                })
            }),
        }
    }

    /// Zero on every slot outside the logical grid, one inside.
    pub fn mask_tensor(&mut self, t: &CipherTensor) -> CipherTensor {
        if !t.layout.has_invalid_slots() {
            return t.clone();
        }
        let mask = self.b.mask(t.layout.valid_mask());
        let scale = self.quant.mask_scale_bits;
        let channels = t
            .channels
            .iter()
            .map(|&x| {
                let m = self.b.plain(
                    PlainRole::Mask,
                    PlainValue::Masked {
                        mask,
                        on: Rational::one(),
                        off: Rational::zero(),
                    },
                    scale,
                );
                self.b.mul_plain(x, m)
            })
            .collect();
        CipherTensor {
            layout: t.layout.clone(),
            channels,
        }
    }

    /// Convolution without the trailing mask. Valid padding multiplies
    /// rotated inputs by scalar filter taps; same padding zeroes, per tap,
    /// the output slots whose source falls outside the input.
    pub fn conv(
        &mut self,
        input: &CipherTensor,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        filter: Option<&Tensor>,
    ) -> Result<CipherTensor, LoweringError> {
        let lay = &input.layout;
        let in_channels = input.channels.len();
        let (h, w) = (lay.height, lay.width);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        };
        let (oh, ow) = match padding {
            Padding::Valid => {
                if h < kernel || w < kernel {
                    return Err(self.shape_error(format!("kernel {kernel} exceeds {h}x{w} input")));
                }
                ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
            }
            Padding::Same => (h.div_ceil(stride), w.div_ceil(stride)),
        };
        let out_layout = CiphertextLayout {
            height: oh,
            width: ow,
            gap: lay.gap * stride,
            channels: out_channels,
            ..lay.clone()
        };
        let taps: Vec<(usize, usize)> = (0..kernel)
            .flat_map(|i| (0..kernel).map(move |j| (i, j)))
            .collect();
        let tap_masks: Vec<Option<usize>> = taps
            .iter()
            .map(|&(i, j)| {
                if padding == Padding::Valid {
                    return None;
                }
                let (di, dj) = (i as i64 - pad as i64, j as i64 - pad as i64);
                let mut bits = vec![false; lay.slots()];
                let mut all = true;
                for x in 0..oh {
                    for y in 0..ow {
                        let sx = (x * stride) as i64 + di;
                        let sy = (y * stride) as i64 + dj;
                        let inside = sx >= 0 && sy >= 0 && (sx as usize) < h && (sy as usize) < w;
                        all &= inside;
                        bits[out_layout.slot(x, y)] = inside;
                    }
                }
                (!all).then(|| self.b.mask(bits))
            })
            .collect();
        let rotated: Vec<Vec<NodeId>> = input
            .channels
            .iter()
            .map(|&x| {
                taps.iter()
                    .map(|&(i, j)| {
                        let off = lay.offset(i as i64 - pad as i64, j as i64 - pad as i64);
                        self.b.rotate(x, off)
                    })
                    .collect()
            })
            .collect();
        let distinct: HashSet<NodeId> = rotated.iter().flatten().copied().collect();
        self.stat().rotation_terms += distinct.len();

        let scale = self.quant.weight_scale_bits;
        let mut outputs = Vec::with_capacity(out_channels);
        for o in 0..out_channels {
            let mut acc: Option<NodeId> = None;
            for (c, row) in rotated.iter().enumerate() {
                for (t, &(i, j)) in taps.iter().enumerate() {
                    let value = match filter {
                        None => PlainValue::Unbound,
                        Some(f) => {
                            let v = exact(f.at(&[o, c, i, j]));
                            match tap_masks[t] {
                                None => PlainValue::Scalar(v),
                                Some(mask) => PlainValue::Masked {
                                    mask,
                                    on: v,
                                    off: Rational::zero(),
                                },
                            }
                        }
                    };
                    let k = self.b.plain(PlainRole::FilterCoeff, value, scale);
                    let p = self.b.mul_plain(row[t], k);
                    self.stat().filter_mults += 1;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => self.b.add(a, p),
                    });
                }
            }
            outputs.push(acc.expect("convolutions have at least one input channel"));
        }
        debug_assert_eq!(in_channels, rotated.len());
        Ok(CipherTensor {
            layout: out_layout,
            channels: outputs,
        })
    }

    fn shape_error(&self, message: String) -> LoweringError {
        LoweringError::Shape {
            layer: self.layer,
            message,
        }
    }

    fn check_channels(&self, input: &CipherTensor, expected: usize) -> Result<(), LoweringError> {
        if input.channels.len() != expected {
            return Err(LoweringError::ChannelMismatch {
                layer: self.layer,
                expected,
                got: input.channels.len(),
            });
        }
        Ok(())
    }

    /// Convolution layer; the mask is applied here only when `masked`.
    pub fn lower_conv(
        &mut self,
        input: &CipherTensor,
        spec: &ConvSpec,
        masked: bool,
    ) -> Result<CipherTensor, LoweringError> {
        self.check_channels(input, spec.in_channels)?;
        let filter = self.tensor("filter")?;
        let out = self.conv(
            input,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.padding,
            filter,
        )?;
        Ok(if masked { self.mask_tensor(&out) } else { out })
    }

    /// Fire or inception module. The sub-convolutions are same-padded so
    /// the module preserves the spatial extent; the final branch outputs are
    /// left unmasked when `masked` is false.
    pub fn lower_module(
        &mut self,
        input: &CipherTensor,
        layer: &LayerSpec,
        masked: bool,
    ) -> Result<CipherTensor, LoweringError> {
        let out = match layer {
            LayerSpec::FireModule(f) => self.fire(input, f)?,
            LayerSpec::InceptionModule(m) => self.inception(input, m)?,
            other => {
                return Err(LoweringError::NotAModule {
                    layer: self.layer,
                    message: format!("{} is not a mobile module", other.kind_name()),
                })
            }
        };
        Ok(if masked { self.mask_tensor(&out) } else { out })
    }

    fn fire(&mut self, input: &CipherTensor, f: &FireSpec) -> Result<CipherTensor, LoweringError> {
        self.check_channels(input, f.in_channels)?;
        let (sq_w, e1_w, e3_w) = (
            self.tensor("squeeze")?,
            self.tensor("expand1")?,
            self.tensor("expand3")?,
        );
        let squeeze = self.conv(input, f.fire_squeeze, 1, 1, Padding::Same, sq_w)?;
        let squeeze = self.inner_tail(&squeeze, &f.inner_act_coeffs);
        let e1 = self.conv(&squeeze, f.fire_expand1, 1, 1, Padding::Same, e1_w)?;
        let e3 = if f.fire_expand3 > 0 {
            self.conv(&squeeze, f.fire_expand3, 3, 1, Padding::Same, e3_w)?
        } else {
            CipherTensor {
                layout: e1.layout.clone(),
                channels: vec![],
            }
        };
        Ok(concat(vec![e1, e3]))
    }

    fn inception(
        &mut self,
        input: &CipherTensor,
        m: &InceptionSpec,
    ) -> Result<CipherTensor, LoweringError> {
        self.check_channels(input, m.in_channels)?;
        let [o0, o1, o2, o3] = m.inception_branch_channels;
        let [r1, r2] = m.reduce_channels();
        let names = ["b0", "b1_reduce", "b1", "b2_reduce", "b2", "b3"];
        let mut w = Vec::new();
        for n in names {
            w.push(self.tensor(n)?);
        }
        let mut branches = Vec::new();
        if o0 > 0 {
            branches.push(self.conv(input, o0, 1, 1, Padding::Same, w[0])?);
        }
        if o1 > 0 {
            let red = self.conv(input, r1, 1, 1, Padding::Same, w[1])?;
            let red = self.inner_tail(&red, &m.inner_act_coeffs);
            branches.push(self.conv(&red, o1, 3, 1, Padding::Same, w[2])?);
        }
        if o2 > 0 {
            let red = self.conv(input, r2, 1, 1, Padding::Same, w[3])?;
            let red = self.inner_tail(&red, &m.inner_act_coeffs);
            branches.push(self.conv(&red, o2, 5, 1, Padding::Same, w[4])?);
        }
        if o3 > 0 {
            let pooled = self.same_pool3(input);
            let pooled = self.mask_tensor(&pooled);
            branches.push(self.conv(&pooled, o3, 1, 1, Padding::Same, w[5])?);
        }
        Ok(concat(branches))
    }

    /// Masks an intermediate module result, or runs it through an
    /// activation tail when the module has one.
    fn inner_tail(&mut self, t: &CipherTensor, act: &Option<[Decimal; 3]>) -> CipherTensor {
        match act {
            None => self.mask_tensor(t),
            Some(k) => {
                let coeffs = [k[0].to_rational(), k[1].to_rational(), k[2].to_rational()];
                self.lower_block_tail(t, self.layer, Some(coeffs), None)
            }
        }
    }

    /// 3x3 stride-1 average with zero padding counted in the divisor.
    fn same_pool3(&mut self, input: &CipherTensor) -> CipherTensor {
        let lay = input.layout.clone();
        let ninth = Rational::new(1.into(), 9.into());
        let scale = self.quant.weight_scale_bits + bits_for(9);
        let mut taps = Vec::new();
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut bits = vec![false; lay.slots()];
                for x in 0..lay.height {
                    for y in 0..lay.width {
                        let (sx, sy) = (x as i64 + i - 1, y as i64 + j - 1);
                        bits[lay.slot(x, y)] = sx >= 0
                            && sy >= 0
                            && (sx as usize) < lay.height
                            && (sy as usize) < lay.width;
                    }
                }
                taps.push((lay.offset(i - 1, j - 1), self.b.mask(bits)));
            }
        }
        let channels = input
            .channels
            .iter()
            .map(|&x| {
                let mut acc = None;
                for &(off, mask) in &taps {
                    let r = self.b.rotate(x, off);
                    let k = self.b.plain(
                        PlainRole::PoolScalar,
                        PlainValue::Masked {
                            mask,
                            on: ninth.clone(),
                            off: Rational::zero(),
                        },
                        scale,
                    );
                    let p = self.b.mul_plain(r, k);
                    acc = Some(match acc {
                        None => p,
                        Some(a) => self.b.add(a, p),
                    });
                }
                acc.expect("nine taps")
            })
            .collect();
        CipherTensor {
            layout: lay,
            channels,
        }
    }

    /// Average pooling: rotate-accumulate over the window, then one scalar
    /// multiplication by the reciprocal window size.
    pub fn lower_pool(
        &mut self,
        input: &CipherTensor,
        spec: &PoolSpec,
    ) -> Result<CipherTensor, LoweringError> {
        self.check_channels(input, spec.in_channels)?;
        let lay = input.layout.clone();
        if spec.global {
            let (h, w) = (lay.height, lay.width);
            let out_layout = CiphertextLayout {
                height: 1,
                width: 1,
                ..lay.clone()
            };
            let channels = input
                .channels
                .iter()
                .map(|&x| {
                    let sum = self.window_sum(x, &lay, 1..w, 1..h);
                    self.scale_by_reciprocal(sum, h * w)
                })
                .collect();
            return Ok(CipherTensor {
                layout: out_layout,
                channels,
            });
        }
        let (k, s) = (spec.kernel, spec.stride());
        if !lay.height.is_multiple_of(s) || !lay.width.is_multiple_of(s) {
            return Err(self.shape_error(format!(
                "pool stride {s} does not divide {}x{}",
                lay.height, lay.width
            )));
        }
        let out_layout = CiphertextLayout {
            height: lay.height / s,
            width: lay.width / s,
            gap: lay.gap * s,
            ..lay.clone()
        };
        let channels = input
            .channels
            .iter()
            .map(|&x| {
                if k == 1 {
                    return x;
                }
                let mut acc = x;
                for i in 0..k as i64 {
                    for j in 0..k as i64 {
                        if (i, j) != (0, 0) {
                            let r = self.b.rotate(x, lay.offset(i, j));
                            acc = self.b.add(acc, r);
                        }
                    }
                }
                self.scale_by_reciprocal(acc, k * k)
            })
            .collect();
        Ok(CipherTensor {
            layout: out_layout,
            channels,
        })
    }

    /// Sums columns `1..cols` then rows `1..rows` into the top-left slot.
    fn window_sum(
        &mut self,
        x: NodeId,
        lay: &CiphertextLayout,
        cols: std::ops::Range<usize>,
        rows: std::ops::Range<usize>,
    ) -> NodeId {
        let mut row_sum = x;
        for j in cols {
            let r = self.b.rotate(x, lay.offset(0, j as i64));
            row_sum = self.b.add(row_sum, r);
        }
        let mut total = row_sum;
        for i in rows {
            let r = self.b.rotate(row_sum, lay.offset(i as i64, 0));
            total = self.b.add(total, r);
        }
        total
    }

    fn scale_by_reciprocal(&mut self, x: NodeId, n: usize) -> NodeId {
        let scale = self.quant.weight_scale_bits + bits_for(n);
        let k = self.b.plain(
            PlainRole::PoolScalar,
            PlainValue::Scalar(Rational::new(1.into(), (n as i64).into())),
            scale,
        );
        self.b.mul_plain(x, k)
    }

    /// One output ciphertext per neuron, its value in the first slot.
    pub fn lower_dense(
        &mut self,
        input: &CipherTensor,
        out_features: usize,
    ) -> Result<CipherTensor, LoweringError> {
        let lay = input.layout.clone();
        let (h, w) = (lay.height, lay.width);
        let weight = self.tensor("weight")?;
        let scale = self.quant.weight_scale_bits;
        let valid = lay.valid_slots();
        let mut channels = Vec::with_capacity(out_features);
        for o in 0..out_features {
            let mut acc = None;
            for (ci, &x) in input.channels.iter().enumerate() {
                let value = match weight {
                    None => PlainValue::Unbound,
                    Some(t) => PlainValue::Sparse(
                        valid
                            .iter()
                            .enumerate()
                            .map(|(p, &slot)| SparseEntry {
                                slot,
                                value: exact(t.at(&[o, ci * h * w + p])),
                            })
                            .collect(),
                    ),
                };
                let k = self.b.plain(PlainRole::DenseWeight, value, scale);
                let p = self.b.mul_plain(x, k);
                self.stat().filter_mults += 1;
                acc = Some(match acc {
                    None => p,
                    Some(a) => self.b.add(a, p),
                });
            }
            let acc = acc.expect("dense input has channels");
            channels.push(self.window_sum(acc, &lay, 1..w, 1..h));
        }
        Ok(CipherTensor {
            layout: CiphertextLayout {
                height: 1,
                width: 1,
                channels: out_features,
                ..lay
            },
            channels,
        })
    }

    /// Mask, degree-2 activation and folded batch norm applied per channel:
    /// `Y = m*X`, `Z = a*Y^2 + b*Y + c`, `d*Z + e`. Zero `b`, `c` and `e`
    /// terms are omitted; `a = 0` drops the square.
    pub fn lower_block_tail(
        &mut self,
        input: &CipherTensor,
        producer: usize,
        act: Option<[Rational; 3]>,
        bn: Option<Vec<(Rational, Rational)>>,
    ) -> CipherTensor {
        let mask = input
            .layout
            .has_invalid_slots()
            .then(|| self.b.mask(input.layout.valid_mask()));
        let cs = self.quant.coeff_scale_bits;
        let ms = self.quant.mask_scale_bits;
        let mut channels = Vec::with_capacity(input.channels.len());
        for (ch, &x) in input.channels.iter().enumerate() {
            let y = match mask {
                None => x,
                Some(mask) => {
                    let m = self.b.plain(
                        PlainRole::Mask,
                        PlainValue::Masked {
                            mask,
                            on: Rational::one(),
                            off: Rational::zero(),
                        },
                        ms,
                    );
                    self.b.mul_plain(x, m)
                }
            };
            let mut z = y;
            if let Some([a, b, c]) = &act {
                z = self.poly(y, a, b, c, cs, PlainRole::ActCoeff);
            }
            let bn_ch = bn.as_ref().map(|v| v[ch].clone());
            if let Some((d, e)) = &bn_ch {
                let dk = self
                    .b
                    .plain(PlainRole::BnCoeff, PlainValue::Scalar(d.clone()), cs);
                z = self.b.mul_plain(z, dk);
                if !e.is_zero() {
                    let ek = self
                        .b
                        .plain(PlainRole::BnCoeff, PlainValue::Scalar(e.clone()), cs);
                    z = self.b.add(z, ek);
                }
            }
            self.b.add_tail(BlockTail {
                layer: producer,
                channel: ch,
                input: x,
                output: z,
                mask,
                act: act
                    .clone()
                    .map(Vec::from)
                    .unwrap_or_else(|| vec![Rational::zero(), Rational::one(), Rational::zero()]),
                bn: bn_ch,
                merged: false,
            });
            channels.push(z);
        }
        CipherTensor {
            layout: input.layout.clone(),
            channels,
        }
    }

    /// `a*y^2 + b*y + c` with every coefficient a plaintext at `scale`.
    pub(crate) fn poly(
        &mut self,
        y: NodeId,
        a: &Rational,
        b: &Rational,
        c: &Rational,
        scale: u32,
        role: PlainRole,
    ) -> NodeId {
        poly(&mut self.b, y, [a, b, c], [scale; 3], role)
    }

    pub fn finish(mut self, outputs: &CipherTensor) -> (Ddg, Vec<LayerStats>) {
        self.b.set_layer(None);
        for &c in &outputs.channels {
            self.b.output(c);
        }
        let graph = self.b.finish();
        let mut stats: Vec<LayerStats> = self.stats.into_values().collect();
        for s in &mut stats {
            for n in graph.nodes.iter().filter(|n| n.layer == Some(s.layer)) {
                match n.kind.class() {
                    OpClass::Rotate => s.rotations += 1,
                    OpClass::MulPlain => s.plain_mults += 1,
                    OpClass::MulCipher => s.cipher_mults += 1,
                    OpClass::Add | OpClass::Sub => s.adds += 1,
                    _ => {}
                }
            }
        }
        (graph, stats)
    }
}

/// Emits `a*y^2 + b*y + c` (terms with zero `b` or `c` omitted, the square
/// dropped when `a = 0`). The result is always a ciphertext.
pub(crate) fn poly(
    b: &mut DdgBuilder,
    y: NodeId,
    coeffs: [&Rational; 3],
    scales: [u32; 3],
    role: PlainRole,
) -> NodeId {
    let [a, lin, c] = coeffs;
    let mut z = if !a.is_zero() {
        let sq = b.mul_cipher(y, y);
        let ak = b.plain(role, PlainValue::Scalar(a.clone()), scales[0]);
        let t = b.mul_plain(sq, ak);
        if lin.is_zero() {
            t
        } else {
            let bk = b.plain(role, PlainValue::Scalar(lin.clone()), scales[1]);
            let l = b.mul_plain(y, bk);
            b.add(t, l)
        }
    } else {
        let bk = b.plain(role, PlainValue::Scalar(lin.clone()), scales[1]);
        b.mul_plain(y, bk)
    };
    if !c.is_zero() {
        let ck = b.plain(role, PlainValue::Scalar(c.clone()), scales[2]);
        z = b.add(z, ck);
    }
    z
}

fn concat(parts: Vec<CipherTensor>) -> CipherTensor {
    let layout = parts[0].layout.clone();
    let channels: Vec<NodeId> = parts.into_iter().flat_map(|p| p.channels).collect();
    CipherTensor {
        layout: CiphertextLayout {
            channels: channels.len(),
            ..layout
        },
        channels,
    }
}

fn act_coeffs(a: &ActivationSpec) -> [Rational; 3] {
    [
        a.act_coeffs[0].to_rational(),
        a.act_coeffs[1].to_rational(),
        a.act_coeffs[2].to_rational(),
    ]
}

fn bn_coeffs(
    layer: usize,
    bn: &BatchNormSpec,
    channels: usize,
) -> Result<Vec<(Rational, Rational)>, LoweringError> {
    let folded = bn
        .fold(channels)
        .map_err(|source| LoweringError::Network { layer, source })?;
    Ok(folded
        .into_iter()
        .map(|f| (exact(f.d), exact(f.e)))
        .collect())
}

/// Lowers every layer in order. Activation and batch-norm layers become a
/// per-channel tail of the preceding layer; convolutions and modules that
/// are not followed by a tail end with a mask multiplication when their
/// output has slots outside the logical grid.
pub fn lower_network(
    spec: &NetworkSpec,
    quant: &QuantConfig,
    weights: Option<&Weights>,
) -> Result<LoweredNetwork, LoweringError> {
    let violations = validate_network(spec);
    if !violations.is_empty() {
        return Err(LoweringError::InvalidNetwork(violations));
    }
    if let Some(w) = weights {
        w.check(spec)?;
    }
    let input = spec.input();
    let mut lw = Lowerer::new(input.h * input.w, quant.clone(), weights);
    let mut cur = lw.input(input.c, input.h, input.w);
    let input_layout = cur.layout.clone();
    let layers = &spec.layers;
    let mut i = 0;
    while i < layers.len() {
        let layer = &layers[i];
        lw.enter_layer(i, layer.kind_name());
        // act and/or batch norm right after this layer
        let mut tail_end = i + 1;
        let mut act = None;
        let mut bn = None;
        let produces = !matches!(
            layer,
            LayerSpec::PolyActivation(_) | LayerSpec::BatchNorm(_)
        );
        if produces {
            if let Some(LayerSpec::PolyActivation(a)) = layers.get(tail_end) {
                act = Some(act_coeffs(a));
                tail_end += 1;
            }
            if let Some(LayerSpec::BatchNorm(b)) = layers.get(tail_end) {
                bn = Some(bn_coeffs(tail_end, b, layer.out_channels())?);
                tail_end += 1;
            }
        }
        let has_tail = act.is_some() || bn.is_some();
        cur = match layer {
            LayerSpec::Conv2D(c) => lw.lower_conv(&cur, c, !has_tail)?,
            LayerSpec::FireModule(_) | LayerSpec::InceptionModule(_) => {
                lw.lower_module(&cur, layer, !has_tail)?
            }
            LayerSpec::AvgPool(p) => lw.lower_pool(&cur, p)?,
            LayerSpec::Dense(d) => {
                let flat = cur.channels.len() * cur.layout.height * cur.layout.width;
                if flat != d.in_channels {
                    return Err(LoweringError::ChannelMismatch {
                        layer: i,
                        expected: d.in_channels,
                        got: flat,
                    });
                }
                lw.lower_dense(&cur, d.out_channels)?
            }
            LayerSpec::PolyActivation(a) => {
                // an activation not directly after a producing layer
                let mut bn = None;
                if let Some(LayerSpec::BatchNorm(b)) = layers.get(i + 1) {
                    bn = Some(bn_coeffs(i + 1, b, cur.channels.len())?);
                    tail_end += 1;
                }
                lw.lower_block_tail(&cur, i, Some(act_coeffs(a)), bn)
            }
            LayerSpec::BatchNorm(b) => {
                let bn = bn_coeffs(i, b, cur.channels.len())?;
                lw.lower_block_tail(&cur, i, None, Some(bn))
            }
        };
        if has_tail {
            cur = lw.lower_block_tail(&cur, i, act, bn);
        }
        i = tail_end;
    }
    let output_layout = cur.layout.clone();
    let (graph, stats) = lw.finish(&cur);
    Ok(LoweredNetwork {
        graph,
        input_layout,
        output_layout,
        stats,
    })
}
