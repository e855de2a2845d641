//! Trained (or synthetic) parameters bound to a network description.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{LayerSpec, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Row-major element access.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightsError {
    #[error("layer {layer}: missing tensor {name:?}")]
    Missing { layer: usize, name: String },
    #[error("layer {layer}: tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        layer: usize,
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("layer {layer}: tensor {name:?} holds {got} values for shape {shape:?}")]
    Length {
        layer: usize,
        name: String,
        shape: Vec<usize>,
        got: usize,
    },
    #[error("layer {layer}: tensor {name:?} contains a non-finite value")]
    NonFinite { layer: usize, name: String },
    #[error("weights document: {0}")]
    Parse(String),
}

/// Named tensors per layer index. Layers without parameters (pooling,
/// activations, batch norm, whose constants live in the description) have
/// no entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub layers: BTreeMap<usize, BTreeMap<String, Tensor>>,
}

/// Tensor names and shapes a layer needs, as `[out, in, kh, kw]` filters and
/// `[out, in]` dense matrices.
pub fn expected_tensors(layer: &LayerSpec) -> Vec<(&'static str, Vec<usize>)> {
    match layer {
        LayerSpec::Conv2D(c) => vec![(
            "filter",
            vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
        )],
        LayerSpec::FireModule(f) => vec![
            ("squeeze", vec![f.fire_squeeze, f.in_channels, 1, 1]),
            ("expand1", vec![f.fire_expand1, f.fire_squeeze, 1, 1]),
            ("expand3", vec![f.fire_expand3, f.fire_squeeze, 3, 3]),
        ],
        LayerSpec::InceptionModule(m) => {
            let [o0, o1, o2, o3] = m.inception_branch_channels;
            let [r1, r2] = m.reduce_channels();
            let i = m.in_channels;
            vec![
                ("b0", vec![o0, i, 1, 1]),
                ("b1_reduce", vec![r1, i, 1, 1]),
                ("b1", vec![o1, r1, 3, 3]),
                ("b2_reduce", vec![r2, i, 1, 1]),
                ("b2", vec![o2, r2, 5, 5]),
                ("b3", vec![o3, i, 1, 1]),
            ]
        }
        LayerSpec::Dense(d) => vec![("weight", vec![d.out_channels, d.in_channels])],
        LayerSpec::PolyActivation(_) | LayerSpec::BatchNorm(_) | LayerSpec::AvgPool(_) => vec![],
    }
}

impl Weights {
    pub fn get(&self, layer: usize, name: &str) -> Option<&Tensor> {
        self.layers.get(&layer)?.get(name)
    }

    /// Checks that every tensor the network needs is present and well shaped.
    pub fn check(&self, spec: &NetworkSpec) -> Result<(), WeightsError> {
        for (layer, l) in spec.layers.iter().enumerate() {
            for (name, shape) in expected_tensors(l) {
                let t = self.get(layer, name).ok_or_else(|| WeightsError::Missing {
                    layer,
                    name: name.to_string(),
                })?;
                if t.shape != shape {
                    return Err(WeightsError::Shape {
                        layer,
                        name: name.to_string(),
                        expected: shape,
                        got: t.shape.clone(),
                    });
                }
                if t.data.len() != shape.iter().product::<usize>() {
                    return Err(WeightsError::Length {
                        layer,
                        name: name.to_string(),
                        shape,
                        got: t.data.len(),
                    });
                }
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(WeightsError::NonFinite {
                        layer,
                        name: name.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Deterministic weights drawn uniformly from `±1/sqrt(fan_in)` and
    /// snapped to multiples of `2^-grid_bits`, so they are exact at any
    /// plaintext scale of at least `grid_bits`.
    pub fn random(spec: &NetworkSpec, seed: u64, grid_bits: u32) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = f64::from(1u32 << grid_bits.min(30));
        let mut layers = BTreeMap::new();
        for (layer, l) in spec.layers.iter().enumerate() {
            let mut named = BTreeMap::new();
            for (name, shape) in expected_tensors(l) {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| (rng.random_range(-bound..=bound) * grid).round() / grid)
                    .collect();
                named.insert(name.to_string(), Tensor { shape, data });
            }
            if !named.is_empty() {
                layers.insert(layer, named);
            }
        }
        Weights { layers }
    }

    pub fn from_json(text: &str) -> Result<Weights, WeightsError> {
        serde_json::from_str(text).map_err(|e| WeightsError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("weights always serialize")
    }
}
