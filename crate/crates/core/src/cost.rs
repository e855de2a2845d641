//! CKKS parameter selection and an abstract latency model.
//!
//! Per-operation costs follow the usual complexity classes on a ciphertext
//! at level `l` with ring degree `N`: additions and plaintext products are
//! `O(N*l)`, ciphertext products, rotations and rescales `O(N*log N*l^2)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ddg::{multiplicative_depth, op_histogram, Ddg, DdgError, HistogramEntry, OpClass};

/// Largest total modulus (bits) per ring degree at 128-bit classical
/// security, from the homomorphic encryption standard's parameter table
/// (uniform ternary secrets); degrees above 32768 extend it linearly.
pub const MAX_Q_BITS: [(u64, u32); 7] = [
    (2048, 54),
    (4096, 109),
    (8192, 218),
    (16384, 438),
    (32768, 881),
    (65536, 1772),
    (131072, 3544),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("unsupported ring degree {0}")]
    UnsupportedDegree(u64),
    #[error("{q_bits}-bit modulus for r = {r} exceeds every supported ring degree")]
    Capacity { r: u32, q_bits: u32 },
    #[error(transparent)]
    Graph(#[from] DdgError),
}

pub fn max_q_bits(n: u64) -> Result<u32, CostError> {
    MAX_Q_BITS
        .iter()
        .find(|(d, _)| *d == n)
        .map(|(_, q)| *q)
        .ok_or(CostError::UnsupportedDegree(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkksParams {
    #[serde(rename = "N")]
    pub poly_degree_n: u64,
    #[serde(rename = "Q")]
    pub total_q_bits: u32,
    #[serde(rename = "r")]
    pub rescale_budget_r: u32,
    pub prime_bits: u32,
}

/// `Q = prime_bits * r` and the smallest ring degree whose security bound
/// admits it.
pub fn select_params(r: u32, prime_bits: u32) -> Result<CkksParams, CostError> {
    let q = prime_bits * r;
    MAX_Q_BITS
        .iter()
        .find(|(_, max)| *max >= q)
        .map(|&(n, _)| CkksParams {
            poly_degree_n: n,
            total_q_bits: q,
            rescale_budget_r: r,
            prime_bits,
        })
        .ok_or(CostError::Capacity { r, q_bits: q })
}

/// Constants of the two complexity classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k1: f64,
    pub k2: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { k1: 1.0, k2: 1.0 }
    }
}

pub fn op_cost(kind: OpClass, level: u32, n: u64, calib: &Calibration) -> f64 {
    let n = n as f64;
    let l = f64::from(level);
    match kind {
        OpClass::Add | OpClass::Sub | OpClass::MulPlain => calib.k1 * n * l,
        OpClass::MulCipher | OpClass::Rotate | OpClass::Rescale => calib.k2 * n * n.log2() * l * l,
        OpClass::CipherInput | OpClass::PlainConst | OpClass::Output => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: CkksParams,
    pub depth: u32,
    pub rescales: u32,
    pub cost_units: f64,
    pub histogram: Vec<HistogramEntry>,
    pub per_layer: Vec<LayerCost>,
}

/// Level charged for an operation. A ciphertext at level 0 still carries
/// one modulus prime, so it is billed like level 1.
fn billed_level(level: u32) -> u32 {
    level.max(1)
}

/// Parameters from the graph's rescale count, then the summed op costs.
pub fn estimate_cost(graph: &Ddg, calib: &Calibration) -> Result<CostReport, CostError> {
    let hist = op_histogram(graph)?;
    let depth = multiplicative_depth(graph)?;
    let r = graph
        .rescale_budget()
        .unwrap_or(0)
        .max(depth.rescale_count_r);
    let params = select_params(r, graph.prime_bits)?;
    let n = params.poly_degree_n;
    let mut per_layer: BTreeMap<Option<usize>, f64> = BTreeMap::new();
    for node in &graph.nodes {
        let c = op_cost(
            node.kind.class(),
            billed_level(node.level.unwrap_or(0)),
            n,
            calib,
        );
        *per_layer.entry(node.layer).or_insert(0.0) += c;
    }
    // sum the histogram, not the per-node map, so the total is one
    // deterministic expression of the counts
    let cost_units = hist
        .iter()
        .map(|(k, l, c)| c as f64 * op_cost(k, billed_level(l), n, calib))
        .sum();
    let label = |l: Option<usize>| match l {
        Some(i) => graph
            .layer_labels
            .get(i)
            .filter(|s| !s.is_empty())
            .cloned()
            .unwrap_or_else(|| i.to_string()),
        None => "io".to_string(),
    };
    Ok(CostReport {
        params,
        depth: depth.depth,
        rescales: r,
        cost_units,
        histogram: hist.entries(),
        per_layer: per_layer
            .into_iter()
            .map(|(l, cost)| LayerCost {
                layer: label(l),
                cost,
            })
            .collect(),
    })
}
