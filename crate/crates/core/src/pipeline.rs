//! The full compile flow: lower, merge, rescale, check, and cost.

use serde::Serialize;

use crate::config::{ConfigError, PipelineConfig};
use crate::cost::{estimate_cost, CostError, CostReport};
use crate::ddg::{insert_rescales, validate_ddg, Ddg, DdgViolation, RescaleError};
use crate::lowering::{lower_network, CiphertextLayout, LayerStats, LoweringError};
use crate::merge::{merge_coefficients, MergeError};
use crate::network::{NetworkError, NetworkSpec};
use crate::shadow::{
    compare_outputs, eval_ddg, eval_reference, pack_input, unpack_output, EvalMode, EvalReport,
    ShadowError,
};
use crate::weights::{Weights, WeightsError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Rescale(#[from] RescaleError),
    #[error("compiled graph fails validation: {}", .0.first().map(ToString::to_string).unwrap_or_default())]
    InvalidGraph(Vec<DdgViolation>),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
}

#[derive(Clone, Debug)]
pub struct Compiled {
    /// Merged (if enabled), rescaled and leveled graph.
    pub graph: Ddg,
    pub input_layout: CiphertextLayout,
    pub output_layout: CiphertextLayout,
    pub stats: Vec<LayerStats>,
    pub merged_tails: usize,
    pub report: CostReport,
}

/// Lowers `spec` and runs every pass selected by `config`. Without weights
/// the graph's filter payloads stay unbound, which is enough for costing.
pub fn compile(
    spec: &NetworkSpec,
    config: &PipelineConfig,
    weights: Option<&Weights>,
) -> Result<Compiled, Error> {
    config.validate()?;
    let lowered = lower_network(spec, &config.quant, weights)?;
    let mut graph = lowered.graph;
    let mut merged_tails = 0;
    if config.merge_enabled {
        let out = merge_coefficients(&graph, config.quant.coeff_scale_bits)?;
        graph = out.graph;
        merged_tails = out.merged_tails;
    }
    let graph = insert_rescales(&graph, config.waterline_bits)?;
    let violations = validate_ddg(&graph);
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(violations));
    }
    let report = estimate_cost(&graph, &config.calibration)?;
    Ok(Compiled {
        graph,
        input_layout: lowered.input_layout,
        output_layout: lowered.output_layout,
        stats: lowered.stats,
        merged_tails,
        report,
    })
}

/// Cost units of the compiled `spec`; the oracle of the architecture search.
pub fn compile_run(spec: &NetworkSpec, config: &PipelineConfig) -> Result<f64, Error> {
    Ok(compile(spec, config, None)?.report.cost_units)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShadowRun {
    #[serde(flatten)]
    pub report: EvalReport,
    pub mode: EvalMode,
    /// Decoded outputs on valid slots, channel-major.
    pub outputs: Vec<f64>,
    pub reference: Vec<f64>,
}

/// Compiles `spec` with concrete weights, runs the graph on `input`
/// (`C*H*W` values, channel-major) and compares against the dense reference.
pub fn shadow_run(
    spec: &NetworkSpec,
    config: &PipelineConfig,
    weights: &Weights,
    input: &[f64],
    mode: EvalMode,
    tol_rel: f64,
) -> Result<ShadowRun, Error> {
    let compiled = compile(spec, config, Some(weights))?;
    let reference = eval_reference(spec, weights, input)?;
    let packed = pack_input(&compiled.input_layout, input);
    let raw = eval_ddg(&compiled.graph, &packed, mode)?;
    let outputs = unpack_output(&compiled.output_layout, &raw);
    let per_output = compiled.output_layout.valid_slots().len();
    let report = compare_outputs(&outputs, &reference, per_output, tol_rel);
    Ok(ShadowRun {
        report,
        mode,
        outputs,
        reference,
    })
}
