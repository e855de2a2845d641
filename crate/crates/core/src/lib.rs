//! Compiles polynomial-activation CNNs into CKKS dataflow graphs, shortens
//! them, picks encryption parameters, estimates latency and searches for
//! cheaper architectures.

pub mod config;
pub mod cost;
pub mod ddg;
pub mod fixed;
pub mod lowering;
pub mod merge;
pub mod network;
pub mod pipeline;
pub mod search;
pub mod shadow;
pub mod weights;

pub use config::{ConfigError, PipelineConfig};
pub use cost::{
    estimate_cost, op_cost, select_params, Calibration, CkksParams, CostError, CostReport,
};
pub use ddg::{
    insert_rescales, multiplicative_depth, op_histogram, validate_ddg, Ddg, DdgBuilder, DdgError,
    DepthReport, OpClass, OpKind, RescaleError,
};
pub use fixed::{Decimal, Rational};
pub use lowering::{lower_network, CiphertextLayout, LoweredNetwork, LoweringError, QuantConfig};
pub use merge::{compute_merged_coeffs, merge_coefficients, MergeError, MergeOutcome};
pub use network::{
    parse_network, replace_module, serialize_network, validate_network, LayerSpec, NetworkError,
    NetworkSpec,
};
pub use pipeline::{compile, compile_run, shadow_run, Compiled, Error, ShadowRun};
pub use search::{greedy_search, SearchError, SearchOptions, SearchStep, SearchTrace};
pub use shadow::{
    compare_outputs, eval_ddg, eval_reference, EvalMode, EvalReport, ShadowError, SlotVector,
};
pub use weights::{Tensor, Weights, WeightsError};
