//! Fixtures for the pipeline benchmarks.

use henn_core::network::{parse_network, NetworkSpec};

/// A bundled network from the workspace `networks/` directory.
pub fn bundled(name: &str) -> NetworkSpec {
    let path = format!("{}/../../networks/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    parse_network(&text).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// Convolution, activation and batch norm on a `channels x side x side`
/// input.
pub fn conv_block(channels: usize, side: usize) -> NetworkSpec {
    parse_network(&format!(
        r#"{{"name":"block","input_shape":[{channels},{side},{side}],"layers":[
            {{"kind":"Conv2D","in_channels":{channels},"out_channels":{channels},"kernel":3,"padding":"same"}},
            {{"kind":"PolyActivation","act_coeffs":["0.125","0.5","0.25"]}},
            {{"kind":"BatchNorm","bn_stats":{{"gamma":["1"],"beta":["0.125"],"mu":["0"],"sigma_sq":["0.25"],"epsilon":"0"}}}}]}}"#
    ))
    .expect("fixture parses")
}
