//! Greedy replacement of mobile modules by single convolutions.
//!
//! Blocks are visited from the last to the first. At each step the current
//! network is compared with the same network where that block is a 3x3
//! convolution, and the replacement is kept only if it is strictly cheaper.

use serde::{Deserialize, Serialize};

use crate::network::{replace_module, NetworkError, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    /// 1-based block number.
    pub block_index: usize,
    pub cost_keep: f64,
    pub cost_replace: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_spec: NetworkSpec,
    /// Oracle calls made.
    pub evaluations: usize,
}

impl SearchTrace {
    /// Accepted block numbers in visiting order.
    pub fn accepted(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.block_index)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchOptions {
    /// Re-run the oracle on the current network at every step instead of
    /// reusing the cost it already has. Results are identical; only the
    /// number of evaluations changes.
    pub reevaluate_current: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError<E: std::error::Error + 'static> {
    #[error("block {block_index}: {source}")]
    Replace {
        block_index: usize,
        #[source]
        source: NetworkError,
    },
    #[error("cost evaluation failed for candidate {}: {source}", .candidate.name)]
    Oracle {
        /// Network the oracle was called on.
        candidate: Box<NetworkSpec>,
        /// Steps completed before the failure.
        steps: Vec<SearchStep>,
        #[source]
        source: E,
    },
}

/// Runs the search with `oracle` as the cost of a network. Blocks that are
/// no longer mobile modules are skipped.
pub fn greedy_search<E, F>(
    spec: &NetworkSpec,
    mut oracle: F,
    options: SearchOptions,
) -> Result<(NetworkSpec, SearchTrace), SearchError<E>>
where
    E: std::error::Error + 'static,
    F: FnMut(&NetworkSpec) -> Result<f64, E>,
{
    let mut evaluations = 0;
    let mut steps = Vec::new();
    let mut eval = |candidate: &NetworkSpec, steps: &[SearchStep], evaluations: &mut usize| {
        *evaluations += 1;
        oracle(candidate).map_err(|source| SearchError::Oracle {
            candidate: Box::new(candidate.clone()),
            steps: steps.to_vec(),
            source,
        })
    };

    let mut current = spec.clone();
    let initial_cost = eval(&current, &steps, &mut evaluations)?;
    let mut current_cost = initial_cost;
    for block_index in spec.mobile_blocks().into_iter().rev() {
        if options.reevaluate_current {
            current_cost = eval(&current, &steps, &mut evaluations)?;
        }
        let candidate =
            replace_module(&current, block_index).map_err(|source| SearchError::Replace {
                block_index,
                source,
            })?;
        let cost_replace = eval(&candidate, &steps, &mut evaluations)?;
        let accepted = cost_replace < current_cost;
        steps.push(SearchStep {
            block_index,
            cost_keep: current_cost,
            cost_replace,
            accepted,
        });
        if accepted {
            current = candidate;
            current_cost = cost_replace;
        }
    }
    let trace = SearchTrace {
        steps,
        initial_cost,
        final_cost: current_cost,
        final_spec: current.clone(),
        evaluations,
    };
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;
    use std::convert::Infallible;

    fn net(blocks: usize) -> NetworkSpec {
        let mut layers = vec![
            r#"{"kind":"Conv2D","in_channels":3,"out_channels":8,"kernel":3,"padding":"same"}"#
                .to_string(),
        ];
        for _ in 0..blocks {
            layers.push(
                r#"{"kind":"FireModule","in_channels":8,"out_channels":8,"fire_squeeze":2,"fire_expand1":4,"fire_expand3":4}"#
                    .to_string(),
            );
        }
        parse_network(&format!(
            r#"{{"name":"n","input_shape":[3,8,8],"layers":[{}]}}"#,
            layers.join(",")
        ))
        .unwrap()
    }

    fn replaced(spec: &NetworkSpec) -> usize {
        spec.block_indices.len() - spec.mobile_blocks().len()
    }

    #[test]
    fn no_blocks_means_no_steps() {
        let spec = net(0);
        let (out, trace) = greedy_search(
            &spec,
            |_| Ok::<_, Infallible>(1.0),
            SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(out, spec);
        assert!(trace.steps.is_empty());
        assert_eq!(trace.evaluations, 1);
    }

    #[test]
    fn monotone_oracle_replaces_everything() {
        let spec = net(3);
        let oracle = |s: &NetworkSpec| Ok::<_, Infallible>(10.0 - replaced(s) as f64);
        let (out, trace) = greedy_search(&spec, oracle, SearchOptions::default()).unwrap();
        assert!(out.mobile_blocks().is_empty());
        assert_eq!(trace.accepted(), vec![3, 2, 1]);
        assert_eq!(trace.evaluations, 4);
    }

    #[test]
    fn ties_keep_the_module() {
        let spec = net(2);
        let (out, trace) = greedy_search(
            &spec,
            |_| Ok::<_, Infallible>(5.0),
            SearchOptions::default(),
        )
        .unwrap();
        assert_eq!(out, spec);
        assert!(trace.accepted().is_empty());
    }

    #[test]
    fn literal_reevaluation_only_changes_the_count() {
        let spec = net(3);
        let oracle =
            |s: &NetworkSpec| Ok::<_, Infallible>(if replaced(s) == 1 { 1.0 } else { 2.0 });
        let (a, ta) = greedy_search(&spec, oracle, SearchOptions::default()).unwrap();
        let (b, tb) = greedy_search(
            &spec,
            oracle,
            SearchOptions {
                reevaluate_current: true,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.steps, tb.steps);
        assert_eq!((ta.evaluations, tb.evaluations), (4, 7));
    }

    #[derive(Debug, thiserror::Error)]
    #[error("boom")]
    struct Boom;

    #[test]
    fn oracle_failure_keeps_partial_steps() {
        let spec = net(3);
        let mut calls = 0;
        let err = greedy_search(
            &spec,
            |_| {
                calls += 1;
                if calls == 3 {
                    Err(Boom)
                } else {
                    Ok(1.0)
                }
            },
            SearchOptions::default(),
        )
        .unwrap_err();
        match err {
            SearchError::Oracle {
                steps, candidate, ..
            } => {
                assert_eq!(steps.len(), 1);
                assert_eq!(replaced(&candidate), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
