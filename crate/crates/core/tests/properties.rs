use henn_core::cost::{estimate_cost, op_cost, select_params, Calibration, MAX_Q_BITS};
use henn_core::ddg::{
    insert_rescales, multiplicative_depth, validate_ddg, DdgBuilder, OpClass, OpKind,
};
use henn_core::lowering::{lower_network, QuantConfig};
use henn_core::merge::merge_coefficients;
use henn_core::network::{parse_network, replace_module, serialize_network, validate_network};
use henn_core::pipeline::compile;
use henn_core::shadow::{eval_ddg, pack_input, unpack_output, EvalMode};
use henn_core::weights::Weights;
use henn_core::PipelineConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{random_input, random_micro_net};

fn net(seed: u64) -> henn_core::NetworkSpec {
    random_micro_net(&mut ChaCha8Rng::seed_from_u64(seed), seed as usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn networks_round_trip(seed in any::<u64>()) {
        let spec = net(seed);
        let text = serialize_network(&spec);
        prop_assert_eq!(parse_network(&text).unwrap(), spec);
    }

    #[test]
    fn replacing_a_module_keeps_the_network_valid(seed in any::<u64>()) {
        let spec = net(seed);
        for b in spec.mobile_blocks() {
            let out = replace_module(&spec, b).unwrap();
            prop_assert!(validate_network(&out).is_empty());
            prop_assert_eq!(out.output_shape().unwrap(), spec.output_shape().unwrap());
            prop_assert_eq!(out.mobile_blocks().len() + 1, spec.mobile_blocks().len());
            prop_assert!(!out.mobile_blocks().contains(&b));
        }
    }

    #[test]
    fn rotations_compose(values in prop::collection::vec(-8i32..8, 2..24), s1 in -40i64..40, s2 in -40i64..40) {
        let slots = values.len();
        let mut b = DdgBuilder::new(slots, 60, 25);
        let x = b.input();
        let twice = b.rotate(x, s1);
        let twice = b.rotate(twice, s2);
        let once = b.rotate(x, (s1 + s2).rem_euclid(slots as i64));
        b.output(twice);
        b.output(once);
        let input: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        let out = eval_ddg(&b.finish(), std::slice::from_ref(&input), EvalMode::Exact).unwrap();
        prop_assert_eq!(&out[0].values, &out[1].values);
        let s = (s1 + s2).rem_euclid(slots as i64) as usize;
        for i in 0..slots {
            prop_assert_eq!(out[0].values[i], input[(i + s) % slots]);
        }
    }

    #[test]
    fn rescaled_graphs_are_leveled_and_stable(seed in any::<u64>(), waterline in 20u32..40) {
        let spec = net(seed);
        let g = lower_network(&spec, &QuantConfig::default(), None).unwrap().graph;
        let r = insert_rescales(&g, waterline).unwrap();
        prop_assert!(validate_ddg(&r).is_empty(), "{:?}", validate_ddg(&r));
        let levels = multiplicative_depth(&r).unwrap();
        prop_assert_eq!(Some(levels.rescale_count_r), r.rescale_budget());
        for node in &r.nodes {
            for &o in &node.operands {
                let op = r.node(o);
                if op.is_cipher() {
                    // levels never rise along an edge and drop by one per rescale
                    let drop = u32::from(node.kind == OpKind::Rescale);
                    prop_assert!(node.level.unwrap() + drop <= op.level.unwrap());
                }
            }
        }
        prop_assert_eq!(insert_rescales(&r, waterline).unwrap(), r);
    }

    #[test]
    fn merging_is_exact_and_idempotent(seed in any::<u64>()) {
        let spec = net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let weights = Weights::random(&spec, seed, 15);
        let low = lower_network(&spec, &QuantConfig::default(), Some(&weights)).unwrap();
        let once = merge_coefficients(&low.graph, 10).unwrap();
        let twice = merge_coefficients(&once.graph, 10).unwrap();
        prop_assert_eq!(twice.merged_tails, 0);
        prop_assert_eq!(&twice.graph, &once.graph);
        let s = spec.input();
        let input = pack_input(&low.input_layout, &random_input(&mut rng, s.c * s.h * s.w));
        let a = eval_ddg(&low.graph, &input, EvalMode::Exact).unwrap();
        let b = eval_ddg(&once.graph, &input, EvalMode::Exact).unwrap();
        prop_assert_eq!(unpack_output(&low.output_layout, &a), unpack_output(&low.output_layout, &b));
        prop_assert!(multiplicative_depth(&once.graph).unwrap().depth <= multiplicative_depth(&low.graph).unwrap().depth);
    }

    #[test]
    fn cost_grows_with_calibration(seed in any::<u64>(), k1 in 0.0f64..4.0, k2 in 0.0f64..4.0, dk in 0.01f64..2.0) {
        let spec = net(seed);
        let g = compile(&spec, &PipelineConfig::default(), None).unwrap().graph;
        let base = estimate_cost(&g, &Calibration { k1, k2 }).unwrap().cost_units;
        let more1 = estimate_cost(&g, &Calibration { k1: k1 + dk, k2 }).unwrap().cost_units;
        let more2 = estimate_cost(&g, &Calibration { k1, k2: k2 + dk }).unwrap().cost_units;
        prop_assert!(more1 >= base && more2 >= base);
    }

    #[test]
    fn op_cost_is_monotone(level in 1u32..60, n_index in 0usize..6, k1 in 0.01f64..10.0, k2 in 0.01f64..10.0) {
        let calib = Calibration { k1, k2 };
        let n = MAX_Q_BITS[n_index].0;
        for k in [OpClass::Add, OpClass::Sub, OpClass::MulPlain, OpClass::MulCipher, OpClass::Rotate, OpClass::Rescale] {
            prop_assert!(op_cost(k, level + 1, n, &calib) > op_cost(k, level, n, &calib));
            prop_assert!(op_cost(k, level, 2 * n, &calib) > op_cost(k, level, n, &calib));
        }
    }

    #[test]
    fn parameter_selection_is_monotone(r in 1u32..58, prime in 20u32..61) {
        if let (Ok(a), Ok(b)) = (select_params(r, prime), select_params(r + 1, prime)) {
            prop_assert!(a.poly_degree_n <= b.poly_degree_n);
            prop_assert!(a.total_q_bits < b.total_q_bits);
        }
        if let Ok(p) = select_params(r, prime) {
            let bound = MAX_Q_BITS.iter().find(|(n, _)| *n == p.poly_degree_n).unwrap().1;
            prop_assert!(p.total_q_bits <= bound);
            // the next smaller degree could not hold the modulus
            if let Some(i) = MAX_Q_BITS.iter().position(|(n, _)| *n == p.poly_degree_n).filter(|&i| i > 0) {
                prop_assert!(MAX_Q_BITS[i - 1].1 < p.total_q_bits);
            }
        }
    }
}
