//! Exit criteria. Each test prints one `criterion N: PASS|FAIL` line with the
//! measured values and the pinned tolerance, then asserts.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::time::{Duration, Instant};

use henn_core::cost::{op_cost, select_params, Calibration};
use henn_core::ddg::{insert_rescales, multiplicative_depth, validate_ddg, OpClass};
use henn_core::lowering::{lower_network, QuantConfig};
use henn_core::merge::merge_coefficients;
use henn_core::network::{parse_network, replace_module, NetworkSpec};
use henn_core::pipeline::{compile, shadow_run};
use henn_core::search::{greedy_search, SearchOptions};
use henn_core::shadow::{compare_outputs, eval_ddg, pack_input, unpack_output, EvalMode};
use henn_core::weights::Weights;
use henn_core::PipelineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{act_json, bn_json, random_input, random_micro_net};

const TOL_REL: f64 = 1.0 / 1024.0;

fn report(n: u32, ok: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let ok = ok && elapsed < budget;
    println!(
        "criterion {n}: {} {detail} [{:.2?} of {:.0?}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        budget
    );
    ok
}

fn bundled(name: &str) -> NetworkSpec {
    let path = format!("{}/../../networks/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_network(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn no_merge() -> PipelineConfig {
    PipelineConfig {
        merge_enabled: false,
        ..PipelineConfig::default()
    }
}

#[test]
fn criterion_1_micro_conv_depth_and_rescales() {
    let t = Instant::now();
    let spec = parse_network(
        r#"{"name":"micro","input_shape":[1,3,3],"layers":[
            {"kind":"Conv2D","in_channels":1,"out_channels":1,"kernel":2}]}"#,
    )
    .unwrap();
    let quant = QuantConfig {
        input_scale_bits: 30,
        weight_scale_bits: 30,
        mask_scale_bits: 30,
        coeff_scale_bits: 30,
        prime_bits: 30,
    };
    let g = lower_network(&spec, &quant, None).unwrap().graph;
    let masked = g.count(OpClass::MulPlain) == 5;
    let g = insert_rescales(&g, 30).unwrap();
    let d = multiplicative_depth(&g).unwrap();
    let rescales = g.count(OpClass::Rescale);
    let ok = masked && validate_ddg(&g).is_empty() && d.depth == 2 && rescales == 2;
    let detail = format!(
        "depth {} (want 2), rescales {rescales} (want 2), mask applied {masked}",
        d.depth
    );
    assert!(report(1, ok, &detail, t.elapsed(), Duration::from_secs(1)));
}

#[test]
fn criterion_2_merging_cuts_block_depth() {
    let t = Instant::now();
    let spec = parse_network(
        r#"{"name":"block","input_shape":[2,6,6],"layers":[
            {"kind":"Conv2D","in_channels":2,"out_channels":2,"kernel":3},
            {"kind":"PolyActivation","act_coeffs":["0.5","0.25","0.125"]},
            {"kind":"BatchNorm","bn_stats":{"gamma":["1"],"beta":["0.5"],"mu":["0"],
              "sigma_sq":["0.25"],"epsilon":"0"}}]}"#,
    )
    .unwrap();
    let g = lower_network(&spec, &QuantConfig::default(), None)
        .unwrap()
        .graph;
    let before = multiplicative_depth(&g).unwrap().depth;
    let merged = merge_coefficients(&g, 10).unwrap().graph;
    let after = multiplicative_depth(&merged).unwrap().depth;
    let ok = before == 5 && after == 3 && validate_ddg(&merged).is_empty();
    let detail = format!("depth {before} -> {after} (want 5 -> 3)");
    assert!(report(2, ok, &detail, t.elapsed(), Duration::from_secs(1)));
}

#[test]
fn criterion_3_merge_preserves_semantics() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact_mismatches = 0;
    let mut worst_rel = 0.0f64;
    for i in 0..100u64 {
        let k = rng.random_range(1..=3);
        // same padding needs an odd kernel
        let padding = if k % 2 == 1 && rng.random_bool(0.5) {
            "same"
        } else {
            "valid"
        };
        let spec = parse_network(&format!(
            r#"{{"name":"m","input_shape":[4,8,8],"layers":[
                {{"kind":"Conv2D","in_channels":4,"out_channels":4,"kernel":{k},"padding":"{padding}"}},
                {},{}]}}"#,
            act_json(&mut rng),
            bn_json(&mut rng, 4)
        ))
        .unwrap();
        let weights = Weights::random(&spec, 1000 + i, 15);
        let input = random_input(&mut rng, 4 * 64);
        let merged = compile(&spec, &PipelineConfig::default(), Some(&weights)).unwrap();
        let plain = compile(&spec, &no_merge(), Some(&weights)).unwrap();
        let packed = pack_input(&merged.input_layout, &input);
        let run = |c: &henn_core::Compiled, mode| {
            unpack_output(
                &c.output_layout,
                &eval_ddg(&c.graph, &packed, mode).unwrap(),
            )
        };
        if run(&merged, EvalMode::Exact) != run(&plain, EvalMode::Exact) {
            exact_mismatches += 1;
        }
        let (qm, qp) = (
            run(&merged, EvalMode::Quantized),
            run(&plain, EvalMode::Quantized),
        );
        let per = merged.output_layout.valid_slots().len();
        worst_rel = worst_rel.max(compare_outputs(&qm, &qp, per, TOL_REL).max_rel_err);
    }
    let ok = exact_mismatches == 0 && worst_rel <= TOL_REL;
    let detail = format!("exact mismatches {exact_mismatches} (want 0), worst quantized rel err {worst_rel:.3e} (tol 2^-10)");
    assert!(report(3, ok, &detail, t.elapsed(), Duration::from_secs(30)));
}

#[test]
fn criterion_4_parameter_rows() {
    let t = Instant::now();
    let rows = [
        (17, 65536, 1020),
        (12, 32768, 720),
        (33, 131072, 1980),
        (36, 131072, 2160),
        (29, 65536, 1740),
    ];
    let mut bad = Vec::new();
    for (r, n, q) in rows {
        let p = select_params(r, 60).unwrap();
        if (p.poly_degree_n, p.total_q_bits) != (n, q) {
            bad.push(format!(
                "r={r} -> ({}, {})",
                p.poly_degree_n, p.total_q_bits
            ));
        }
    }
    let detail = format!("{} of 5 rows match {bad:?}", 5 - bad.len());
    assert!(report(
        4,
        bad.is_empty(),
        &detail,
        t.elapsed(),
        Duration::from_secs(1)
    ));
}

#[test]
fn criterion_5_squeezenet_rescale_accounting() {
    let t = Instant::now();
    let spec = bundled("squeezenet.json");
    let off = compile(&spec, &no_merge(), None).unwrap().report;
    let on = compile(&spec, &PipelineConfig::default(), None)
        .unwrap()
        .report;
    let saved = off.rescales as i64 - on.rescales as i64;
    let ok = (15..=19).contains(&off.rescales) && (2..=3).contains(&saved);
    let detail = format!(
        "r {} (want 17 +- 2), merged r {} (saves {saved}, want 2..3), N {}",
        off.rescales, on.rescales, off.params.poly_degree_n
    );
    assert!(report(
        5,
        ok,
        &detail,
        t.elapsed(),
        Duration::from_secs(120)
    ));
}

/// Cost looked up by the set of replaced block numbers.
fn stub(spec: &NetworkSpec, table: &[(&[usize], f64)], fallback: f64) -> f64 {
    let mobile: BTreeSet<usize> = spec.mobile_blocks().into_iter().collect();
    let replaced: BTreeSet<usize> = (1..=spec.block_count())
        .filter(|b| !mobile.contains(b))
        .collect();
    table
        .iter()
        .find(|(set, _)| set.iter().copied().collect::<BTreeSet<_>>() == replaced)
        .map(|&(_, c)| c)
        .unwrap_or(fallback)
}

#[test]
fn criterion_6_greedy_search_with_stub_costs() {
    let t = Instant::now();
    let squeeze = bundled("squeezenet.json");
    let table: &[(&[usize], f64)] = &[
        (&[], 72.7),
        (&[4], 43.8),
        (&[3, 4], 37.5),
        (&[2, 3, 4], 50.2),
    ];
    let (out, trace) = greedy_search(
        &squeeze,
        |s| Ok::<_, Infallible>(stub(s, table, 1.32 * 37.5)),
        SearchOptions::default(),
    )
    .unwrap();
    let want = replace_module(&replace_module(&squeeze, 4).unwrap(), 3).unwrap();
    let decisions: Vec<(usize, bool)> = trace
        .steps
        .iter()
        .map(|s| (s.block_index, s.accepted))
        .collect();
    let squeeze_ok = out == want && decisions == [(4, true), (3, true), (2, false), (1, false)];

    let inception = bundled("inceptionnet.json");
    let table: &[(&[usize], f64)] = &[
        (&[], 213.2),
        (&[9], 173.5),
        (&[8, 9], 153.15),
        (&[7, 8, 9], 132.8),
        (&[6, 7, 8, 9], 193.6),
    ];
    let (out, trace) = greedy_search(
        &inception,
        |s| Ok::<_, Infallible>(stub(s, table, 1.32 * 132.8)),
        SearchOptions::default(),
    )
    .unwrap();
    let mut want = inception.clone();
    for b in [9, 8, 7] {
        want = replace_module(&want, b).unwrap();
    }
    let inception_ok = out == want && trace.accepted() == [9, 8, 7];
    let detail = format!(
        "squeezenet decisions {decisions:?}; inception accepted {:?} (want [9, 8, 7])",
        trace.accepted()
    );
    assert!(report(
        6,
        squeeze_ok && inception_ok,
        &detail,
        t.elapsed(),
        Duration::from_secs(1)
    ));
}

#[test]
fn criterion_7_pipeline_matches_dense_reference() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..20 {
        let spec = random_micro_net(&mut rng, i);
        let weights = Weights::random(&spec, 700 + i as u64, 15);
        let s = spec.input();
        let input = random_input(&mut rng, s.c * s.h * s.w);
        let run = shadow_run(
            &spec,
            &PipelineConfig::default(),
            &weights,
            &input,
            EvalMode::Quantized,
            TOL_REL,
        )
        .unwrap();
        worst = worst.max(run.report.max_rel_err);
        if !run.report.passed {
            failures.push(i);
        }
    }
    let detail = format!("worst rel err {worst:.3e} (tol 2^-10), failing nets {failures:?}");
    assert!(report(
        7,
        failures.is_empty(),
        &detail,
        t.elapsed(),
        Duration::from_secs(120)
    ));
}

#[test]
fn criterion_8_cost_model_properties() {
    let t = Instant::now();
    let calib = Calibration::default();
    let classes = [
        OpClass::Add,
        OpClass::Sub,
        OpClass::MulPlain,
        OpClass::MulCipher,
        OpClass::Rotate,
        OpClass::Rescale,
    ];
    let degrees = [2048u64, 4096, 8192, 16384, 32768, 65536, 131072];
    let mut monotone = true;
    let mut ratios = true;
    for k in classes {
        for &n in &degrees {
            for l in 1..40u32 {
                monotone &= op_cost(k, l + 1, n, &calib) > op_cost(k, l, n, &calib);
                monotone &= op_cost(k, l, 2 * n, &calib) > op_cost(k, l, n, &calib);
                if l >= 2 {
                    let ratio = op_cost(k, l, n, &calib) / op_cost(k, l - 1, n, &calib);
                    let (lf, pf) = (f64::from(l), f64::from(l - 1));
                    let want = match k {
                        OpClass::Add | OpClass::Sub | OpClass::MulPlain => lf / pf,
                        _ => (lf * lf) / (pf * pf),
                    };
                    ratios &= ratio == want;
                }
            }
        }
    }
    let squeeze = bundled("squeezenet.json");
    let f34 = replace_module(&replace_module(&squeeze, 4).unwrap(), 3).unwrap();
    let config = PipelineConfig::default();
    let base = compile(&squeeze, &config, None).unwrap().report.cost_units;
    let ours = compile(&f34, &config, None).unwrap().report.cost_units;
    let ok = monotone && ratios && ours < base;
    let detail = format!(
        "monotone {monotone}, exact level ratios {ratios}, F34 {ours:.3e} < SqueezeNet {base:.3e}"
    );
    assert!(report(8, ok, &detail, t.elapsed(), Duration::from_secs(60)));
}

#[test]
fn criterion_9_operation_count_closed_forms() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = Vec::new();
    for _ in 0..10 {
        let i = rng.random_range(1..=16usize);
        let c = rng.random_range(1..=8usize);
        let o0 = rng.random_range(1..=12usize);
        let o1 = rng.random_range(1..=12usize);
        let o = o0 + o1;
        let conv = parse_network(&format!(
            r#"{{"name":"c","input_shape":[{i},4,4],"layers":[
                {{"kind":"Conv2D","in_channels":{i},"out_channels":{o},"kernel":3,"padding":"same"}}]}}"#
        ))
        .unwrap();
        let fire = parse_network(&format!(
            r#"{{"name":"f","input_shape":[{i},4,4],"layers":[
                {{"kind":"FireModule","in_channels":{i},"out_channels":{o},
                 "fire_squeeze":{c},"fire_expand1":{o0},"fire_expand3":{o1}}}]}}"#
        ))
        .unwrap();
        let sc = &lower_network(&conv, &QuantConfig::default(), None)
            .unwrap()
            .stats[0];
        let sf = &lower_network(&fire, &QuantConfig::default(), None)
            .unwrap()
            .stats[0];
        let got = (
            sc.rotation_terms,
            sc.filter_mults,
            sf.rotation_terms,
            sf.filter_mults,
        );
        let want = (
            i * 9,
            i * 9 * o,
            i + c * (9 + 1),
            i * c + c * o0 + c * 9 * o1,
        );
        if got != want {
            bad.push((i, c, o0, o1, got, want));
        }
    }
    let detail = format!("{} of 10 tuples match {bad:?}", 10 - bad.len());
    assert!(report(
        9,
        bad.is_empty(),
        &detail,
        t.elapsed(),
        Duration::from_secs(60)
    ));
}
