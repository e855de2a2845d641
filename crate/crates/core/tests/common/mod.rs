//! Seeded generators shared by the integration tests.
#![allow(dead_code)]

use henn_core::network::{parse_network, NetworkSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dyadic value `k / 2^bits` with `|k| <= max`.
pub fn dyadic(rng: &mut ChaCha8Rng, max: i64, bits: u32) -> String {
    let k = rng.random_range(-max..=max);
    format!("{}", k as f64 / f64::from(1u32 << bits))
}

pub fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.random_range(-1.0..1.0f64) * 1024.0).round() / 1024.0)
        .collect()
}

pub fn act_json(rng: &mut ChaCha8Rng) -> String {
    format!(
        r#"{{"kind":"PolyActivation","act_coeffs":["{}","{}","{}"]}}"#,
        dyadic(rng, 16, 6),
        dyadic(rng, 64, 6),
        dyadic(rng, 16, 6)
    )
}

pub fn bn_json(rng: &mut ChaCha8Rng, channels: usize) -> String {
    let list = |rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> String| {
        (0..channels)
            .map(|_| format!("\"{}\"", f(rng)))
            .collect::<Vec<_>>()
            .join(",")
    };
    let gamma = list(rng, &|r| dyadic(r, 32, 5));
    let beta = list(rng, &|r| dyadic(r, 16, 5));
    let mu = list(rng, &|r| dyadic(r, 16, 5));
    let sigma = list(rng, &|r| {
        ["0.0625", "0.25", "1", "4"][r.random_range(0..4)].to_string()
    });
    format!(
        r#"{{"kind":"BatchNorm","bn_stats":{{"gamma":[{gamma}],"beta":[{beta}],"mu":[{mu}],"sigma_sq":[{sigma}],"epsilon":"0"}}}}"#
    )
}

/// A random network of at most three blocks on an at most 8x8x4 input.
pub fn random_micro_net(rng: &mut ChaCha8Rng, i: usize) -> NetworkSpec {
    let c0 = rng.random_range(1..=4);
    let hw = rng.random_range(4..=8);
    let mut layers = Vec::new();
    let (mut c, mut h) = (c0, hw);
    for _ in 0..rng.random_range(1..=3) {
        match rng.random_range(0..4) {
            0 | 1 => {
                let o = rng.random_range(1..=4);
                let k = rng.random_range(1..=3usize).min(h);
                let same = k % 2 == 1 && rng.random_bool(0.5);
                layers.push(format!(
                    r#"{{"kind":"Conv2D","in_channels":{c},"out_channels":{o},"kernel":{k},"padding":"{}"}}"#,
                    if same { "same" } else { "valid" }
                ));
                if !same {
                    h = h + 1 - k;
                }
                c = o;
            }
            2 => {
                let s = rng.random_range(1..=2);
                let (e1, e3) = (rng.random_range(1..=2), rng.random_range(1..=2));
                layers.push(format!(
                    r#"{{"kind":"FireModule","in_channels":{c},"out_channels":{},"fire_squeeze":{s},"fire_expand1":{e1},"fire_expand3":{e3}}}"#,
                    e1 + e3
                ));
                c = e1 + e3;
            }
            _ => {
                if h >= 2 && h % 2 == 0 {
                    layers.push(r#"{"kind":"AvgPool","kernel":2}"#.to_string());
                    h /= 2;
                } else {
                    let k = if h >= 3 { 3 } else { 1 };
                    layers.push(format!(
                        r#"{{"kind":"Conv2D","in_channels":{c},"out_channels":{c},"kernel":{k},"padding":"same"}}"#
                    ));
                }
            }
        }
        layers.push(act_json(rng));
        if rng.random_bool(0.5) {
            layers.push(bn_json(rng, c));
        }
    }
    parse_network(&format!(
        r#"{{"name":"micro{i}","input_shape":[{c0},{hw},{hw}],"layers":[{}]}}"#,
        layers.join(",")
    ))
    .unwrap()
}
