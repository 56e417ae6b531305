#![allow(dead_code)]

use circuitlab::model::{batch_loss, ModelConfig, ModelParams, ModelVars, Precision};
use circuitlab::rng::stream_rng;
use circuitlab::tensor::{grad_check, AttentionVars, GradCheckReport, Tensor};

/// Finite-difference step for every numeric check.
pub const FD_EPS: f64 = 1e-5;
/// Largest acceptable relative error between analytic and numeric gradients.
pub const FD_MAX_REL: f64 = 1e-4;
/// Coordinates sampled per check.
pub const FD_COORDS: usize = 400;

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, &mut stream_rng(seed, 0))
}

/// Finite-difference reports for every differentiable primitive.
pub fn primitive_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, r: GradCheckReport| out.push((name, r));

    check(
        "affine 4x8x3",
        grad_check(
            |t, v| t.affine(v[0], v[1], Some(v[2])),
            &[randn(&[4, 8], 1.0, 1), randn(&[8, 3], 1.0, 2), randn(&[3], 1.0, 3)],
            FD_EPS,
            FD_COORDS,
            0,
        )
        .unwrap(),
    );
    check(
        "affine 6x10x5",
        grad_check(
            |t, v| t.affine(v[0], v[1], Some(v[2])),
            &[randn(&[6, 10], 1.0, 4), randn(&[10, 5], 1.0, 5), randn(&[5], 1.0, 6)],
            FD_EPS,
            FD_COORDS,
            1,
        )
        .unwrap(),
    );
    check(
        "layer_norm",
        grad_check(
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            &[randn(&[10, 12], 1.0, 7), randn(&[12], 1.0, 8), randn(&[12], 1.0, 9)],
            FD_EPS,
            FD_COORDS,
            2,
        )
        .unwrap(),
    );
    check(
        "softmax",
        grad_check(|t, v| Ok(t.softmax(v[0])), &[randn(&[5, 24], 1.5, 10)], FD_EPS, FD_COORDS, 3).unwrap(),
    );
    check(
        "gelu",
        grad_check(|t, v| Ok(t.gelu(v[0])), &[randn(&[10, 12], 2.0, 11)], FD_EPS, FD_COORDS, 4).unwrap(),
    );
    check(
        "embedding",
        grad_check(
            |t, v| t.embedding(v[0], &[3, 0, 3, 29, 17, 3, 8]),
            &[randn(&[30, 5], 1.0, 12)],
            FD_EPS,
            FD_COORDS,
            5,
        )
        .unwrap(),
    );
    check(
        "add",
        grad_check(
            |t, v| t.add(v[0], v[1]),
            &[randn(&[10, 12], 1.0, 13), randn(&[10, 12], 1.0, 14)],
            FD_EPS,
            FD_COORDS,
            6,
        )
        .unwrap(),
    );
    check(
        "cross_entropy",
        grad_check(
            |t, v| {
                let targets: Vec<Option<u32>> = (0..6).map(|i| (i % 3 != 1).then_some((i * 7 % 20) as u32)).collect();
                t.cross_entropy(v[0], &targets)
            },
            &[randn(&[6, 20], 2.0, 15)],
            FD_EPS,
            FD_COORDS,
            7,
        )
        .unwrap(),
    );
    check(
        "attention_mix",
        grad_check(
            |t, v| t.attention_mix(v[0], v[1], v[2], 3, 2),
            &[randn(&[6, 8], 1.0, 16), randn(&[6, 8], 1.0, 17), randn(&[6, 8], 1.0, 18)],
            FD_EPS,
            FD_COORDS,
            8,
        )
        .unwrap(),
    );
    let mut attn_params = vec![randn(&[6, 8], 1.0, 19)];
    for i in 0..4 {
        attn_params.push(randn(&[8, 8], 0.5, 20 + i));
        attn_params.push(randn(&[8], 0.5, 30 + i));
    }
    check(
        "causal_attention",
        grad_check(
            |t, v| {
                let p = AttentionVars {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                };
                t.causal_attention(v[0], &p, 3, 2)
            },
            &attn_params,
            FD_EPS,
            FD_COORDS,
            9,
        )
        .unwrap(),
    );
    out
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        model_dim: 8,
        num_heads: 2,
        mlp_dim: 16,
        num_iterations: 2,
        seed: 0,
        precision: Precision::F64,
    }
}

/// Finite-difference check of the full tiny-model training loss.
pub fn tiny_model_check() -> GradCheckReport {
    let cfg = tiny_model_config();
    let params = ModelParams::<f64>::init_with(&cfg, 0.3, &mut stream_rng(77, 0));
    let tensors: Vec<Tensor<f64>> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let inputs = [5u32, 0, 3, 1, 4, 4, 2, 3, 5, 0, 1, 2];
    let targets = [1u32, 0, 2, 1];
    grad_check(
        |t, v| {
            let vars = ModelVars(v.try_into().expect("21 params"));
            Ok(batch_loss(t, &vars, &cfg, &inputs, &targets)?.0)
        },
        &tensors,
        FD_EPS,
        FD_COORDS,
        11,
    )
    .unwrap()
}
