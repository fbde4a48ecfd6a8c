#![allow(dead_code)]

pub mod oracles;

use ctvr::numerics::{Graph, Tensor, Var};
use ctvr::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of a batch of directional finite-difference probes.
#[derive(Debug)]
pub struct ProbeReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Compares the analytic directional derivative `<grad f, d>` against the
/// central difference `(f(x + h d) - f(x - h d)) / 2h` along random
/// directions `d` spanning all `inputs` at once.
///
/// `build` must return a scalar. Non-scalar outputs should be contracted
/// with [`contract`] first.
pub fn probe<F>(inputs: &[Tensor], probes: usize, seed: u64, h: f64, build: F) -> ProbeReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let dirs: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::randn(t.shape(), 1.0, &mut rng))
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shift = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let data = t
                        .data()
                        .iter()
                        .zip(d.data())
                        .map(|(x, dx)| x + sign * h * dx)
                        .collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap()
                })
                .collect()
        };
        let numeric = (eval(&shift(1.0)) - eval(&shift(-1.0))) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    ProbeReport {
        probes,
        max_rel_err: worst,
    }
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// Jacobian entry contributes.
pub fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.value(out).shape(), 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_backbone_config() -> ctvr::backbone::BackboneConfig {
    ctvr::backbone::BackboneConfig {
        width: 8,
        heads: 2,
        vision_layers: 2,
        text_layers: 2,
        patches: 3,
        input_width: 4,
        vocab: 40,
        context: 6,
        ..ctvr::backbone::BackboneConfig::default()
    }
}

/// Randomly initialised, frozen backbone at checkpoint precision; a cheap
/// stand-in for a pretrained one.
pub fn tiny_backbone(seed: u64) -> ctvr::backbone::BackboneParams {
    let b = ctvr::backbone::BackboneParams::init(tiny_backbone_config(), &mut rng(seed)).unwrap();
    ctvr::backbone::BackboneParams::decode(&b.encode().unwrap()).unwrap()
}

pub fn tiny_stream_config(seed: u64) -> ctvr::taskgen::StreamConfig {
    ctvr::taskgen::StreamConfig {
        world: ctvr::taskgen::WorldConfig::for_backbone(5, &tiny_backbone_config()),
        seed,
        tasks: 3,
        cats_per_task: 2,
        videos_per_cat: 4,
        test_per_cat: 2,
        frames: 2,
        query_len: 4,
        base_categories: 2,
    }
}

pub fn tiny_run_config(seed: u64) -> ctvr::harness::RunConfig {
    ctvr::harness::RunConfig {
        epochs: 2,
        batch: 4,
        ffa_depth: 1,
        experts: 3,
        k: 2,
        rank: 2,
        refs: 3,
        seed,
        ..ctvr::harness::RunConfig::default()
    }
}
