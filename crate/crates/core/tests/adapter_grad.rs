mod common;

use common::{contract, probe, rng};
use ctvr::backbone::{BackboneConfig, BackboneParams, FfaHook, TameHook, Video};
use ctvr::ffa::{self, FfaStack};
use ctvr::losses;
use ctvr::numerics::{Graph, GradMap, ParameterSet, Tensor, Var};
use ctvr::tame::{self, AdapterVars, Role, TameConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 24;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut rng(seed))
}

fn assert_probe(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> ctvr::Result<Var>) {
    let r = probe(inputs, PROBES, 5, H, build);
    assert!(r.probes >= 20);
    assert!(r.max_rel_err <= TOL, "{name}: rel err {} over {} probes", r.max_rel_err, r.probes);
}

#[test]
fn frame_fusion_cross_attention() {
    // two frames of three tokens, width 4, two heads
    let (o, heads, frames, tokens) = (4, 2, 2, 3);
    let rows = ffa::previous_frame_rows(1, frames, tokens);
    let inputs = [
        randn(&[frames * tokens, o], 1.0, 1),
        randn(&[o, o], 0.5, 2),
        randn(&[o, o], 0.5, 3),
        randn(&[o, o], 0.5, 4),
        randn(&[frames * tokens, o], 1.0, 5),
        Tensor::new(vec![1], vec![0.7]).unwrap(),
    ];
    assert_probe("ffa", &inputs, |g, v| {
        let prev = g.gather_rows(v[0], rows.clone())?;
        let ca = ffa::cross_attend_graph(g, [v[1], v[2], v[3]], prev, v[0], frames, heads)?;
        let fused = ffa::fuse_graph(g, v[4], ca, v[5])?;
        contract(g, fused, 11)
    });
}

#[test]
fn routed_expert_path() {
    let (o, r, experts, k, batch, len) = (6, 2, 4, 2, 3, 4);
    let mut inputs = vec![
        randn(&[batch * len, o], 1.0, 1),
        randn(&[o, o], 0.5, 2),
        randn(&[r, o], 0.5, 3),
        randn(&[experts, o], 0.8, 4),
        randn(&[batch, o], 1.0, 5),
        randn(&[o], 0.3, 6),
    ];
    for i in 0..experts {
        inputs.push(randn(&[o, r], 0.5, 10 + i as u64));
    }
    assert_probe("tame", &inputs, |g, v| {
        let vars = AdapterVars {
            a: v[2],
            b: v[6..].to_vec(),
            router: v[3],
        };
        let gates = tame::route_graph(g, vars.router, v[4], Some(v[5]), k)?;
        let e = tame::experts_graph(g, &vars, v[0], gates, len)?;
        let y = tame::adapted_linear_graph(g, v[1], v[0], Some(e), 0.8)?;
        contract(g, y, 12)
    });
}

#[test]
fn unselected_experts_get_no_gradient() {
    let (o, r, experts) = (4, 2, 4);
    let mut g = Graph::new();
    let x = g.leaf(randn(&[2, o], 1.0, 1));
    let a = g.leaf(randn(&[r, o], 0.5, 2));
    let router = g.leaf(randn(&[experts, o], 1.0, 3));
    let eos = g.leaf(randn(&[1, o], 1.0, 4));
    let b: Vec<Var> = (0..experts).map(|i| g.leaf(randn(&[o, r], 0.5, 5 + i as u64))).collect();
    let vars = AdapterVars { a, b: b.clone(), router };
    let gates = tame::route_graph(&mut g, router, eos, None, 2).unwrap();
    let picked: Vec<bool> = g.value(gates).data().iter().map(|&w| w != 0.0).collect();
    let e = tame::experts_graph(&mut g, &vars, x, gates, 2).unwrap();
    let loss = contract(&mut g, e, 3).unwrap();
    g.backward(loss).unwrap();
    for (i, &bi) in b.iter().enumerate() {
        let norm: f64 = g.grad(bi).map_or(0.0, |d| d.iter().map(|v| v.abs()).sum());
        assert_eq!(norm > 0.0, picked[i], "expert {i}");
    }
}

#[test]
fn contrastive_losses() {
    let q = randn(&[5, 6], 1.0, 1);
    let v = randn(&[5, 6], 1.0, 2);
    let refs = randn(&[7, 6], 1.0, 3);
    assert_probe("infonce v2t", &[q.clone(), v.clone()], |g, x| Ok(losses::infonce_graph(g, x[0], x[1], 0.2)?.0));
    assert_probe("infonce t2v", &[q.clone(), v.clone()], |g, x| Ok(losses::infonce_graph(g, x[0], x[1], 0.2)?.1));
    assert_probe("ct", &[q.clone(), v.clone(), refs.clone()], |g, x| {
        losses::ct_graph(g, x[0], x[1], Some(x[2]), 0.2)
    });
    assert_probe("total", &[q, v, refs], |g, x| losses::total_graph(g, x[0], x[1], Some(x[2]), 0.2, 0.6));
}

/// Central differences of a loss over named parameters, along random
/// directions over every trainable entry at once.
fn probe_params(
    params: &ParameterSet,
    names: &[String],
    probes: usize,
    loss: impl Fn(&ParameterSet) -> (f64, Option<GradMap>),
) -> f64 {
    let (_, grads) = loss(params);
    let grads = grads.expect("analytic pass");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let dirs: Vec<Tensor> = names
            .iter()
            .map(|n| Tensor::randn(params.get(n).unwrap().shape(), 1.0, &mut rng))
            .collect();
        let analytic: f64 = names
            .iter()
            .zip(&dirs)
            .map(|(n, d)| grads.get(n).map_or(0.0, |gr| gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()))
            .sum();
        let shifted = |sign: f64| {
            let mut p = params.clone();
            for (n, d) in names.iter().zip(&dirs) {
                for (x, dx) in p.get_mut(n).unwrap().data_mut().iter_mut().zip(d.data()) {
                    *x += sign * H * dx;
                }
            }
            loss(&p).0
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[test]
fn full_adapted_model_total_loss() {
    let cfg = BackboneConfig {
        width: 8,
        heads: 2,
        vision_layers: 1,
        text_layers: 1,
        patches: 3,
        input_width: 4,
        vocab: 12,
        context: 5,
        ..BackboneConfig::default()
    };
    let mut r = rng(3);
    let mut bb = BackboneParams::init(cfg.clone(), &mut r).unwrap();
    bb.freeze();
    let stack = FfaStack::new(1, 2, 8).unwrap();
    let tame_cfg = TameConfig {
        experts: 3,
        k: 2,
        rank: 2,
        lambda: 1.0,
        roles: vec![Role::Q, Role::V],
        width: 8,
    };
    let mut params = stack.init_params(&mut r);
    // nonzero adapters so every path carries gradient
    let mut tame_params = tame_cfg.init_params(1, &mut r).unwrap();
    let names: Vec<String> = tame_params.names().map(str::to_string).collect();
    for n in &names {
        *tame_params.get_mut(n).unwrap() = Tensor::randn(tame_params.get(n).unwrap().shape(), 0.3, &mut r);
    }
    let ffa_names: Vec<String> = params.names().map(str::to_string).collect();
    for n in &ffa_names {
        let shape = params.get(n).unwrap().shape().to_vec();
        *params.get_mut(n).unwrap() = Tensor::randn(&shape, 0.3, &mut r);
    }
    params.extend(tame_params).unwrap();
    params.insert("proto.1", Tensor::randn(&[8], 0.3, &mut r)).unwrap();
    let names: Vec<String> = params.names().map(str::to_string).collect();

    let videos: Vec<Video> = (0..3)
        .map(|_| Video::new(Tensor::randn(&[2, 3, 4], 1.0, &mut r)).unwrap())
        .collect();
    let queries: Vec<Vec<u32>> = vec![vec![3, 4, 11], vec![5, 11], vec![1, 2, 6, 11]];
    let refs = Tensor::randn(&[4, 8], 1.0, &mut r);

    let loss = |p: &ParameterSet| -> (f64, Option<GradMap>) {
        let mut g = Graph::new();
        let vrefs: Vec<&Video> = videos.iter().collect();
        let v = bb
            .vision_graph(&mut g, &vrefs, Some(FfaHook { stack: &stack, params: p }))
            .unwrap()
            .features;
        let proto = g.use_param(p, "proto.1").unwrap();
        let ids: Vec<&[u32]> = queries.iter().map(Vec::as_slice).collect();
        let q = bb
            .text_graph(
                &mut g,
                &ids,
                Some(TameHook {
                    config: &tame_cfg,
                    params: p,
                    prototype: Some(proto),
                }),
            )
            .unwrap()
            .eos;
        let refs = g.constant(refs.clone());
        let l = losses::total_graph(&mut g, q, v, Some(refs), 0.5, 0.6).unwrap();
        let value = g.value(l).data()[0];
        (value, Some(g.backward(l).unwrap()))
    };
    let (_, grads) = loss(&params);
    let grads = grads.unwrap();
    assert!(grads.keys().all(|k| names.contains(k)), "gradient left the adapters");
    let err = probe_params(&params, &names, 20, loss);
    assert!(err <= TOL, "full graph rel err {err}");
}
