use std::sync::Arc;

use fedhet_core::fedcore::{
    ensemble_predict, fedavg_aggregate, model_soup, run_centralized, run_federated, run_federated_states,
    run_local_only, ClientData,
};
use fedhet_core::nnet::{forward, init_params, predict_proba, probabilities, ConvBlock, Layout};
use fedhet_core::{Algorithm, Batch, FlConfig, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        conv_blocks: vec![ConvBlock { channels: 3, kernel: 3, pool: 2 }],
        ..ModelSpec::patch_classifier()
    }
}

/// Class k images carry a bright square in a class-specific position.
fn toy_batch(n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 8;
    let mut inputs = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..5);
        for y in 0..side {
            for x in 0..side {
                let on = label > 0 && y / 4 == (label - 1) / 2 && x / 4 == (label - 1) % 2;
                inputs.push(if on { 0.9 } else { 0.1 } + rng.random_range(-0.05..0.05));
            }
        }
        labels.push(label);
    }
    Batch::new(side, side, inputs, labels).unwrap()
}

fn cfg(algorithm: Algorithm) -> FlConfig {
    FlConfig {
        algorithm,
        rounds: 4,
        local_steps: 5,
        lr: 0.1,
        prox_mu: 0.0,
        batch_size: 8,
        seed: 17,
        ..FlConfig::default()
    }
}

fn round_trajectory(
    spec: &ModelSpec,
    init: &ParamVector,
    clients: &[ClientData],
    c: &FlConfig,
) -> Vec<ParamVector> {
    let mut out = Vec::new();
    run_federated_states(spec, init, clients, c, None, |s, _| out.push(s.params.clone())).unwrap();
    out
}

#[test]
fn single_client_fedavg_equals_centralized_each_round() {
    let spec = tiny_spec();
    let init = init_params(&spec, 1).unwrap();
    let data = toy_batch(40, 2);
    let c = cfg(Algorithm::FedAvg);
    let fed = round_trajectory(&spec, &init, &[ClientData::new(0, data.clone())], &c);
    for r in 1..=c.rounds {
        let (central, _) = run_centralized(&spec, &init, &data, &FlConfig { rounds: r, ..c.clone() }, None).unwrap();
        assert!(fed[r - 1].max_abs_diff(&central) <= 1e-12);
    }
}

#[test]
fn fedprox_with_zero_mu_equals_fedavg() {
    let spec = tiny_spec();
    let init = init_params(&spec, 3).unwrap();
    let clients = [ClientData::new(0, toy_batch(30, 4)), ClientData::new(1, toy_batch(25, 5))];
    let (avg, _) = run_federated(&spec, &init, &clients, &cfg(Algorithm::FedAvg), None).unwrap();
    let (prox, _) = run_federated(&spec, &init, &clients, &cfg(Algorithm::FedProx), None).unwrap();
    assert!(avg.max_abs_diff(&prox) <= 1e-12);
}

#[test]
fn scaffold_first_round_equals_fedavg() {
    let spec = tiny_spec();
    let init = init_params(&spec, 5).unwrap();
    let clients = [ClientData::new(0, toy_batch(30, 6)), ClientData::new(1, toy_batch(30, 7))];
    let one = |a| FlConfig { rounds: 1, ..cfg(a) };
    let (avg, _) = run_federated(&spec, &init, &clients, &one(Algorithm::FedAvg), None).unwrap();
    let (sc, _) = run_federated(&spec, &init, &clients, &one(Algorithm::Scaffold), None).unwrap();
    assert!(avg.max_abs_diff(&sc) <= 1e-12);
    // Later rounds are corrected and therefore differ.
    let (avg5, _) = run_federated(&spec, &init, &clients, &cfg(Algorithm::FedAvg), None).unwrap();
    let (sc5, _) = run_federated(&spec, &init, &clients, &cfg(Algorithm::Scaffold), None).unwrap();
    assert!(avg5.max_abs_diff(&sc5) > 0.0);
}

#[test]
fn scaffold_server_control_is_mean_of_client_controls() {
    let spec = tiny_spec();
    let init = init_params(&spec, 8).unwrap();
    let clients: Vec<ClientData> = (0..3).map(|i| ClientData::new(i, toy_batch(20 + 5 * i, 10 + i as u64))).collect();
    let c = FlConfig {
        rounds: 5,
        ..cfg(Algorithm::Scaffold)
    };
    let mut checked = 0;
    run_federated_states(&spec, &init, &clients, &c, None, |server, states| {
        let mut mean = init.zeros_like();
        for s in states {
            mean.axpy(1.0 / 3.0, s.control.as_ref().unwrap()).unwrap();
        }
        assert!(server.control.as_ref().unwrap().max_abs_diff(&mean) <= 1e-10);
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 5);
}

#[test]
fn identical_clients_average_to_either_local_result() {
    let spec = tiny_spec();
    let init = init_params(&spec, 9).unwrap();
    let data = toy_batch(30, 11);
    // Same client id gives the same stream; equal data gives equal updates.
    let clients = [ClientData::new(4, data.clone()), ClientData::new(4, data)];
    let c = cfg(Algorithm::FedAvg);
    run_federated_states(&spec, &init, &clients, &c, None, |server, states| {
        assert_eq!(states[0].params, states[1].params);
        assert!(server.params.max_abs_diff(states[0].params.as_ref().unwrap()) <= 1e-15);
    })
    .unwrap();
}

#[test]
fn runs_are_deterministic_and_history_is_complete() {
    let spec = tiny_spec();
    let init = init_params(&spec, 12).unwrap();
    let clients = [ClientData::new(1, toy_batch(30, 13)), ClientData::new(0, toy_batch(30, 14))];
    let c = cfg(Algorithm::Scaffold);
    let (a, ha) = run_federated(&spec, &init, &clients, &c, None).unwrap();
    let swapped = [clients[1].clone(), clients[0].clone()];
    let (b, hb) = run_federated(&spec, &init, &swapped, &c, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.len(), c.rounds);
    assert_eq!(ha.to_csv(false), hb.to_csv(false));
}

#[test]
fn training_reduces_loss_and_zero_lr_keeps_init() {
    let spec = tiny_spec();
    let init = init_params(&spec, 15).unwrap();
    let data = toy_batch(60, 16);
    let c = FlConfig {
        rounds: 10,
        local_steps: 10,
        seed: 3,
        ..FlConfig::default()
    };
    let (trained, _) = run_centralized(&spec, &init, &data, &c, None).unwrap();
    let loss = |p: &ParamVector| fedhet_core::nnet::loss_and_grad(&spec, p, &data).unwrap().0;
    assert!(loss(&trained) < loss(&init));
    let (frozen, _) = run_centralized(&spec, &init, &data, &FlConfig { lr: 1e-300, ..c }, None).unwrap();
    assert!(frozen.max_abs_diff(&init) < 1e-200);
}

#[test]
fn local_only_baselines() {
    let spec = tiny_spec();
    let init = init_params(&spec, 20).unwrap();
    let a = toy_batch(30, 21);
    let b = toy_batch(30, 22);
    let c = cfg(Algorithm::FedAvg);
    let clients = [ClientData::new(0, a.clone()), ClientData::new(1, b)];
    let out = run_local_only(&spec, &[init.clone(), init.clone()], &clients, &c).unwrap();
    assert_eq!(out.len(), 2);
    assert!(out[0].0.max_abs_diff(&out[1].0) > 0.0);
    let twins = [ClientData::new(0, a.clone()), ClientData::new(0, a.clone())];
    let same = run_local_only(&spec, &[init.clone(), init.clone()], &twins, &c).unwrap();
    assert_eq!(same[0].0, same[1].0);
    let again = run_local_only(&spec, &[init.clone()], &[ClientData::new(0, a)], &c).unwrap();
    assert_eq!(again[0].0, same[0].0);
}

#[test]
fn ensemble_examples() {
    let spec = tiny_spec();
    let batch = toy_batch(6, 30);
    let m = init_params(&spec, 31).unwrap();
    let direct = predict_proba(&spec, &m, &batch).unwrap();
    assert_eq!(ensemble_predict(&spec, &[m.clone()], &batch).unwrap(), direct);
    let tripled = ensemble_predict(&spec, &[m.clone(), m.clone(), m.clone()], &batch).unwrap();
    assert!(tripled.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-15));

    // Negating the output layer negates the logits.
    let mut neg = m.clone();
    let out_w = neg.layout.slot("head.out.weight").unwrap().range();
    let out_b = neg.layout.slot("head.out.bias").unwrap().range();
    for i in out_w.chain(out_b) {
        neg.values[i] = -neg.values[i];
    }
    let uniform = ensemble_predict(&spec, &[m.clone(), neg], &batch).unwrap();
    assert!(uniform.iter().all(|p| (p - 0.2).abs() < 1e-12));

    let models: Vec<ParamVector> = (32..35).map(|s| init_params(&spec, s).unwrap()).collect();
    let one = batch.select(&[0]);
    let logits: Vec<Vec<f64>> = models.iter().map(|p| forward(&spec, p, &one).unwrap()).collect();
    let mean: Vec<f64> = (0..5).map(|k| logits.iter().map(|z| z[k]).sum::<f64>() / 3.0).collect();
    let expected = probabilities(5, &mean);
    let got = ensemble_predict(&spec, &models, &one).unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-15);
    }
    assert_eq!(model_soup(&[m.clone()]).unwrap(), m);
}

fn flat(values: Vec<f64>) -> ParamVector {
    let layout = Arc::new(Layout::from_shapes(vec![("w".into(), vec![values.len()])]));
    ParamVector::new(values, layout).unwrap()
}

proptest! {
    #[test]
    fn aggregate_in_hull_and_order_insensitive(
        rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 4), 1usize..50), 1..6)
    ) {
        let params: Vec<ParamVector> = rows.iter().map(|(v, _)| flat(v.clone())).collect();
        let updates: Vec<(&ParamVector, usize)> = params.iter().zip(&rows).map(|(p, (_, n))| (p, *n)).collect();
        let agg = fedavg_aggregate(&updates).unwrap();
        for j in 0..4 {
            let lo = rows.iter().map(|(v, _)| v[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|(v, _)| v[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg.values[j] >= lo - 1e-12 && agg.values[j] <= hi + 1e-12);
        }
        let mut reversed = updates.clone();
        reversed.reverse();
        prop_assert!(fedavg_aggregate(&reversed).unwrap().max_abs_diff(&agg) <= 1e-12);
    }
}
