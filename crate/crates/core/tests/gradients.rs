mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use magnet_core::diffcore::finite_difference_check;
use magnet_core::model::{accumulate_joint_gradient, init_params, joint_loss_value, MagnetConfig, Mode};
use magnet_core::objectives::{sf_consistency_grad, sf_consistency_loss, LossWeights};
use magnet_core::diffcore::{ParamStore, Tensor2};

fn check(config: &MagnetConfig, n: usize, seed: u64, weights: LossWeights) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = common::random_graph(&mut rng, n, 0.25);
    let fnc = common::random_fnc(&mut rng, n);
    let target = 0.7;
    let mut params = init_params(config, &mut rng).unwrap();
    params.zero_grads();
    accumulate_joint_gradient(&graph, &fnc, target, &mut params, config, weights, 1, Mode::Eval, &mut rng).unwrap();
    finite_difference_check(
        |p| joint_loss_value(&graph, &fnc, target, p, config, weights),
        &params,
        1e-5,
    )
    .unwrap()
}

#[test]
fn joint_loss_gradients_small_models() {
    let config = MagnetConfig {
        hidden: 8,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        ..Default::default()
    };
    for seed in 0..3 {
        let err = check(&config, 6, seed, LossWeights::default());
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn edge_only_kv_gradients() {
    let config = MagnetConfig {
        hidden: 8,
        heads: 4,
        layers: 1,
        dropout: 0.0,
        edge_only_kv: true,
        ..Default::default()
    };
    let err = check(&config, 5, 11, LossWeights::default());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn task_only_and_sf_only_gradients() {
    let config = MagnetConfig {
        hidden: 4,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        ..Default::default()
    };
    assert!(check(&config, 4, 5, LossWeights { sf: 0.0, task: 1.0 }) < 1e-4);
    assert!(check(&config, 4, 6, LossWeights { sf: 1.0, task: 0.0 }) < 1e-4);
}

#[test]
fn sf_loss_gradient_wrt_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 5;
    let fnc = common::random_fnc(&mut rng, n);
    let x = {
        let mut t = Tensor2::zeros(n, 3);
        for v in &mut t.values {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        t
    };
    let mut store = ParamStore::new();
    store.insert("x", x.clone());
    store.zero_grads();
    store.accumulate_grad("x", &sf_consistency_grad(&x, &fnc).unwrap());
    let err = finite_difference_check(|p| sf_consistency_loss(p.get("x"), &fnc), &store, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}
