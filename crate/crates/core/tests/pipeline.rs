use std::sync::Arc;

use mmfl_core::federation::{
    adapt_bn_to_target, evaluate, input_batches, run_federation, Aggregation, Exclusion,
    FederatedConfig, PreparedClient, EVAL_BATCH,
};
use mmfl_core::segnet::{ParamSet, SegNet};
use mmfl_core::synthdata::{
    benchmark_with_seed, generate_client, load_benchmark, save_benchmark, Benchmark,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_benchmark(seed: u64) -> Benchmark {
    let mut b = benchmark_with_seed(seed);
    for s in b.train.iter_mut().chain(b.heldout.iter_mut()) {
        s.n_train = 8;
        s.n_val = 4;
    }
    b
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn dataset_on_disk_trains_like_dataset_in_memory() {
    let bench = small_benchmark(3);
    let reg = bench.registry().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_benchmark(dir.path(), &bench).unwrap();
    assert_eq!(manifest.registry, reg.names());
    let (_, loaded) = load_benchmark(dir.path()).unwrap();

    let prep = |d: &mmfl_core::synthdata::ClientDataset| {
        Arc::new(PreparedClient::new(d, &reg, None).unwrap())
    };
    let from_disk: Vec<_> = loaded
        .iter()
        .take(bench.train.len())
        .map(|(_, d)| prep(d))
        .collect();
    let in_memory: Vec<_> = bench
        .train
        .iter()
        .map(|s| prep(&generate_client(s).unwrap()))
        .collect();
    assert_eq!(from_disk, in_memory);

    let cfg = FederatedConfig {
        rounds: 2,
        tau: 2,
        warmup_rounds: 1,
        decay_start_round: 1,
        base_width: 4,
        ..FederatedConfig::default()
    };
    let a = run_federation(&from_disk, &cfg, None).unwrap();
    let b = run_federation(&in_memory, &cfg, None).unwrap();
    assert!(a.global.bit_eq(&b.global));
    assert_eq!(a.metrics(), b.metrics());
}

#[test]
fn adapting_to_a_training_client_recovers_its_statistics() {
    let bench = small_benchmark(0);
    let reg = bench.registry().unwrap();
    let mut spec = bench.train[0].clone();
    spec.n_train = 24;
    let client =
        Arc::new(PreparedClient::new(&generate_client(&spec).unwrap(), &reg, None).unwrap());
    let cfg = FederatedConfig {
        rounds: 12,
        tau: 6,
        warmup_rounds: 2,
        decay_start_round: 4,
        drop_enabled: false,
        aggregation: Aggregation::FedBnClientSpecific,
        ..FederatedConfig::default()
    };
    let out = run_federation(std::slice::from_ref(&client), &cfg, None).unwrap();
    let own = &out.client_norms[0].1;
    let batches = input_batches(&client, &client.train, EVAL_BATCH).unwrap();
    let adapted = adapt_bn_to_target(&out.global, own, &cfg.net(reg.len()), &batches).unwrap();

    let mut worst: f64 = 0.0;
    for (name, e) in own
        .iter()
        .filter(|(n, _)| n.ends_with("running_mean") || n.ends_with("running_var"))
    {
        let a = adapted.get(name).unwrap();
        worst = worst.max(rel_diff(a.tensor.data(), e.tensor.data()));
    }
    assert!(worst < 0.1, "running statistics differ by {worst:.3}");
    // affine parameters are taken verbatim
    for (name, e) in own
        .iter()
        .filter(|(n, _)| n.ends_with("gamma") || n.ends_with("beta"))
    {
        assert_eq!(adapted.get(name).unwrap().tensor, e.tensor);
    }

    // and the adapted model scores close to the client's own model
    let score = |p: &ParamSet| {
        let mut net = SegNet::build(cfg.net(reg.len())).unwrap();
        net.set_params(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = evaluate(&mut net, &client, &client.val, &Exclusion::None, &mut rng).unwrap();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let own_dice = score(&out.inference_params(0).unwrap());
    let adapted_dice = score(&adapted);
    assert!(
        (own_dice - adapted_dice).abs() < 0.05,
        "{own_dice} vs {adapted_dice}"
    );
}
