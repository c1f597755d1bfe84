use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use mmfl_core::federation::{aggregate, Aggregation, ClientState, FederatedConfig, PreparedClient};
use mmfl_core::segnet::{Mode, NetConfig, NormKind, SegNet};
use mmfl_core::synthdata::{default_benchmark, generate_client};
use mmfl_core::{Tape, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[8, 16, 32, 32]);
    let w = Tensor::from_fn(&[16, 16, 3, 3], |i| ((i * 31) % 17) as f64 / 170.0 - 0.05);
    let b = Tensor::zeros(&[16]);
    c.bench_function("conv3x3 16->16 32px b8 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (
                tape.leaf(x.clone(), true),
                tape.leaf(w.clone(), true),
                tape.leaf(b.clone(), true),
            );
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let l = tape.mean(y);
            tape.backward(l).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

fn network(c: &mut Criterion) {
    let mut net = SegNet::build(NetConfig {
        in_channels: 6,
        base_width: 8,
        depth: 2,
        norm: NormKind::BatchNorm,
        seed: 1,
    })
    .unwrap();
    let x = ramp(&[4, 6, 32, 32]);
    c.bench_function("segnet forward eval b4", |bench| {
        bench.iter(|| black_box(net.predict(&x, Mode::Eval).unwrap()))
    });

    let bench_spec = default_benchmark();
    let reg = bench_spec.registry().unwrap();
    let data = generate_client(&bench_spec.train[0]).unwrap();
    let client = Arc::new(PreparedClient::new(&data, &reg, None).unwrap());
    let cfg = FederatedConfig::default();
    let mut state =
        ClientState::new(0, client, SegNet::build(cfg.net(reg.len())).unwrap(), &cfg).unwrap();
    c.bench_function("local train step b4", |bench| {
        bench.iter(|| black_box(state.train_step(1e-3, &cfg).unwrap()))
    });
}

fn server(c: &mut Criterion) {
    let cfg = FederatedConfig::default();
    let updates: Vec<_> = (0..5)
        .map(|s| {
            let mut n = cfg.clone();
            n.seed = s;
            SegNet::build(n.net(6)).unwrap().get_params()
        })
        .collect();
    let weights = vec![0.2; 5];
    c.bench_function("aggregate 5 clients", |bench| {
        bench.iter(|| black_box(aggregate(&updates, Aggregation::FedAvgAll, &weights).unwrap()))
    });
}

criterion_group!(benches, conv, network, server);
criterion_main!(benches);
