use beamadapt::adaptation::adapt_fast;
use beamadapt::net::{backward_supervised, Arch, EmbeddingParams, Mode, NetInput, TrainSample};
use beamadapt::solvers::{sinr_balance_solve, wmmse_solve};
use beamadapt::svr::{svr_fit, SvrConfig};
use beamadapt::Problem;
use beamadapt_bench::{channels, labeled, system};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("solvers");
    for n in [4, 8] {
        let sys = system(n);
        let h = channels(&sys, 1, 1).remove(0);
        g.bench_with_input(BenchmarkId::new("sinr_balance", n), &h, |b, h| {
            b.iter(|| sinr_balance_solve(black_box(h), sys.power_budget, &sys.noise_power, Default::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("wmmse", n), &h, |b, h| {
            b.iter(|| wmmse_solve(black_box(h), sys.power_budget, &sys.noise_power, Default::default()).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let sys = system(4);
    let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 2);
    let data = labeled(Problem::SinrBalancing, &sys, 100, 3);
    let inputs: Vec<NetInput> = data.iter().map(|s| s.input.clone()).collect();
    let batch: Vec<&TrainSample> = data.iter().collect();
    let mut g = c.benchmark_group("embedding_net");
    g.bench_function("forward_eval_100", |b| b.iter(|| theta.forward_batch(black_box(&inputs), Mode::Eval).unwrap()));
    g.bench_function("backward_supervised_100", |b| b.iter(|| backward_supervised(&theta, black_box(&batch)).unwrap()));
    g.finish();
}

fn adaptation(c: &mut Criterion) {
    let sys = system(4);
    let theta = EmbeddingParams::init(Arch::new(4, 4), sys.power_budget, 4);
    let mut g = c.benchmark_group("adaptation");
    for n in [20, 100] {
        let set = labeled(Problem::SinrBalancing, &sys, n, 5);
        let x: Vec<Vec<f64>> = set.iter().map(|s| s.label.clone().unwrap()).collect();
        g.bench_with_input(BenchmarkId::new("svr_fit", n), &x, |b, x| {
            b.iter(|| svr_fit(black_box(x), black_box(x), &SvrConfig::default()).unwrap())
        });
    }
    // One online slot: refit on 5 samples and predict 10 test channels.
    let set = labeled(Problem::SinrBalancing, &sys, 5, 6);
    let test = channels(&sys, 10, 7);
    g.bench_function("online_slot", |b| {
        b.iter(|| {
            let bundle = adapt_fast(&theta, black_box(&set), Problem::SinrBalancing, &SvrConfig::default(), 0).unwrap();
            test.iter().map(|h| bundle.predict(h, &sys).unwrap().metric).sum::<f64>()
        })
    });
    g.finish();
}

criterion_group!(benches, solvers, network, adaptation);
criterion_main!(benches);
