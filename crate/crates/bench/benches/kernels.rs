use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dfrc_core::conic::{self, LinExpr, PerspectiveTerm};
use dfrc_core::fim::crb_matrices;
use dfrc_core::pipeline::{builtin, prepare, CovarianceMode};
use dfrc_core::{
    AllocationInstance, ConicProblem, CovarianceSet, FimBlocks, FimOptions, PenaltySchedule, PowerProfile, Quantity,
    SelectionInstance, SolverSettings,
};
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn water_filling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gains: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..20.0)).collect();
    let mut p = ConicProblem::new();
    let vars: Vec<usize> = (0..gains.len()).map(|i| p.add_var(format!("p{i}"), 0.0)).collect();
    let mut sum = LinExpr::constant(-5.0);
    for (&v, &g) in vars.iter().zip(&gains) {
        p.add_perspective(PerspectiveTerm { weight: 1.0, gain: g, numerator: v, denominator: None });
        sum = sum.term(v, 1.0);
    }
    p.add_eq(sum);
    let settings = SolverSettings::default();
    c.bench_function("conic water-filling K=64", |b| b.iter(|| conic::solve(black_box(&p), &settings, None)));
}

fn fim_blocks(c: &mut Criterion) {
    let mut config = builtin("desk_default").unwrap();
    config.system.covariance = CovarianceMode::Isotropic;
    let sc = config.scenario().unwrap();
    let covs = CovarianceSet::isotropic(sc.num_subcarriers, 2, sc.num_tx_antennas);
    c.bench_function("fim blocks desk", |b| b.iter(|| FimBlocks::build(black_box(&sc), &covs, FimOptions::default())));
    let blocks = FimBlocks::build(&sc, &covs, FimOptions::default()).unwrap();
    let mut profile = PowerProfile::zeros(sc.num_subcarriers, 2, sc.num_users());
    profile.radar.fill(sc.total_power_w / (2 * sc.num_subcarriers) as f64);
    let mask = vec![true; sc.num_receivers()];
    c.bench_function("crb matrices desk", |b| b.iter(|| crb_matrices(&blocks, black_box(&profile), &mask)));
}

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut psd = || {
        let g = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
        g * g.transpose() + Matrix2::identity() * 1e-3
    };
    let mut gen = || (0..2).map(|_| (0..10).map(|_| psd()).collect()).collect();
    let b_d = gen();
    let b_v = gen();
    let inst = SelectionInstance::from_matrices(b_d, b_v, 5).unwrap();
    c.bench_function("selection R_x=10 N_r=5", |b| b.iter(|| inst.select(Quantity::Location, f64::INFINITY, 1e-3)));
}

fn allocation(c: &mut Criterion) {
    let mut config = builtin("desk_default").unwrap();
    config.system.covariance = CovarianceMode::Isotropic;
    config.scenario.num_subcarriers = 8;
    let prepared = prepare(&config).unwrap();
    let mask = [true, true, true, false, false];
    let inst = AllocationInstance::new(&prepared.scenario, &prepared.blocks, &mask, 1e3, 1e3).unwrap();
    let mut group = c.benchmark_group("allocation");
    group.sample_size(10);
    group.bench_function("algorithm1 desk K=8", |b| b.iter(|| inst.algorithm1(&PenaltySchedule::default(), None)));
    group.finish();
}

criterion_group!(benches, water_filling, fim_blocks, selection, allocation);
criterion_main!(benches);
