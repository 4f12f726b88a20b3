//! Benchmark fixtures shared by the criterion targets.

use beamadapt::adaptation::draw_labeled;
use beamadapt::channel::{FadingSpec, LargeScaleSpec};
use beamadapt::dataset::draw_channels;
use beamadapt::net::TrainSample;
use beamadapt::{CMat, Problem, SystemConfig};

/// `Nt = K = n` at 25 dBm with the thermal noise floor.
pub fn system(n: usize) -> SystemConfig {
    SystemConfig::physical(n, n, 25.0).expect("valid system")
}

pub fn channels(sys: &SystemConfig, n: usize, seed: u64) -> Vec<CMat> {
    draw_channels(sys, &FadingSpec::rayleigh(), &LargeScaleSpec::disabled(), n, seed, 0)
}

/// Solver-labelled samples from the shifted test scenario.
pub fn labeled(problem: Problem, sys: &SystemConfig, n: usize, seed: u64) -> Vec<TrainSample> {
    let large = LargeScaleSpec::cell(500.0, 50.0);
    draw_labeled(problem, sys, &FadingSpec::rayleigh(), &large, n, seed, 0)
        .expect("labelled draw")
        .0
}
