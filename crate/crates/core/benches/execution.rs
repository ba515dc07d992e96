//! Sequential against parallel execution of the three data-parallel loops:
//! per-subject influence values, replicate studies and bootstrap resamples.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sepfx_core::eif::contributions;
use sepfx_core::inference::{bootstrap, Estimator, EstimatorSpec};
use sepfx_core::simulation::{run_study, Scenario, ScenarioId, StudyConfig};
use sepfx_core::{Estimand, Execution, NuisanceSet, SurvivalForm};

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];
const DIRECT1: Estimand = Estimand::Direct { a_d: 1 };

fn influence_values(c: &mut Criterion) {
    let s = Scenario::new(ScenarioId::A2);
    let ds = s.generate(2000, 1).unwrap();
    let nuis = NuisanceSet::fit(&ds, &s.working_spec()).unwrap();
    let times = s.default_times();
    let mut group = c.benchmark_group("eif_contributions_n2000");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| contributions(&ds, &nuis, &times, DIRECT1, SurvivalForm::Exponential, exec).unwrap())
        });
    }
    group.finish();
}

fn replicate_study(c: &mut Criterion) {
    let config = StudyConfig::new(ScenarioId::A1, 400, 16, 2);
    let mut group = c.benchmark_group("study_a1_16_replicates");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_study(&config, exec).unwrap()));
    }
    group.finish();
}

fn resampling(c: &mut Criterion) {
    let s = Scenario::new(ScenarioId::A1);
    let ds = s.generate(400, 3).unwrap();
    let spec = EstimatorSpec::new(Estimator::OneStep, DIRECT1, s.working_spec());
    let mut group = c.benchmark_group("bootstrap_b50_n400");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap(&ds, &spec, &[5.0], 50, 4, 0.95, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, influence_values, replicate_study, resampling);
criterion_main!(benches);
