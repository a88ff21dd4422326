use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use dspodfl::engine::{self, make_variant, RunInputs, StepSchedule, Variant};
use dspodfl::graph::{regenerate_connected_rgg, TopologySchedule};
use dspodfl::mc;
use dspodfl::objectives::{make_quadratic, NoiseMode, QuadraticSpec};
use dspodfl::par::{self, Exec};
use dspodfl::sporadic::{sample_profile, Dist, ProfileSpec};

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn mixing_moments(c: &mut Criterion) {
    let inst = mc::random_instance(0, 8, 4, 7).unwrap();
    let mut g = c.benchmark_group("mixing_moments");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 20_000), |b| {
            b.iter(|| mc::mixing_moments(&inst.topology, &inst.weights, &inst.profile.b, 20_000, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let m = 10;
    let (base, _) = regenerate_connected_rgg(m, 0.4, 3, 1000).unwrap();
    let topology = TopologySchedule::new(base.clone(), Default::default());
    let spec = ProfileSpec { d: Dist::Uniform, b: Dist::Uniform, d_schedule: Default::default() };
    let profile = sample_profile(&spec, &base, 3).unwrap();
    let fam = make_quadratic(m, 5, &QuadraticSpec::default(), 3).unwrap();
    let vspec = make_variant(Variant::DSpodFL, &profile);
    let theta0 = nalgebra::DVector::zeros(5);
    let run_one = |seed: u64| {
        let inp = RunInputs {
            fam: &fam,
            topology: &topology,
            variant: &vspec,
            delay_profile: &profile,
            schedule: StepSchedule::Constant { alpha: 0.01 },
            noise: NoiseMode::Synthetic { sigma2: 0.01 },
            k_max: 500,
            eval_interval: 100,
            seed,
            theta0: theta0.clone(),
            optimum: None,
            test: None,
            accuracy: Default::default(),
            exec: Exec::Sequential,
            record_steps: 0,
            snapshot_every: 0,
        };
        engine::run(&inp).unwrap().final_state.consensus_error()
    };
    let mut g = c.benchmark_group("seed_sweep");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 16), |b| b.iter(|| black_box(par::map(exec, 16, |s| run_one(s as u64)))));
    }
    g.finish();
}

criterion_group!(benches, mixing_moments, seed_sweep);
criterion_main!(benches);
