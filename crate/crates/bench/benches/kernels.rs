use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gnpolicy::calculus::{ExactEvaluation, ExactModel};
use gnpolicy::env::{ParameterNoisePolicy, PlacementFeatures, TetrisBoard};
use gnpolicy::estimators::likelihood_ratio_estimates;
use gnpolicy::experiments::navigation::NavigationProtocol;
use gnpolicy::optimizers::{cg_gauss_newton_direction, compute_direction, CurvatureInputs, MvpMode, RuleKind, UpdateRule};
use gnpolicy::policy::ActionFeatures;
use gnpolicy::rng::stream;
use gnpolicy_bench::gibbs_problem;
use nalgebra::DVector;

fn exact_calculus(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_decomposition");
    for states in [10, 40, 160] {
        let (model, w) = gibbs_problem(states, 8, 1);
        group.bench_with_input(BenchmarkId::from_parameter(states), &states, |b, _| {
            b.iter(|| ExactEvaluation::new(&model, black_box(&w)).unwrap().decomposition().unwrap())
        });
    }
    group.finish();

    let (model, w) = gibbs_problem(40, 8, 2);
    c.bench_function("objective_40_states", |b| b.iter(|| model.objective(black_box(&w)).unwrap()));
}

fn directions(c: &mut Criterion) {
    let mut group = c.benchmark_group("gn2_direction");
    for n in [8, 32, 64] {
        let (model, w) = gibbs_problem(64, n, 3);
        let eval = ExactEvaluation::new(&model, &w).unwrap();
        let dec = eval.decomposition().unwrap();
        let inputs = CurvatureInputs::from_decomposition(&dec);
        let rule = UpdateRule::new(RuleKind::GaussNewton2).with_ridge(1e-10);
        group.bench_with_input(BenchmarkId::new("direct", n), &n, |b, _| {
            b.iter(|| compute_direction(&rule, black_box(&inputs)).unwrap())
        });
        let surrogate = eval.surrogate();
        group.bench_with_input(BenchmarkId::new("cg_exact", n), &n, |b, _| {
            b.iter(|| cg_gauss_newton_direction(&model, &surrogate, black_box(&dec.grad), Some(10), MvpMode::Exact).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cg_fd", n), &n, |b, _| {
            b.iter(|| {
                cg_gauss_newton_direction(&model, &surrogate, black_box(&dec.grad), Some(10), MvpMode::FiniteDifference { step: 1e-6 })
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let protocol = NavigationProtocol::default();
    let policy = ParameterNoisePolicy::new(protocol.sigma).unwrap();
    let w = DVector::from_vec(vec![30.0, -4.0]);
    let mut rng = stream(5, 0);
    let batch: Vec<_> = (0..50).map(|_| protocol.rollout(&policy, &w, &mut rng)).collect();
    c.bench_function("navigation_rollout", |b| {
        let mut rng = stream(6, 0);
        b.iter(|| protocol.rollout(&policy, black_box(&w), &mut rng))
    });
    c.bench_function("likelihood_ratio_estimates_50x80", |b| {
        b.iter(|| likelihood_ratio_estimates(black_box(&batch), &policy, &w, 1.0).unwrap())
    });

    let features = PlacementFeatures { width: 6 };
    let mut rng = stream(7, 0);
    let board = TetrisBoard::new_game(6, 6, &mut rng).unwrap();
    c.bench_function("tetris_placement_features", |b| b.iter(|| features.features(black_box(&board))));
}

criterion_group!(benches, exact_calculus, directions, sampling);
criterion_main!(benches);
