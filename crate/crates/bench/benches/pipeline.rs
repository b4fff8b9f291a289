use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use curemark::data::{build_landmark_dataset, LandmarkDataset};
use curemark::experiment::{evaluate_model, scenario_grid};
use curemark::prediction::{LandmarkModel, ModelOptions, SummaryKind};
use curemark::simulation::{generate_dataset, ScenarioSpec};

fn datasets(scenario: u32, m: usize) -> (LandmarkDataset, LandmarkDataset, Vec<f64>) {
    let spec = ScenarioSpec::from_id(scenario, m, 1, 1).unwrap();
    let (train, valid) = generate_dataset(&spec, 0).unwrap();
    let grid = scenario_grid(&spec, 10).unwrap();
    (
        build_landmark_dataset(&train.longitudinal, &train.subjects, spec.landmark).unwrap(),
        build_landmark_dataset(&valid.longitudinal, &valid.subjects, spec.landmark).unwrap(),
        grid,
    )
}

fn fitting(c: &mut Criterion) {
    let opts = ModelOptions::default();
    let mut g = c.benchmark_group("fit");
    g.sample_size(20);
    for m in [300, 1000] {
        let (train, _, _) = datasets(9, m);
        g.bench_function(format!("locf_em/m{m}"), |b| {
            b.iter(|| LandmarkModel::fit(black_box(&train), SummaryKind::Locf, &opts).unwrap())
        });
        g.bench_function(format!("reml_blup_em/m{m}"), |b| {
            b.iter(|| LandmarkModel::fit(black_box(&train), SummaryKind::ModelBased, &opts).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let (train, test, grid) = datasets(9, 1000);
    let model = LandmarkModel::fit(&train, SummaryKind::ModelBased, &ModelOptions::default()).unwrap();
    c.bench_function("predict/m1000", |b| b.iter(|| model.predict(black_box(&test), &grid).unwrap()));
    c.bench_function("evaluate/m1000", |b| b.iter(|| evaluate_model(&model, black_box(&test), &grid).unwrap()));
}

criterion_group!(benches, fitting, scoring);
criterion_main!(benches);
