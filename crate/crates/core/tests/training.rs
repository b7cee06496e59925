use hyperrecon_core::data::gen_phantoms;
use hyperrecon_core::forward::{ForwardModel, TaskConfig, TaskKind};
use hyperrecon_core::losses::LossSpec;
use hyperrecon_core::networks::{HyperNetConfig, MainNetConfig};
use hyperrecon_core::numerics::NdArray;
use hyperrecon_core::training::{epoch_lambda_histogram, loss_at, Dataset, Sampling, TrainConfig, Trainer};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn phantoms(count: usize, size: usize, seed: u64, forward: &ForwardModel) -> Dataset<f32> {
    let imgs: Vec<NdArray<f64>> = gen_phantoms(count, size, seed).unwrap().into_iter().map(|p| p.image).collect();
    Dataset::simulate(&imgs, forward, seed + 1000).unwrap()
}

fn p_uniform(counts: &hyperrecon_core::training::LambdaHistogram) -> f64 {
    let dist = ChiSquared::new((counts.counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(counts.chi_square_uniform())
}

fn small_main(channels: usize) -> MainNetConfig {
    MainNetConfig { hidden_channels: 4, depth: 1, ..MainNetConfig::with_channels(channels) }
}

#[test]
fn uhs_draws_are_uniform_over_an_epoch() {
    let fwd = TaskConfig { kind: TaskKind::Denoise, ..TaskConfig::default() }.build(16, 16).unwrap();
    let train = phantoms(256, 16, 1, &fwd);
    let val = phantoms(8, 16, 2, &fwd);
    let cfg = TrainConfig { epochs: 1, val_grid: 2, ..TrainConfig::default() };
    let mut t = Trainer::hyper(
        &small_main(1),
        &HyperNetConfig { lambda_dim: 1, width: 4 },
        LossSpec::supervised([1.0, 1.0]),
        cfg,
    )
    .unwrap();
    let log = t.run_epoch(&train, &val).unwrap().clone();
    let h = epoch_lambda_histogram(&log, 10);
    assert_eq!(h.total(), 256);
    let p = p_uniform(&h);
    assert!(p > 0.01, "UHS histogram {:?} has p = {p}", h.counts);
}

#[test]
fn dhs_concentrates_the_selected_lambdas() {
    let fwd = TaskConfig { kind: TaskKind::Csmri, acceleration: 4.0, calibration: 4, ..TaskConfig::default() }
        .build(32, 32)
        .unwrap();
    let train = phantoms(128, 32, 3, &fwd);
    let val = phantoms(8, 32, 4, &fwd);
    let main = small_main(2);
    let spec = LossSpec::amortized_default(main.param_count().unwrap(), 32 * 32);
    let cfg = TrainConfig { epochs: 12, sampling: Sampling::Dhs, dhs_keep: 8, val_grid: 2, ..TrainConfig::default() };
    let mut t = Trainer::hyper(&main, &HyperNetConfig { lambda_dim: 2, width: 4 }, spec, cfg).unwrap();
    t.run(&train, &val, |_| {}).unwrap();
    // selection only favours some lambdas once training has separated them
    let lambdas: Vec<Vec<f64>> = t.history[6..].iter().flat_map(|e| e.lambdas.clone()).collect();
    let h = hyperrecon_core::training::lambda_histogram(&lambdas, 3);
    assert_eq!(h.total(), 6 * 4 * 8);
    let p = p_uniform(&h);
    eprintln!("DHS histogram {:?}, p = {p:.2e}", h.counts);
    assert!(p < 0.01, "DHS histogram {:?} has p = {p}", h.counts);
}

#[test]
fn pure_mae_validation_loss_decreases() {
    let fwd = TaskConfig { kind: TaskKind::Denoise, ..TaskConfig::default() }.build(64, 64).unwrap();
    let images = hyperrecon_core::data::DataConfig::default().generate().unwrap();
    let train: Dataset<f32> = Dataset::simulate(&images.train, &fwd, 11).unwrap();
    let val: Dataset<f32> = Dataset::simulate(&images.val, &fwd, 12).unwrap();
    let spec = LossSpec::supervised([1.0, 1.0]);
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let main = MainNetConfig { hidden_channels: 8, ..MainNetConfig::with_channels(1) };
    let mut t = Trainer::baseline(&main, &[0.0], spec.clone(), cfg).unwrap();
    let mut maes = vec![loss_at(&t.model, &[0.0], &val, &spec).unwrap().terms[0]];
    t.run(&train, &val, |e| maes.push(e.val.terms[0])).unwrap();
    let falling = maes.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falling >= 4, "validation MAE {maes:?}");
}
