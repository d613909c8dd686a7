use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotdiff_core::blocks::{evolve, Backend, BlockConfig};
use rotdiff_core::dataset::{DatasetPlan, Pair, TestScenes};
use rotdiff_core::flux::Diffusivity;
use rotdiff_core::grid::ImageGrid;
use rotdiff_core::model::{ModelConfig, ModelVariant, ParamVector, PARAM_COUNT};
use rotdiff_core::operators::OperatorSpec;
use rotdiff_core::trainer::{
    fd_gradient, loss, run_epoch, train, BatchObjective, GradientMode, LossValue, Objective, TrainConfig, TrainState,
};

const STENCIL: Backend = Backend::Stencil { alpha: 0.41, gamma: 0.0 };

fn small_plan(size: usize, count: usize) -> DatasetPlan {
    DatasetPlan {
        size,
        train_angle: 30.0,
        test_angles: vec![45.0],
        train_count: count,
        test_count: 1,
        noise_sigma: 60.0,
        test_scenes: TestScenes::Fresh,
        seed: 21,
    }
}

fn noisy_pairs(size: usize, count: usize) -> Vec<Pair> {
    small_plan(size, count).train_pairs().unwrap()
}

#[test]
fn offset_of_ten_without_diffusion_costs_one_hundred() {
    let clean = ImageGrid::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 50) as f64 * 4.0).unwrap();
    let pair = Pair {
        noisy: clean.map(|v| v + 10.0),
        clean,
    };
    let model = ModelConfig::new(ModelVariant::CoupledIso, STENCIL).unwrap();
    let mut params = ParamVector::initial();
    params.raw[0] = -40.0;
    let l = loss(&model, &params, &[&pair]).unwrap();
    assert!(!l.penalized);
    assert!((l.value - 100.0).abs() < 1e-6, "{}", l.value);
}

#[test]
fn identical_pairs_cost_nothing_without_diffusion() {
    let clean = ImageGrid::from_fn(12, 12, |x, _| x as f64 * 20.0).unwrap();
    let pair = Pair {
        noisy: clean.clone(),
        clean,
    };
    let model = ModelConfig::new(ModelVariant::UncoupledIso, Backend::AdjointComposition).unwrap();
    let mut params = ParamVector::initial();
    params.raw[0] = -40.0;
    assert!(loss(&model, &params, &[&pair]).unwrap().value < 1e-20);
}

#[test]
fn small_diffusion_time_lowers_the_loss() {
    let pairs = noisy_pairs(32, 1);
    let model = ModelConfig::new(ModelVariant::CoupledIso, STENCIL).unwrap();
    let at = |tau: f64| {
        let p = ParamVector::from_decoded(tau, 30.0, &[1.0; 8]).unwrap();
        loss(&model, &p, &[&pairs[0]]).unwrap().value
    };
    let (t0, t1) = (1e-6, 1e-3);
    assert!((at(t1) - at(t0)) / (t1 - t0) < 0.0);
}

/// Objective over an eight-scale block whose third and fourth scales coincide.
struct RepeatedScale<'a> {
    pair: &'a Pair,
}

impl Objective for RepeatedScale<'_> {
    fn loss(&self, p: &ParamVector) -> LossValue {
        let sigmas = [0.1, 0.3, 0.7, 0.7, 1.2, 2.0, 3.0, 5.0];
        let op = OperatorSpec::multiscale_gradient(&sigmas, p.betas()).unwrap();
        let cfg = BlockConfig::weighted(
            op,
            Diffusivity::exponential(p.lambda()).unwrap(),
            ModelVariant::CoupledAniso.coupling(),
            p.tau(),
            vec![0.25; 8],
        )
        .unwrap()
        .with_backend(STENCIL)
        .unwrap();
        let out = evolve(&cfg, &self.pair.noisy, 3).unwrap();
        let mse = out
            .values()
            .iter()
            .zip(self.pair.clean.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / out.len() as f64;
        LossValue {
            value: mse,
            penalized: false,
        }
    }
}

#[test]
fn repeated_scales_get_equal_gradients() {
    let pairs = noisy_pairs(24, 1);
    let obj = RepeatedScale { pair: &pairs[0] };
    let mut p = ParamVector::initial();
    p.raw[2..].copy_from_slice(&[1.0, 0.8, 0.6, 0.6, 0.4, 0.3, 0.2, 0.1]);
    let g = fd_gradient(&obj, &p, 1e-4);
    assert!(g.values[4].abs() > 1e-3);
    assert!((g.values[4] - g.values[5]).abs() <= 1e-8, "{} vs {}", g.values[4], g.values[5]);
}

#[test]
fn finite_differences_are_stable_under_step_halving() {
    let pairs = noisy_pairs(24, 2);
    for variant in [ModelVariant::UncoupledIso, ModelVariant::CoupledIso, ModelVariant::CoupledAniso] {
        let model = ModelConfig::new(variant, STENCIL).unwrap();
        let obj = BatchObjective {
            model: &model,
            batch: pairs.iter().collect(),
        };
        let p = ParamVector::initial();
        let coarse = fd_gradient(&obj, &p, 1e-4).values;
        let fine = fd_gradient(&obj, &p, 5e-5).values;
        for i in 0..PARAM_COUNT {
            let scale = coarse[i].abs().max(fine[i].abs()).max(1e-6);
            assert!(
                (coarse[i] - fine[i]).abs() / scale <= 1e-3,
                "{variant:?} component {i}: {} vs {}",
                coarse[i],
                fine[i]
            );
        }
    }
}

#[test]
fn first_adam_steps_reduce_the_loss() {
    let pairs = noisy_pairs(32, 5);
    let model = ModelConfig::new(ModelVariant::CoupledIso, STENCIL).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        lr: 0.001,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(ParamVector::initial(), cfg.seed);
    let log = train(&model, &cfg, &mut state, &pairs, |_, _| {}).unwrap();
    let losses: Vec<f64> = log.iter().map(|s| s.min_batch_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(losses[9] < losses[0]);
}

#[test]
fn short_training_run_improves_on_the_initial_loss() {
    let pairs = noisy_pairs(64, 4);
    let model = ModelConfig::new(ModelVariant::CoupledAniso, STENCIL).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.01,
        seed: 2,
        ..TrainConfig::default()
    };
    let batch: Vec<&Pair> = pairs.iter().collect();
    let initial = loss(&model, &ParamVector::initial(), &batch).unwrap().value;
    let mut state = TrainState::new(ParamVector::initial(), cfg.seed);
    train(&model, &cfg, &mut state, &pairs, |_, _| {}).unwrap();
    let last = loss(&model, &state.params, &batch).unwrap().value;
    assert!(last < initial, "{last} >= {initial}");
    assert!(state.params.tau() > 0.0 && state.params.lambda() > 0.0);
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let pairs = noisy_pairs(24, 4);
    let model = ModelConfig::new(ModelVariant::CoupledIso, STENCIL).unwrap();
    for gradient in [GradientMode::FiniteDifference, GradientMode::Reverse] {
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.01,
            batch_size: Some(2),
            gradient,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut straight = TrainState::new(ParamVector::initial(), cfg.seed);
        train(&model, &cfg, &mut straight, &pairs, |_, _| {}).unwrap();

        let mut first = TrainState::new(ParamVector::initial(), cfg.seed);
        for _ in 0..2 {
            run_epoch(&model, &cfg, &mut first, &pairs).unwrap();
        }
        let mut resumed = first.clone();
        train(&model, &cfg, &mut resumed, &pairs, |_, _| {}).unwrap();
        assert_eq!(resumed, straight, "{gradient:?}");
    }
}

#[test]
fn variants_learn_different_contrast_parameters() {
    let pairs = noisy_pairs(24, 3);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.01,
        seed: 4,
        ..TrainConfig::default()
    };
    let lambda = |variant| {
        let model = ModelConfig::new(variant, STENCIL).unwrap();
        let mut state = TrainState::new(ParamVector::initial(), cfg.seed);
        train(&model, &cfg, &mut state, &pairs, |_, _| {}).unwrap();
        state.params.lambda()
    };
    assert_ne!(lambda(ModelVariant::UncoupledIso), lambda(ModelVariant::CoupledIso));
}

#[test]
fn blowups_become_penalties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean = ImageGrid::from_fn(16, 16, |_, _| rng.gen_range(0.0..255.0)).unwrap();
    let pair = Pair {
        noisy: clean.clone(),
        clean,
    };
    let model = ModelConfig::new(ModelVariant::CoupledIso, Backend::AdjointComposition).unwrap();
    let mut params = ParamVector::from_decoded(1e6, 1e9, &[1.0; 8]).unwrap();
    params.raw[2..].copy_from_slice(&[40.0; 8]);
    let l = loss(&model, &params, &[&pair]).unwrap();
    assert!(l.penalized);
    assert_eq!(l.value, 1e9);
}
