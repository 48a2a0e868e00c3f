//! GAN training steps, checkpoints and telemetry on tiny models.

use candle_core::{DType, Device, Tensor};
use crgan::checkpoint::{checkpoint_hash, load_trainer, save_trainer};
use crgan::data::{toy, Split};
use crgan::models::{Discriminator, Generator, GeneratorNet, ModelConfig};
use crgan::nn::{self, top_singular_value, Mode, Named};
use crgan::pipeline::{train_gan, GanRun};
use crgan::trainer::{train_step_d, train_step_g, DNoise, GNoise, GanState, TelemetryRow, TrainConfig, Trainer};
use crgan_core::losses::LossWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        latent_dim: 8,
        g_base_channels: 4,
        d_base_channels: 4,
        image_size: 16,
        image_channels: 1,
    }
}

fn tiny_train(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        checkpoint_every: 5000,
        bank_capacity: 16,
        ..TrainConfig::default()
    }
}

fn images() -> Vec<Vec<f32>> {
    toy::make_toy_dataset(4, 3, 16, 0).unwrap().images(Split::Train)
}

fn batch(n: usize) -> Tensor {
    let flat: Vec<f32> = images().into_iter().take(n).flatten().collect();
    Tensor::from_vec(flat, (n, 1, 16, 16), &Device::Cpu).unwrap()
}

fn state(config: TrainConfig) -> GanState<Generator, Discriminator> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Generator::new(&tiny_model(), &mut rng, DType::F32, &Device::Cpu).unwrap();
    let d = Discriminator::new(&tiny_model(), &mut rng, DType::F32, &Device::Cpu).unwrap();
    GanState::new(g, d, config).unwrap()
}

/// Raw bit patterns of every named tensor, for exact comparison.
fn bits(named: &[Named]) -> Vec<(String, Vec<u32>)> {
    named
        .iter()
        .map(|(n, v)| {
            let flat: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            (n.clone(), flat.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}

fn clockless(rows: &[TelemetryRow]) -> Vec<TelemetryRow> {
    rows.iter().map(TelemetryRow::without_clock).collect()
}

#[test]
fn discriminator_step_leaves_generator_state_bitwise_unchanged() {
    let mut s = state(tiny_train(1));
    let before = bits(&nn::state_of(&s.generator));
    let d_before = bits(&nn::params_of(&s.discriminator));
    let noise = DNoise::draw(&mut ChaCha8Rng::seed_from_u64(1), 4, 8, 0.5).unwrap();
    train_step_d(&mut s, &batch(4), &noise).unwrap();
    assert_eq!(bits(&nn::state_of(&s.generator)), before);
    assert_ne!(bits(&nn::params_of(&s.discriminator)), d_before);
}

#[test]
fn generator_step_leaves_discriminator_state_bitwise_unchanged() {
    let mut s = state(tiny_train(1));
    let before = bits(&nn::state_of(&s.discriminator));
    let g_before = bits(&GeneratorNet::params(&s.generator));
    let noise = GNoise::draw(&mut ChaCha8Rng::seed_from_u64(1), 4, 8, 0.5, true).unwrap();
    train_step_g(&mut s, &batch(4), &noise).unwrap();
    assert_eq!(bits(&nn::state_of(&s.discriminator)), before);
    assert_ne!(bits(&GeneratorNet::params(&s.generator)), g_before);
}

#[test]
fn zero_weights_change_no_parameter() {
    let mut s = state(TrainConfig {
        weights: LossWeights::zeros(0.2),
        ..tiny_train(1)
    });
    let g_before = bits(&GeneratorNet::params(&s.generator));
    let d_before = bits(&nn::params_of(&s.discriminator));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = batch(4);
    let report = train_step_d(&mut s, &x, &DNoise::draw(&mut rng, 4, 8, 0.5).unwrap()).unwrap();
    assert_eq!(report.objective, 0.0);
    let report = train_step_g(&mut s, &x, &GNoise::draw(&mut rng, 4, 8, 0.5, true).unwrap()).unwrap();
    assert_eq!(report.objective, 0.0);
    assert_eq!(bits(&GeneratorNet::params(&s.generator)), g_before);
    assert_eq!(bits(&nn::params_of(&s.discriminator)), d_before);
}

#[test]
fn spectral_norm_bounds_discriminator_layers_during_training() {
    let mut t = Trainer::new(images(), tiny_model(), tiny_train(25), DType::F32).unwrap();
    for _ in 0..25 {
        t.step().unwrap();
    }
    let mut checked = 0;
    for conv in t.state.discriminator.spectral_layers() {
        let sn = conv.sn.as_ref().unwrap();
        let w = sn.normalize(conv.weight.as_tensor(), Mode::Eval).unwrap();
        let sigma = top_singular_value(&w, 200).unwrap();
        assert!(sigma <= 1.0 + 1e-2, "normalised sigma {sigma}");
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn ten_iterations_give_ten_rows_and_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(images(), tiny_model(), tiny_train(10), DType::F32).unwrap();
    let run = GanRun {
        out: dir.path().to_path_buf(),
        config_hash: "h".into(),
        final_checkpoint: false,
    };
    let summary = train_gan(&mut t, &run).unwrap();
    assert_eq!(summary.rows.len(), 10);
    assert!(summary.checkpoints.is_empty());
    let text = std::fs::read_to_string(run.telemetry()).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(summary
        .rows
        .iter()
        .all(|r| r.losses().iter().all(|(_, v)| v.is_finite())));
}

#[test]
fn identical_seed_reproduces_telemetry_and_weights() {
    let run = |seed: u64| {
        let mut t = Trainer::new(
            images(),
            tiny_model(),
            TrainConfig { seed, ..tiny_train(6) },
            DType::F32,
        )
        .unwrap();
        let rows: Vec<TelemetryRow> = (0..6).map(|_| t.step().unwrap()).collect();
        (clockless(&rows), bits(&nn::state_of(&t.state.generator)))
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a.0, run(8).0);
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(images(), tiny_model(), tiny_train(6), DType::F32).unwrap();
    let mut rows_full = Vec::new();
    for i in 0..6 {
        rows_full.push(full.step().unwrap());
        if i == 2 {
            save_trainer(&full, &dir.path().join("mid"), "h").unwrap();
        }
    }
    save_trainer(&full, &dir.path().join("full"), "h").unwrap();

    let mut resumed = load_trainer(&dir.path().join("mid"), images()).unwrap();
    assert_eq!(resumed.iteration, 3);
    let rows_resumed: Vec<TelemetryRow> = (0..3).map(|_| resumed.step().unwrap()).collect();
    assert_eq!(clockless(&rows_resumed), clockless(&rows_full[3..]));
    save_trainer(&resumed, &dir.path().join("resumed"), "h").unwrap();
    assert_eq!(
        checkpoint_hash(&dir.path().join("resumed")).unwrap(),
        checkpoint_hash(&dir.path().join("full")).unwrap()
    );
}

#[test]
fn train_gan_resume_rewrites_telemetry_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let run = GanRun {
        out: dir.path().to_path_buf(),
        config_hash: "h".into(),
        final_checkpoint: true,
    };
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny_train(4)
    };
    let mut t = Trainer::new(images(), tiny_model(), cfg, DType::F32).unwrap();
    let first = train_gan(&mut t, &run).unwrap();
    assert_eq!(first.checkpoints.len(), 2);

    let mut again = load_trainer(&first.checkpoints[0], images()).unwrap();
    let second = train_gan(&mut again, &run).unwrap();
    assert_eq!(second.rows.len(), 2);
    let on_disk: Vec<TelemetryRow> = csv::Reader::from_path(run.telemetry())
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(on_disk.len(), 4);
    assert_eq!(clockless(&on_disk[2..]), clockless(&first.rows[2..]));
}

#[test]
fn generator_emits_images_in_range() {
    let s = state(tiny_train(1));
    let z = Tensor::randn(0f32, 1.0, (5, 8), &Device::Cpu).unwrap();
    let x = s.generator.forward(&z, Mode::Eval).unwrap();
    assert_eq!(x.dims(), &[5, 1, 16, 16]);
    let v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
    assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
}
