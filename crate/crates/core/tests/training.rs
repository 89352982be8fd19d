use styleswap_core::checkpoint::Archive;
use styleswap_core::networks::{ConvNetConfig, GeneratorConfig, Model, ModelConfig};
use styleswap_core::synth::{stream_rng, Dataset, DatasetSpec};
use styleswap_core::training::{step_inputs, train, train_step, LossReport, RunDir, TrainConfig, TrainState};

fn tiny_model_config() -> ModelConfig {
    let mut mc = ModelConfig::from_generator(GeneratorConfig::with_channels(vec![4, 4, 4], 8));
    mc.identity = ConvNetConfig {
        resolution: 16,
        widths: [4, 4, 4],
        out_dim: 8,
    };
    mc.mapper_hidden = 8;
    mc
}

fn tiny_dataset() -> Dataset {
    Dataset::generate(DatasetSpec {
        num_identities: 3,
        frames_per_identity: 4,
        resolution: 16,
        seed: 5,
    })
    .unwrap()
}

fn tiny_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        r1_interval: 3,
        checkpoint_interval: 0,
        sample_interval: 0,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn fresh_state(config: &TrainConfig) -> TrainState<f32> {
    let mc = tiny_model_config();
    let identity = Model::<f32>::new(mc.clone(), &mut stream_rng(1, 0, 0)).unwrap().params.identity;
    TrainState::new(mc, identity, config).unwrap()
}

fn run(config: &TrainConfig) -> (TrainState<f32>, Vec<LossReport>) {
    let mut reports = Vec::new();
    let state = train(fresh_state(config), config, &tiny_dataset(), None, |r, _| reports.push(r.clone())).unwrap();
    (state, reports)
}

#[test]
fn equal_seeds_give_identical_reports() {
    let config = tiny_train_config(6);
    let (_, a) = run(&config);
    let (_, b) = run(&config);
    assert_eq!(a.len(), 6);
    let ja: Vec<String> = a.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let jb: Vec<String> = b.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(ja, jb);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let config = tiny_train_config(14);
    let (_, full) = run(&config);
    let dir = tempfile::tempdir().unwrap();
    let first = TrainConfig {
        steps: 4,
        mask_stage_start: Some(config.mask_stage_start().min(4)),
        ..config.clone()
    };
    let mid = train(fresh_state(&config), &first, &tiny_dataset(), None, |_, _| {}).unwrap();
    let path = dir.path().join("mid.bin");
    mid.save(&path, &config).unwrap();
    let (resumed, saved_config) = TrainState::<f32>::load(&path).unwrap();
    assert_eq!(saved_config, config);
    assert_eq!(resumed.step, 4);
    let mut tail = Vec::new();
    train(resumed, &config, &tiny_dataset(), None, |r, _| tail.push(r.clone())).unwrap();
    assert_eq!(tail.len(), 10);
    assert_eq!(&full[4..], &tail[..]);
}

#[test]
fn mask_heads_receive_gradients_only_in_the_mask_stage() {
    let config = TrainConfig {
        mask_stage_start: Some(3),
        ..tiny_train_config(6)
    };
    let mut seen = Vec::new();
    let mut reports = Vec::new();
    train(fresh_state(&config), &config, &tiny_dataset(), None, |r, d| {
        seen.push(d.mask_gradient);
        reports.push(r.clone());
    })
    .unwrap();
    assert_eq!(seen, [false, false, false, true, true, true]);
    assert!(reports[..3].iter().all(|r| r.mask.is_none() && r.branches.iter().all(|b| b.mask.is_none())));
    assert!(reports[3..].iter().all(|r| r.mask.is_some() && r.branches.iter().all(|b| b.mask.is_some())));
}

#[test]
fn mask_stage_at_the_end_never_activates() {
    let config = TrainConfig {
        mask_stage_start: Some(4),
        ..tiny_train_config(4)
    };
    let (_, reports) = run(&config);
    assert!(reports.iter().all(|r| !r.mask_enabled));
    let json = serde_json::to_string(&reports[0]).unwrap();
    assert!(!json.contains("\"mask\""), "{json}");
}

#[test]
fn branches_and_rec_presence() {
    let (_, reports) = run(&tiny_train_config(2));
    for r in &reports {
        assert_eq!(r.branches.len(), 3);
        assert!(r.branches[0].rec.is_none());
        assert!(r.branches[1].rec.is_some() && r.branches[2].rec.is_some());
        assert!(r.is_finite());
    }
}

#[test]
fn identity_embedder_is_frozen_and_alternation_holds() {
    let config = tiny_train_config(1);
    let mut state = fresh_state(&config);
    let id_before = state.model.params.identity.checksum();
    let (batch, jitter) = step_inputs::<f32>(&tiny_dataset(), &config, 0).unwrap();
    let before = state.model.params.clone();
    train_step(&mut state, &batch, &jitter, &config, false).unwrap();
    assert_eq!(state.model.params.identity.checksum(), id_before);
    // Both sides move once per step, each through its own optimizer.
    assert_ne!(state.model.params.discriminator.checksum(), before.discriminator.checksum());
    assert_ne!(state.model.params.generator.checksum(), before.generator.checksum());
    assert_eq!(state.opt_discriminator.steps_taken(), 1);
    assert_eq!(state.opt_generator.steps_taken(), 1);
}

#[test]
fn zero_steps_returns_initial_state_without_checkpoints() {
    let config = TrainConfig {
        checkpoint_interval: 1,
        ..tiny_train_config(0)
    };
    let dir = tempfile::tempdir().unwrap();
    let rd = RunDir::new(dir.path()).unwrap();
    let init = fresh_state(&config);
    let sum = init.model.params.generator.checksum();
    let out = train(init, &config, &tiny_dataset(), Some(&rd), |_, _| {}).unwrap();
    assert_eq!(out.step, 0);
    assert_eq!(out.model.params.generator.checksum(), sum);
    let ckpts = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("ckpt-"))
        .count();
    assert_eq!(ckpts, 0);
}

#[test]
fn run_directory_contents() {
    let config = TrainConfig {
        checkpoint_interval: 2,
        sample_interval: 2,
        ..tiny_train_config(4)
    };
    let dir = tempfile::tempdir().unwrap();
    let rd = RunDir::new(dir.path()).unwrap();
    train(fresh_state(&config), &config, &tiny_dataset(), Some(&rd), |_, _| {}).unwrap();
    for name in ["log.jsonl", "ckpt-2.bin", "ckpt-4.bin", "samples-2.png", "samples-4.png", "final.bin"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let log = std::fs::read_to_string(rd.log_path()).unwrap();
    assert_eq!(log.lines().count(), 4);
    let a = Archive::load(&dir.path().join("ckpt-4.bin")).unwrap();
    assert_eq!(a.header["kind"], "train_state");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_lr = TrainConfig {
        learning_rate: 0.0,
        ..tiny_train_config(2)
    };
    assert!(bad_lr.validate().is_err());
    let late_mask = TrainConfig {
        mask_stage_start: Some(5),
        ..tiny_train_config(2)
    };
    assert!(late_mask.validate().is_err());
}
