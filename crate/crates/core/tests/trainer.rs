use std::path::{Path, PathBuf};

use c2p_core::contrastive::ExtractorSpec;
use c2p_core::datasets::{build_pools_for_manifest, generate_dataset, load_samples, DatasetManifest};
use c2p_core::metrics::psnr;
use c2p_core::network::NetworkConfig;
use c2p_core::trainer::{evaluate, run, train, Checkpoint, RegularizerMode, TrainConfig, Trainer};
use c2p_core::Error;

fn dataset(dir: &Path, n: usize, size: usize) -> DatasetManifest {
    let mut m = generate_dataset(n, size, 3, dir).unwrap();
    build_pools_for_manifest(&mut m, 7, 3).unwrap();
    m
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        crop: 32,
        seed: 5,
        network: NetworkConfig { channels: 8, ..NetworkConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn first_epoch_measures_identity_network() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 4, 32);
    let outcome = train(tiny_config(), &manifest, None).unwrap();
    let samples = load_samples(&manifest).unwrap();
    let hazy_mean = samples.iter().map(|s| psnr(&s.hazy, &s.clear).unwrap()).sum::<f64>() / samples.len() as f64;
    assert!((outcome.logs[0].avg_psnr - hazy_mean).abs() < 1e-12);
    assert_eq!(outcome.logs.len(), 2);
    assert_eq!(outcome.logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn logged_loss_decomposes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 4, 32);
    for mode in [RegularizerMode::Curricular, RegularizerMode::NoCurriculum, RegularizerMode::Canonical] {
        let cfg = TrainConfig { regularizer: mode, ..tiny_config() };
        let lambda = cfg.lambda;
        let outcome = train(cfg, &manifest, None).unwrap();
        for log in &outcome.logs {
            assert!((log.mean_total_loss - (log.mean_fidelity + lambda * log.mean_rstar)).abs() < 1e-6);
            assert!(log.mean_rstar > 0.0);
            assert_eq!(log.n_hard + log.n_ultrahard, 4 * 7);
        }
    }
}

#[test]
fn zero_lambda_never_builds_the_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(2, 32, 1, dir.path()).unwrap();
    let missing = ExtractorSpec::PretrainedPerceptual { weights: PathBuf::from("/nonexistent/weights.json"), tap_indices: vec![1, 3, 5, 9, 13] };
    let cfg = TrainConfig { lambda: 0.0, extractor: missing.clone(), epochs: 1, ..tiny_config() };
    let outcome = train(cfg, &manifest, None).unwrap();
    assert_eq!(outcome.logs[0].mean_rstar, 0.0);
    assert_eq!(outcome.logs[0].mean_total_loss, outcome.logs[0].mean_fidelity);

    let with_pools = dataset(&dir.path().join("pools"), 2, 32);
    let cfg = TrainConfig { extractor: missing, epochs: 1, ..tiny_config() };
    assert!(matches!(train(cfg, &with_pools, None), Err(Error::Io { .. })));
}

#[test]
fn missing_negatives_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(2, 32, 1, dir.path()).unwrap();
    assert!(matches!(train(tiny_config(), &manifest, None), Err(Error::Config(_))));
}

#[test]
fn evaluation_of_identity_and_trained_networks() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 4, 40);
    let out = dir.path().join("run");
    let cfg = TrainConfig { lr0: 2e-3, epochs: 6, ..tiny_config() };
    let trainer = Trainer::new(cfg.clone(), &manifest).unwrap();
    let identity = evaluate(&trainer.checkpoint(), &manifest).unwrap();
    assert!((identity.mean_psnr - identity.hazy_psnr).abs() < 1e-12);
    assert_eq!(identity, evaluate(&trainer.checkpoint(), &manifest).unwrap());

    let outcome = train(cfg, &manifest, Some(&out)).unwrap();
    let trained = evaluate(&Checkpoint::load(&out.join("ckpt/final.json")).unwrap(), &manifest).unwrap();
    assert_eq!(trained, evaluate(&outcome.checkpoint, &manifest).unwrap());
    assert!(trained.mean_psnr > identity.mean_psnr);
    assert!(out.join("ckpt/epoch_0005.json").is_file());
    assert_eq!(std::fs::read_to_string(out.join("logs.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn checkpoint_network_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2, 32);
    let mut ckpt = Trainer::new(tiny_config(), &manifest).unwrap().checkpoint();
    ckpt.config.network.channels = 16;
    assert!(matches!(evaluate(&ckpt, &manifest), Err(Error::Checkpoint(_))));
    ckpt.format = "other".into();
    let path = dir.path().join("bad.json");
    ckpt.write(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 4, 32);
    let cfg = TrainConfig { epochs: 4, checkpoint_every: 2, ..tiny_config() };
    let full = train(cfg, &manifest, Some(&dir.path().join("full"))).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("full/ckpt/epoch_0002.json")).unwrap();
    let mut trainer = Trainer::resume(ckpt, &manifest).unwrap();
    assert_eq!(trainer.next_epoch(), 2);
    let rest = run(&mut trainer, None).unwrap();
    assert_eq!(rest.logs, full.logs[2..]);
    assert_eq!(rest.checkpoint, full.checkpoint);
    assert!(matches!(trainer.run_epoch(), Err(Error::Sequencing(_))));
}

#[test]
fn diverging_step_reports_batch_ids() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 4, 32);
    let cfg = TrainConfig { lr0: f64::MAX, grad_clip: 0.0, epochs: 1, batch_size: 1, ..tiny_config() };
    match train(cfg, &manifest, None) {
        Err(Error::NonFiniteLoss { epoch, sample_ids }) => {
            assert_eq!(epoch, 0);
            assert_eq!(sample_ids.len(), 1);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.logs)),
    }
}

#[test]
fn shipped_desk_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg, TrainConfig { seed: 7, ..TrainConfig::default() });
}
