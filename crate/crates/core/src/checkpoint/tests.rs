use super::*;
use crate::model::DenoiserConfig;

fn tiny_ae() -> AeConfig {
    AeConfig { channels: 4, latent_channels: 4, in_channels: 3 }
}

fn tiny_sdseg() -> SdSegConfig {
    SdSegConfig {
        denoiser: DenoiserConfig { base_channels: 8, mid_channels: 8, time_dim: 16, ..DenoiserConfig::default() },
        ..SdSegConfig::default()
    }
}

fn stepped_optimizer(store: &ParamStore) -> AdamW {
    let mut opt = AdamW::new(store, AdamWConfig::default());
    let mut scratch = store.clone();
    let grads: Vec<_> = store.iter().map(|(_, t)| Some(Tensor::new(t.shape(), vec![0.25; t.numel()]).unwrap())).collect();
    opt.step(&mut scratch, &grads, 1e-3).unwrap();
    opt
}

fn ae_ckpt() -> AeCheckpoint {
    let mut model = Autoencoder::new(tiny_ae(), 3);
    model.latent_scale = 0.8125;
    let optimizer = stepped_optimizer(&model.params);
    AeCheckpoint { model, train: AeTrainConfig::default(), optimizer, step: 17 }
}

fn sd_ckpt() -> SdSegCheckpoint {
    let ae = ae_ckpt().model;
    let config = tiny_sdseg();
    let model = SdSegModel::new(&ae, &config.denoiser, 5).unwrap();
    let denoiser_opt = stepped_optimizer(&model.denoiser_params);
    let tau_opt = Some(stepped_optimizer(&model.tau_params));
    SdSegCheckpoint { ae, model, config, denoiser_opt, tau_opt, step: 9 }
}

#[test]
fn autoencoder_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    let c = ae_ckpt();
    save_autoencoder(&path, &c).unwrap();
    let back = load_autoencoder(&path, Some(&tiny_ae())).unwrap();
    assert_eq!(back.model.params.content_hash(), c.model.params.content_hash());
    assert_eq!(back.model.latent_scale, 0.8125);
    assert_eq!(back.step, 17);
    assert_eq!(back.train, c.train);
    assert_eq!(back.optimizer.step_count(), 1);
    assert_eq!(back.optimizer.moments(), c.optimizer.moments());
    let again = dir.path().join("again.ckpt");
    save_autoencoder(&again, &back).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn sdseg_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sd.ckpt");
    let c = sd_ckpt();
    save_sdseg(&path, &c).unwrap();
    let back = load_sdseg(&path, Some((&tiny_ae(), &tiny_sdseg()))).unwrap();
    assert_eq!(back.ae.params.content_hash(), c.ae.params.content_hash());
    assert_eq!(back.model.denoiser_params.content_hash(), c.model.denoiser_params.content_hash());
    assert_eq!(back.model.tau_params.content_hash(), c.model.tau_params.content_hash());
    assert_eq!(back.config, c.config);
    assert_eq!(back.tau_opt.unwrap().moments(), c.tau_opt.unwrap().moments());
    assert_eq!(back.denoiser_opt.moments(), c.denoiser_opt.moments());
}

#[test]
fn truncated_and_modified_archives_are_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &ae_ckpt()).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_autoencoder(&path, None).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }), "{cut}: {err}");
        assert_eq!(err.code(), 10);
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 1;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_autoencoder(&path, None), Err(CheckpointError::Corrupt { .. })));
}

#[test]
fn version_mismatch_is_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &ae_ckpt()).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let err = load_autoencoder(&path, None).unwrap_err();
    assert!(matches!(err, CheckpointError::VersionMismatch { found: 2, expected: 1, .. }), "{err}");
    assert_eq!(err.code(), 11);
}

#[test]
fn different_channel_width_is_an_architecture_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &ae_ckpt()).unwrap();
    let wider = AeConfig { channels: 8, ..tiny_ae() };
    let err = load_autoencoder(&path, Some(&wider)).unwrap_err();
    assert!(matches!(err, CheckpointError::ArchMismatch { .. }), "{err}");
    assert_eq!(err.code(), 12);

    let sd = dir.path().join("sd.ckpt");
    save_sdseg(&sd, &sd_ckpt()).unwrap();
    let mut cfg = tiny_sdseg();
    cfg.denoiser.base_channels = 16;
    assert!(matches!(load_sdseg(&sd, Some((&tiny_ae(), &cfg))), Err(CheckpointError::ArchMismatch { .. })));
}

#[test]
fn kind_and_missing_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &ae_ckpt()).unwrap();
    assert!(matches!(load_sdseg(&path, None), Err(CheckpointError::WrongKind { .. })));
    let missing = dir.path().join("nope.ckpt");
    let err = load_autoencoder(&missing, None).unwrap_err();
    assert!(matches!(err, CheckpointError::Io { .. }));
    assert!(err.to_string().contains("nope.ckpt"));
}

#[test]
fn header_is_plain_json_after_the_prefix() {
    let c = ae_ckpt();
    let mut a = Archive::new("x", 3, "h".into(), serde_json::json!({"k": 1}));
    a.push("w", c.model.params.iter().next().unwrap().1.clone());
    let bytes = a.to_bytes();
    assert_eq!(&bytes[..4], b"SDCK");
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["tensors"][0], "w");
    assert_eq!(Archive::from_bytes(&bytes, Path::new("mem")).unwrap(), a);
}
