use std::path::Path;

use proptest::prelude::*;
use uidet_core::checkpoint::*;
use uidet_core::fusion::FusionKind;
use uidet_core::model::{DetectorConfig, DetectorModel};
use uidet_core::Error;

fn tiny() -> DetectorConfig {
    DetectorConfig {
        input_size: 64,
        channels: vec![4, 8, 8, 8],
        ..DetectorConfig::default()
    }
}

fn tiny_bytes() -> Vec<u8> {
    let model = DetectorModel::<f32>::build(&tiny()).unwrap();
    let cfg = RunConfig {
        model: tiny(),
        ..RunConfig::default()
    };
    encode_checkpoint(&cfg, model.params())
}

#[test]
fn save_load_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = tiny().with_fusion(FusionKind::Conv, 3);
    let model = DetectorModel::<f32>::build(&cfg).unwrap();
    let run = RunConfig {
        epochs: 7,
        init: Some("base.ckpt".into()),
        ..RunConfig::default()
    };
    save_checkpoint(&model, &run, &path).unwrap();
    let (back_cfg, back) = load_checkpoint(&path).unwrap();
    assert_eq!(back_cfg.model, cfg);
    assert_eq!(back_cfg.epochs, 7);
    assert_eq!(back_cfg.init.as_deref(), Some(Path::new("base.ckpt")));
    let a: Vec<(&str, Vec<u32>)> = model.params().iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect();
    let b: Vec<(&str, Vec<u32>)> = back.params().iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect();
    assert_eq!(a, b);
    assert!(back.initialized_from_store());
    // saving the reloaded model reproduces the file
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &back_cfg, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let bytes = tiny_bytes();
    let p = Path::new("t.ckpt");
    assert!(decode_checkpoint(&bytes, p).is_ok());
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
    assert!(matches!(decode_checkpoint(&bytes[..3], p), Err(Error::Format { .. })));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_checkpoint(&longer, p).is_err());
}

#[test]
fn run_config_rejects_unknown_keys() {
    let e = RunConfig::from_toml("epochs = 3\nlearning_rat = 0.1\n", Path::new("c.toml")).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("c.toml") && msg.contains("line 2"), "{msg}");
    let e = RunConfig::from_toml("[model]\nxattn = 3\n", Path::new("c.toml")).unwrap_err();
    assert!(matches!(e, Error::Format { .. }));
}

#[test]
fn run_config_toml_round_trip() {
    let cfg = RunConfig {
        epochs: 2,
        seed: 9,
        embeddings: Some("e.mmte".into()),
        model: tiny().with_fusion(FusionKind::Wsum, 4),
        ..RunConfig::default()
    };
    assert_eq!(RunConfig::from_toml(&cfg.to_toml(), Path::new("x")).unwrap(), cfg);
    let partial = RunConfig::from_toml("epochs = 4\n", Path::new("x")).unwrap();
    assert_eq!(partial, RunConfig { epochs: 4, ..RunConfig::default() });
}

#[test]
fn invalid_fusion_settings_are_config_errors() {
    let text = "[model]\nfusion = \"conv\"\nxattn_count = 0\n";
    assert!(matches!(RunConfig::from_toml(text, Path::new("x")), Err(Error::Config(_))));
}

#[test]
fn baseline_initialises_every_shared_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let base = DetectorModel::<f32>::build(&DetectorConfig { seed: 3, ..tiny() }).unwrap();
    save_checkpoint(&base, &RunConfig::default(), &path).unwrap();
    let cfg = tiny().with_fusion(FusionKind::Add, 3);
    let (model, report) = init_from_checkpoint(&path, &cfg).unwrap();
    let base_names: Vec<&str> = base.params().names().collect();
    assert_eq!(report.loaded, base_names);
    assert!(!report.initialized.is_empty());
    assert!(report.initialized.iter().all(|n| n.starts_with("xattn.")));
    assert_eq!(report.loaded.len() + report.initialized.len(), model.params().len());
    for n in &report.loaded {
        assert_eq!(model.params().by_name(n), base.params().by_name(n));
    }
    assert!(model.initialized_from_store());
}

#[test]
fn unrelated_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let base = DetectorModel::<f32>::build(&tiny()).unwrap();
    save_checkpoint(&base, &RunConfig::default(), &path).unwrap();
    let other = DetectorConfig {
        channels: vec![8, 16, 16, 16],
        num_classes: 3,
        ..tiny()
    };
    assert!(matches!(init_from_checkpoint(&path, &other), Err(Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn any_single_byte_corruption_is_detected(pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = tiny_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(decode_checkpoint(&bytes, Path::new("c.ckpt")).is_err());
    }
}
